#pragma once

#include <functional>

#include "sardet/tensor.hpp"

namespace sardet {

// Central-finite-difference check of the tape against a scalar-valued f.
// Returns max over elements of |analytic - numeric| / max(1, |analytic|).
inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                        double h = 1e-5) {
    x.set_requires_grad(true);
    x.drop_grad();
    Tensor y = f(x);
    if (y.numel() != 1)
        throw std::invalid_argument("gradcheck: f must be scalar-valued, got shape " +
                                    shape_str(y.shape()));
    backward(y);
    std::vector<double> analytic = x.grad();

    double max_err = 0.0;
    autograd::NoGradGuard no_grad;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double orig = x.data()[i];
        x.data()[i] = orig + h;
        const double fp = f(x).item();
        x.data()[i] = orig - h;
        const double fm = f(x).item();
        x.data()[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - numeric) /
                           std::max(1.0, std::abs(analytic[i]));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace sardet
