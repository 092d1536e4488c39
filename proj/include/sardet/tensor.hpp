#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace sardet {

// Dense N x C x H x W double tensor with an optional reverse-mode tape node.
// Shape order is {batch, channels, height, width}; data is row-major.
using Shape4 = std::array<int, 4>;

inline int64_t numel_of(const Shape4& s) {
    return int64_t(s[0]) * s[1] * s[2] * s[3];
}

inline std::string shape_str(const Shape4& s) {
    return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" +
           std::to_string(s[2]) + "x" + std::to_string(s[3]);
}

struct TensorImpl;
class GradStore;

// One recorded operation: the inputs it read and a rule that routes the
// output gradient back into them through a GradStore.
struct TapeNode {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    TensorImpl* output = nullptr;  // owned by the graph via downstream input lists
    std::function<void(GradStore&)> backprop;
};

struct TensorImpl {
    Shape4 shape{0, 0, 0, 0};
    std::vector<double> data;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::shared_ptr<TapeNode> node;  // creator op, null for leaves

    int64_t numel() const { return numel_of(shape); }
};

// Where backward() accumulates gradients. Direct mode writes into each
// tensor's own grad buffer (the default semantics). Buffered mode keeps all
// gradients in a private map so several tapes over shared parameters can run
// backward concurrently; the caller merges buffers afterwards.
class GradStore {
public:
    enum class Mode { kDirect, kBuffered };

    explicit GradStore(Mode mode = Mode::kDirect) : mode_(mode) {}

    std::vector<double>& buf(TensorImpl* t) {
        if (mode_ == Mode::kDirect) {
            if (t->grad.empty()) t->grad.assign(t->numel(), 0.0);
            return t->grad;
        }
        auto [it, fresh] = map_.try_emplace(t);
        if (fresh) it->second.assign(t->numel(), 0.0);
        return it->second;
    }

    const std::vector<double>* find(const TensorImpl* t) const {
        if (mode_ == Mode::kDirect)
            return t->grad.empty() ? nullptr : &t->grad;
        auto it = map_.find(const_cast<TensorImpl*>(t));
        return it == map_.end() ? nullptr : &it->second;
    }

    Mode mode() const { return mode_; }

private:
    Mode mode_;
    std::unordered_map<TensorImpl*, std::vector<double>> map_;
};

namespace autograd {

// Define-by-run recording switch, thread-local so concurrent tapes stay
// confined to their own threads.
inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

}  // namespace autograd

class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorImpl>()) {}

    static Tensor zeros(const Shape4& s, bool requires_grad = false) {
        return filled(s, 0.0, requires_grad);
    }

    static Tensor filled(const Shape4& s, double v, bool requires_grad = false) {
        Tensor t;
        check_shape(s);
        t.impl_->shape = s;
        t.impl_->data.assign(numel_of(s), v);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_data(const Shape4& s, std::vector<double> values,
                            bool requires_grad = false) {
        check_shape(s);
        if (static_cast<int64_t>(values.size()) != numel_of(s))
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(s));
        Tensor t;
        t.impl_->shape = s;
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return filled({1, 1, 1, 1}, v, requires_grad);
    }

    const Shape4& shape() const { return impl_->shape; }
    int dim(int i) const { return impl_->shape[i]; }
    int64_t numel() const { return impl_->numel(); }
    bool defined() const { return impl_->numel() > 0; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double& at(int n, int c, int h, int w) { return impl_->data[offset(n, c, h, w)]; }
    double at(int n, int c, int h, int w) const { return impl_->data[offset(n, c, h, w)]; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() on non-scalar tensor");
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty())
            throw std::runtime_error("tensor has no gradient; run backward first");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.assign(impl_->numel(), 0.0); }
    void drop_grad() { impl_->grad.clear(); }

    // Copy without tape history; never receives gradients.
    Tensor detach() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    static void check_shape(const Shape4& s) {
        for (int d : s)
            if (d <= 0) throw std::invalid_argument("non-positive tensor dimension in " + shape_str(s));
    }

    int64_t offset(int n, int c, int h, int w) const {
        const Shape4& s = impl_->shape;
        return ((int64_t(n) * s[1] + c) * s[2] + h) * s[3] + w;
    }

    std::shared_ptr<TensorImpl> impl_;
};

// Attaches a freshly recorded node to an op result. Call only when recording
// is on and at least one input requires grad.
inline void attach_node(Tensor& out, std::string op,
                        std::vector<std::shared_ptr<TensorImpl>> inputs,
                        std::function<void(GradStore&)> backprop) {
    auto node = std::make_shared<TapeNode>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->output = out.impl().get();
    node->backprop = std::move(backprop);
    out.impl()->node = node;
    out.impl()->requires_grad = true;
}

inline bool recording(std::initializer_list<const Tensor*> ins) {
    if (!autograd::grad_enabled()) return false;
    for (const Tensor* t : ins)
        if (t->requires_grad()) return true;
    return false;
}

// Topologically ordered list of the ops reachable from a root: every node's
// inputs appear before the node itself.
class Tape {
public:
    static Tape build(const Tensor& root) {
        Tape tape;
        std::unordered_set<const TensorImpl*> seen;
        // iterative post-order DFS over creator nodes
        struct Frame {
            TensorImpl* t;
            size_t next_input;
        };
        std::vector<Frame> stack;
        auto push = [&](TensorImpl* t) {
            if (t->node && seen.insert(t).second) stack.push_back({t, 0});
        };
        push(root.impl().get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            auto& node = f.t->node;
            if (f.next_input < node->inputs.size()) {
                TensorImpl* in = node->inputs[f.next_input++].get();
                push(in);
            } else {
                tape.nodes_.push_back(node);
                stack.pop_back();
            }
        }
        return tape;
    }

    // Runs the backward rules in reverse topological order, seeding the root
    // with dL/dL = 1.
    void backward(TensorImpl* root, GradStore& store) const {
        store.buf(root)[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)->backprop(store);
    }

    size_t size() const { return nodes_.size(); }
    const std::vector<std::shared_ptr<TapeNode>>& nodes() const { return nodes_; }

private:
    std::vector<std::shared_ptr<TapeNode>> nodes_;
};

// Populates grad on every reachable requires_grad tensor. Repeated calls
// accumulate additively.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward expects a scalar loss, got shape " +
                                    shape_str(loss.shape()));
    GradStore store(GradStore::Mode::kDirect);
    Tape::build(loss).backward(loss.impl().get(), store);
}

// Like backward() but leaves the tensors untouched, accumulating everything
// into the caller's buffered store instead. Used for shard-parallel training.
inline void backward_collect(const Tensor& loss, GradStore& store) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward expects a scalar loss, got shape " +
                                    shape_str(loss.shape()));
    if (store.mode() != GradStore::Mode::kBuffered)
        throw std::invalid_argument("backward_collect needs a buffered GradStore");
    Tape::build(loss).backward(loss.impl().get(), store);
}

// ---------------------------------------------------------------------------
// Binary tensor serialization: magic "CASTEN1", u32 rank, u32 dims, f64
// payload, all little-endian. Checkpoints are built from these records.
// ---------------------------------------------------------------------------

namespace detail {
inline constexpr char kTensorMagic[7] = {'C', 'A', 'S', 'T', 'E', 'N', '1'};

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("truncated tensor stream");
    return v;
}
}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(detail::kTensorMagic, sizeof(detail::kTensorMagic));
    detail::write_raw<uint32_t>(os, 4);
    for (int d : t.shape()) detail::write_raw<uint32_t>(os, static_cast<uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!os) throw std::runtime_error("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
    char magic[sizeof(detail::kTensorMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, detail::kTensorMagic, sizeof(magic)) != 0)
        throw std::runtime_error("bad tensor magic");
    uint32_t rank = detail::read_raw<uint32_t>(is);
    if (rank != 4) throw std::runtime_error("unsupported tensor rank " + std::to_string(rank));
    Shape4 s;
    for (int i = 0; i < 4; ++i) s[i] = static_cast<int>(detail::read_raw<uint32_t>(is));
    std::vector<double> values(numel_of(s));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated tensor payload");
    return Tensor::from_data(s, std::move(values));
}

}  // namespace sardet
