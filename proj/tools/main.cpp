#include <cstdio>

int main() {
    std::puts("sardet: CLI not wired up yet");
    return 1;
}
