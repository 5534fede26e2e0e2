#pragma once

#include <array>
#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cseg {

// Error type for all contract violations (shape mismatches, bad configs,
// corrupt files). Carries a human-readable diagnostic.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class A, class... Rest>
void format_into(std::ostringstream& os, A&& a, Rest&&... rest) {
    os << std::forward<A>(a);
    format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(Args&&... args) {
    std::ostringstream os;
    detail::format_into(os, std::forward<Args>(args)...);
    throw Error(os.str());
}

#define CSEG_CHECK(cond, ...)                  \
    do {                                       \
        if (!(cond)) ::cseg::fail(__VA_ARGS__); \
    } while (0)

// 4-axis shape. Semantics depend on the op: feature maps are [batch,
// channel, height, width]; token tensors are [batch, tokens, dim, 1];
// scalars are [1,1,1,1].
struct Shape4 {
    int b = 1, c = 1, h = 1, w = 1;

    Shape4() = default;
    Shape4(int b_, int c_, int h_, int w_) : b(b_), c(c_), h(h_), w(w_) {}

    long numel() const { return static_cast<long>(b) * c * h * w; }
    bool operator==(const Shape4& o) const {
        return b == o.b && c == o.c && h == o.h && w == o.w;
    }
    bool operator!=(const Shape4& o) const { return !(*this == o); }

    std::string str() const {
        std::ostringstream os;
        os << "[" << b << "," << c << "," << h << "," << w << "]";
        return os.str();
    }
};

// Row-major flat index.
inline long idx4(const Shape4& s, int b, int c, int h, int w) {
    return ((static_cast<long>(b) * s.c + c) * s.h + h) * s.w + w;
}

// SplitMix64; used to derive independent deterministic streams from
// (seed, stream-id) pairs without sharing generator state.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(splitmix64(seed) ^ (0x517cc1b727220a95ULL * (stream + 1)));
}

// FNV-1a over bytes; drives the filename-based dataset split.
inline uint64_t fnv1a(const std::string& s, uint64_t seed = 0) {
    uint64_t h = 1469598103934665603ULL ^ splitmix64(seed);
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

using Rng = std::mt19937_64;

inline Rng make_rng(uint64_t seed, uint64_t stream = 0) {
    return Rng(mix_seed(seed, stream));
}

template <class T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}

}  // namespace cseg
