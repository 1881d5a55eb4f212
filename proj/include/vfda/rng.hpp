#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace vfda {

/// Deterministic random stream (splitmix64 core, explicit float mapping).
///
/// Every stream is derived from a root seed plus a purpose label and up to
/// two integer indices, so consumers never share state: exhausting or
/// skipping one stream cannot perturb the draws of another.  The same
/// derivation on any platform yields the same bytes.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform in [lo, hi).
    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

    /// Integer in [0, n).
    uint64_t next_below(uint64_t n) { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller; the paired draw is cached.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = next_uniform();
        double u2 = next_uniform();
        if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Beta(a, b) via Johnk's rejection; efficient for a + b <= 1.
    double next_beta(double a, double b) {
        for (;;) {
            const double u = std::pow(next_uniform(), 1.0 / a);
            const double v = std::pow(next_uniform(), 1.0 / b);
            if (u + v > 0.0 && u + v <= 1.0) return u / (u + v);
        }
    }

    /// Fisher-Yates shuffle of 0..n-1.
    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> p(n);
        for (size_t i = 0; i < n; ++i) p[i] = i;
        for (size_t i = n; i > 1; --i) {
            const size_t j = static_cast<size_t>(next_below(i));
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

  private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

namespace detail {
inline uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_label(std::string_view label) {
    uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char c : label) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}
}  // namespace detail

/// Derive an independent sub-stream from (root seed, label, indices).
inline Rng substream(uint64_t root_seed, std::string_view label, uint64_t i0 = 0, uint64_t i1 = 0) {
    uint64_t h = detail::mix64(root_seed ^ 0x6a09e667f3bcc909ULL);
    h = detail::mix64(h ^ detail::hash_label(label));
    h = detail::mix64(h ^ i0);
    h = detail::mix64(h ^ i1);
    return Rng(h);
}

}  // namespace vfda
