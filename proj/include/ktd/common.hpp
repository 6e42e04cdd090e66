#pragma once

// Shared primitives: deterministic RNG, small array types, hashing and
// error helpers used across the toolkit.

#include <cstdint>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ktd {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_state(bool cond, const std::string& msg) {
    if (!cond) throw std::logic_error(msg);
}

// FNV-1a, used for spec fingerprints and seed derivation.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer over seed^salt; decorrelates derived streams.
    std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic RNG. All sampling helpers are implemented on top of the
// raw mt19937_64 stream so draws are bit-stable and the full generator
// state serializes through save_state()/load_state().
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; draws two uniforms per call so the
    // stream position is a pure function of the call count.
    double normal() {
        double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
        double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do { x = eng_(); } while (x >= limit);
        return x % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::string save_state() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }

    void load_state(const std::string& s) {
        std::istringstream is(s);
        is >> eng_;
        if (!is) throw std::runtime_error("Rng: malformed state string");
    }

private:
    std::mt19937_64 eng_;
};

// Dense shaped array of doubles; the unit of weight storage.
struct Array {
    std::vector<int> shape;
    std::vector<double> data;

    Array() = default;
    explicit Array(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
    }

    static long long numel_of(const std::vector<int>& s) {
        long long n = 1;
        for (int d : s) n *= d;
        return s.empty() ? 0 : n;
    }

    long long numel() const { return numel_of(shape); }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    bool operator==(const Array& o) const {
        return shape == o.shape && data == o.data;
    }
};

// Single-channel image grid, pixels in [0, 1].
struct Grid {
    int h = 0, w = 0;
    std::vector<double> pix;

    Grid() = default;
    Grid(int h_, int w_) : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_, 0.0) {}

    double& at(int r, int c) { return pix[static_cast<std::size_t>(r) * w + c]; }
    double at(int r, int c) const { return pix[static_cast<std::size_t>(r) * w + c]; }

    bool operator==(const Grid& o) const {
        return h == o.h && w == o.w && pix == o.pix;
    }
};

inline bool finite_all(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace ktd
