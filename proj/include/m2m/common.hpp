#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

namespace m2m {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Error hierarchy. The CLI maps these onto its exit-code contract, so keep
// the split between config/format/value/numeric errors intact.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : Error {
    using Error::Error;
};
struct FormatError : Error {  // bad magic, bad version, malformed container
    using Error::Error;
};
struct TruncatedError : Error {  // payload shorter than the header declares
    using Error::Error;
};
struct ValueError : Error {  // non-finite data, bad argument values
    using Error::Error;
};
struct ShapeError : Error {  // dimension / cardinality mismatches
    using Error::Error;
};
struct ConfigError : Error {  // invalid or missing configuration fields
    using Error::Error;
};
struct NumericError : Error {  // NaN/Inf encountered mid-computation
    using Error::Error;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic RNG. All sampling in the library goes through this wrapper
// rather than std distributions, whose algorithms are implementation-defined;
// mt19937_64 output itself is pinned by the standard, so streams are
// byte-reproducible.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

    // Independent child stream, e.g. one per simulated system. Derivation uses
    // the original seed, not the engine state, so it is stable no matter how
    // much the parent stream has advanced.
    Rng child(uint64_t index) const {
        return Rng(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (index + 1))));
    }

    uint64_t next_u64() { return engine_(); }

    double uniform01() {  // [0, 1) with 53-bit resolution
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    double normal() {  // Box-Muller, one value per draw (second discarded)
        double u1 = uniform01(), u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Uniform integer in [0, n) without modulo bias.
    uint64_t below(uint64_t n) {
        uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = engine_();
            if (r >= threshold) return r % n;
        }
    }

    Mat normal_matrix(Eigen::Index rows, Eigen::Index cols) {
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
        return m;
    }

  private:
    uint64_t seed_;
    std::mt19937_64 engine_;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace m2m
