#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hypa {

// Rows are positions/examples throughout, so activations are kept row-major.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

using TokenId = std::int32_t;
using TokenSequence = std::vector<TokenId>;

enum class Err {
  kBadArgument,
  kShapeMismatch,
  kSequenceOverflow,
  kUnknownToken,
  kInfeasibleAlpha,
  kIo,
  kCorruptFile,
  kVersionMismatch,
  kKindMismatch,
  kDivergence,
  kDegenerateGroup,
  kNotOnGrid,
  kMissingArtifact,
  kConfig,
};

class HypaError : public std::runtime_error {
 public:
  HypaError(Err code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) {
  throw HypaError(code, msg);
}

inline void require(bool ok, Err code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

// Deterministic RNG. mt19937_64 raw output is pinned by the standard, and the
// derived draws below avoid std::*_distribution, whose results vary across
// standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n), n >= 1.
  std::uint32_t below(std::uint32_t n) {
    return static_cast<std::uint32_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 =
        (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * M_PI * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

 private:
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64-style mixing for deriving independent seed streams.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t salt) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ull * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// CRC32 (IEEE, zlib-compatible) over raw bytes.
std::uint32_t crc32_bytes(const void* data, std::size_t len,
                          std::uint32_t seed = 0);

// Checksum of a matrix's row-major payload; matches the on-disk encoding.
std::uint32_t checksum(const Mat& m);

std::string format_double(double v);  // shortest round-trip decimal (%.17g)

}  // namespace hypa
