#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace plrnn {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using VecXb = Eigen::Matrix<bool, Eigen::Dynamic, 1>;

/// Base class for every error raised by the library.
class PlrnnError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree with the model dimensions.
class ShapeError : public PlrnnError {
 public:
  using PlrnnError::PlrnnError;
};

/// A state or loss left the finite range. `index` is the first offending
/// time step or sample.
class DivergedError : public PlrnnError {
 public:
  DivergedError(const std::string& what, long index)
      : PlrnnError(what), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

/// Malformed input file. `offset` is the byte position where parsing failed.
class FormatError : public PlrnnError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : PlrnnError(what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Invalid configuration value; `field` names the offending key.
class ConfigError : public PlrnnError {
 public:
  ConfigError(const std::string& field, const std::string& what)
      : PlrnnError(field + ": " + what), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
  return std::to_string(rows) + "x" + std::to_string(cols);
}

/// Throws ShapeError unless `m` is rows x cols.
template <typename Derived>
void require_shape(const Eigen::DenseBase<Derived>& m, Eigen::Index rows,
                   Eigen::Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string(name) + ": expected " + shape_str(rows, cols) +
                     ", got " + shape_str(m.rows(), m.cols()));
  }
}

template <typename Derived>
void require_size(const Eigen::DenseBase<Derived>& v, Eigen::Index n,
                  const char* name) {
  if (v.size() != n) {
    throw ShapeError(std::string(name) + ": expected length " +
                     std::to_string(n) + ", got " + std::to_string(v.size()));
  }
}

// Counter-based generator: the k-th draw of stream (seed, stream) is a pure
// function of (seed, stream, k), so trials and time steps can be generated in
// any order or on any thread and still reproduce bit-for-bit.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : key_(mix(seed ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Lemire-style rejection keeps the draw unbiased.
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t r;
    do {
      r = (*this)();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vec normal_vec(Eigen::Index n) {
    Vec v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = normal();
    return v;
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace plrnn
