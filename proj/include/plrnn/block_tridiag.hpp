#pragma once

// Symmetric positive definite block-tridiagonal systems: block Cholesky
// factorization, solves, log-determinant and the tridiagonal part of the
// inverse, all in O(T M^3).

#include <vector>

#include "plrnn/types.hpp"

namespace plrnn {

struct BlockTridiag {
  std::vector<Mat> diag;   // T blocks, M x M, symmetric
  std::vector<Mat> lower;  // T - 1 blocks; lower[t] is block (t + 1, t)

  static BlockTridiag zeros(Eigen::Index T, Eigen::Index M);
  Eigen::Index blocks() const { return Eigen::Index(diag.size()); }
  Eigen::Index block_size() const { return diag.empty() ? 0 : diag.front().rows(); }
  void validate() const;
  Mat dense() const;
  Vec multiply(const Vec& x) const;
};

class BlockTridiagFactor {
 public:
  /// Factors H. If H is not numerically positive definite, retries once with
  /// jitter * (1 + max |H_ii|) added to the diagonal and sets jittered();
  /// throws PlrnnError if that also fails.
  explicit BlockTridiagFactor(const BlockTridiag& h, double jitter = 1e-8);

  Vec solve(const Vec& b) const;
  double log_det() const;
  bool jittered() const { return jittered_; }

  /// Diagonal and first sub-diagonal blocks of H^-1.
  void selected_inverse(std::vector<Mat>& diag, std::vector<Mat>& lower) const;

 private:
  bool factor(const BlockTridiag& h, double shift);

  std::vector<Eigen::LLT<Mat>> schur_;  // Cholesky factors of the Schur complements
  std::vector<Mat> lower_;
  bool jittered_ = false;
};

}  // namespace plrnn
