#include "plrnn/block_tridiag.hpp"

namespace plrnn {

BlockTridiag BlockTridiag::zeros(Eigen::Index T, Eigen::Index M) {
  BlockTridiag h;
  h.diag.assign(T, Mat::Zero(M, M));
  h.lower.assign(T > 0 ? T - 1 : 0, Mat::Zero(M, M));
  return h;
}

void BlockTridiag::validate() const {
  if (diag.empty()) throw ShapeError("block-tridiagonal matrix has no blocks");
  if (lower.size() + 1 != diag.size()) throw ShapeError("block-tridiagonal matrix needs T - 1 off-diagonal blocks");
  const auto M = block_size();
  for (const auto& d : diag) require_shape(d, M, M, "diagonal block");
  for (const auto& l : lower) require_shape(l, M, M, "off-diagonal block");
}

Mat BlockTridiag::dense() const {
  const auto T = blocks(), M = block_size();
  Mat out = Mat::Zero(T * M, T * M);
  for (Eigen::Index t = 0; t < T; ++t) {
    out.block(t * M, t * M, M, M) = diag[t];
    if (t + 1 < T) {
      out.block((t + 1) * M, t * M, M, M) = lower[t];
      out.block(t * M, (t + 1) * M, M, M) = lower[t].transpose();
    }
  }
  return out;
}

Vec BlockTridiag::multiply(const Vec& x) const {
  const auto T = blocks(), M = block_size();
  require_size(x, T * M, "x");
  Vec y(T * M);
  for (Eigen::Index t = 0; t < T; ++t) {
    auto yt = y.segment(t * M, M);
    yt = diag[t] * x.segment(t * M, M);
    if (t > 0) yt += lower[t - 1] * x.segment((t - 1) * M, M);
    if (t + 1 < T) yt += lower[t].transpose() * x.segment((t + 1) * M, M);
  }
  return y;
}

BlockTridiagFactor::BlockTridiagFactor(const BlockTridiag& h, double jitter) {
  h.validate();
  if (factor(h, 0.0)) return;
  double scale = 0.0;
  for (const auto& d : h.diag) scale = std::max(scale, d.diagonal().cwiseAbs().maxCoeff());
  jittered_ = true;
  if (!factor(h, jitter * (1.0 + scale)))
    throw PlrnnError("block-tridiagonal system is not positive definite even after jitter");
}

bool BlockTridiagFactor::factor(const BlockTridiag& h, double shift) {
  const auto T = h.blocks();
  schur_.clear();
  schur_.reserve(T);
  lower_ = h.lower;
  for (Eigen::Index t = 0; t < T; ++t) {
    Mat s = h.diag[t];
    s.diagonal().array() += shift;
    if (t > 0) {
      const Mat g = schur_.back().solve(h.lower[t - 1].transpose());  // S_{t-1}^-1 L^T
      s.noalias() -= h.lower[t - 1] * g;
    }
    s = 0.5 * (s + s.transpose()).eval();
    Eigen::LLT<Mat> llt(s);
    if (llt.info() != Eigen::Success || !llt.matrixLLT().allFinite() ||
        (llt.matrixLLT().diagonal().array() <= 0).any())
      return false;
    schur_.push_back(std::move(llt));
  }
  return true;
}

Vec BlockTridiagFactor::solve(const Vec& b) const {
  const auto T = Eigen::Index(schur_.size());
  const auto M = schur_.front().rows();
  require_size(b, T * M, "rhs");
  Vec y = b;
  for (Eigen::Index t = 1; t < T; ++t)
    y.segment(t * M, M) -= lower_[t - 1] * schur_[t - 1].solve(Vec(y.segment((t - 1) * M, M)));
  Vec x(T * M);
  x.segment((T - 1) * M, M) = schur_[T - 1].solve(Vec(y.segment((T - 1) * M, M)));
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const Vec r = y.segment(t * M, M) - lower_[t].transpose() * x.segment((t + 1) * M, M);
    x.segment(t * M, M) = schur_[t].solve(r);
  }
  return x;
}

double BlockTridiagFactor::log_det() const {
  double s = 0.0;
  for (const auto& f : schur_) s += 2.0 * f.matrixLLT().diagonal().array().log().sum();
  return s;
}

void BlockTridiagFactor::selected_inverse(std::vector<Mat>& diag, std::vector<Mat>& lower) const {
  const auto T = Eigen::Index(schur_.size());
  const auto M = schur_.front().rows();
  const Mat I = Mat::Identity(M, M);
  diag.assign(T, Mat());
  lower.assign(T - 1, Mat());
  diag[T - 1] = schur_[T - 1].solve(I);
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const Mat sinv = schur_[t].solve(I);
    lower[t] = -diag[t + 1] * lower_[t] * sinv;
    diag[t] = sinv - sinv * lower_[t].transpose() * lower[t];
    diag[t] = 0.5 * (diag[t] + diag[t].transpose()).eval();
  }
}

}  // namespace plrnn
