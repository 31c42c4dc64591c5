#pragma once

// Piecewise-linear RNN: parameters, latent recursion, observation models,
// sequence generation, and the vanilla ReLU RNN baseline.
//
//   z_t = A z_{t-1} + W relu(z_{t-1}) + C s_t + h + eps_t,  eps_t ~ N(0, diag(sigma))
//   x_t = B g(z_t) + eta_t,                                 eta_t ~ N(0, diag(gamma))
//
// A is diagonal (stored as a vector), W has an exactly-zero diagonal. All
// series are stored time-major: row t of a T x M matrix is z_t.

#include <optional>
#include <string>
#include <string_view>

#include "plrnn/types.hpp"

namespace plrnn {

enum class ObsKind { linear_gaussian, relu_gaussian, softmax_categorical };

std::string to_string(ObsKind kind);
ObsKind obs_kind_from_string(std::string_view name);

/// Generation aborts once any latent exceeds this magnitude.
inline constexpr double kDivergenceBound = 1e12;

template <typename Derived>
auto relu(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  return x.cwiseMax(Scalar(0));
}

template <typename Scalar>
struct PlrnnParams {
  using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  VecT a_diag;      // M
  MatT w_offdiag;   // M x M, zero diagonal
  MatT c_input;     // M x K
  VecT h_bias;      // M
  VecT sigma_diag;  // M, process noise variances
  MatT b_loading;   // N x M
  VecT gamma_diag;  // N, observation noise variances
  VecT mu0;         // M, initial state mean
  int m_reg = 0;    // the first m_reg units form the regularized subsystem
  ObsKind obs_kind = ObsKind::linear_gaussian;

  Eigen::Index latent_dim() const { return a_diag.size(); }
  Eigen::Index input_dim() const { return c_input.cols(); }
  Eigen::Index obs_dim() const { return b_loading.rows(); }

  static PlrnnParams zeros(Eigen::Index M, Eigen::Index K, Eigen::Index N,
                           ObsKind kind = ObsKind::linear_gaussian) {
    PlrnnParams p;
    p.a_diag = VecT::Zero(M);
    p.w_offdiag = MatT::Zero(M, M);
    p.c_input = MatT::Zero(M, K);
    p.h_bias = VecT::Zero(M);
    p.sigma_diag = VecT::Zero(M);
    p.b_loading = MatT::Zero(N, M);
    p.gamma_diag = VecT::Ones(N);
    p.mu0 = VecT::Zero(M);
    p.obs_kind = kind;
    return p;
  }

  /// Diagonal matrix A.
  MatT a_matrix() const { return a_diag.asDiagonal(); }

  /// Throws ShapeError / ConfigError when an invariant is violated.
  void validate() const {
    const auto M = latent_dim();
    require_shape(w_offdiag, M, M, "w_offdiag");
    require_size(h_bias, M, "h_bias");
    require_size(sigma_diag, M, "sigma_diag");
    require_size(mu0, M, "mu0");
    if (c_input.rows() != M) {
      throw ShapeError("c_input: expected " + std::to_string(M) + " rows, got " +
                       std::to_string(c_input.rows()));
    }
    if (b_loading.cols() != M) {
      throw ShapeError("b_loading: expected " + std::to_string(M) +
                       " columns, got " + std::to_string(b_loading.cols()));
    }
    require_size(gamma_diag, b_loading.rows(), "gamma_diag");
    for (Eigen::Index i = 0; i < M; ++i) {
      if (w_offdiag(i, i) != Scalar(0)) {
        throw ConfigError("w_offdiag", "diagonal entry " + std::to_string(i) +
                                           " must be exactly zero");
      }
    }
    if ((sigma_diag.array() < Scalar(0)).any()) {
      throw ConfigError("sigma_diag", "must be nonnegative");
    }
    if ((gamma_diag.array() <= Scalar(0)).any()) {
      throw ConfigError("gamma_diag", "must be positive");
    }
    if (m_reg < 0 || m_reg > M) {
      throw ConfigError("m_reg", "must lie in [0, " + std::to_string(M) + "], got " +
                                     std::to_string(m_reg));
    }
  }
};

template <typename Scalar>
struct Trajectory {
  using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  MatT latents;       // T x M (may have zero columns for externally observed data)
  MatT observations;  // T x N, optional (zero columns when absent)
  MatT inputs;        // T x K, optional
  double dt = 1.0;

  Eigen::Index length() const {
    if (latents.cols() > 0) return latents.rows();
    if (observations.cols() > 0) return observations.rows();
    return inputs.rows();
  }
  bool has_latents() const { return latents.cols() > 0; }
  bool has_observations() const { return observations.cols() > 0; }
  bool has_inputs() const { return inputs.cols() > 0; }

  void validate(bool one_hot_observations = false) const {
    const auto T = length();
    if (T < 1) throw ShapeError("trajectory: length must be at least 1");
    auto check = [T](const MatT& m, const char* name) {
      if (m.cols() > 0 && m.rows() != T) {
        throw ShapeError(std::string(name) + ": expected " + std::to_string(T) +
                         " rows, got " + std::to_string(m.rows()));
      }
    };
    check(latents, "latents");
    check(observations, "observations");
    check(inputs, "inputs");
    if (one_hot_observations) {
      for (Eigen::Index t = 0; t < observations.rows(); ++t) {
        const auto row = observations.row(t);
        const bool binary =
            ((row.array() == Scalar(0)) || (row.array() == Scalar(1))).all();
        if (!binary || row.sum() != Scalar(1)) {
          throw ShapeError("observations: row " + std::to_string(t) +
                           " is not one-hot");
        }
      }
    }
  }
};

/// Binary ReLU region indicator d and the effective linear map
/// W_omega = A + W diag(d) that governs the dynamics inside that region.
template <typename Scalar>
struct RegionConfig {
  using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  VecXb d_vec;
  MatT w_omega;
};

/// d_m = 1 iff z_m > tol. The boundary z_m == 0 belongs to the d_m = 0 side.
template <typename Derived>
VecXb region_indicator(const Eigen::MatrixBase<Derived>& z, double tol = 0.0) {
  VecXb d(z.size());
  for (Eigen::Index m = 0; m < z.size(); ++m) d(m) = double(z(m)) > tol;
  return d;
}

template <typename Scalar>
RegionConfig<Scalar> make_region(const PlrnnParams<Scalar>& p, const VecXb& d) {
  require_size(d, p.latent_dim(), "d_vec");
  RegionConfig<Scalar> r;
  r.d_vec = d;
  r.w_omega = p.w_offdiag * d.template cast<Scalar>().asDiagonal();
  r.w_omega.diagonal() += p.a_diag;
  return r;
}

template <typename Scalar, typename Derived>
RegionConfig<Scalar> region_at(const PlrnnParams<Scalar>& p,
                               const Eigen::MatrixBase<Derived>& z) {
  return make_region(p, region_indicator(z));
}

/// One latent step. Empty `s_t` / `noise` vectors mean "absent".
template <typename Scalar>
typename PlrnnParams<Scalar>::VecT step_latent(
    const PlrnnParams<Scalar>& p, const typename PlrnnParams<Scalar>::VecT& z_prev,
    const typename PlrnnParams<Scalar>::VecT& s_t = {},
    const typename PlrnnParams<Scalar>::VecT& noise = {}) {
  require_size(z_prev, p.latent_dim(), "z_prev");
  typename PlrnnParams<Scalar>::VecT z =
      p.a_diag.cwiseProduct(z_prev) + p.w_offdiag * relu(z_prev) + p.h_bias;
  if (s_t.size() > 0) {
    require_size(s_t, p.input_dim(), "s_t");
    z.noalias() += p.c_input * s_t;
  }
  if (noise.size() > 0) {
    require_size(noise, p.latent_dim(), "noise");
    z += noise;
  }
  return z;
}

/// Numerically stable softmax (max-subtracted).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e =
      (logits.array() - logits.maxCoeff()).exp().matrix();
  return e / e.sum();
}

/// Observation for state z: B z, B relu(z) (plus optional noise), or the
/// category probability vector for the softmax model.
template <typename Scalar>
typename PlrnnParams<Scalar>::VecT observe(
    const PlrnnParams<Scalar>& p, const typename PlrnnParams<Scalar>::VecT& z,
    const typename PlrnnParams<Scalar>::VecT& noise = {}) {
  require_size(z, p.latent_dim(), "z");
  typename PlrnnParams<Scalar>::VecT x;
  switch (p.obs_kind) {
    case ObsKind::linear_gaussian:
      x = p.b_loading * z;
      break;
    case ObsKind::relu_gaussian:
      x = p.b_loading * relu(z);
      break;
    case ObsKind::softmax_categorical:
      return softmax(p.b_loading * z);
  }
  if (noise.size() > 0) {
    require_size(noise, p.obs_dim(), "noise");
    x += noise;
  }
  return x;
}

/// Iterates step_latent and observe for T steps starting from z0 (z0 itself
/// is not stored; row 0 holds z_1). With `noiseless` both noise terms are
/// zero and softmax observations take the arg-max category. Otherwise noise
/// is drawn from a counter-based stream, so equal seeds give bit-identical
/// output.
template <typename Scalar>
Trajectory<Scalar> generate(const PlrnnParams<Scalar>& p,
                            const typename PlrnnParams<Scalar>::VecT& z0,
                            const typename Trajectory<Scalar>::MatT& inputs,
                            Eigen::Index T, std::uint64_t seed, bool noiseless) {
  using VecT = typename PlrnnParams<Scalar>::VecT;
  using MatT = typename Trajectory<Scalar>::MatT;
  if (T < 1) throw ShapeError("generate: T must be at least 1");
  p.validate();
  require_size(z0, p.latent_dim(), "z0");
  const bool has_inputs = inputs.size() > 0;
  if (has_inputs) require_shape(inputs, T, p.input_dim(), "inputs");

  const auto M = p.latent_dim();
  const auto N = p.obs_dim();
  Trajectory<Scalar> out;
  out.latents = MatT(T, M);
  out.observations = MatT(T, N);
  if (has_inputs) out.inputs = inputs;

  CounterRng rng(seed, 0x5eed);
  const VecT sigma_sd = p.sigma_diag.array().sqrt().matrix();
  const VecT gamma_sd = p.gamma_diag.array().sqrt().matrix();
  VecT z = z0;
  VecT s;
  for (Eigen::Index t = 0; t < T; ++t) {
    if (has_inputs) s = inputs.row(t).transpose();
    if (noiseless) {
      z = step_latent(p, z, s);
    } else {
      VecT eps(M);
      for (Eigen::Index m = 0; m < M; ++m) eps(m) = sigma_sd(m) * Scalar(rng.normal());
      z = step_latent(p, z, s, eps);
    }
    for (Eigen::Index m = 0; m < M; ++m) {
      if (!std::isfinite(double(z(m))) || std::abs(double(z(m))) > kDivergenceBound) {
        throw DivergedError("generate: latent state diverged at step " +
                                std::to_string(t),
                            static_cast<long>(t));
      }
    }
    out.latents.row(t) = z.transpose();
    if (p.obs_kind == ObsKind::softmax_categorical) {
      const VecT prob = observe(p, z);
      Eigen::Index k = 0;
      if (noiseless) {
        prob.maxCoeff(&k);
      } else {
        double u = rng.uniform(), acc = 0.0;
        for (k = 0; k + 1 < N; ++k) {
          acc += double(prob(k));
          if (u < acc) break;
        }
      }
      out.observations.row(t).setZero();
      out.observations(t, k) = Scalar(1);
    } else if (noiseless) {
      out.observations.row(t) = observe(p, z).transpose();
    } else {
      VecT eta(N);
      for (Eigen::Index n = 0; n < N; ++n) eta(n) = gamma_sd(n) * Scalar(rng.normal());
      out.observations.row(t) = observe(p, z, eta).transpose();
    }
  }
  return out;
}

/// Vanilla ReLU RNN baseline: z_t = relu(W z_{t-1} + C s_t + h), x_t = B z_t.
template <typename Scalar>
struct VanillaRnnParams {
  using VecT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using MatT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  MatT w;          // M x M, full
  MatT c_input;    // M x K
  VecT h_bias;     // M
  MatT b_loading;  // N x M

  Eigen::Index hidden_dim() const { return w.rows(); }
  Eigen::Index input_dim() const { return c_input.cols(); }
  Eigen::Index obs_dim() const { return b_loading.rows(); }

  static VanillaRnnParams zeros(Eigen::Index M, Eigen::Index K, Eigen::Index N) {
    return {MatT::Zero(M, M), MatT::Zero(M, K), VecT::Zero(M), MatT::Zero(N, M)};
  }

  void validate() const {
    const auto M = hidden_dim();
    require_shape(w, M, M, "w");
    require_size(h_bias, M, "h_bias");
    if (c_input.rows() != M) throw ShapeError("c_input: row count must equal hidden size");
    if (b_loading.cols() != M) throw ShapeError("b_loading: column count must equal hidden size");
  }
};

template <typename Scalar>
typename VanillaRnnParams<Scalar>::VecT step_vanilla_rnn(
    const VanillaRnnParams<Scalar>& p,
    const typename VanillaRnnParams<Scalar>::VecT& z_prev,
    const typename VanillaRnnParams<Scalar>::VecT& s_t = {}) {
  require_size(z_prev, p.hidden_dim(), "z_prev");
  typename VanillaRnnParams<Scalar>::VecT pre = p.w * z_prev + p.h_bias;
  if (s_t.size() > 0) {
    require_size(s_t, p.input_dim(), "s_t");
    pre.noalias() += p.c_input * s_t;
  }
  return relu(pre);
}

using Params = PlrnnParams<double>;
using Traj = Trajectory<double>;
using Region = RegionConfig<double>;
using RnnParams = VanillaRnnParams<double>;

}  // namespace plrnn
