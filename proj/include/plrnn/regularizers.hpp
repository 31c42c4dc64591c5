#pragma once

// Quadratic penalties that pull the first m_reg units toward a manifold
// attractor (A_ii = 1, W_i. = 0, h_i = 0), comparison penalties, and
// parameter initialization schemes.

#include <string>
#include <string_view>

#include "plrnn/core.hpp"

namespace plrnn {

enum class RegKind { manifold_attractor, l2_full, l2_partial, orthogonal, none };

std::string to_string(RegKind kind);
RegKind reg_kind_from_string(std::string_view name);

struct RegSpec {
  RegKind kind = RegKind::none;
  double tau_a = 0.0;
  double tau_w = 0.0;
  double tau_h = 0.0;
  int m_reg = 0;

  /// tau_a = tau_w = tau_h = tau.
  static RegSpec common(RegKind kind, double tau, int m_reg) {
    return {kind, tau, tau, tau, m_reg};
  }

  void validate() const;
  /// validate() plus m_reg <= M.
  void validate(Eigen::Index M) const;
};

/// Gradient with the layout of the trainable PLRNN parameters.
struct PlrnnGrad {
  Vec a_diag;
  Mat w_offdiag;
  Mat c_input;
  Vec h_bias;
  Mat b_loading;

  static PlrnnGrad zeros_like(const Params& p);
  double squared_norm() const;
  PlrnnGrad& operator+=(const PlrnnGrad& o);
  PlrnnGrad& operator*=(double s);
};

double penalty(const RegSpec& spec, const Params& p);
PlrnnGrad penalty_grad(const RegSpec& spec, const Params& p);

struct RnnGrad {
  Mat w;
  Mat c_input;
  Vec h_bias;
  Mat b_loading;

  static RnnGrad zeros_like(const RnnParams& p);
  double squared_norm() const;
};

/// Vanilla RNN penalties: orthogonal -> tau_w |W W^T - I|^2,
/// l2_full -> tau_w |W|^2 + tau_h |h|^2, none -> 0. Other kinds are rejected.
double penalty(const RegSpec& spec, const RnnParams& p);
RnnGrad penalty_grad(const RegSpec& spec, const RnnParams& p);

/// Per-row quadratic prior equivalent to the penalty for the row-separable
/// kinds: weight_a (a_mm - target_a)^2 + weight_w |W_m.|^2 + weight_h h_m^2.
struct RowPenalty {
  double weight_a = 0.0;
  double target_a = 0.0;
  double weight_w = 0.0;
  double weight_h = 0.0;
};

/// Throws ConfigError for the orthogonal kind, which couples rows.
RowPenalty row_penalty(const RegSpec& spec, Eigen::Index M, Eigen::Index m);

enum class InitScheme { regularized, identity_plrnn, random };

std::string to_string(InitScheme s);
InitScheme init_scheme_from_string(std::string_view name);

/// Free entries: A_ii ~ U[0.5, 0.9], W_ij ~ N(0, (scale / sqrt(M))^2), h = 0,
/// C_ik ~ N(0, 1 / K), B_ni ~ N(0, 1 / M). Regularized rows (the first m_reg)
/// get A_ii = 1, W_i. = 0, h_i = 0. Deterministic given the seed.
Params init_plrnn(InitScheme scheme, Eigen::Index M, Eigen::Index K, Eigen::Index N,
                  int m_reg, std::uint64_t seed, ObsKind obs_kind = ObsKind::linear_gaussian,
                  double scale = 1.0);

/// identity = true gives the iRNN start W = I, h = 0; otherwise W ~ N(0, 1/M).
RnnParams init_vanilla_rnn(bool identity, Eigen::Index M, Eigen::Index K, Eigen::Index N,
                           std::uint64_t seed);

}  // namespace plrnn
