#include "plrnn/regularizers.hpp"

namespace plrnn {

std::string to_string(RegKind kind) {
  switch (kind) {
    case RegKind::manifold_attractor: return "manifold_attractor";
    case RegKind::l2_full: return "l2_full";
    case RegKind::l2_partial: return "l2_partial";
    case RegKind::orthogonal: return "orthogonal";
    case RegKind::none: return "none";
  }
  return "unknown";
}

RegKind reg_kind_from_string(std::string_view name) {
  for (auto k : {RegKind::manifold_attractor, RegKind::l2_full, RegKind::l2_partial,
                 RegKind::orthogonal, RegKind::none})
    if (name == to_string(k)) return k;
  throw ConfigError("reg.kind", "unknown regularizer '" + std::string(name) + "'");
}

void RegSpec::validate() const {
  if (tau_a < 0) throw ConfigError("reg.tau_a", "must be nonnegative");
  if (tau_w < 0) throw ConfigError("reg.tau_w", "must be nonnegative");
  if (tau_h < 0) throw ConfigError("reg.tau_h", "must be nonnegative");
  if (m_reg < 0) throw ConfigError("reg.m_reg", "must be nonnegative");
  if (kind == RegKind::manifold_attractor && m_reg < 1)
    throw ConfigError("reg.m_reg", "manifold_attractor needs at least one regularized unit");
}

void RegSpec::validate(Eigen::Index M) const {
  validate();
  if (m_reg > M)
    throw ConfigError("reg.m_reg", "exceeds latent dimension " + std::to_string(M));
}

PlrnnGrad PlrnnGrad::zeros_like(const Params& p) {
  return {Vec::Zero(p.latent_dim()), Mat::Zero(p.latent_dim(), p.latent_dim()),
          Mat::Zero(p.latent_dim(), p.input_dim()), Vec::Zero(p.latent_dim()),
          Mat::Zero(p.obs_dim(), p.latent_dim())};
}

double PlrnnGrad::squared_norm() const {
  return a_diag.squaredNorm() + w_offdiag.squaredNorm() + c_input.squaredNorm() +
         h_bias.squaredNorm() + b_loading.squaredNorm();
}

PlrnnGrad& PlrnnGrad::operator+=(const PlrnnGrad& o) {
  a_diag += o.a_diag;
  w_offdiag += o.w_offdiag;
  c_input += o.c_input;
  h_bias += o.h_bias;
  b_loading += o.b_loading;
  return *this;
}

PlrnnGrad& PlrnnGrad::operator*=(double s) {
  a_diag *= s;
  w_offdiag *= s;
  c_input *= s;
  h_bias *= s;
  b_loading *= s;
  return *this;
}

RowPenalty row_penalty(const RegSpec& spec, Eigen::Index M, Eigen::Index m) {
  spec.validate(M);
  RowPenalty r;
  switch (spec.kind) {
    case RegKind::none:
      return r;
    case RegKind::orthogonal:
      throw ConfigError("reg.kind", "orthogonal penalty is not row-separable");
    case RegKind::l2_full:
      return {spec.tau_a, 0.0, spec.tau_w, spec.tau_h};
    case RegKind::manifold_attractor:
    case RegKind::l2_partial:
      if (m >= spec.m_reg) return r;
      return {spec.tau_a, spec.kind == RegKind::manifold_attractor ? 1.0 : 0.0, spec.tau_w,
              spec.tau_h};
  }
  return r;
}

namespace {

Mat orthogonal_residual(const Params& p) {
  Mat P = p.w_offdiag;
  P.diagonal() += p.a_diag;
  return P * P.transpose() - Mat::Identity(P.rows(), P.cols());
}

}  // namespace

double penalty(const RegSpec& spec, const Params& p) {
  const auto M = p.latent_dim();
  spec.validate(M);
  if (spec.kind == RegKind::none) return 0.0;
  if (spec.kind == RegKind::orthogonal) return spec.tau_w * orthogonal_residual(p).squaredNorm();
  double total = 0.0;
  for (Eigen::Index m = 0; m < M; ++m) {
    const RowPenalty r = row_penalty(spec, M, m);
    if (r.weight_a == 0 && r.weight_w == 0 && r.weight_h == 0) continue;
    const double da = p.a_diag(m) - r.target_a;
    total += r.weight_a * da * da + r.weight_w * p.w_offdiag.row(m).squaredNorm() +
             r.weight_h * p.h_bias(m) * p.h_bias(m);
  }
  return total;
}

PlrnnGrad penalty_grad(const RegSpec& spec, const Params& p) {
  const auto M = p.latent_dim();
  spec.validate(M);
  PlrnnGrad g = PlrnnGrad::zeros_like(p);
  if (spec.kind == RegKind::none) return g;
  if (spec.kind == RegKind::orthogonal) {
    Mat P = p.w_offdiag;
    P.diagonal() += p.a_diag;
    const Mat G = 4.0 * spec.tau_w * orthogonal_residual(p) * P;
    g.a_diag = G.diagonal();
    g.w_offdiag = G;
    g.w_offdiag.diagonal().setZero();
    return g;
  }
  for (Eigen::Index m = 0; m < M; ++m) {
    const RowPenalty r = row_penalty(spec, M, m);
    g.a_diag(m) = 2.0 * r.weight_a * (p.a_diag(m) - r.target_a);
    g.w_offdiag.row(m) = 2.0 * r.weight_w * p.w_offdiag.row(m);
    g.h_bias(m) = 2.0 * r.weight_h * p.h_bias(m);
  }
  g.w_offdiag.diagonal().setZero();
  return g;
}

RnnGrad RnnGrad::zeros_like(const RnnParams& p) {
  return {Mat::Zero(p.hidden_dim(), p.hidden_dim()), Mat::Zero(p.hidden_dim(), p.input_dim()),
          Vec::Zero(p.hidden_dim()), Mat::Zero(p.obs_dim(), p.hidden_dim())};
}

double RnnGrad::squared_norm() const {
  return w.squaredNorm() + c_input.squaredNorm() + h_bias.squaredNorm() + b_loading.squaredNorm();
}

namespace {

void check_rnn_kind(const RegSpec& spec) {
  spec.validate();
  if (spec.kind != RegKind::none && spec.kind != RegKind::orthogonal && spec.kind != RegKind::l2_full)
    throw ConfigError("reg.kind", to_string(spec.kind) + " is not defined for the vanilla RNN");
}

}  // namespace

double penalty(const RegSpec& spec, const RnnParams& p) {
  check_rnn_kind(spec);
  switch (spec.kind) {
    case RegKind::orthogonal:
      return spec.tau_w * (p.w * p.w.transpose() - Mat::Identity(p.hidden_dim(), p.hidden_dim())).squaredNorm();
    case RegKind::l2_full:
      return spec.tau_w * p.w.squaredNorm() + spec.tau_h * p.h_bias.squaredNorm();
    default:
      return 0.0;
  }
}

RnnGrad penalty_grad(const RegSpec& spec, const RnnParams& p) {
  check_rnn_kind(spec);
  RnnGrad g = RnnGrad::zeros_like(p);
  if (spec.kind == RegKind::orthogonal) {
    g.w = 4.0 * spec.tau_w * (p.w * p.w.transpose() - Mat::Identity(p.hidden_dim(), p.hidden_dim())) * p.w;
  } else if (spec.kind == RegKind::l2_full) {
    g.w = 2.0 * spec.tau_w * p.w;
    g.h_bias = 2.0 * spec.tau_h * p.h_bias;
  }
  return g;
}

std::string to_string(InitScheme s) {
  switch (s) {
    case InitScheme::regularized: return "regularized";
    case InitScheme::identity_plrnn: return "identity_plrnn";
    case InitScheme::random: return "random";
  }
  return "unknown";
}

InitScheme init_scheme_from_string(std::string_view name) {
  for (auto s : {InitScheme::regularized, InitScheme::identity_plrnn, InitScheme::random})
    if (name == to_string(s)) return s;
  throw ConfigError("init", "unknown initialization scheme '" + std::string(name) + "'");
}

Params init_plrnn(InitScheme scheme, Eigen::Index M, Eigen::Index K, Eigen::Index N, int m_reg,
                  std::uint64_t seed, ObsKind obs_kind, double scale) {
  if (M < 1) throw ConfigError("M", "latent dimension must be positive");
  if (m_reg < 0 || m_reg > M) throw ConfigError("m_reg", "must lie in [0, M]");
  CounterRng rng(seed, 0x1417);
  Params p = Params::zeros(M, K, N, obs_kind);
  p.m_reg = m_reg;
  const double w_sd = scale / std::sqrt(double(M));
  for (Eigen::Index i = 0; i < M; ++i) {
    p.a_diag(i) = rng.uniform(0.5, 0.9);
    for (Eigen::Index j = 0; j < M; ++j)
      if (i != j) p.w_offdiag(i, j) = w_sd * rng.normal();
  }
  const double c_sd = K > 0 ? 1.0 / std::sqrt(double(K)) : 0.0;
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index k = 0; k < K; ++k) p.c_input(i, k) = c_sd * rng.normal();
  const double b_sd = 1.0 / std::sqrt(double(M));
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index i = 0; i < M; ++i) p.b_loading(n, i) = b_sd * rng.normal();

  switch (scheme) {
    case InitScheme::random:
      break;
    case InitScheme::identity_plrnn:
      p.a_diag.setOnes();
      p.w_offdiag.setZero();
      p.h_bias.setZero();
      break;
    case InitScheme::regularized:
      for (int i = 0; i < m_reg; ++i) {
        p.a_diag(i) = 1.0;
        p.w_offdiag.row(i).setZero();
        p.h_bias(i) = 0.0;
      }
      break;
  }
  return p;
}

RnnParams init_vanilla_rnn(bool identity, Eigen::Index M, Eigen::Index K, Eigen::Index N,
                           std::uint64_t seed) {
  if (M < 1) throw ConfigError("M", "hidden dimension must be positive");
  CounterRng rng(seed, 0x2417);
  RnnParams p = RnnParams::zeros(M, K, N);
  const double w_sd = 1.0 / std::sqrt(double(M));
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index j = 0; j < M; ++j) p.w(i, j) = w_sd * rng.normal();
  const double c_sd = K > 0 ? 1.0 / std::sqrt(double(K)) : 0.0;
  for (Eigen::Index i = 0; i < M; ++i)
    for (Eigen::Index k = 0; k < K; ++k) p.c_input(i, k) = c_sd * rng.normal();
  for (Eigen::Index n = 0; n < N; ++n)
    for (Eigen::Index i = 0; i < M; ++i) p.b_loading(n, i) = w_sd * rng.normal();
  if (identity) p.w.setIdentity();
  return p;
}

}  // namespace plrnn
