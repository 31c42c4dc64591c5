#include "plrnn/train_em.hpp"

#include <cmath>
#include <numbers>
#include <set>

#include "plrnn/block_tridiag.hpp"
#include "plrnn/gaussian_moments.hpp"
#include "plrnn/io.hpp"

namespace plrnn {

namespace fs = std::filesystem;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);
constexpr double kVarFloor = 1e-6;
constexpr double kRidge = 1e-6;
constexpr Eigen::Index kExhaustiveLimit = 10;  // T * M up to which the E-step enumerates regions

}  // namespace

std::string to_string(ExpectationMode m) { return m == ExpectationMode::delta ? "delta" : "rectified_moments"; }

ExpectationMode expectation_mode_from_string(std::string_view name) {
  if (name == "delta") return ExpectationMode::delta;
  if (name == "rectified_moments") return ExpectationMode::rectified_moments;
  throw ConfigError("expectation_mode", "unknown mode '" + std::string(name) + "'");
}

Mat EmState::latents() const {
  const auto T = length(), M = latent_dim();
  Mat Z(T, M);
  for (Eigen::Index t = 0; t < T; ++t) Z.row(t) = z_mode.segment(t * M, M).transpose();
  return Z;
}

void EmState::validate() const {
  const auto T = length(), M = latent_dim();
  if (T == 0) throw ShapeError("EM state is empty");
  require_size(z_mode, T * M, "z_mode");
  require_size(d_omega, T * M, "d_omega");
  if (Eigen::Index(v_lower.size()) != T - 1) throw ShapeError("v_lower: expected T - 1 blocks");
  for (const auto& v : v_diag) {
    require_shape(v, M, M, "v_diag block");
    if ((v - v.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + v.cwiseAbs().maxCoeff()))
      throw ShapeError("v_diag block is not symmetric");
  }
  for (const auto& v : v_lower) require_shape(v, M, M, "v_lower block");
}

namespace {

// Data and parameter quantities shared by every region solve.
struct Problem {
  const Params& p;
  const Mat& X;
  const Mat& S;
  double w;
  Eigen::Index T, M, N, K;
  bool relu_obs;
  Vec sinv, ginv;
  Mat btgb;  // B^T Gamma^-1 B
  Mat btgx;  // T x M, rows (B^T Gamma^-1 x_t)^T
  Mat bvec;  // T x M, rows of the latent offsets: mu0 + C s_1, then C s_t + h

  Problem(const Params& params, const Mat& x, const Mat& s, double weight)
      : p(params), X(x), S(s), w(weight), T(x.rows()), M(params.latent_dim()), N(params.obs_dim()),
        K(params.input_dim()) {
    p.validate();
    if (p.obs_kind == ObsKind::softmax_categorical)
      throw ConfigError("obs_kind", "EM needs a Gaussian observation model");
    if (T < 1) throw ShapeError("EM: no observations");
    require_shape(X, T, N, "observations");
    if (K > 0) require_shape(S, T, K, "inputs");
    if (!(p.sigma_diag.array() > 0).all()) throw ConfigError("sigma_diag", "process noise variances must be positive");
    if (!(p.gamma_diag.array() > 0).all())
      throw ConfigError("gamma_diag", "observation noise variances must be positive");
    if (!(w > 0)) throw ConfigError("latent_weight", "must be positive");
    relu_obs = p.obs_kind == ObsKind::relu_gaussian;
    sinv = p.sigma_diag.cwiseInverse();
    ginv = p.gamma_diag.cwiseInverse();
    btgb = p.b_loading.transpose() * ginv.asDiagonal() * p.b_loading;
    btgx = X * ginv.asDiagonal() * p.b_loading;
    bvec = p.h_bias.transpose().replicate(T, 1);
    if (K > 0) bvec += S * p.c_input.transpose();
    bvec.row(0) += (p.mu0 - p.h_bias).transpose();
  }

  // Hessian blocks and linear term of the quadratic valid in region d.
  void system(const VecXb& d, BlockTridiag& H, Vec& v) const {
    H = BlockTridiag::zeros(T, M);
    v = Vec(T * M);
    const Mat& W = p.w_offdiag;
    for (Eigen::Index t = 0; t < T; ++t) {
      const Vec dt = d.segment(t * M, M).cast<double>();
      Mat& Ht = H.diag[t];
      if (relu_obs) {
        Ht = btgb.cwiseProduct(dt * dt.transpose());
        v.segment(t * M, M) = btgx.row(t).transpose().cwiseProduct(dt);
      } else {
        Ht = btgb;
        v.segment(t * M, M) = btgx.row(t).transpose();
      }
      Ht.diagonal() += w * sinv;
      v.segment(t * M, M) += w * sinv.cwiseProduct(bvec.row(t).transpose());
      if (t + 1 < T) {
        Mat J = W * dt.asDiagonal();
        J.diagonal() += p.a_diag;
        const Mat SJ = sinv.asDiagonal() * J;
        Ht.noalias() += w * J.transpose() * SJ;
        H.lower[t] = -w * SJ;
        v.segment(t * M, M) -= w * SJ.transpose() * bvec.row(t + 1).transpose();
      }
    }
  }
};

VecXb region_of(const Vec& z) { return (z.array() > 0).matrix(); }

Mat as_rows(const Vec& z, Eigen::Index T, Eigen::Index M) {
  return Eigen::Map<const Mat>(z.data(), M, T).transpose();
}

}  // namespace

double mode_objective(const Params& p, const Mat& Z, const Mat& X, const Mat& S, double latent_weight) {
  const Problem pr(p, X, S, latent_weight);
  require_shape(Z, pr.T, pr.M, "Z");
  const Mat G = pr.relu_obs ? Mat(Z.cwiseMax(0.0)) : Z;
  const Mat ex = X - G * p.b_loading.transpose();
  double obs = -0.5 * (ex.array().square().rowwise() * pr.ginv.transpose().array()).sum();
  obs -= 0.5 * double(pr.T) * (double(pr.N) * kLog2Pi + p.gamma_diag.array().log().sum());
  Mat r = Z - pr.bvec;
  if (pr.T > 1) {
    const Mat prev = Z.topRows(pr.T - 1);
    r.bottomRows(pr.T - 1) -= prev * p.a_diag.asDiagonal();
    r.bottomRows(pr.T - 1) -= prev.cwiseMax(0.0) * p.w_offdiag.transpose();
  }
  double lat = -0.5 * (r.array().square().rowwise() * pr.sinv.transpose().array()).sum();
  lat -= 0.5 * double(pr.T) * (double(pr.M) * kLog2Pi + p.sigma_diag.array().log().sum());
  return obs + latent_weight * lat;
}

EmState estep(const Params& p, const Mat& X, const Mat& S, double latent_weight, const Vec* z_init, int max_iter) {
  const Problem pr(p, X, S, latent_weight);
  const auto T = pr.T, M = pr.M;
  auto objective = [&](const Vec& z) { return mode_objective(p, as_rows(z, T, M), X, S, latent_weight); };

  EmState st;
  Vec best;
  double best_q = -std::numeric_limits<double>::infinity();
  VecXb d;
  if (z_init) {
    require_size(*z_init, T * M, "z_init");
    best = *z_init;
    best_q = objective(best);
    d = region_of(best);
  } else {
    d = VecXb::Constant(T * M, true);
  }
  std::set<std::vector<bool>> seen;
  seen.insert(std::vector<bool>(d.data(), d.data() + d.size()));
  BlockTridiag H;
  Vec v;
  for (int it = 0; it < max_iter; ++it) {
    pr.system(d, H, v);
    const BlockTridiagFactor f(H);
    st.jitter_added = st.jitter_added || f.jittered();
    const Vec z = f.solve(v);
    ++st.iterations;
    const double q = objective(z);
    if (!best.size() || q > best_q) {
      best = z;
      best_q = q;
    }
    const VecXb next = region_of(z);
    if (next == d) {
      st.converged = true;
      break;
    }
    if (!seen.insert(std::vector<bool>(next.data(), next.data() + next.size())).second) {
      st.loop_detected = true;
      break;
    }
    d = next;
  }

  // Tiny problems: the piecewise quadratic may have several local maxima, so
  // visit every sign pattern and keep the best self-consistent solution.
  if (T * M <= kExhaustiveLimit) {
    for (std::uint32_t code = 0; code < (1u << (T * M)); ++code) {
      VecXb dd(T * M);
      for (Eigen::Index i = 0; i < T * M; ++i) dd(i) = (code >> i) & 1u;
      pr.system(dd, H, v);
      const BlockTridiagFactor f(H);
      const Vec z = f.solve(v);
      if (region_of(z) != dd) continue;
      const double q = objective(z);
      if (q > best_q) {
        best = z;
        best_q = q;
        st.converged = true;
      }
    }
  }

  st.z_mode = best;
  st.objective = best_q;
  st.d_omega = region_of(best);
  pr.system(st.d_omega, H, v);
  const BlockTridiagFactor f(H);
  st.jitter_added = st.jitter_added || f.jittered();
  st.log_det_v = -f.log_det();
  f.selected_inverse(st.v_diag, st.v_lower);
  return st;
}

Expectations expectations(const EmState& em, ExpectationMode mode) {
  em.validate();
  const auto T = em.length(), M = em.latent_dim();
  Expectations e;
  e.ez = em.latents();
  e.ephi = Mat(T, M);
  e.ezz.resize(T);
  e.ephiz.resize(T);
  e.ephiphi.resize(T);
  e.ez1z.resize(T - 1);
  e.ez1phi.resize(T - 1);
  if (mode == ExpectationMode::delta) {
    for (Eigen::Index t = 0; t < T; ++t) {
      const Vec z = e.ez.row(t).transpose();
      const Vec f = z.cwiseMax(0.0);
      e.ephi.row(t) = f.transpose();
      e.ezz[t] = z * z.transpose();
      e.ephiz[t] = f * z.transpose();
      e.ephiphi[t] = f * f.transpose();
      if (t > 0) {
        const Vec zp = e.ez.row(t - 1).transpose();
        e.ez1z[t - 1] = z * zp.transpose();
        e.ez1phi[t - 1] = z * zp.cwiseMax(0.0).transpose();
      }
    }
    return e;
  }

  std::vector<Vec> var(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    var[t] = em.v_diag[t].diagonal();
    if ((var[t].array() < 0).any()) {
      e.clamped_variance = true;
      var[t] = var[t].cwiseMax(0.0);
    }
  }
  for (Eigen::Index t = 0; t < T; ++t) {
    const Vec mu = e.ez.row(t).transpose();
    const Mat& V = em.v_diag[t];
    e.ezz[t] = mu * mu.transpose() + V;
    for (Eigen::Index i = 0; i < M; ++i) e.ephi(t, i) = relu_mean(mu(i), var[t](i));
    Mat& pz = e.ephiz[t];
    Mat& pp = e.ephiphi[t];
    pz.resize(M, M);
    pp.resize(M, M);
    for (Eigen::Index i = 0; i < M; ++i) {
      for (Eigen::Index j = 0; j < M; ++j) pz(i, j) = x_relu_y(mu(j), mu(i), var[t](i), V(i, j));
      pp(i, i) = relu_second(mu(i), var[t](i));
      for (Eigen::Index j = 0; j < i; ++j) pp(i, j) = pp(j, i) = relu_relu(mu(i), mu(j), var[t](i), var[t](j), V(i, j));
    }
    if (t > 0) {
      const Vec mp = e.ez.row(t - 1).transpose();
      const Mat& C = em.v_lower[t - 1];  // cov(z_t, z_{t-1})
      e.ez1z[t - 1] = mu * mp.transpose() + C;
      Mat& zf = e.ez1phi[t - 1];
      zf.resize(M, M);
      for (Eigen::Index i = 0; i < M; ++i)
        for (Eigen::Index j = 0; j < M; ++j) zf(i, j) = x_relu_y(mu(i), mp(j), var[t - 1](j), C(i, j));
    }
  }
  return e;
}

namespace {

// Solves (G) x = c for symmetric G, adding a ridge when G is not safely
// positive definite.
Vec spd_solve(Mat G, const Vec& c, bool& ridged) {
  Eigen::LLT<Mat> llt(G);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
    ridged = true;
    G.diagonal().array() += kRidge;
    llt.compute(G);
    if (llt.info() != Eigen::Success) return G.completeOrthogonalDecomposition().solve(c);
  }
  return llt.solve(c);
}

}  // namespace

Params mstep(const Params& current, const Expectations& e, const Mat& X, const Mat& S, const RegSpec& reg,
             const MStepOptions& opts, MStepFlags* flags) {
  const bool update_obs = opts.update_obs, update_gamma = opts.update_gamma;
  current.validate();
  const auto T = e.ez.rows(), M = current.latent_dim(), N = current.obs_dim(), K = current.input_dim();
  require_shape(e.ez, T, M, "expectations");
  require_shape(X, T, N, "observations");
  if (K > 0) require_shape(S, T, K, "inputs");
  reg.validate(M);
  MStepFlags local;
  MStepFlags& fl = flags ? *flags : local;
  Params p = current;

  if (T > 1) {
    // Sufficient statistics over transitions t -> t + 1.
    Mat Szz = Mat::Zero(M, M), Sphiz = Mat::Zero(M, M), Sphiphi = Mat::Zero(M, M);
    Mat Sz1z = Mat::Zero(M, M), Sz1phi = Mat::Zero(M, M);
    Vec Sz = Vec::Zero(M), Sphi = Vec::Zero(M), Sz1 = Vec::Zero(M), Sz1sq = Vec::Zero(M);
    Mat Szs = Mat::Zero(M, K), Sphis = Mat::Zero(M, K), Sz1s = Mat::Zero(M, K), Sss = Mat::Zero(K, K);
    Vec Ss = Vec::Zero(K);
    for (Eigen::Index t = 0; t + 1 < T; ++t) {
      Szz += e.ezz[t];
      Sphiz += e.ephiz[t];
      Sphiphi += e.ephiphi[t];
      Sz1z += e.ez1z[t];
      Sz1phi += e.ez1phi[t];
      Sz += e.ez.row(t).transpose();
      Sphi += e.ephi.row(t).transpose();
      Sz1 += e.ez.row(t + 1).transpose();
      Sz1sq += e.ezz[t + 1].diagonal();
      if (K > 0) {
        const Vec s = S.row(t + 1).transpose();
        Szs += e.ez.row(t).transpose() * s.transpose();
        Sphis += e.ephi.row(t).transpose() * s.transpose();
        Sz1s += e.ez.row(t + 1).transpose() * s.transpose();
        Sss += s * s.transpose();
        Ss += s;
      }
    }
    const double n = double(T - 1);
    const Eigen::Index P = M + K + 1;
    for (Eigen::Index m = 0; m < M; ++m) {
      std::vector<Eigen::Index> others;
      for (Eigen::Index k = 0; k < M; ++k)
        if (k != m) others.push_back(k);
      Mat G = Mat::Zero(P, P);
      Vec c = Vec::Zero(P);
      const Eigen::Index is = M, i1 = M + K;
      G(0, 0) = Szz(m, m);
      c(0) = Sz1z(m, m);
      for (std::size_t a = 0; a < others.size(); ++a) {
        const auto k = others[a];
        const auto ia = Eigen::Index(a) + 1;
        G(0, ia) = G(ia, 0) = Sphiz(k, m);
        for (std::size_t b = 0; b < others.size(); ++b) G(ia, Eigen::Index(b) + 1) = Sphiphi(k, others[b]);
        for (Eigen::Index l = 0; l < K; ++l) G(ia, is + l) = G(is + l, ia) = Sphis(k, l);
        G(ia, i1) = G(i1, ia) = Sphi(k);
        c(ia) = Sz1phi(m, k);
      }
      for (Eigen::Index l = 0; l < K; ++l) {
        G(0, is + l) = G(is + l, 0) = Szs(m, l);
        G(is + l, i1) = G(i1, is + l) = Ss(l);
        c(is + l) = Sz1s(m, l);
      }
      G.block(is, is, K, K) = Sss;
      G(0, i1) = G(i1, 0) = Sz(m);
      G(i1, i1) = n;
      c(i1) = Sz1(m);

      const RowPenalty rp = row_penalty(reg, M, m);
      Mat lhs = G;
      Vec rhs = c;
      const double k2 = 2.0 * double(T) * current.sigma_diag(m);
      lhs(0, 0) += k2 * rp.weight_a;
      rhs(0) += k2 * rp.weight_a * rp.target_a;
      for (Eigen::Index a = 1; a < M; ++a) lhs(a, a) += k2 * rp.weight_w;
      lhs(i1, i1) += k2 * rp.weight_h;
      bool ridged = false;
      const Vec th = spd_solve(lhs, rhs, ridged);
      fl.ridge_added = fl.ridge_added || ridged;

      p.a_diag(m) = th(0);
      for (std::size_t a = 0; a < others.size(); ++a) p.w_offdiag(m, others[a]) = th(Eigen::Index(a) + 1);
      for (Eigen::Index l = 0; l < K; ++l) p.c_input(m, l) = th(is + l);
      p.h_bias(m) = th(i1);
      // Mean part evaluated directly; only the small covariance part uses the
      // accumulated moments, which avoids cancellation on large data.
      Mat Eb(T - 1, P);
      Eb.col(0) = e.ez.col(m).head(T - 1);
      for (std::size_t a = 0; a < others.size(); ++a) Eb.col(Eigen::Index(a) + 1) = e.ephi.col(others[a]).head(T - 1);
      if (K > 0) Eb.middleCols(is, K) = S.bottomRows(T - 1);
      Eb.col(i1).setOnes();
      const Vec Ea = e.ez.col(m).tail(T - 1);
      const Vec mean_res = Ea - Eb * th;
      const Mat Gc = G - Eb.transpose() * Eb;
      const Vec cc = c - Eb.transpose() * Ea;
      const double resid = std::max(0.0, mean_res.squaredNorm() + (Sz1sq(m) - Ea.squaredNorm()) - 2.0 * th.dot(cc) +
                                             th.dot(Gc * th));
      const double v1 = std::max(0.0, e.ezz[0](m, m) - e.ez(0, m) * e.ez(0, m));
      if (opts.update_sigma) p.sigma_diag(m) = std::max(kVarFloor, (resid + v1) / double(T));
    }
    p.w_offdiag.diagonal().setZero();
  }
  p.mu0 = e.ez.row(0).transpose();
  if (K > 0) p.mu0 -= p.c_input * S.row(0).transpose();
  if (T == 1 && opts.update_sigma) p.sigma_diag = (e.ezz[0].diagonal() - e.ez.row(0).transpose().cwiseAbs2()).cwiseMax(kVarFloor);

  if (update_obs || update_gamma) {
    const bool relu_obs = p.obs_kind == ObsKind::relu_gaussian;
    const Mat& Eg = relu_obs ? e.ephi : e.ez;
    const Mat Sxg = X.transpose() * Eg;
    Mat Sgg = Mat::Zero(M, M);
    for (Eigen::Index t = 0; t < T; ++t) Sgg += relu_obs ? e.ephiphi[t] : e.ezz[t];
    const Mat Cgg = Sgg - Eg.transpose() * Eg;
    for (Eigen::Index nn = 0; nn < N; ++nn) {
      Vec b = p.b_loading.row(nn).transpose();
      if (update_obs) {
        bool ridged = false;
        b = spd_solve(Sgg, Sxg.row(nn).transpose(), ridged);
        fl.ridge_added = fl.ridge_added || ridged;
        p.b_loading.row(nn) = b.transpose();
      }
      if (!update_obs && !update_gamma) continue;
      const double resid = std::max(0.0, (X.col(nn) - Eg * b).squaredNorm() + b.dot(Cgg * b));
      if (update_gamma) p.gamma_diag(nn) = std::max(kVarFloor, resid / double(T));
    }
  }
  return p;
}

void EmConfig::validate() const {
  if (anneal.empty()) throw ConfigError("anneal", "needs at least one stage");
  for (double a : anneal)
    if (!(a > 0)) throw ConfigError("anneal", "latent weights must be positive");
  if (max_iter < 1) throw ConfigError("max_iter", "must be at least 1");
  if (!(tol >= 0)) throw ConfigError("tol", "must be nonnegative");
  if (estep_max_iter < 1) throw ConfigError("estep_max_iter", "must be at least 1");
  if (abort_after < 1) throw ConfigError("abort_after", "must be at least 1");
  reg.validate();
  if (reg.kind == RegKind::orthogonal) throw ConfigError("reg.kind", "orthogonal penalty has no closed-form M-step");
}

Params em_initial_params(InitScheme scheme, Eigen::Index M, const Mat& X, Eigen::Index K, int m_reg,
                         std::uint64_t seed, ObsKind obs_kind) {
  Params p = init_plrnn(scheme, M, K, X.cols(), m_reg, seed, obs_kind);
  p.sigma_diag.setConstant(0.1);
  const Vec mean = X.colwise().mean().transpose();
  p.gamma_diag = ((X.rowwise() - mean.transpose()).array().square().colwise().mean().transpose()).cwiseMax(kVarFloor);
  p.mu0.setZero();
  return p;
}

namespace {
bool params_finite(const Params& p) {
  return p.a_diag.allFinite() && p.w_offdiag.allFinite() && p.c_input.allFinite() && p.h_bias.allFinite() &&
         p.sigma_diag.allFinite() && p.b_loading.allFinite() && p.gamma_diag.allFinite() && p.mu0.allFinite();
}
}  // namespace

EmFit fit_em(const EmConfig& config, const Params& init, const Mat& X, const Mat& S) {
  config.validate();
  config.reg.validate(init.latent_dim());
  if (X.rows() < 2) throw ShapeError("EM needs at least two time steps");
  const double T = double(X.rows());
  const double lat_const = 0.5 * T * double(init.latent_dim()) * kLog2Pi;
  EmFit fit;
  fit.params = init;
  Vec z;
  std::vector<double> elbos;
  for (std::size_t s = 0; s < config.anneal.size(); ++s) {
    const double w = config.anneal[s];
    int decreases = 0;
    std::vector<double> stage_elbo;
    for (int it = 0; it < config.max_iter; ++it) {
      EmState st;
      try {
        st = estep(fit.params, X, S, w, z.size() ? &z : nullptr, config.estep_max_iter);
      } catch (const PlrnnError& e) {
        fit.aborted = true;
        fit.diagnostic = "E-step failed in stage " + std::to_string(s) + ", iteration " + std::to_string(it) + ": " + e.what();
        return fit;
      }
      z = st.z_mode;
      EmIterRecord rec;
      rec.stage = int(s);
      rec.iteration = it;
      rec.latent_weight = w;
      rec.objective = st.objective - w * T * penalty(config.reg, fit.params);
      rec.elbo = rec.objective + lat_const + 0.5 * st.log_det_v;
      rec.estep_loop = st.loop_detected;
      fit.trace.push_back(rec);
      elbos.push_back(rec.elbo);
      st.anneal_stage = int(s);
      st.elbo_trace = elbos;
      fit.state = std::move(st);
      if (!std::isfinite(rec.elbo)) {
        fit.aborted = true;
        fit.diagnostic = "non-finite ELBO proxy in stage " + std::to_string(s) + ", iteration " + std::to_string(it);
        return fit;
      }
      if (!stage_elbo.empty() && rec.elbo < stage_elbo.back()) {
        if (++decreases > config.abort_after) {
          fit.aborted = true;
          fit.diagnostic = "ELBO proxy decreased for " + std::to_string(decreases) +
                           " consecutive iterations in stage " + std::to_string(s) +
                           "; the moment approximation has likely broken down";
          return fit;
        }
      } else {
        decreases = 0;
      }
      stage_elbo.push_back(rec.elbo);
      const auto n = stage_elbo.size();
      if (n > 5 && std::abs(rec.elbo - stage_elbo[n - 6]) < config.tol * std::max(1.0, std::abs(rec.elbo))) break;
      const Expectations e = expectations(fit.state, config.mode);
      MStepOptions opts;
      opts.update_obs = s == 0;
      opts.update_gamma = s == 0 || config.refit_gamma;
      opts.update_sigma = w >= 1.0 || !config.hold_sigma_while_annealing;
      Params next = mstep(fit.params, e, X, S, config.reg, opts);
      if (!params_finite(next)) {
        fit.aborted = true;
        fit.diagnostic =
            "M-step produced non-finite parameters in stage " + std::to_string(s) + ", iteration " + std::to_string(it);
        return fit;
      }
      fit.params = std::move(next);
    }
  }
  // Final state consistent with the returned parameters.
  const double w = config.anneal.back();
  EmState st;
  try {
    st = estep(fit.params, X, S, w, &z, config.estep_max_iter);
  } catch (const PlrnnError& e) {
    fit.aborted = true;
    fit.diagnostic = std::string("final E-step failed: ") + e.what();
    return fit;
  }
  st.anneal_stage = int(config.anneal.size()) - 1;
  st.elbo_trace = elbos;
  fit.state = std::move(st);
  return fit;
}

void write_em_trace_csv(const fs::path& path, const std::vector<EmIterRecord>& trace) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : trace) rows.push_back({double(r.stage), double(r.iteration), r.latent_weight, r.objective, r.elbo});
  write_csv(path, {"stage", "iteration", "latent_weight", "objective", "elbo"}, rows);
}

void save_em_state(const fs::path& stem, const EmState& s) {
  s.validate();
  const auto T = s.length(), M = s.latent_dim();
  BlockFile f;
  f.kind = "em_state";
  f.meta = {{"T", T},
            {"M", M},
            {"anneal_stage", s.anneal_stage},
            {"objective", s.objective},
            {"log_det_v", s.log_det_v},
            {"iterations", s.iterations},
            {"converged", s.converged},
            {"loop_detected", s.loop_detected},
            {"jitter_added", s.jitter_added}};
  Mat vd(T * M, M), vl(std::max<Eigen::Index>(T - 1, 0) * M, M);
  for (Eigen::Index t = 0; t < T; ++t) vd.middleRows(t * M, M) = s.v_diag[t];
  for (Eigen::Index t = 0; t + 1 < T; ++t) vl.middleRows(t * M, M) = s.v_lower[t];
  f.blocks.emplace_back("z_mode", s.z_mode);
  f.blocks.emplace_back("v_diag", vd);
  f.blocks.emplace_back("v_lower", vl);
  f.blocks.emplace_back("d_omega", s.d_omega.cast<double>());
  f.blocks.emplace_back("elbo_trace", Eigen::Map<const Vec>(s.elbo_trace.data(), Eigen::Index(s.elbo_trace.size())));
  write_block_file(stem, f);
}

EmState load_em_state(const fs::path& stem) {
  const BlockFile f = read_block_file(stem);
  if (f.kind != "em_state") throw FormatError("not an EM state file", 0);
  const auto T = f.meta.at("T").get<Eigen::Index>(), M = f.meta.at("M").get<Eigen::Index>();
  EmState s;
  s.anneal_stage = f.meta.at("anneal_stage").get<int>();
  s.objective = f.meta.at("objective").get<double>();
  s.log_det_v = f.meta.at("log_det_v").get<double>();
  s.iterations = f.meta.value("iterations", 0);
  s.converged = f.meta.value("converged", false);
  s.loop_detected = f.meta.value("loop_detected", false);
  s.jitter_added = f.meta.value("jitter_added", false);
  s.z_mode = f.block("z_mode");
  const Mat& vd = f.block("v_diag");
  const Mat& vl = f.block("v_lower");
  if (vd.rows() != T * M || vl.rows() != std::max<Eigen::Index>(T - 1, 0) * M)
    throw FormatError("EM state covariance blocks do not match T and M", 0);
  for (Eigen::Index t = 0; t < T; ++t) s.v_diag.push_back(vd.middleRows(t * M, M));
  for (Eigen::Index t = 0; t + 1 < T; ++t) s.v_lower.push_back(vl.middleRows(t * M, M));
  s.d_omega = (f.block("d_omega").array() > 0.5).matrix();
  const Mat& el = f.block("elbo_trace");
  s.elbo_trace.assign(el.data(), el.data() + el.size());
  s.validate();
  return s;
}

}  // namespace plrnn
