// Acceptance report: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset, e.g. `acceptance 1 2 8`. Exit code 0 only if
// every selected criterion passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "plrnn/analysis.hpp"
#include "plrnn/gaussian_moments.hpp"
#include "plrnn/metrics.hpp"
#include "plrnn/tasks.hpp"
#include "plrnn/train_em.hpp"
#include "plrnn/train_sgd.hpp"

using namespace plrnn;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v, const char* f = "%.3g") {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt(f, v[i]);
  return s + "]";
}

std::vector<Eigen::Index> iota(Eigen::Index n) {
  std::vector<Eigen::Index> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = i;
  return v;
}

// ---- 1: exact addition network ----------------------------------------------

Params addition_solution() {
  Params p = Params::zeros(2, 2, 1);
  p.a_diag << 1, 0;
  p.w_offdiag(0, 1) = 1;
  p.h_bias << 0, -1;
  p.c_input << 0, 0, 1, 1;
  p.b_loading << 1, 0;
  return p;
}

Verdict ac1() {
  const Params p = addition_solution();
  bool ok = true;
  std::string d;
  for (Eigen::Index T : {30, 100, 500}) {
    const TrialSet set = gen_addition(10000, T, 100 + std::uint64_t(T));
    const double mse = mean_loss(p, set, LossKind::mse_final_step);
    const double pc = p_correct(p, set, LossKind::mse_final_step);
    ok = ok && mse < 1e-20 && pc == 1.0;
    d += "T=" + std::to_string(T) + " mse " + fmt("%.2g", mse) + " p_correct " + fmt("%.4f", pc) + "; ";
  }
  return {ok, d};
}

// ---- 2: gradient oracles ----------------------------------------------------

// A random PLRNN and a small batch of random trials whose states keep a margin
// from the ReLU kinks, so that central differences are meaningful.
struct GradInstance {
  Params p;
  TrialSet data;
};

GradInstance grad_instance(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    CounterRng rng(seed, attempt + 1);
    const Eigen::Index M = 2 + Eigen::Index(rng.below(4));   // 2..5
    const Eigen::Index T = 2 + Eigen::Index(rng.below(14));  // 2..15
    const ObsKind obs = rng.below(2) ? ObsKind::relu_gaussian : ObsKind::linear_gaussian;
    Params p = init_plrnn(InitScheme::random, M, 2, 1, 0, seed * 131 + attempt, obs, 0.7);
    p.h_bias = rng.normal_vec(M) * 0.3;
    p.mu0 = rng.normal_vec(M) * 0.5;
    p.b_loading = Mat::NullaryExpr(1, M, [&] { return rng.normal(); });
    // Addition inputs need T >= 20; use uniform inputs with random targets instead.
    TrialSet d;
    d.kind = TaskKind::addition;
    d.T = T;
    d.K = 2;
    d.inputs = Mat::NullaryExpr(T * 2, 3, [&] { return rng.uniform(); });
    d.targets = Vec::NullaryExpr(3, [&] { return rng.uniform(0, 2); });
    double margin = 1e300;
    for (Eigen::Index r = 0; r < 3; ++r) {
      const Traj tr = generate(p, p.mu0, d.trial_inputs(r), T, 0, true);
      margin = std::min(margin, tr.latents.cwiseAbs().minCoeff());
    }
    if (margin > 1e-3 && p.mu0.cwiseAbs().minCoeff() > 1e-3) return {p, d};
  }
}

Verdict ac2() {
  const double eps = 1e-6;
  int fd_fail = 0, fwd_fail = 0;
  double worst_fd = 0, worst_fwd = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const GradInstance inst = grad_instance(seed);
    const Params& p = inst.p;
    const TrialSet& d = inst.data;
    const auto batch = iota(d.size());
    const auto lg = bptt_grads(p, d, batch, LossKind::mse_final_step);
    const Vec g = pack(lg.grad);

    // Central differences, relative error on the whole gradient vector.
    Vec theta = pack(p), fd(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Params q = p;
      Vec t = theta;
      t(i) += eps;
      unpack(t, q);
      const double up = bptt_grads(q, d, batch, LossKind::mse_final_step).loss;
      t(i) -= 2 * eps;
      unpack(t, q);
      fd(i) = (up - bptt_grads(q, d, batch, LossKind::mse_final_step).loss) / (2 * eps);
    }
    const double rel = (g - fd).norm() / std::max(fd.norm(), 1e-8);
    worst_fd = std::max(worst_fd, rel);
    if (rel > 1e-4) ++fd_fail;

    // Forward sensitivities through the chain rule at the final step.
    const Eigen::Index M = p.latent_dim(), K = p.input_dim();
    Vec ga = Vec::Zero(M), gh = Vec::Zero(M);
    Mat gw = Mat::Zero(M, M), gc = Mat::Zero(M, K);
    for (Eigen::Index r = 0; r < d.size(); ++r) {
      SensitivityRecursion rec(p, p.mu0);
      const Mat s = d.trial_inputs(r);
      for (Eigen::Index t = 0; t < d.T; ++t) rec.step(s.row(t).transpose());
      const Vec z = rec.z();
      const bool relu_obs = p.obs_kind == ObsKind::relu_gaussian;
      const Vec gz = relu_obs ? Vec(z.cwiseMax(0.0)) : z;
      const double e = (p.b_loading * gz)(0) - d.targets(r);
      Vec dl_dz = 2 * e * p.b_loading.row(0).transpose() / double(d.size());
      if (relu_obs) dl_dz = dl_dz.cwiseProduct((z.array() > 0).cast<double>().matrix());
      ga += rec.dz_da().transpose() * dl_dz;
      gh += rec.dz_dh().transpose() * dl_dz;
      const Vec w = rec.dz_dw().transpose() * dl_dz;
      const Vec c = rec.dz_dc().transpose() * dl_dz;
      for (Eigen::Index m = 0; m < M; ++m) {
        for (Eigen::Index k = 0; k < M; ++k)
          if (m != k) gw(m, k) += w(m * M + k);
        for (Eigen::Index k = 0; k < K; ++k) gc(m, k) += c(m * K + k);
      }
    }
    const double err = std::max({(ga - lg.grad.a_diag).cwiseAbs().maxCoeff(),
                                 (gh - lg.grad.h_bias).cwiseAbs().maxCoeff(),
                                 (gw - lg.grad.w_offdiag).cwiseAbs().maxCoeff(),
                                 (gc - lg.grad.c_input).cwiseAbs().maxCoeff()});
    worst_fwd = std::max(worst_fwd, err);
    if (err > 1e-8) ++fwd_fail;
  }
  return {fd_fail == 0 && fwd_fail == 0,
          "100 instances; worst FD relative error " + fmt("%.2g", worst_fd) + " (" + std::to_string(fd_fail) +
              " over 1e-4), worst forward-recursion abs error " + fmt("%.2g", worst_fwd) + " (" +
              std::to_string(fwd_fail) + " over 1e-8)"};
}

// ---- 3: gradient boundedness and the partitioned-system bound ---------------

Params random_system(CounterRng& rng, Eigen::Index M, double w_scale, double a_lo, double a_hi) {
  Params p = Params::zeros(M, 0, 1);
  for (Eigen::Index i = 0; i < M; ++i) {
    p.a_diag(i) = rng.uniform(a_lo, a_hi);
    p.h_bias(i) = rng.normal();
    for (Eigen::Index j = 0; j < M; ++j)
      if (i != j) p.w_offdiag(i, j) = w_scale * rng.normal();
  }
  return p;
}

Verdict ac3() {
  int t1 = 0, t1_fail = 0, tried = 0;
  for (std::uint64_t seed = 0; t1 < 50 && seed < 5000; ++seed) {
    CounterRng rng(seed, 31);
    const Eigen::Index M = 2 + Eigen::Index(rng.below(4));
    const Params p = random_system(rng, M, 0.6, -0.9, 0.9);
    ++tried;
    const TheoremCheckReport r = check_theorems(p, rng.normal_vec(M) * 2.0, 2000);
    if (r.diverged || r.converged_to == ConvergenceKind::none || r.cycle_k > 5 || !(r.attractor_sigma_max < 1))
      continue;
    ++t1;
    const bool ok = r.grad_w_norms.size() == 2000 && norms_plateau(r.grad_w_norms, 500) &&
                    norms_plateau(r.grad_a_norms, 500) && norms_plateau(r.grad_h_norms, 500);
    if (!ok) ++t1_fail;
  }
  int t2 = 0, t2_fail = 0;
  double worst_low = 1e300, worst_ratio = 0;
  for (std::uint64_t seed = 0; t2 < 50 && seed < 5000; ++seed) {
    CounterRng rng(seed, 77);
    const Eigen::Index M = 3 + Eigen::Index(rng.below(4));  // 3..6
    const int m_reg = 1 + int(rng.below(std::uint64_t(M) - 1));
    Params p = random_system(rng, M, 0.4, 0.0, 0.6);
    p.m_reg = m_reg;
    p.a_diag.head(m_reg).setOnes();
    p.w_offdiag.topRows(m_reg).setZero();
    p.h_bias.head(m_reg).setZero();
    const double bound = theorem2_rho_bound(p);
    if (!std::isfinite(bound)) continue;
    ++t2;
    const TheoremCheckReport r = check_theorems(p, rng.normal_vec(M) * 2.0, 2000);
    worst_low = std::min(worst_low, r.rho_low);
    worst_ratio = std::max(worst_ratio, r.rho_up / bound);
    if (r.jacobian_norms.size() != 2000 || r.rho_low < 1.0 - 1e-12 || r.rho_up > bound * (1 + 1e-12)) ++t2_fail;
  }
  return {t1 == 50 && t1_fail == 0 && t2 == 50 && t2_fail == 0,
          "bounded-gradient plateau: " + std::to_string(t1 - t1_fail) + "/" + std::to_string(t1) +
              " convergent systems (" + std::to_string(tried) + " drawn); jacobian norms in [1, rho_up]: " +
              std::to_string(t2 - t2_fail) + "/" + std::to_string(t2) + ", min norm " + fmt("%.6g", worst_low) +
              ", max norm / rho_up " + fmt("%.4g", worst_ratio)};
}

// ---- 4: fixed points by enumeration vs brute-force iteration ----------------

double hausdorff(const std::vector<Vec>& a, const std::vector<Vec>& b) {
  if (a.empty() && b.empty()) return 0;
  if (a.empty() || b.empty()) return INFINITY;
  auto directed = [](const std::vector<Vec>& x, const std::vector<Vec>& y) {
    double h = 0;
    for (const auto& u : x) {
      double best = INFINITY;
      for (const auto& v : y) best = std::min(best, (u - v).norm());
      h = std::max(h, best);
    }
    return h;
  };
  return std::max(directed(a, b), directed(b, a));
}

Verdict ac4() {
  int fail = 0;
  double worst = 0;
  long with_fp = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CounterRng rng(seed, 44);
    const Params p = random_system(rng, 3, 0.5, -0.6, 0.6);
    std::vector<Vec> analytic;
    for (const auto& r : enumerate_fixed_points(p))
      if (r.admissible && !r.degenerate && r.stable) analytic.push_back(r.z_star);
    std::vector<Vec> brute;
    for (int i = 0; i < 10; ++i)
      for (int j = 0; j < 10; ++j)
        for (int k = 0; k < 10; ++k) {
          Vec z(3);
          z << -5 + i * 10.0 / 9, -5 + j * 10.0 / 9, -5 + k * 10.0 / 9;
          bool settled = false, blew_up = false;
          for (int n = 0; n < 5000 && !settled && !blew_up; ++n) {
            const Vec next = step_latent(p, z);
            settled = (next - z).norm() < 1e-13;
            blew_up = !(next.norm() < 1e8);
            z = next;
          }
          if (blew_up || (step_latent(p, z) - z).norm() > 1e-10) continue;  // cycle or slow transient
          bool seen = false;
          for (const auto& b : brute) seen = seen || (b - z).norm() < 1e-7;
          if (!seen) brute.push_back(z);
        }
    with_fp += !analytic.empty();
    const double h = hausdorff(analytic, brute);
    worst = std::max(worst, h);
    if (!(h < 1e-6)) ++fail;
  }
  return {fail == 0, "100 systems (" + std::to_string(with_fp) + " with a stable fixed point); worst Hausdorff " +
                         fmt("%.2g", worst) + ", " + std::to_string(fail) + " over 1e-6"};
}

// ---- 5: EM sanity -----------------------------------------------------------

struct Smoothed {
  std::vector<Vec> mean;
  std::vector<Mat> cov;
};

// Kalman filter with Rauch-Tung-Striebel smoothing for
// z_1 ~ N(m1, Q), z_t = F z_{t-1} + u_t + e, x_t = B z_t + n.
Smoothed kalman_rts(const Mat& F, const Mat& B, const Mat& Q, const Mat& R, const Vec& m1, const Mat& U,
                    const Mat& X) {
  const auto T = X.rows(), M = F.rows();
  std::vector<Vec> mf(T), mp(T);
  std::vector<Mat> pf(T), pp(T);
  for (Eigen::Index t = 0; t < T; ++t) {
    mp[t] = t == 0 ? m1 : Vec(F * mf[t - 1] + U.row(t).transpose());
    pp[t] = t == 0 ? Q : Mat(F * pf[t - 1] * F.transpose() + Q);
    const Mat Kg = pp[t] * B.transpose() * (B * pp[t] * B.transpose() + R).inverse();
    mf[t] = mp[t] + Kg * (X.row(t).transpose() - B * mp[t]);
    pf[t] = (Mat::Identity(M, M) - Kg * B) * pp[t];
  }
  Smoothed s{std::vector<Vec>(T), std::vector<Mat>(T)};
  s.mean[T - 1] = mf[T - 1];
  s.cov[T - 1] = pf[T - 1];
  for (Eigen::Index t = T - 2; t >= 0; --t) {
    const Mat J = pf[t] * F.transpose() * pp[t + 1].inverse();
    s.mean[t] = mf[t] + J * (s.mean[t + 1] - mp[t + 1]);
    s.cov[t] = pf[t] + J * (s.cov[t + 1] - pp[t + 1]) * J.transpose();
  }
  return s;
}

Verdict ac5() {
  // (a) a system whose states never leave the positive orthant is linear.
  Params lin = Params::zeros(3, 1, 2, ObsKind::linear_gaussian);
  lin.a_diag << 0.5, 0.3, 0.6;
  lin.w_offdiag << 0, 0.2, -0.1, 0.1, 0, 0.2, -0.2, 0.1, 0;
  lin.c_input << 0.5, -0.3, 0.2;
  lin.h_bias << 6, 5, 7;
  lin.mu0 << 12, 10, 12;
  lin.sigma_diag << 1e-3, 2e-3, 1.5e-3;
  lin.b_loading << 1, 0.5, -0.3, 0.2, -1, 0.7;
  lin.gamma_diag << 0.05, 0.1;
  const Eigen::Index T = 100;
  CounterRng srng(4);
  const Mat S = Mat::NullaryExpr(T, 1, [&] { return srng.normal(); });
  const Traj data = generate(lin, lin.mu0, S, T, 9, false);
  const EmState st = estep(lin, data.observations, S);
  Mat F = lin.w_offdiag;
  F.diagonal() += lin.a_diag;
  Mat U = S * lin.c_input.transpose();
  U.rowwise() += lin.h_bias.transpose();
  const Smoothed ks = kalman_rts(F, lin.b_loading, Mat(lin.sigma_diag.asDiagonal()), Mat(lin.gamma_diag.asDiagonal()),
                                 lin.mu0 + lin.c_input * S.row(0).transpose(), U, data.observations);
  double err_a = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    err_a = std::max(err_a, (st.z_mode.segment(t * 3, 3) - ks.mean[t]).cwiseAbs().maxCoeff());
    err_a = std::max(err_a, (st.v_diag[t] - ks.cov[t]).cwiseAbs().maxCoeff());
  }
  const bool a_ok = (data.latents.array() > 0).all() && err_a < 1e-8;

  // (b) mode objective within each anneal stage, delta expectations.
  int b_fail = 0, b_aborted = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Params teacher = init_plrnn(InitScheme::random, 3, 0, 3, 0, seed + 500, ObsKind::relu_gaussian, 0.3);
    teacher.h_bias = CounterRng(seed + 500, 3).normal_vec(3) * 0.3;
    teacher.sigma_diag.setConstant(0.05);
    teacher.gamma_diag.setConstant(0.02);
    const Traj d = generate(teacher, teacher.mu0, Mat(), 200, seed, false);
    EmConfig c;
    c.mode = ExpectationMode::delta;
    c.max_iter = 15;
    c.reg = RegSpec::common(RegKind::manifold_attractor, 1.0 / 200, 1);
    const Params init = em_initial_params(InitScheme::regularized, 3, d.observations, 0, 1, seed);
    const EmFit fit = fit_em(c, init, d.observations, Mat(200, 0));
    b_aborted += fit.aborted;
    bool ok = true;
    for (std::size_t i = 1; i < fit.trace.size(); ++i) {
      if (fit.trace[i].stage != fit.trace[i - 1].stage) continue;
      ok = ok && fit.trace[i].objective >= fit.trace[i - 1].objective - 1e-9 * std::abs(fit.trace[i - 1].objective);
    }
    if (!ok) ++b_fail;
  }

  // (c) teacher-student reconstruction.
  std::vector<double> kls;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Params teacher = Params::zeros(2, 0, 2, ObsKind::linear_gaussian);
    teacher.a_diag << 0.6, 0.5;
    teacher.w_offdiag << 0, 0.3, -0.2, 0;
    teacher.h_bias << 0.3, 0.2;
    teacher.sigma_diag << 0.05, 0.05;
    teacher.gamma_diag << 0.01, 0.01;
    teacher.b_loading.setIdentity();
    teacher.mu0 << 0.5, 0.3;
    const Traj d = generate(teacher, teacher.mu0, Mat(), 500, seed, false);
    const Params init = em_initial_params(InitScheme::random, 2, d.observations, 0, 0, seed, ObsKind::linear_gaussian);
    const EmFit fit = fit_em(EmConfig{}, init, d.observations, Mat(500, 0));
    double kl = INFINITY;
    try {
      const Traj truth = generate(teacher, teacher.mu0, Mat(), 100000, 1000 + seed, false);
      const Traj gen = generate(fit.params, fit.state.latents().row(499).transpose(), Mat(), 100000, 2000 + seed, false);
      kl = kl_state_space(truth.observations, gen.observations);
    } catch (const PlrnnError&) {
    }
    kls.push_back(kl);
  }
  const long c_pass = std::count_if(kls.begin(), kls.end(), [](double v) { return v < 0.1; });
  return {a_ok && b_fail == 0 && c_pass >= 3,
          "(a) max |mode - smoother| " + fmt("%.2g", err_a) + "; (b) " + std::to_string(20 - b_fail) +
              "/20 runs monotone (" + std::to_string(b_aborted) + " aborted); (c) KL " + list(kls) + ", " +
              std::to_string(c_pass) + "/5 below 0.1"};
}

// ---- 6: regularization trend on the bursting neuron ------------------------

Verdict ac6() {
  const Eigen::Index T = 1500, T_ref = 10 * T;
  const double sample_ms = 0.5, drop_ms = 500;
  const Traj full = simulate_neuron(NeuronParams::paper_bursting(), sample_ms * double(T + T_ref) + drop_ms, 0.02,
                                    sample_ms, -60, 0, 0);
  const Mat raw = full.latents.bottomRows(T + T_ref);
  const Vec mean = raw.topRows(T).colwise().mean().transpose();
  const Vec sd = (raw.topRows(T).rowwise() - mean.transpose()).array().square().colwise().mean().sqrt().transpose();
  const Mat Z = ((raw.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array()).matrix();
  const Mat X = Z.topRows(T), X_ref = Z.bottomRows(T_ref);
  const double fs_hz = 1000.0 / sample_ms;

  std::vector<double> med_kl, med_psd, med_dev;
  std::string d;
  for (double tau_T : {0.0, 1e2, 1e4}) {
    std::vector<double> kl, psd, dev;
    int aborted = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      EmConfig c;
      c.reg = RegSpec::common(tau_T == 0 ? RegKind::none : RegKind::manifold_attractor, tau_T / double(T), 5);
      const Params init = em_initial_params(tau_T == 0 ? InitScheme::random : InitScheme::regularized, 10, X, 0, 5,
                                            seed, ObsKind::relu_gaussian);
      const EmFit fit = fit_em(c, init, X, Mat(T, 0));
      aborted += fit.aborted;
      // A model whose free run diverges gets no score; such estimates are
      // dropped from the medians and counted separately.
      double k = std::nan(""), p = std::nan("");
      if (fit.state.length() == T) {
        try {
          const Traj gen = generate(fit.params, fit.state.latents().row(T - 1).transpose(), Mat(), T_ref, 100 + seed,
                                    false);
          k = kl_state_space(X_ref, gen.observations);
          p = psd_mse(X_ref.col(0), gen.observations.col(0), fs_hz, 50.0).low;
        } catch (const PlrnnError&) {
        }
      }
      if (!fit.params.a_diag.allFinite() || !fit.params.w_offdiag.allFinite()) {
        dev.push_back(std::nan(""));
      } else {
        dev.push_back(eig_histogram({enumerate_fixed_points(fit.params)}).system_deviation[0]);
      }
      kl.push_back(k);
      psd.push_back(p);
    }
    // Systems without an admissible fixed point have no deviation; they are left out too.
    auto finite = [](const std::vector<double>& v) {
      std::vector<double> out;
      for (double x : v)
        if (std::isfinite(x)) out.push_back(x);
      return out;
    };
    med_kl.push_back(median(finite(kl)));
    med_psd.push_back(median(finite(psd)));
    med_dev.push_back(median(finite(dev)));
    d += "tau*T=" + fmt("%g", tau_T) + ": KL " + list(kl) + " PSD-low " + list(psd) + " dev " + list(dev) + " diverged " +
         std::to_string(5 - finite(kl).size()) + " aborted " + std::to_string(aborted) + "; ";
  }
  // NaN medians (every run diverged) fail every comparison.
  const bool a = med_kl[1] <= med_kl[0] && med_kl[2] <= med_kl[1];
  const bool b = med_psd[1] <= med_psd[0] && med_psd[2] <= med_psd[1];
  const bool c = med_dev[2] < med_dev[0];
  return {a && b && c, std::string("(a) median KL ") + list(med_kl) + (a ? " ok" : " not monotone") +
                           "; (b) median PSD-low " + list(med_psd) + (b ? " ok" : " not monotone") +
                           "; (c) median deviation " + list(med_dev) + (c ? " ok" : " not smaller") + " | " + d};
}

// ---- 7: addition at T = 30 --------------------------------------------------

Verdict ac7() {
  const Eigen::Index T = 30, M = 12;
  const int m_reg = 6;
  std::vector<double> pc_reg, pc_plain;
  for (double tau : {5.0, 0.0}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const TrialSet train_set = gen_addition(10000, T, seed), test_set = gen_addition(2000, T, 1000 + seed);
      SgdConfig c;
      c.epochs = 100;
      c.seed = seed;
      const bool reg = tau > 0;
      c.reg = RegSpec::common(reg ? RegKind::manifold_attractor : RegKind::none, tau, reg ? m_reg : 0);
      const Params init = init_plrnn(reg ? InitScheme::regularized : InitScheme::random, M, 2, 1, reg ? m_reg : 0, seed);
      const auto st = train(c, start_training(init), train_set, &test_set);
      const double pc = st.diverged ? 0.0 : p_correct(st.best_params, test_set, LossKind::mse_final_step);
      (reg ? pc_reg : pc_plain).push_back(pc);
    }
  }
  const long hits = std::count_if(pc_reg.begin(), pc_reg.end(), [](double v) { return v >= 0.95; });
  const bool ok = hits >= 4 && median(pc_plain) <= median(pc_reg);
  return {ok, "tau=5 P_correct " + list(pc_reg) + " (" + std::to_string(hits) + "/5 >= 0.95, median " +
                  fmt("%.3f", median(pc_reg)) + "); tau=0 P_correct " + list(pc_plain) + " (median " +
                  fmt("%.3f", median(pc_plain)) + ")"};
}

// ---- 8: metric self-tests ---------------------------------------------------

struct McStat {
  double mean, se;
};

template <typename F>
McStat monte_carlo(F f, long n, std::uint64_t seed) {
  CounterRng rng(seed);
  double s = 0, s2 = 0;
  for (long i = 0; i < n; ++i) {
    const double v = f(rng);
    s += v;
    s2 += v * v;
  }
  const double m = s / double(n);
  return {m, std::sqrt((s2 / double(n) - m * m) / double(n))};
}

void put_be32(std::ofstream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

Verdict ac8() {
  std::string d;
  const Traj lorenz = simulate_lorenz(10, 28, 8.0 / 3.0, 5000, 0.01, Eigen::Vector3d(1, 1, 1));
  const double kl = kl_state_space(lorenz.latents, lorenz.latents);
  const PsdMse pm = psd_mse(lorenz.latents.col(0), lorenz.latents.col(0), 100.0, 10.0);
  bool ok = kl == 0.0 && pm.total == 0.0 && pm.low == 0.0 && pm.high == 0.0;
  d += "KL(x, x) " + fmt("%g", kl) + ", PSD MSE(x, x) " + fmt("%g", pm.total) + "; ";

  const double mux = 0.3, muy = -0.2, vx = 1.2, vy = 0.7, cxy = 0.5;
  const double sx = std::sqrt(vx), r = cxy / std::sqrt(vx * vy), cs = std::sqrt(vy * (1 - r * r));
  auto draw = [&](CounterRng& g, double& x, double& y) {
    const double u = g.normal(), v = g.normal();
    x = mux + sx * u;
    y = muy + std::sqrt(vy) * r * u + cs * v;
  };
  const long n = 10000000;
  struct Case {
    const char* name;
    double analytic;
    std::function<double(CounterRng&)> f;
  };
  const std::vector<Case> cases = {
      {"E[relu x]", relu_mean(mux, vx), [&](CounterRng& g) { double x, y; draw(g, x, y); return std::max(x, 0.0); }},
      {"E[relu x ^2]", relu_second(mux, vx),
       [&](CounterRng& g) { double x, y; draw(g, x, y); return std::pow(std::max(x, 0.0), 2); }},
      {"P(x > 0)", relu_prob(mux, vx), [&](CounterRng& g) { double x, y; draw(g, x, y); return x > 0 ? 1.0 : 0.0; }},
      {"E[x relu y]", x_relu_y(mux, muy, vy, cxy),
       [&](CounterRng& g) { double x, y; draw(g, x, y); return x * std::max(y, 0.0); }},
      {"E[relu x relu y]", relu_relu(mux, muy, vx, vy, cxy),
       [&](CounterRng& g) { double x, y; draw(g, x, y); return std::max(x, 0.0) * std::max(y, 0.0); }},
  };
  std::uint64_t seed = 1;
  for (const auto& c : cases) {
    const McStat mc = monte_carlo(c.f, n, seed++);
    const double z = std::abs(c.analytic - mc.mean) / mc.se;
    ok = ok && z < 3;
    d += std::string(c.name) + " " + fmt("%.2f", z) + " SE; ";
  }

  const fs::path dir = fs::temp_directory_path() / "plrnn_acceptance_idx";
  fs::create_directories(dir);
  std::vector<std::uint8_t> pixels(3 * 28 * 28);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t((i * 131 + 7) % 256);
  const std::vector<std::uint8_t> labels = {3, 0, 9};
  {
    std::ofstream os(dir / "images", std::ios::binary | std::ios::trunc);
    put_be32(os, 0x803);
    for (std::uint32_t v : {3u, 28u, 28u}) put_be32(os, v);
    os.write(reinterpret_cast<const char*>(pixels.data()), std::streamsize(pixels.size()));
    std::ofstream ol(dir / "labels", std::ios::binary | std::ios::trunc);
    put_be32(ol, 0x801);
    put_be32(ol, 3);
    ol.write(reinterpret_cast<const char*>(labels.data()), 3);
  }
  const IdxFile raw = read_idx(dir / "images", 0x803);
  const TrialSet set = load_sequential_mnist(dir / "images", dir / "labels");
  bool idx_ok = raw.data == pixels && raw.dims == std::vector<std::uint32_t>{3, 28, 28} && set.size() == 3 &&
                set.T == 784 && set.K == 1;
  for (Eigen::Index i = 0; idx_ok && i < 3; ++i) {
    idx_ok = set.targets(i) == labels[i];
    for (Eigen::Index t = 0; idx_ok && t < 784; ++t) idx_ok = set.inputs(t, i) == pixels[i * 784 + t] / 255.0;
  }
  fs::remove_all(dir);
  d += std::string("IDX fixture ") + (idx_ok ? "exact" : "MISMATCH");
  return {ok && idx_ok, d};
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    Verdict (*run)();
  };
  const std::vector<Criterion> all = {
      {1, "exact addition solution", 5, ac1},          {2, "gradient oracles", 30, ac2},
      {3, "gradient bound properties", 120, ac3},      {4, "fixed-point oracle equivalence", 60, ac4},
      {5, "EM sanity", 300, ac5},                      {6, "regularization trend (neuron, EM)", 1800, ac6},
      {7, "addition benchmark T=30", 600, ac7},        {8, "metric self-tests", 60, ac8},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  bool all_pass = true;
  for (const auto& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = s < c.limit_s;
    const bool pass = v.pass && in_time;
    all_pass = all_pass && pass;
    std::cout << "AC" << c.id << " " << (pass ? "PASS" : "FAIL") << "  " << c.name << "  [" << fmt("%.1f", s)
              << " s, limit " << fmt("%g", c.limit_s) << " s" << (in_time ? "" : ", over time") << "]  " << v.detail
              << std::endl;
  }
  return all_pass ? 0 : 1;
}
