#include "plrnn/analysis.hpp"

#include <algorithm>
#include <limits>
#include <set>

namespace plrnn {

namespace {

VecXb code_to_region(std::uint64_t code, Eigen::Index M) {
  VecXb d(M);
  for (Eigen::Index m = 0; m < M; ++m) d(m) = (code >> m) & 1u;
  return d;
}

struct Solve {
  Vec z;
  bool singular = false;
  bool consistent = true;
};

// (I - P) z = c; minimum-norm least squares when I - P is singular.
Solve solve_shifted(const Mat& P, const Vec& c) {
  const Mat S = Mat::Identity(P.rows(), P.cols()) - P;
  Eigen::FullPivLU<Mat> lu(S);
  lu.setThreshold(1e-10);
  Solve out;
  if (lu.isInvertible()) {
    out.z = lu.solve(c);
    return out;
  }
  out.singular = true;
  Eigen::CompleteOrthogonalDecomposition<Mat> cod(S);
  cod.setThreshold(1e-10);
  out.z = cod.solve(c);
  out.consistent = (S * out.z - c).norm() <= 1e-9 * (1.0 + c.norm());
  return out;
}

Eigen::VectorXcd eigenvalues(const Mat& m) {
  Eigen::EigenSolver<Mat> es(m, false);
  return es.eigenvalues();
}

bool lex_less(const Mat& pts, Eigen::Index a, Eigen::Index b) {
  for (Eigen::Index j = 0; j < pts.cols(); ++j) {
    if (pts(a, j) < pts(b, j)) return true;
    if (pts(a, j) > pts(b, j)) return false;
  }
  return false;
}

CycleReport make_cycle(const Params& p, const Mat& points, const std::vector<VecXb>& seq, bool singular) {
  const auto k = static_cast<Eigen::Index>(seq.size());
  Eigen::Index r0 = 0;
  for (Eigen::Index r = 1; r < k; ++r)
    if (lex_less(points, r, r0)) r0 = r;
  CycleReport c;
  c.k = static_cast<int>(k);
  c.points.resize(k, points.cols());
  Mat P = Mat::Identity(p.latent_dim(), p.latent_dim());
  for (Eigen::Index i = 0; i < k; ++i) {
    const Eigen::Index src = (i + r0) % k;
    c.points.row(i) = points.row(src);
    c.regions.push_back(make_region(p, seq[src]));
    P = c.regions.back().w_omega * P;
  }
  c.admissible = true;
  c.degenerate = singular;
  c.eigvals = eigenvalues(P);
  c.max_abs_eig = c.eigvals.cwiseAbs().maxCoeff();
  c.stable = c.max_abs_eig < 1.0;
  return c;
}

bool same_cycle(const CycleReport& a, const CycleReport& b) {
  if (a.k != b.k) return false;
  const double scale = 1.0 + a.points.cwiseAbs().maxCoeff();
  return (a.points - b.points).cwiseAbs().maxCoeff() <= 1e-8 * scale;
}

// Solves the k-cycle conditions for a fixed region sequence and files the
// result into `out`.
void try_sequence(const Params& p, const std::vector<VecXb>& seq, CycleSearchResult& out) {
  const auto M = p.latent_dim();
  const auto k = seq.size();
  ++out.candidates;
  std::vector<Mat> W;
  Mat P = Mat::Identity(M, M);
  Vec c = Vec::Zero(M);
  for (const auto& d : seq) {
    W.push_back(make_region(p, d).w_omega);
    c = W.back() * c + p.h_bias;
    P = W.back() * P;
  }
  const Solve s = solve_shifted(P, c);
  if (s.singular) ++out.degenerate_count;
  if (!s.consistent) return;
  Mat pts(k, M);
  Vec z = s.z;
  for (std::size_t i = 0; i < k; ++i) {
    pts.row(i) = z.transpose();
    if (region_indicator(z, kTolZero) != seq[i]) return;
    z = W[i] * z + p.h_bias;
  }
  // Minimal period k.
  const double scale = 1.0 + pts.cwiseAbs().maxCoeff();
  for (std::size_t j = 1; j < k; ++j) {
    if (k % j != 0) continue;
    if ((pts.row(j) - pts.row(0)).cwiseAbs().maxCoeff() <= 1e-10 * scale) return;
  }
  CycleReport rep = make_cycle(p, pts, seq, s.singular);
  auto& list = s.singular ? out.degenerate : out.cycles;
  for (const auto& e : list)
    if (same_cycle(e, rep)) return;
  list.push_back(std::move(rep));
}

// Region-sequence digits; returns true if this rotation is the canonical
// (lexicographically smallest) one and the sequence is primitive.
bool canonical_primitive(const std::vector<std::uint64_t>& digits) {
  const auto k = digits.size();
  for (std::size_t r = 1; r < k; ++r) {
    for (std::size_t i = 0; i < k; ++i) {
      const auto a = digits[(i + r) % k], b = digits[i];
      if (a < b) return false;
      if (a > b) break;
      if (i + 1 == k) return false;  // rotation equals itself: not primitive
    }
  }
  return true;
}

}  // namespace

double spectral_norm(const Mat& m) {
  if (m.size() == 0) return 0.0;
  const Mat g = m.rows() <= m.cols() ? Mat(m * m.transpose()) : Mat(m.transpose() * m);
  Eigen::SelfAdjointEigenSolver<Mat> es(g, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

FixedPointReport analyze_region(const Params& p, const VecXb& d) {
  FixedPointReport r;
  r.region = make_region(p, d);
  const Solve s = solve_shifted(r.region.w_omega, p.h_bias);
  r.degenerate = s.singular;
  r.consistent = s.consistent;
  if (s.consistent) {
    r.z_star = s.z;
    r.admissible = region_indicator(s.z, kTolZero) == d;
  }
  r.eigvals = eigenvalues(r.region.w_omega);
  r.max_abs_eig = r.eigvals.cwiseAbs().maxCoeff();
  r.stable = r.max_abs_eig < 1.0;
  return r;
}

std::vector<FixedPointReport> enumerate_fixed_points(const Params& p, const SearchMode& mode) {
  p.validate();
  const auto M = p.latent_dim();
  std::vector<FixedPointReport> out;
  if (mode.kind == SearchMode::Kind::exhaustive) {
    if (M > 20) throw ConfigError("mode", "exhaustive region enumeration needs M <= 20");
    const std::uint64_t n = std::uint64_t(1) << M;
    out.reserve(n);
    for (std::uint64_t code = 0; code < n; ++code) out.push_back(analyze_region(p, code_to_region(code, M)));
    return out;
  }
  if (mode.n_regions < 1) throw ConfigError("mode.n_regions", "must be positive");
  CounterRng rng(mode.seed, 0xf1f0);
  std::set<std::vector<bool>> seen;
  const double total = std::ldexp(1.0, int(std::min<Eigen::Index>(M, 60)));
  const auto target = static_cast<std::size_t>(std::min<double>(mode.n_regions, total));
  while (seen.size() < target) {
    std::vector<bool> key(M);
    VecXb d(M);
    for (Eigen::Index m = 0; m < M; ++m) key[m] = d(m) = rng() & 1u;
    if (seen.insert(key).second) out.push_back(analyze_region(p, d));
  }
  return out;
}

CycleSearchResult find_cycles(const Params& p, int k_max, const SearchMode& mode) {
  p.validate();
  if (k_max < 2) throw ConfigError("k_max", "must be at least 2");
  const auto M = p.latent_dim();
  CycleSearchResult out;
  int k_sim_from = k_max + 1;
  for (int k = 2; k <= k_max; ++k) {
    if (mode.kind != SearchMode::Kind::exhaustive || M * k > 16) {
      k_sim_from = k;
      break;
    }
    const std::uint64_t n = std::uint64_t(1) << (M * k);
    const std::uint64_t mask = (std::uint64_t(1) << M) - 1;
    std::vector<std::uint64_t> digits(k);
    std::vector<VecXb> seq(k);
    for (std::uint64_t code = 0; code < n; ++code) {
      for (int i = 0; i < k; ++i) digits[i] = (code >> (M * i)) & mask;
      if (!canonical_primitive(digits)) continue;
      for (int i = 0; i < k; ++i) seq[i] = code_to_region(digits[i], M);
      try_sequence(p, seq, out);
    }
  }
  if (k_sim_from > k_max) return out;

  // Simulation search: find attracting orbits, then solve their region
  // sequence exactly.
  const int n_starts = mode.n_regions > 0 ? mode.n_regions : 100;
  CounterRng rng(mode.seed, 0xc7c1e);
  const double spread = 2.0 * (1.0 + p.h_bias.cwiseAbs().maxCoeff());
  const int burn = 5000;
  for (int s = 0; s < n_starts; ++s) {
    Vec z = spread * rng.normal_vec(M);
    bool ok = true;
    for (int t = 0; t < burn && ok; ++t) {
      z = step_latent(p, z);
      ok = z.allFinite() && z.cwiseAbs().maxCoeff() < kDivergenceBound;
    }
    if (!ok) continue;
    std::vector<Vec> orbit{z};
    for (int t = 0; t < k_max; ++t) orbit.push_back(step_latent(p, orbit.back()));
    const double scale = 1.0 + z.cwiseAbs().maxCoeff();
    for (int k = 2; k <= k_max; ++k) {
      if ((orbit[k] - orbit[0]).cwiseAbs().maxCoeff() > 1e-8 * scale) continue;
      bool shorter = false;
      for (int j = 1; j < k && !shorter; ++j)
        shorter = k % j == 0 && (orbit[j] - orbit[0]).cwiseAbs().maxCoeff() <= 1e-8 * scale;
      if (shorter || k < k_sim_from) break;
      std::vector<VecXb> seq;
      for (int i = 0; i < k; ++i) seq.push_back(region_indicator(orbit[i], 0.0));
      try_sequence(p, seq, out);
      break;
    }
  }
  return out;
}

double jacobian_product_norm(const Params& p, const Traj& traj, Eigen::Index t, Eigen::Index T) {
  if (!(1 <= t && t < T && T <= traj.latents.rows()))
    throw ShapeError("jacobian_product_norm: need 1 <= t < T <= trajectory length");
  require_shape(traj.latents, traj.latents.rows(), p.latent_dim(), "latents");
  Mat J = Mat::Identity(p.latent_dim(), p.latent_dim());
  for (Eigen::Index k = t + 1; k <= T; ++k) J = region_at(p, traj.latents.row(k - 2).transpose()).w_omega * J;
  return spectral_norm(J);
}

SensitivityRecursion::SensitivityRecursion(const Params& p, const Vec& z0) : p_(p), z_(z0) {
  const auto M = p.latent_dim(), K = p.input_dim();
  require_size(z0, M, "z0");
  ga_ = Mat::Zero(M, M);
  gw_ = Mat::Zero(M, M * M);
  gc_ = Mat::Zero(M, M * K);
  gh_ = Mat::Zero(M, M);
  gz0_ = Mat::Identity(M, M);
  jac_ = Mat::Zero(M, M);
}

void SensitivityRecursion::step(const Vec& s_t) {
  const auto M = p_.latent_dim(), K = p_.input_dim();
  jac_ = region_at(p_, z_).w_omega;
  const Vec phi = relu(z_);
  ga_ = jac_ * ga_;
  gw_ = jac_ * gw_;
  gh_ = jac_ * gh_;
  gz0_ = jac_ * gz0_;
  if (K > 0) gc_ = jac_ * gc_;
  for (Eigen::Index m = 0; m < M; ++m) {
    ga_(m, m) += z_(m);
    gh_(m, m) += 1.0;
    for (Eigen::Index k = 0; k < M; ++k)
      if (k != m) gw_(m, m * M + k) += phi(k);
    if (s_t.size() > 0)
      for (Eigen::Index k = 0; k < K; ++k) gc_(m, m * K + k) += s_t(k);
  }
  z_ = step_latent(p_, z_, s_t);
  ++t_;
}

TheoremCheckReport check_theorems(const Params& p, const Vec& z0, Eigen::Index T_max) {
  p.validate();
  if (T_max < 1) throw ConfigError("T_max", "must be positive");
  const auto M = p.latent_dim();
  const int mr = p.m_reg;
  TheoremCheckReport rep;
  SensitivityRecursion rec(p, z0);

  constexpr int kMaxPeriod = 20;
  constexpr double kTol = 1e-9;
  std::vector<Vec> hist{z0};  // last kMaxPeriod + 1 states
  std::vector<int> run(kMaxPeriod + 1, 0);
  rep.state_norm_max = z0.norm();
  rep.lambda_low = std::numeric_limits<double>::infinity();
  rep.lambda_up = 0.0;

  for (Eigen::Index T = 1; T <= T_max; ++T) {
    rec.step();
    const Vec& z = rec.z();
    if (!z.allFinite() || z.cwiseAbs().maxCoeff() > kDivergenceBound) {
      rep.diverged = true;
      rep.converged_to = ConvergenceKind::none;
      break;
    }
    rep.visited_sigma_max = std::max(rep.visited_sigma_max, spectral_norm(rec.last_jacobian()));
    rep.jacobian_norms.push_back(spectral_norm(rec.dz_dz0()));
    rep.grad_w_norms.push_back(spectral_norm(rec.dz_dw()));
    rep.grad_a_norms.push_back(spectral_norm(rec.dz_da()));
    rep.grad_h_norms.push_back(spectral_norm(rec.dz_dh()));
    if (mr > 0 && mr < M) {
      const double cross = rec.dz_dz0().bottomLeftCorner(M - mr, mr).cwiseAbs().maxCoeff();
      rep.lambda_low = std::min(rep.lambda_low, cross);
      rep.lambda_up = std::max(rep.lambda_up, cross);
    }
    // The last state does not enter any sensitivity up to T_max.
    if (T < T_max) rep.state_norm_max = std::max(rep.state_norm_max, z.norm());

    hist.push_back(z);
    if (hist.size() > kMaxPeriod + 1) hist.erase(hist.begin());
    if (rep.converged_at < 0) {
      const auto n = hist.size();
      for (int k = 1; k <= kMaxPeriod; ++k) {
        if (n <= std::size_t(k)) break;
        run[k] = (hist[n - 1] - hist[n - 1 - k]).cwiseAbs().maxCoeff() < kTol ? run[k] + 1 : 0;
      }
      for (int k = 1; k <= kMaxPeriod; ++k) {
        if (run[k] >= 10 * k) {
          rep.converged_to = k == 1 ? ConvergenceKind::fixed_point : ConvergenceKind::cycle;
          rep.cycle_k = k;
          rep.converged_at = T;
          break;
        }
      }
    }
  }
  if (rep.lambda_low == std::numeric_limits<double>::infinity()) rep.lambda_low = 0.0;
  if (!rep.jacobian_norms.empty()) {
    rep.rho_low = *std::min_element(rep.jacobian_norms.begin(), rep.jacobian_norms.end());
    rep.rho_up = *std::max_element(rep.jacobian_norms.begin(), rep.jacobian_norms.end());
  }
  if (rep.converged_to != ConvergenceKind::none) {
    const auto n = hist.size();
    for (int i = 0; i < rep.cycle_k && std::size_t(i) < n; ++i)
      rep.attractor_sigma_max =
          std::max(rep.attractor_sigma_max, spectral_norm(region_at(p, hist[n - 1 - i]).w_omega));
  }
  const double s = rep.visited_sigma_max;
  if (s < 1.0) {
    const double q = rep.state_norm_max;
    rep.bound_w = std::sqrt(double(M)) * q / (1.0 - s);
    rep.bound_a = q / (1.0 - s);
    rep.bound_h = 1.0 / (1.0 - s);
  } else {
    rep.bound_w = rep.bound_a = rep.bound_h = std::numeric_limits<double>::infinity();
  }
  return rep;
}

bool norms_plateau(const std::vector<double>& norms, Eigen::Index start, double factor) {
  const auto n = static_cast<Eigen::Index>(norms.size());
  if (n <= start) return true;
  const double ref = *std::max_element(norms.begin(), norms.begin() + start);
  for (Eigen::Index i = start; i < n; ++i)
    if (norms[i] > factor * ref) return false;
  return true;
}

double theorem2_rho_bound(const Params& p) {
  p.validate();
  const auto M = p.latent_dim();
  const int mr = p.m_reg;
  if (mr < 1) throw ConfigError("m_reg", "need at least one regularized unit");
  for (int i = 0; i < mr; ++i) {
    if (p.a_diag(i) != 1.0 || !p.w_offdiag.row(i).isZero(0) || p.h_bias(i) != 0.0)
      throw ConfigError("params", "unit " + std::to_string(i) + " is not an exact manifold-attractor unit");
  }
  const auto F = M - mr;
  if (F == 0) return 1.0;
  if (F > 20) throw ConfigError("m_reg", "too many free units to enumerate their regions");
  const Mat S = p.w_offdiag.bottomLeftCorner(F, mr);
  const Mat Wf = p.w_offdiag.bottomRightCorner(F, F);
  double s = 0.0;
  for (std::uint64_t code = 0; code < (std::uint64_t(1) << F); ++code) {
    Mat B = Wf * code_to_region(code, F).cast<double>().asDiagonal();
    B.diagonal() += p.a_diag.tail(F);
    s = std::max(s, spectral_norm(B));
  }
  if (s >= 1.0) return std::numeric_limits<double>::infinity();
  const double m_nreg = 1.0 / (1.0 - s);
  const double sn = spectral_norm(S);
  return std::sqrt(1.0 + sn * sn * m_nreg * m_nreg);
}

EigHistogram eig_histogram(const std::vector<std::vector<FixedPointReport>>& systems, int n_bins, double lo,
                           double hi) {
  if (systems.empty()) throw PlrnnError("eig_histogram: empty report list");
  if (n_bins < 1 || !(hi > lo)) throw ConfigError("bins", "need n_bins >= 1 and hi > lo");
  EigHistogram h;
  const double w = (hi - lo) / n_bins;
  for (int b = 0; b < n_bins; ++b) {
    h.bin_left.push_back(lo + b * w);
    h.bin_right.push_back(lo + (b + 1) * w);
  }
  h.counts.assign(n_bins, 0);
  for (const auto& sys : systems) {
    double dev = std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : sys) {
      if (r.degenerate) {
        ++h.excluded_degenerate;
        continue;
      }
      if (!r.admissible) {
        ++h.excluded_inadmissible;
        continue;
      }
      ++h.included;
      const int b = std::clamp(int(std::floor((r.max_abs_eig - lo) / w)), 0, n_bins - 1);
      ++h.counts[b];
      const double d = std::abs(r.max_abs_eig - 1.0);
      if (std::isnan(dev) || d < dev) dev = d;
    }
    h.system_deviation.push_back(dev);
  }
  return h;
}

}  // namespace plrnn
