#include "plrnn/metrics.hpp"

#include <cmath>
#include <numbers>

#include <unsupported/Eigen/FFT>

namespace plrnn {

Eigen::Index BinGrid::cells() const {
  Eigen::Index n = 1;
  for (std::size_t i = 0; i < dims.size(); ++i) n *= bins_per_dim;
  return n + 1;
}

Eigen::Index BinGrid::cell_of(const Eigen::Ref<const Vec>& x) const {
  Eigen::Index cell = 0;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const auto [lo, hi] = ranges[i];
    const double v = x(dims[i]);
    if (!(v >= lo && v <= hi)) return cells() - 1;
    auto b = static_cast<Eigen::Index>((v - lo) / (hi - lo) * bins_per_dim);
    b = std::min<Eigen::Index>(b, bins_per_dim - 1);
    cell = cell * bins_per_dim + b;
  }
  return cell;
}

BinGrid make_grid(const Mat& reference, int bins_per_dim, std::vector<Eigen::Index> dims, double margin) {
  if (reference.rows() == 0) throw ShapeError("make_grid: empty reference");
  if (bins_per_dim < 1) throw ConfigError("bins_per_dim", "must be at least 1");
  if (dims.empty())
    for (Eigen::Index d = 0; d < std::min<Eigen::Index>(3, reference.cols()); ++d) dims.push_back(d);
  BinGrid g;
  g.bins_per_dim = bins_per_dim;
  for (auto d : dims) {
    if (d < 0 || d >= reference.cols()) throw ShapeError("make_grid: dimension out of range");
    const double lo = reference.col(d).minCoeff(), hi = reference.col(d).maxCoeff();
    double pad = margin * (hi - lo);
    if (pad == 0.0) pad = std::max(1e-9, margin * std::abs(lo));
    g.ranges.emplace_back(lo - pad, hi + pad);
  }
  g.dims = std::move(dims);
  return g;
}

BinnedDensity bin_density(const Mat& x, const BinGrid& grid) {
  if (x.rows() == 0) throw ShapeError("bin_density: no samples");
  const auto n = grid.cells();
  Vec counts = Vec::Zero(n);
  for (Eigen::Index t = 0; t < x.rows(); ++t) counts(grid.cell_of(x.row(t).transpose())) += 1.0;
  BinnedDensity d;
  d.dims_used = grid.dims;
  d.bins_per_dim = grid.bins_per_dim;
  d.ranges = grid.ranges;
  d.epsilon = 1.0 / (10.0 * double(n));
  d.probs = (counts / double(x.rows())).array() + d.epsilon;
  d.probs /= 1.0 + d.epsilon * double(n);
  return d;
}

double kl_state_space(const Mat& true_obs, const Mat& gen_obs, int bins_per_dim, std::vector<Eigen::Index> dims) {
  if (true_obs.rows() == 0) throw ShapeError("kl_state_space: empty true trajectory");
  if (gen_obs.rows() == 0 || !gen_obs.allFinite()) return std::numeric_limits<double>::infinity();
  if (gen_obs.cols() != true_obs.cols()) throw ShapeError("kl_state_space: dimension mismatch");
  const BinGrid g = make_grid(true_obs, bins_per_dim, std::move(dims));
  const Vec p = bin_density(true_obs, g).probs;
  const Vec q = bin_density(gen_obs, g).probs;
  return std::max(0.0, (p.array() * (p.array() / q.array()).log()).sum());
}

namespace {

struct Component {
  Vec mean;
  Mat chol;  // lower Cholesky factor
  double log_norm;
};

std::vector<Component> factor_mixture(const GaussianMixture& m, bool& jittered) {
  if (m.means.rows() == 0 || Eigen::Index(m.covs.size()) != m.means.rows())
    throw ShapeError("mixture needs one covariance per component");
  const auto D = m.means.cols();
  std::vector<Component> out;
  out.reserve(m.covs.size());
  for (std::size_t i = 0; i < m.covs.size(); ++i) {
    require_shape(m.covs[i], D, D, "mixture covariance");
    Mat c = 0.5 * (m.covs[i] + m.covs[i].transpose());
    Eigen::LLT<Mat> llt(c);
    double jitter = 1e-10 * (1.0 + c.diagonal().cwiseAbs().maxCoeff());
    while (llt.info() != Eigen::Success || (llt.matrixL().toDenseMatrix().diagonal().array() <= 0).any()) {
      jittered = true;
      c.diagonal().array() += jitter;
      jitter *= 10.0;
      llt.compute(c);
    }
    Component k;
    k.mean = m.means.row(Eigen::Index(i)).transpose();
    k.chol = llt.matrixL();
    k.log_norm = -0.5 * double(D) * std::log(2.0 * std::numbers::pi) - k.chol.diagonal().array().log().sum();
    out.push_back(std::move(k));
  }
  return out;
}

double log_mixture(const std::vector<Component>& ks, const Vec& z) {
  std::vector<double> l(ks.size());
  double mx = -INFINITY;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const Vec u = ks[i].chol.triangularView<Eigen::Lower>().solve(z - ks[i].mean);
    l[i] = ks[i].log_norm - 0.5 * u.squaredNorm();
    mx = std::max(mx, l[i]);
  }
  double s = 0.0;
  for (double v : l) s += std::exp(v - mx);
  return mx + std::log(s / double(ks.size()));
}

}  // namespace

McEstimate kl_mixture(const GaussianMixture& p, const GaussianMixture& q, int n_mc, std::uint64_t seed) {
  if (n_mc < 2) throw ConfigError("n_mc", "needs at least two samples");
  if (p.means.cols() != q.means.cols()) throw ShapeError("kl_mixture: dimension mismatch");
  McEstimate est;
  const auto kp = factor_mixture(p, est.jittered);
  const auto kq = factor_mixture(q, est.jittered);
  CounterRng rng(seed, 0x6b6c);
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n_mc; ++i) {
    const auto& k = kp[rng.below(kp.size())];
    const Vec z = k.mean + k.chol * rng.normal_vec(k.mean.size());
    const double v = log_mixture(kp, z) - log_mixture(kq, z);
    s += v;
    s2 += v * v;
  }
  est.value = s / n_mc;
  est.std_error = std::sqrt(std::max(0.0, s2 / n_mc - est.value * est.value) / (n_mc - 1));
  return est;
}

McEstimate kl_latent_proxy(const Params& p, const EmState& posterior, const Mat& inputs, int n_mc,
                           std::uint64_t seed) {
  posterior.validate();
  const auto T = posterior.length(), M = posterior.latent_dim();
  if (M != p.latent_dim()) throw ShapeError("kl_latent_proxy: state and model dimensions differ");
  GaussianMixture inf{posterior.latents(), posterior.v_diag};
  GaussianMixture gen;
  gen.means = Mat(T, M);
  gen.covs.assign(T, Mat(p.sigma_diag.asDiagonal()));
  const bool has_inputs = p.input_dim() > 0;
  if (has_inputs) require_shape(inputs, T, p.input_dim(), "inputs");
  CounterRng rng(seed, 0x9e4);
  const Vec sd = p.sigma_diag.cwiseMax(0.0).cwiseSqrt();
  Vec z;
  for (Eigen::Index t = 0; t < T; ++t) {
    Vec mean = t == 0 ? Vec(p.mu0) : step_latent(p, z, has_inputs ? Vec(inputs.row(t).transpose()) : Vec());
    if (t == 0 && has_inputs) mean += p.c_input * inputs.row(0).transpose();
    gen.means.row(t) = mean.transpose();
    z = mean + sd.cwiseProduct(rng.normal_vec(M));
    if (!z.allFinite() || z.cwiseAbs().maxCoeff() > kDivergenceBound)
      return {std::numeric_limits<double>::infinity(), 0.0, false};
  }
  return kl_mixture(inf, gen, n_mc, seed);
}

Spectrum power_spectrum(const Vec& series, double sample_rate_hz) {
  const auto n = series.size();
  if (n < 256) throw ShapeError("power_spectrum: needs at least 256 samples, got " + std::to_string(n));
  if (!(sample_rate_hz > 0)) throw ConfigError("sample_rate_hz", "must be positive");
  const double mean = series.mean();
  const double sd = std::sqrt((series.array() - mean).square().sum() / double(n));
  if (!(sd > 1e-12 * (1.0 + std::abs(mean)))) throw PlrnnError("power_spectrum: constant series cannot be standardized");
  std::vector<double> x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(i) / double(n - 1));
    x[i] = hann * (series(i) - mean) / sd;
  }
  Eigen::FFT<double> fft;
  std::vector<std::complex<double>> X;
  fft.fwd(X, x);
  const auto nf = n / 2 + 1;
  Vec raw(nf);
  for (Eigen::Index k = 0; k < nf; ++k) raw(k) = std::norm(X[k]);
  Spectrum s;
  s.freq_hz = Vec::LinSpaced(nf, 0.0, double(nf - 1)).array() * (sample_rate_hz / double(n));
  s.power = Vec(nf);
  for (Eigen::Index k = 0; k < nf; ++k) {
    const auto lo = std::max<Eigen::Index>(0, k - 2), hi = std::min<Eigen::Index>(nf - 1, k + 2);
    s.power(k) = raw.segment(lo, hi - lo + 1).mean();
  }
  s.power /= s.power.sum();
  return s;
}

PsdMse psd_mse(const Vec& true_series, const Vec& gen_series, double sample_rate_hz, double split_hz) {
  if (true_series.size() != gen_series.size()) throw ShapeError("psd_mse: series lengths differ");
  const Spectrum a = power_spectrum(true_series, sample_rate_hz);
  const Spectrum b = power_spectrum(gen_series, sample_rate_hz);
  const Vec d2 = (a.power - b.power).cwiseAbs2();
  PsdMse r;
  r.total = d2.mean();
  double lo = 0, hi = 0;
  int nlo = 0, nhi = 0;
  for (Eigen::Index k = 0; k < d2.size(); ++k) {
    if (a.freq_hz(k) <= split_hz) {
      lo += d2(k);
      ++nlo;
    } else {
      hi += d2(k);
      ++nhi;
    }
  }
  r.low = nlo ? lo / nlo : 0.0;
  r.high = nhi ? hi / nhi : 0.0;
  return r;
}

double nstep_mse(const Params& p, const Mat& X, const Mat& S, int n) {
  if (n < 1) throw ConfigError("n", "horizon must be at least 1");
  const auto T = X.rows();
  if (T <= n) throw ShapeError("nstep_mse: series shorter than the horizon");
  const Mat Z = estep(p, X, S).latents();
  const bool has_inputs = p.input_dim() > 0;
  double total = 0.0;
  for (Eigen::Index t = 0; t + n < T; ++t) {
    Vec z = Z.row(t).transpose();
    for (int k = 1; k <= n; ++k) z = step_latent(p, z, has_inputs ? Vec(S.row(t + k).transpose()) : Vec());
    total += (X.row(t + n).transpose() - observe(p, z)).squaredNorm();
  }
  return total / double(T - n);
}

}  // namespace plrnn
