#pragma once

// Evaluation measures for reconstructed dynamics: binned state-space KL
// divergence, a Monte Carlo KL between Gaussian mixtures over latent space,
// power-spectrum MSE with a frequency split, and n-step prediction error.

#include <vector>

#include "plrnn/train_em.hpp"

namespace plrnn {

/// Regular grid over selected observation dimensions. Points outside the
/// grid fall into one extra overflow cell.
struct BinGrid {
  std::vector<Eigen::Index> dims;
  int bins_per_dim = 30;
  std::vector<std::pair<double, double>> ranges;

  Eigen::Index cells() const;  // grid cells plus the overflow cell
  Eigen::Index cell_of(const Eigen::Ref<const Vec>& x) const;
};

/// Ranges from `reference` widened by `margin` of their span on each side.
/// Empty `dims` selects the first min(3, N) dimensions.
BinGrid make_grid(const Mat& reference, int bins_per_dim = 30, std::vector<Eigen::Index> dims = {},
                  double margin = 0.05);

struct BinnedDensity {
  std::vector<Eigen::Index> dims_used;
  int bins_per_dim = 0;
  std::vector<std::pair<double, double>> ranges;
  Vec probs;  // smoothed, sums to 1, all positive
  double epsilon = 0.0;
};

/// Histogram of the rows of `x` on `grid`, smoothed as (p + eps) / (1 + eps * cells)
/// with eps = 1 / (10 * cells).
BinnedDensity bin_density(const Mat& x, const BinGrid& grid);

/// D_KL(p_true || p_gen) in nats between binned densities of the rows of the
/// two trajectories, on a grid fitted to `true_obs`. Returns +infinity when
/// `gen_obs` is empty or holds a non-finite value (a diverged simulation).
double kl_state_space(const Mat& true_obs, const Mat& gen_obs, int bins_per_dim = 30,
                      std::vector<Eigen::Index> dims = {});

/// Equal-weight Gaussian mixture.
struct GaussianMixture {
  Mat means;              // components x dim
  std::vector<Mat> covs;  // one per component
};

struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
  bool jittered = false;  // a covariance needed jitter to factor
};

/// Monte Carlo estimate of D_KL(p || q) with n_mc samples drawn from p.
McEstimate kl_mixture(const GaussianMixture& p, const GaussianMixture& q, int n_mc, std::uint64_t seed);

/// Latent-space proxy: posterior mixture (1/T) sum_t N(z*_t, V_t) from an E-step
/// against the prior mixture (1/T) sum_t N(F(z_{t-1}), Sigma) along a
/// free-running simulation of the model of length T started at mu0.
McEstimate kl_latent_proxy(const Params& p, const EmState& posterior, const Mat& inputs, int n_mc,
                           std::uint64_t seed);

struct PsdMse {
  double total = 0.0;
  double low = 0.0;   // bins with frequency <= split_hz
  double high = 0.0;  // bins with frequency > split_hz
};

struct Spectrum {
  Vec freq_hz;
  Vec power;  // normalized to sum 1
};

/// Standardized, Hann-windowed periodogram smoothed by a 5-bin moving average.
/// Needs at least 256 samples; a constant series throws PlrnnError.
Spectrum power_spectrum(const Vec& series, double sample_rate_hz);

PsdMse psd_mse(const Vec& true_series, const Vec& gen_series, double sample_rate_hz, double split_hz);

/// Mean over t of |x_{t+n} - x_hat_{t+n}|^2, where x_hat runs the model
/// noiselessly for n steps from the E-step mode at t. The mode comes from a
/// single E-step over the whole series.
double nstep_mse(const Params& p, const Mat& X, const Mat& S, int n);

}  // namespace plrnn
