#pragma once

// Expectation-maximization for the stochastic PLRNN state-space model
//   z_1 ~ N(mu0 + C s_1, Sigma),  z_t ~ N(A z_{t-1} + W relu(z_{t-1}) + C s_t + h, Sigma),
//   x_t ~ N(B g(z_t), Gamma),     g = identity or relu,
// with a Laplace approximation at the posterior mode in the E-step, closed
// form penalized regressions in the M-step, and staged annealing that
// reweights the latent model against the observations.

#include <filesystem>
#include <string>
#include <vector>

#include "plrnn/regularizers.hpp"

namespace plrnn {

enum class ExpectationMode { delta, rectified_moments };

std::string to_string(ExpectationMode m);
ExpectationMode expectation_mode_from_string(std::string_view name);

struct EmState {
  Vec z_mode;                // T*M; z_t occupies entries [t*M, (t+1)*M)
  std::vector<Mat> v_diag;   // T blocks cov(z_t)
  std::vector<Mat> v_lower;  // T-1 blocks cov(z_{t+1}, z_t)
  VecXb d_omega;             // T*M, z > 0
  std::vector<double> elbo_trace;
  int anneal_stage = 0;
  double objective = 0.0;  // weighted log joint at the mode
  double log_det_v = 0.0;
  int iterations = 0;          // region iterations of the last E-step
  bool converged = false;      // region pattern reproduced itself
  bool loop_detected = false;  // a pattern recurred; best iterate returned
  bool jitter_added = false;

  Eigen::Index length() const { return Eigen::Index(v_diag.size()); }
  Eigen::Index latent_dim() const { return length() ? v_diag.front().rows() : 0; }
  Mat latents() const;  // T x M view of z_mode
  void validate() const;
};

/// Log p(X | Z) + w log p(Z) with all normalizing constants; Z and X are T x M
/// and T x N, S is T x K (K may be 0).
double mode_objective(const Params& p, const Mat& Z, const Mat& X, const Mat& S, double latent_weight = 1.0);

/// Posterior mode by alternating linear solves and region updates, then the
/// tridiagonal blocks of V = (-Hessian)^-1. `z_init` (T*M) warm-starts the
/// iteration and is returned if no iterate beats it. When T * M <= 10 every
/// sign pattern is also tried, which makes the mode global.
EmState estep(const Params& p, const Mat& X, const Mat& S, double latent_weight = 1.0, const Vec* z_init = nullptr,
              int max_iter = 100);

struct Expectations {
  Mat ez;                    // T x M
  Mat ephi;                  // T x M, E[relu(z_t)]
  std::vector<Mat> ezz;      // E[z_t z_t^T]
  std::vector<Mat> ephiz;    // E[relu(z_t) z_t^T]
  std::vector<Mat> ephiphi;  // E[relu(z_t) relu(z_t)^T]
  std::vector<Mat> ez1z;     // E[z_{t+1} z_t^T]
  std::vector<Mat> ez1phi;   // E[z_{t+1} relu(z_t)^T]
  bool clamped_variance = false;
};

/// delta: everything at the mode. rectified_moments: Gaussian moments of the
/// rectified states from the marginal and lag-one covariance blocks.
Expectations expectations(const EmState& em, ExpectationMode mode);

struct MStepFlags {
  bool ridge_added = false;
};

struct MStepOptions {
  bool update_obs = true;    // B
  bool update_gamma = true;  // Gamma
  bool update_sigma = true;  // Sigma
};

/// Maximizes the expected log joint minus T * penalty. Latent rows solve
/// (G + 2 T sigma_m P) theta = c + 2 T sigma_m P theta_target. Parameters
/// switched off in `opts` keep their current values. Variances are floored
/// at 1e-6.
Params mstep(const Params& current, const Expectations& e, const Mat& X, const Mat& S, const RegSpec& reg,
             const MStepOptions& opts = {}, MStepFlags* flags = nullptr);

struct EmConfig {
  std::vector<double> anneal = {1e-3, 1e-2, 1e-1, 0.5, 1.0};  // latent weights per stage
  int max_iter = 50;   // per stage
  double tol = 1e-6;   // relative ELBO change over 5 iterations
  int estep_max_iter = 100;
  int abort_after = 10;  // consecutive ELBO decreases within a stage
  RegSpec reg;
  ExpectationMode mode = ExpectationMode::rectified_moments;
  bool refit_gamma = true;  // keep re-estimating Gamma after stage 0; B stays frozen
  // Keep Sigma at its starting value while the latent weight is below 1. The
  // down-weighted prior widens the posterior by about 1 / weight along weakly
  // observed directions, and refitting Sigma from it feeds back without bound.
  bool hold_sigma_while_annealing = true;

  void validate() const;
};

struct EmIterRecord {
  int stage = 0;
  int iteration = 0;
  double latent_weight = 1.0;
  double objective = 0.0;  // mode objective minus weighted penalty
  double elbo = 0.0;       // Laplace proxy
  bool estep_loop = false;
};

struct EmFit {
  Params params;
  EmState state;
  std::vector<EmIterRecord> trace;
  bool aborted = false;
  std::string diagnostic;
};

/// Starting values for EM: init_plrnn followed by Sigma = 0.1, Gamma = var(X),
/// mu0 = 0.
Params em_initial_params(InitScheme scheme, Eigen::Index M, const Mat& X, Eigen::Index K, int m_reg,
                         std::uint64_t seed, ObsKind obs_kind = ObsKind::relu_gaussian);

/// Runs all anneal stages. B is only refit in stage 0; Gamma in every stage
/// unless refit_gamma is false; Sigma per hold_sigma_while_annealing.
EmFit fit_em(const EmConfig& config, const Params& init, const Mat& X, const Mat& S);

/// CSV: stage, iteration, latent_weight, objective, elbo.
void write_em_trace_csv(const std::filesystem::path& path, const std::vector<EmIterRecord>& trace);

/// State snapshot with the binary + JSON block scheme.
void save_em_state(const std::filesystem::path& stem, const EmState& s);
EmState load_em_state(const std::filesystem::path& stem);

}  // namespace plrnn
