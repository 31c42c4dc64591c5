#pragma once

// Analytic tools for piecewise-linear maps: fixed points and k-cycles by
// region enumeration, Jacobian products, forward parameter sensitivities,
// and empirical checks of the gradient-boundedness results.

#include <complex>
#include <vector>

#include "plrnn/core.hpp"

namespace plrnn {

/// Admissibility tolerance: a coordinate counts as positive iff z_m > kTolZero.
inline constexpr double kTolZero = 1e-12;

struct SearchMode {
  enum class Kind { exhaustive, sampled };
  Kind kind = Kind::exhaustive;
  int n_regions = 0;  // sampled: number of distinct regions / initial conditions
  std::uint64_t seed = 0;

  static SearchMode exhaustive() { return {}; }
  static SearchMode sampled(int n, std::uint64_t seed) { return {Kind::sampled, n, seed}; }
};

struct FixedPointReport {
  Vec z_star;  // empty when degenerate and inconsistent
  Region region;
  bool admissible = false;
  bool degenerate = false;  // I - W_omega singular
  bool consistent = true;   // degenerate only: h lies in the range of I - W_omega
  Eigen::VectorXcd eigvals;
  bool stable = false;
  double max_abs_eig = 0.0;
};

/// Solves (I - W_omega) z = h for every candidate region. Degenerate regions
/// report the minimum-norm solution when one exists. Exhaustive mode needs M <= 20.
std::vector<FixedPointReport> enumerate_fixed_points(const Params& p,
                                                     const SearchMode& mode = SearchMode::exhaustive());

/// Fixed point analysis of one region.
FixedPointReport analyze_region(const Params& p, const VecXb& d);

struct CycleReport {
  int k = 0;
  Mat points;  // k x M, rotated so row 0 is lexicographically smallest
  std::vector<Region> regions;
  bool admissible = false;
  bool degenerate = false;
  Eigen::VectorXcd eigvals;  // of W_omega(k-1) ... W_omega(0)
  double max_abs_eig = 0.0;
  bool stable = false;
};

struct CycleSearchResult {
  std::vector<CycleReport> cycles;      // admissible, non-degenerate
  std::vector<CycleReport> degenerate;  // admissible minimum-norm representatives of singular candidates
  long degenerate_count = 0;            // all singular candidates encountered
  long candidates = 0;
};

/// Exhaustive over region sequences while M * k <= 16, seeded simulation plus
/// exact per-sequence solve otherwise (or whenever mode is sampled).
CycleSearchResult find_cycles(const Params& p, int k_max,
                              const SearchMode& mode = SearchMode::exhaustive());

/// 2-norm of dz_T/dz_t along `traj` (rows are z_1..z_T), 1 <= t < T <= length.
double jacobian_product_norm(const Params& p, const Traj& traj, Eigen::Index t, Eigen::Index T);

/// Largest singular value.
double spectral_norm(const Mat& m);

/// Forward recursion for dz_t/dtheta, advanced one step at a time:
///   G_t = W_omega(z_{t-1}) G_{t-1} + direct term.
/// Column layout: dz_dw(:, m*M + k) = dz/dw_mk, dz_dc(:, m*K + k) = dz/dc_mk,
/// dz_da(:, m) = dz/da_mm, dz_dh(:, m) = dz/dh_m, dz_dz0 = dz_t/dz_0.
class SensitivityRecursion {
 public:
  SensitivityRecursion(const Params& p, const Vec& z0);

  /// Advances to the next state; `s_t` may be empty.
  void step(const Vec& s_t = {});

  const Vec& z() const { return z_; }
  Eigen::Index t() const { return t_; }
  const Mat& dz_da() const { return ga_; }
  const Mat& dz_dw() const { return gw_; }
  const Mat& dz_dc() const { return gc_; }
  const Mat& dz_dh() const { return gh_; }
  const Mat& dz_dz0() const { return gz0_; }
  /// W_omega used in the most recent step.
  const Mat& last_jacobian() const { return jac_; }

 private:
  const Params& p_;
  Vec z_;
  Eigen::Index t_ = 0;
  Mat ga_, gw_, gc_, gh_, gz0_, jac_;
};

enum class ConvergenceKind { fixed_point, cycle, none };

struct TheoremCheckReport {
  std::vector<double> jacobian_norms;  // entry T-1: ||dz_T/dz_0||
  std::vector<double> grad_w_norms;    // ||dz_T/dW|| (M x M^2 flattening)
  std::vector<double> grad_a_norms;
  std::vector<double> grad_h_norms;
  double rho_low = 0.0, rho_up = 0.0;        // empirical min / max of jacobian_norms
  double lambda_low = 0.0, lambda_up = 0.0;  // over T of max |dz_iT/dz_j0|, i free, j regularized
  ConvergenceKind converged_to = ConvergenceKind::none;
  int cycle_k = 0;                 // 1 for a fixed point
  Eigen::Index converged_at = -1;  // step at which convergence was detected
  bool diverged = false;
  double attractor_sigma_max = 0.0;  // max sigma_max(W_omega) over the attractor's regions
  double visited_sigma_max = 0.0;    // max sigma_max(W_omega) over all visited regions
  double state_norm_max = 0.0;       // max ||z_t||_2 over the run
  // Closed-form bounds on the flattened tensors, valid when visited_sigma_max < 1.
  double bound_w = 0.0, bound_a = 0.0, bound_h = 0.0;
};

/// Noiseless autonomous run of T_max steps from z0 tracking the sensitivities.
TheoremCheckReport check_theorems(const Params& p, const Vec& z0, Eigen::Index T_max);

/// True when norms[T-1] <= factor * max(norms[0..start-1]) for every T > start.
bool norms_plateau(const std::vector<double>& norms, Eigen::Index start = 500, double factor = 1.05);

/// sqrt(1 + ||S||^2 M_nreg^2) for a system whose first m_reg units are an
/// exact manifold attractor (A = 1, W rows and h zero). S is the block of W
/// coupling regularized units into the free ones, M_nreg = 1 / (1 - s) with s
/// the largest sigma_max(A_free + W_free D) over all free-unit regions.
/// Returns +inf when s >= 1. Throws ConfigError if the partition is not exact.
double theorem2_rho_bound(const Params& p);

struct EigHistogram {
  std::vector<double> bin_left, bin_right;
  std::vector<long> counts;
  std::vector<double> system_deviation;  // per system: min |max|lambda| - 1|, NaN if none
  long included = 0;
  long excluded_degenerate = 0;
  long excluded_inadmissible = 0;
};

/// Histogram of max |lambda| over admissible, non-degenerate fixed points of
/// each system; values >= hi land in the last bin.
EigHistogram eig_histogram(const std::vector<std::vector<FixedPointReport>>& systems, int n_bins = 20,
                           double lo = 0.0, double hi = 2.0);

}  // namespace plrnn
