#pragma once

// Benchmark data: addition / multiplication trials, sequential MNIST from IDX
// files, the bursting-neuron ODE and the Lorenz system.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "plrnn/core.hpp"

namespace plrnn {

enum class TaskKind { addition, multiplication, mnist };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view name);

/// R trials of length T with K input channels. Column r of `inputs` holds
/// trial r time-major: entry t * K + k is s_{t,k}.
struct TrialSet {
  TaskKind kind = TaskKind::addition;
  Eigen::Index T = 0;
  Eigen::Index K = 0;
  Mat inputs;    // (T*K) x R
  Vec targets;   // R; class index for classification sets
  int n_classes = 0;  // 0 for regression
  std::uint64_t seed = 0;

  Eigen::Index size() const { return targets.size(); }
  bool classification() const { return n_classes > 0; }
  /// T x K input matrix of trial r.
  Mat trial_inputs(Eigen::Index r) const;
  TrialSet slice(Eigen::Index first, Eigen::Index count) const;
  void validate() const;
};

/// Channel 0 ~ U[0, 1]; channel 1 has ones at t1 in [0, 10) and
/// t2 in [0, T/2), t1 != t2 (0-based). Trial r uses its own random stream,
/// so any prefix of a larger set equals the smaller set. Needs T >= 20.
TrialSet gen_addition(Eigen::Index R, Eigen::Index T, std::uint64_t seed);
TrialSet gen_multiplication(Eigen::Index R, Eigen::Index T, std::uint64_t seed);

/// Marked time indices (t1, t2) of an addition or multiplication trial.
std::pair<Eigen::Index, Eigen::Index> marked_steps(const TrialSet& set, Eigen::Index r);

struct IdxFile {
  std::uint8_t type_code = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

/// Parses an unsigned-byte IDX file and checks its magic number
/// (0x00000803 for images, 0x00000801 for labels). Throws FormatError with
/// the byte offset of the problem.
IdxFile read_idx(const std::filesystem::path& path, std::uint32_t expected_magic);

/// Images flattened row-major into K = 1 sequences scaled to [0, 1].
TrialSet load_sequential_mnist(const std::filesystem::path& images, const std::filesystem::path& labels,
                               std::optional<Eigen::Index> subset = std::nullopt);

/// Conductance-based neuron with Na, K, M and NMDA currents. Units: ms, mV,
/// mS, uF. The M current uses the slow gate h and the K reversal potential.
struct NeuronParams {
  double c_m = 6.0;
  double g_l = 8.0, e_l = -80.0;
  double g_na = 20.0, e_na = 60.0, v_hna = -20.0, k_na = 15.0;
  double g_k = 10.0, e_k = -90.0, v_hk = -25.0, k_k = 5.0;
  double tau_n = 1.0;
  double g_m = 25.0, v_hm = -15.0, k_m = 5.0;
  double tau_h = 200.0;
  double g_nmda = 10.2, e_nmda = 0.0;

  static NeuronParams paper_bursting() { return {}; }
  void validate() const;
};

/// Time derivative of (V, h, n).
Eigen::Vector3d neuron_rhs(const NeuronParams& p, const Eigen::Vector3d& y);

/// RK4 with step dt_ms; one output row every sample_ms (a multiple of dt_ms),
/// starting with the initial state. Latents hold (V, h, n); observations add
/// N(0, noise_std^2) noise.
Traj simulate_neuron(const NeuronParams& p, double T_ms, double dt_ms, double sample_ms, double v0, double h0,
                     double n0, double noise_std = 0.0, std::uint64_t seed = 0);

/// RK4 Lorenz system, one output row per step of size dt starting with z0.
Traj simulate_lorenz(double sigma, double rho, double beta, Eigen::Index T, double dt, const Eigen::Vector3d& z0,
                     double noise_std = 0.0, std::uint64_t seed = 0);

void save_trialset(const std::filesystem::path& stem, const TrialSet& set);
TrialSet load_trialset(const std::filesystem::path& stem);

}  // namespace plrnn
