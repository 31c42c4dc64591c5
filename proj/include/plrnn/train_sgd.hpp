#pragma once

// Supervised training by backpropagation through time for the PLRNN and the
// vanilla ReLU RNN: final-step MSE or cross-entropy, Adam with global-norm
// clipping, and selection of the epoch with the lowest training loss.

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "plrnn/regularizers.hpp"
#include "plrnn/tasks.hpp"

namespace plrnn {

enum class LossKind { mse_final_step, cross_entropy_final_step };
enum class ModelKind { plrnn, vanilla_rnn };

std::string to_string(LossKind k);
LossKind loss_kind_from_string(std::string_view name);
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(std::string_view name);

/// Training aborts once the loss exceeds this value.
inline constexpr double kLossDivergence = 1e12;

struct SgdConfig {
  double lr = 1e-3;
  double clip = 10.0;
  int batch_size = 500;
  int epochs = 100;
  LossKind loss_kind = LossKind::mse_final_step;
  RegSpec reg;
  std::uint64_t seed = 0;
  ModelKind model_kind = ModelKind::plrnn;
  double task_weight = 1.0;         // 0 trains on the penalty alone
  double correct_threshold = 0.04;  // regression trials count as correct within this error

  void validate() const;
};

// Flat parameter vectors. PLRNN order: a, W (column-major, diagonal kept at
// zero), C, h, B. Vanilla RNN order: W, C, h, B.
Vec pack(const Params& p);
void unpack(const Vec& theta, Params& p);
Vec pack(const PlrnnGrad& g);
Vec pack(const RnnParams& p);
void unpack(const Vec& theta, RnnParams& p);
Vec pack(const RnnGrad& g);

template <typename G>
struct LossGrad {
  double loss = 0.0;  // mean over the batch
  G grad;
};

/// Exact gradient of the mean final-step loss over `batch` (trial indices).
/// Latent dynamics are deterministic and start at mu0 (PLRNN) or 0 (RNN).
/// Throws DivergedError carrying the trial index of a non-finite loss.
LossGrad<PlrnnGrad> bptt_grads(const Params& p, const TrialSet& data, const std::vector<Eigen::Index>& batch,
                               LossKind kind);
LossGrad<RnnGrad> bptt_grads(const RnnParams& p, const TrialSet& data, const std::vector<Eigen::Index>& batch,
                             LossKind kind);

/// Final-step outputs (N x R): B g(z_T) for MSE, class probabilities for cross-entropy.
Mat predict(const Params& p, const TrialSet& data, LossKind kind);
Mat predict(const RnnParams& p, const TrialSet& data, LossKind kind);

/// Mean task loss over the whole set.
double mean_loss(const Params& p, const TrialSet& data, LossKind kind);
double mean_loss(const RnnParams& p, const TrialSet& data, LossKind kind);

/// Fraction of trials with |x_hat - x| <= threshold (regression) or a correct
/// arg-max class (cross-entropy).
double p_correct(const Params& p, const TrialSet& data, LossKind kind, double threshold = 0.04);
double p_correct(const RnnParams& p, const TrialSet& data, LossKind kind, double threshold = 0.04);

/// Scales g in place so that its 2-norm is at most clip; returns the norm before clipping.
double clip_global_norm(Vec& g, double clip);

struct AdamState {
  Vec m, v;
  long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  /// One Adam update of theta with gradient g.
  void update(Vec& theta, const Vec& g, double lr);
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;  // task_weight * task loss + penalty, full training set
  double test_loss = std::numeric_limits<double>::quiet_NaN();
  double p_correct = std::numeric_limits<double>::quiet_NaN();
};

template <typename P>
struct TrainState {
  P params;
  P best_params;
  double best_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;  // 0: the initial parameters
  int epoch = 0;       // completed epochs
  AdamState adam;
  std::vector<EpochRecord> trace;
  bool diverged = false;
  std::string diagnostic;
};

template <typename P>
TrainState<P> start_training(const P& init) {
  TrainState<P> s;
  s.params = init;
  s.best_params = init;
  return s;
}

/// Runs epochs state.epoch + 1 .. config.epochs. The minibatch order of epoch
/// e depends only on (seed, e), so a resumed run repeats an uninterrupted one.
/// `test` may be null.
TrainState<Params> train(const SgdConfig& config, TrainState<Params> state, const TrialSet& train_set,
                         const TrialSet* test);
TrainState<RnnParams> train(const SgdConfig& config, TrainState<RnnParams> state, const TrialSet& train_set,
                            const TrialSet* test);

/// Epoch trace CSV: epoch, train_loss, test_loss, p_correct.
void write_trace_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& trace);

/// Checkpoint with current and best parameters, Adam moments and the trace.
void save_checkpoint(const std::filesystem::path& stem, const TrainState<Params>& s);
void save_checkpoint(const std::filesystem::path& stem, const TrainState<RnnParams>& s);
TrainState<Params> load_plrnn_checkpoint(const std::filesystem::path& stem);
TrainState<RnnParams> load_rnn_checkpoint(const std::filesystem::path& stem);

}  // namespace plrnn
