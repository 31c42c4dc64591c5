#include "plrnn/train_sgd.hpp"

#include <algorithm>
#include <numeric>

#include "plrnn/io.hpp"

namespace plrnn {

namespace fs = std::filesystem;

std::string to_string(LossKind k) {
  return k == LossKind::mse_final_step ? "mse_final_step" : "cross_entropy_final_step";
}

LossKind loss_kind_from_string(std::string_view name) {
  if (name == "mse_final_step") return LossKind::mse_final_step;
  if (name == "cross_entropy_final_step") return LossKind::cross_entropy_final_step;
  throw ConfigError("loss_kind", "unknown loss '" + std::string(name) + "'");
}

std::string to_string(ModelKind k) { return k == ModelKind::plrnn ? "plrnn" : "vanilla_rnn"; }

ModelKind model_kind_from_string(std::string_view name) {
  if (name == "plrnn") return ModelKind::plrnn;
  if (name == "vanilla_rnn") return ModelKind::vanilla_rnn;
  throw ConfigError("model_kind", "unknown model '" + std::string(name) + "'");
}

void SgdConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("lr", "must be nonnegative");
  if (!(clip > 0)) throw ConfigError("clip", "must be positive");
  if (batch_size < 1) throw ConfigError("batch_size", "must be at least 1");
  if (epochs < 0) throw ConfigError("epochs", "must be nonnegative");
  if (!(task_weight >= 0)) throw ConfigError("task_weight", "must be nonnegative");
  if (!(correct_threshold >= 0)) throw ConfigError("correct_threshold", "must be nonnegative");
  reg.validate();
}

// ---- packing --------------------------------------------------------------

namespace {

struct Packer {
  Vec* out;
  Eigen::Index at = 0;
  template <typename D>
  void put(const Eigen::MatrixBase<D>& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) (*out)(at++) = m(i, j);
  }
};

struct Unpacker {
  const Vec* in;
  Eigen::Index at = 0;
  template <typename D>
  void get(Eigen::MatrixBase<D>& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = (*in)(at++);
  }
};

Eigen::Index plrnn_size(Eigen::Index M, Eigen::Index K, Eigen::Index N) { return M + M * M + M * K + M + N * M; }
Eigen::Index rnn_size(Eigen::Index M, Eigen::Index K, Eigen::Index N) { return M * M + M * K + M + N * M; }

}  // namespace

Vec pack(const Params& p) {
  Vec v(plrnn_size(p.latent_dim(), p.input_dim(), p.obs_dim()));
  Packer k{&v};
  k.put(p.a_diag);
  k.put(p.w_offdiag);
  k.put(p.c_input);
  k.put(p.h_bias);
  k.put(p.b_loading);
  return v;
}

void unpack(const Vec& theta, Params& p) {
  require_size(theta, plrnn_size(p.latent_dim(), p.input_dim(), p.obs_dim()), "theta");
  Unpacker u{&theta};
  u.get(p.a_diag);
  u.get(p.w_offdiag);
  u.get(p.c_input);
  u.get(p.h_bias);
  u.get(p.b_loading);
  p.w_offdiag.diagonal().setZero();
}

Vec pack(const PlrnnGrad& g) {
  Vec v(plrnn_size(g.a_diag.size(), g.c_input.cols(), g.b_loading.rows()));
  Packer k{&v};
  k.put(g.a_diag);
  k.put(g.w_offdiag);
  k.put(g.c_input);
  k.put(g.h_bias);
  k.put(g.b_loading);
  return v;
}

Vec pack(const RnnParams& p) {
  Vec v(rnn_size(p.hidden_dim(), p.input_dim(), p.obs_dim()));
  Packer k{&v};
  k.put(p.w);
  k.put(p.c_input);
  k.put(p.h_bias);
  k.put(p.b_loading);
  return v;
}

void unpack(const Vec& theta, RnnParams& p) {
  require_size(theta, rnn_size(p.hidden_dim(), p.input_dim(), p.obs_dim()), "theta");
  Unpacker u{&theta};
  u.get(p.w);
  u.get(p.c_input);
  u.get(p.h_bias);
  u.get(p.b_loading);
}

Vec pack(const RnnGrad& g) {
  Vec v(rnn_size(g.w.rows(), g.c_input.cols(), g.b_loading.rows()));
  Packer k{&v};
  k.put(g.w);
  k.put(g.c_input);
  k.put(g.h_bias);
  k.put(g.b_loading);
  return v;
}

// ---- forward / backward -------------------------------------------------

namespace {

void check_data(const TrialSet& data, Eigen::Index K, Eigen::Index N, LossKind kind) {
  if (data.K != K) throw ShapeError("trial set has " + std::to_string(data.K) + " input channels, model expects " +
                                    std::to_string(K));
  if (data.inputs.rows() != data.T * data.K) throw ShapeError("trial set inputs have the wrong row count");
  if (kind == LossKind::mse_final_step && N != 1)
    throw ShapeError("final-step MSE needs a single output, model has " + std::to_string(N));
  if (kind == LossKind::cross_entropy_final_step && N != data.n_classes)
    throw ShapeError("cross-entropy needs " + std::to_string(data.n_classes) + " outputs, model has " +
                     std::to_string(N));
}

Mat gather(const TrialSet& data, const std::vector<Eigen::Index>& batch) {
  Mat X(data.inputs.rows(), Eigen::Index(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) X.col(Eigen::Index(b)) = data.inputs.col(batch[b]);
  return X;
}

// Per-sample losses and dL/dY for the mean loss. Y holds the raw readout
// (logits for cross-entropy).
struct Readout {
  Vec losses;
  Mat dY;
};

Readout final_loss(const Mat& Y, const TrialSet& data, const std::vector<Eigen::Index>& batch, LossKind kind) {
  const auto B = Y.cols();
  Readout r{Vec(B), Mat(Y.rows(), B)};
  for (Eigen::Index b = 0; b < B; ++b) {
    const double y = data.targets(batch[b]);
    if (kind == LossKind::mse_final_step) {
      const double e = Y(0, b) - y;
      r.losses(b) = e * e;
      r.dY(0, b) = 2.0 * e / double(B);
    } else {
      const auto c = static_cast<Eigen::Index>(y);
      const double mx = Y.col(b).maxCoeff();
      const Vec e = (Y.col(b).array() - mx).exp().matrix();
      const double s = e.sum();
      r.losses(b) = std::log(s) + mx - Y(c, b);
      r.dY.col(b) = e / s / double(B);
      r.dY(c, b) -= 1.0 / double(B);
    }
    if (!std::isfinite(r.losses(b)) || r.losses(b) > kLossDivergence)
      throw DivergedError("non-finite or diverging loss for trial " + std::to_string(batch[b]), long(batch[b]));
  }
  return r;
}

struct PlrnnForward {
  std::vector<Mat> Z;  // Z[0] = initial state, Z[t] = z_t
  Mat X;               // gathered inputs
};

PlrnnForward forward(const Params& p, const TrialSet& data, const std::vector<Eigen::Index>& batch) {
  const auto B = Eigen::Index(batch.size());
  const auto K = p.input_dim();
  PlrnnForward f;
  f.X = gather(data, batch);
  f.Z.reserve(data.T + 1);
  f.Z.push_back(p.mu0.replicate(1, B));
  for (Eigen::Index t = 0; t < data.T; ++t) {
    const Mat& z = f.Z.back();
    Mat next = p.a_diag.asDiagonal() * z;
    next.noalias() += p.w_offdiag * z.cwiseMax(0.0);
    if (K > 0) next.noalias() += p.c_input * f.X.middleRows(t * K, K);
    next.colwise() += p.h_bias;
    f.Z.push_back(std::move(next));
  }
  return f;
}

Mat plrnn_readout(const Params& p, const Mat& Z) {
  return p.obs_kind == ObsKind::relu_gaussian ? Mat(p.b_loading * Z.cwiseMax(0.0)) : Mat(p.b_loading * Z);
}

struct RnnForward {
  std::vector<Mat> Z;
  std::vector<Mat> pre;
  Mat X;
};

RnnForward forward(const RnnParams& p, const TrialSet& data, const std::vector<Eigen::Index>& batch) {
  const auto B = Eigen::Index(batch.size());
  const auto K = p.input_dim();
  RnnForward f;
  f.X = gather(data, batch);
  f.Z.push_back(Mat::Zero(p.hidden_dim(), B));
  for (Eigen::Index t = 0; t < data.T; ++t) {
    Mat a = p.w * f.Z.back();
    if (K > 0) a.noalias() += p.c_input * f.X.middleRows(t * K, K);
    a.colwise() += p.h_bias;
    f.Z.push_back(a.cwiseMax(0.0));
    f.pre.push_back(std::move(a));
  }
  return f;
}

std::vector<Eigen::Index> all_indices(Eigen::Index n, Eigen::Index first = 0) {
  std::vector<Eigen::Index> v(n);
  std::iota(v.begin(), v.end(), first);
  return v;
}

constexpr Eigen::Index kEvalChunk = 2000;

Mat to_output(const Mat& Y, LossKind kind) {
  if (kind == LossKind::mse_final_step) return Y;
  Mat P(Y.rows(), Y.cols());
  for (Eigen::Index b = 0; b < Y.cols(); ++b) P.col(b) = softmax(Y.col(b));
  return P;
}

template <typename P>
Mat predict_impl(const P& p, const TrialSet& data, LossKind kind) {
  Mat out(p.b_loading.rows(), data.size());
  for (Eigen::Index first = 0; first < data.size(); first += kEvalChunk) {
    const auto n = std::min(kEvalChunk, data.size() - first);
    auto f = forward(p, data, all_indices(n, first));
    Mat Y;
    if constexpr (std::is_same_v<P, Params>)
      Y = plrnn_readout(p, f.Z.back());
    else
      Y = p.b_loading * f.Z.back();
    out.middleCols(first, n) = to_output(Y, kind);
  }
  return out;
}

template <typename P>
double mean_loss_impl(const P& p, const TrialSet& data, LossKind kind) {
  double total = 0.0;
  for (Eigen::Index first = 0; first < data.size(); first += kEvalChunk) {
    const auto n = std::min(kEvalChunk, data.size() - first);
    const auto idx = all_indices(n, first);
    auto f = forward(p, data, idx);
    Mat Y;
    if constexpr (std::is_same_v<P, Params>)
      Y = plrnn_readout(p, f.Z.back());
    else
      Y = p.b_loading * f.Z.back();
    total += final_loss(Y, data, idx, kind).losses.sum();
  }
  return total / double(data.size());
}

template <typename P>
double p_correct_impl(const P& p, const TrialSet& data, LossKind kind, double threshold) {
  if (data.size() == 0) throw ShapeError("p_correct: empty test set");
  const Mat out = predict(p, data, kind);
  long correct = 0;
  for (Eigen::Index r = 0; r < data.size(); ++r) {
    if (kind == LossKind::mse_final_step) {
      correct += std::abs(out(0, r) - data.targets(r)) <= threshold;
    } else {
      Eigen::Index c;
      out.col(r).maxCoeff(&c);
      correct += double(c) == data.targets(r);
    }
  }
  return double(correct) / double(data.size());
}

}  // namespace

LossGrad<PlrnnGrad> bptt_grads(const Params& p, const TrialSet& data, const std::vector<Eigen::Index>& batch,
                               LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  if (batch.empty()) throw ShapeError("bptt_grads: empty batch");
  const auto K = p.input_dim();
  PlrnnForward f = forward(p, data, batch);
  const Mat& ZT = f.Z.back();
  const Readout r = final_loss(plrnn_readout(p, ZT), data, batch, kind);

  LossGrad<PlrnnGrad> out;
  out.loss = r.losses.mean();
  PlrnnGrad& g = out.grad;
  g = PlrnnGrad::zeros_like(p);
  Mat delta;
  if (p.obs_kind == ObsKind::relu_gaussian) {
    g.b_loading = r.dY * ZT.cwiseMax(0.0).transpose();
    delta = (p.b_loading.transpose() * r.dY).cwiseProduct((ZT.array() > 0).cast<double>().matrix());
  } else {
    g.b_loading = r.dY * ZT.transpose();
    delta = p.b_loading.transpose() * r.dY;
  }
  for (Eigen::Index t = data.T; t >= 1; --t) {
    const Mat& zp = f.Z[t - 1];
    const Mat phi = zp.cwiseMax(0.0);
    g.a_diag += delta.cwiseProduct(zp).rowwise().sum();
    g.w_offdiag.noalias() += delta * phi.transpose();
    if (K > 0) g.c_input.noalias() += delta * f.X.middleRows((t - 1) * K, K).transpose();
    g.h_bias += delta.rowwise().sum();
    Mat back = p.w_offdiag.transpose() * delta;
    back.array() *= (zp.array() > 0).cast<double>();
    delta = p.a_diag.asDiagonal() * delta + back;
  }
  g.w_offdiag.diagonal().setZero();
  return out;
}

LossGrad<RnnGrad> bptt_grads(const RnnParams& p, const TrialSet& data, const std::vector<Eigen::Index>& batch,
                             LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  if (batch.empty()) throw ShapeError("bptt_grads: empty batch");
  const auto K = p.input_dim();
  RnnForward f = forward(p, data, batch);
  const Readout r = final_loss(p.b_loading * f.Z.back(), data, batch, kind);
  LossGrad<RnnGrad> out;
  out.loss = r.losses.mean();
  RnnGrad& g = out.grad;
  g = RnnGrad::zeros_like(p);
  g.b_loading = r.dY * f.Z.back().transpose();
  Mat delta = p.b_loading.transpose() * r.dY;
  for (Eigen::Index t = data.T; t >= 1; --t) {
    const Mat G = delta.cwiseProduct((f.pre[t - 1].array() > 0).cast<double>().matrix());
    g.w.noalias() += G * f.Z[t - 1].transpose();
    if (K > 0) g.c_input.noalias() += G * f.X.middleRows((t - 1) * K, K).transpose();
    g.h_bias += G.rowwise().sum();
    delta = p.w.transpose() * G;
  }
  return out;
}

Mat predict(const Params& p, const TrialSet& data, LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  return predict_impl(p, data, kind);
}
Mat predict(const RnnParams& p, const TrialSet& data, LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  return predict_impl(p, data, kind);
}
double mean_loss(const Params& p, const TrialSet& data, LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  return mean_loss_impl(p, data, kind);
}
double mean_loss(const RnnParams& p, const TrialSet& data, LossKind kind) {
  check_data(data, p.input_dim(), p.obs_dim(), kind);
  return mean_loss_impl(p, data, kind);
}
double p_correct(const Params& p, const TrialSet& data, LossKind kind, double threshold) {
  return p_correct_impl(p, data, kind, threshold);
}
double p_correct(const RnnParams& p, const TrialSet& data, LossKind kind, double threshold) {
  return p_correct_impl(p, data, kind, threshold);
}

// ---- optimizer ------------------------------------------------------------

double clip_global_norm(Vec& g, double clip) {
  const double n = g.norm();
  if (n > clip) g *= clip / n;
  return n;
}

void AdamState::update(Vec& theta, const Vec& g, double lr) {
  if (m.size() != theta.size()) {
    m = Vec::Zero(theta.size());
    v = Vec::Zero(theta.size());
  }
  ++step;
  m = beta1 * m + (1.0 - beta1) * g;
  v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
  const double c1 = 1.0 - std::pow(beta1, double(step));
  const double c2 = 1.0 - std::pow(beta2, double(step));
  theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
}

namespace {

template <typename P>
double objective(const SgdConfig& c, const P& p, const TrialSet& data) {
  const double task = c.task_weight == 0.0 ? 0.0 : c.task_weight * mean_loss(p, data, c.loss_kind);
  return task + penalty(c.reg, p);
}

template <typename P>
TrainState<P> train_impl(const SgdConfig& config, TrainState<P> s, const TrialSet& data, const TrialSet* test) {
  config.validate();
  s.params.validate();
  if (data.size() == 0) throw ShapeError("train: empty training set");
  check_data(data, s.params.input_dim(), s.params.obs_dim(), config.loss_kind);
  if (test) check_data(*test, s.params.input_dim(), s.params.obs_dim(), config.loss_kind);
  if (s.epoch == 0 && s.trace.empty()) {
    try {
      s.best_loss = objective(config, s.params, data);
    } catch (const DivergedError& err) {
      s.best_loss = std::numeric_limits<double>::infinity();
    }
  }

  const auto R = data.size();
  Vec theta = pack(s.params);
  while (s.epoch < config.epochs && !s.diverged) {
    const int e = s.epoch + 1;
    std::vector<Eigen::Index> order = all_indices(R);
    CounterRng rng(config.seed, 0x5a0000 + std::uint64_t(e));
    for (Eigen::Index i = R - 1; i > 0; --i) std::swap(order[i], order[rng.below(std::uint64_t(i) + 1)]);
    try {
      for (Eigen::Index first = 0; first < R; first += config.batch_size) {
        const auto n = std::min<Eigen::Index>(config.batch_size, R - first);
        std::vector<Eigen::Index> batch(order.begin() + first, order.begin() + first + n);
        Vec g;
        if (config.task_weight != 0.0) {
          auto lg = bptt_grads(s.params, data, batch, config.loss_kind);
          g = config.task_weight * pack(lg.grad);
        } else {
          g = Vec::Zero(theta.size());
        }
        g += pack(penalty_grad(config.reg, s.params));
        if (!g.allFinite()) throw DivergedError("non-finite gradient", long(e));
        clip_global_norm(g, config.clip);
        s.adam.update(theta, g, config.lr);
        unpack(theta, s.params);
      }
      EpochRecord rec;
      rec.epoch = e;
      rec.train_loss = objective(config, s.params, data);
      if (!std::isfinite(rec.train_loss) || rec.train_loss > kLossDivergence)
        throw DivergedError("training loss diverged", long(e));
      if (test && test->size() > 0) {
        rec.test_loss = mean_loss(s.params, *test, config.loss_kind);
        rec.p_correct = p_correct(s.params, *test, config.loss_kind, config.correct_threshold);
      }
      s.trace.push_back(rec);
      s.epoch = e;
      if (rec.train_loss < s.best_loss) {
        s.best_loss = rec.train_loss;
        s.best_epoch = e;
        s.best_params = s.params;
      }
    } catch (const DivergedError& err) {
      s.diverged = true;
      s.diagnostic = "epoch " + std::to_string(e) + ": " + err.what();
    }
  }
  return s;
}

}  // namespace

TrainState<Params> train(const SgdConfig& config, TrainState<Params> state, const TrialSet& train_set,
                         const TrialSet* test) {
  if (config.model_kind != ModelKind::plrnn) throw ConfigError("model_kind", "config is not for a PLRNN");
  return train_impl(config, std::move(state), train_set, test);
}

TrainState<RnnParams> train(const SgdConfig& config, TrainState<RnnParams> state, const TrialSet& train_set,
                            const TrialSet* test) {
  if (config.model_kind != ModelKind::vanilla_rnn) throw ConfigError("model_kind", "config is not for a vanilla RNN");
  return train_impl(config, std::move(state), train_set, test);
}

void write_trace_csv(const fs::path& path, const std::vector<EpochRecord>& trace) {
  std::vector<std::vector<double>> rows;
  for (const auto& r : trace) rows.push_back({double(r.epoch), r.train_loss, r.test_loss, r.p_correct});
  write_csv(path, {"epoch", "train_loss", "test_loss", "p_correct"}, rows);
}

namespace {

template <typename P>
void save_checkpoint_impl(const fs::path& stem, const TrainState<P>& s, BlockFile f, BlockFile best) {
  f.kind = "sgd_checkpoint/" + f.kind;
  for (auto& [name, m] : best.blocks) f.blocks.emplace_back("best." + name, m);
  f.meta["best_loss"] = s.best_loss;
  f.meta["best_epoch"] = s.best_epoch;
  f.meta["epoch"] = s.epoch;
  f.meta["adam_step"] = s.adam.step;
  f.meta["diverged"] = s.diverged;
  f.meta["diagnostic"] = s.diagnostic;
  f.blocks.emplace_back("adam.m", s.adam.m);
  f.blocks.emplace_back("adam.v", s.adam.v);
  Mat tr(Eigen::Index(s.trace.size()), 4);
  for (std::size_t i = 0; i < s.trace.size(); ++i)
    tr.row(Eigen::Index(i)) << s.trace[i].epoch, s.trace[i].train_loss, s.trace[i].test_loss, s.trace[i].p_correct;
  f.blocks.emplace_back("trace", tr);
  write_block_file(stem, f);
}

template <typename P>
void load_common(const BlockFile& f, TrainState<P>& s) {
  s.best_loss = f.meta.at("best_loss").get<double>();
  s.best_epoch = f.meta.at("best_epoch").get<int>();
  s.epoch = f.meta.at("epoch").get<int>();
  s.adam.step = f.meta.at("adam_step").get<long>();
  s.diverged = f.meta.value("diverged", false);
  s.diagnostic = f.meta.value("diagnostic", "");
  s.adam.m = f.block("adam.m");
  s.adam.v = f.block("adam.v");
  const Mat& tr = f.block("trace");
  for (Eigen::Index i = 0; i < tr.rows(); ++i) s.trace.push_back({int(tr(i, 0)), tr(i, 1), tr(i, 2), tr(i, 3)});
}

BlockFile split_best(const BlockFile& f, bool best, const std::string& kind) {
  BlockFile out;
  out.kind = kind;
  out.meta = f.meta;
  for (const auto& [name, m] : f.blocks) {
    const bool is_best = name.rfind("best.", 0) == 0;
    if (is_best == best) out.blocks.emplace_back(is_best ? name.substr(5) : name, m);
  }
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& stem, const TrainState<Params>& s) {
  save_checkpoint_impl(stem, s, params_to_blocks(s.params), params_to_blocks(s.best_params));
}

void save_checkpoint(const fs::path& stem, const TrainState<RnnParams>& s) {
  save_checkpoint_impl(stem, s, rnn_params_to_blocks(s.params), rnn_params_to_blocks(s.best_params));
}

TrainState<Params> load_plrnn_checkpoint(const fs::path& stem) {
  BlockFile f = read_block_file(stem);
  if (f.kind != "sgd_checkpoint/plrnn_params") throw FormatError("not a PLRNN training checkpoint", 0);
  TrainState<Params> s;
  s.params = params_from_blocks(split_best(f, false, "plrnn_params"));
  s.best_params = params_from_blocks(split_best(f, true, "plrnn_params"));
  load_common(f, s);
  return s;
}

TrainState<RnnParams> load_rnn_checkpoint(const fs::path& stem) {
  BlockFile f = read_block_file(stem);
  if (f.kind != "sgd_checkpoint/vanilla_rnn_params") throw FormatError("not an RNN training checkpoint", 0);
  TrainState<RnnParams> s;
  s.params = rnn_params_from_blocks(split_best(f, false, "vanilla_rnn_params"));
  s.best_params = rnn_params_from_blocks(split_best(f, true, "vanilla_rnn_params"));
  load_common(f, s);
  return s;
}

}  // namespace plrnn
