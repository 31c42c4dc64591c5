#include "plrnn/tasks.hpp"

#include <fstream>
#include <iterator>

#include "plrnn/io.hpp"

namespace plrnn {

namespace fs = std::filesystem;

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::addition: return "addition";
    case TaskKind::multiplication: return "multiplication";
    case TaskKind::mnist: return "mnist";
  }
  return "unknown";
}

TaskKind task_kind_from_string(std::string_view name) {
  for (auto k : {TaskKind::addition, TaskKind::multiplication, TaskKind::mnist})
    if (name == to_string(k)) return k;
  throw ConfigError("task", "unknown task '" + std::string(name) + "'");
}

Mat TrialSet::trial_inputs(Eigen::Index r) const {
  Mat out(T, K);
  for (Eigen::Index t = 0; t < T; ++t)
    for (Eigen::Index k = 0; k < K; ++k) out(t, k) = inputs(t * K + k, r);
  return out;
}

TrialSet TrialSet::slice(Eigen::Index first, Eigen::Index count) const {
  if (first < 0 || count < 0 || first + count > size()) throw ShapeError("trial slice out of range");
  TrialSet s = *this;
  s.inputs = inputs.middleCols(first, count);
  s.targets = targets.segment(first, count);
  return s;
}

void TrialSet::validate() const {
  require_shape(inputs, T * K, targets.size(), "inputs");
  if (classification()) {
    for (Eigen::Index r = 0; r < size(); ++r) {
      const double c = targets(r);
      if (c != std::floor(c) || c < 0 || c >= n_classes)
        throw ShapeError("targets: entry " + std::to_string(r) + " is not a class index");
    }
  }
}

namespace {

TrialSet gen_marked(Eigen::Index R, Eigen::Index T, std::uint64_t seed, TaskKind kind) {
  if (T < 20) throw ConfigError("T", "must be at least 20, got " + std::to_string(T));
  if (R < 1) throw ConfigError("R", "must be positive");
  TrialSet s;
  s.kind = kind;
  s.T = T;
  s.K = 2;
  s.seed = seed;
  s.inputs = Mat::Zero(2 * T, R);
  s.targets.resize(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    CounterRng rng(seed, static_cast<std::uint64_t>(r));
    for (Eigen::Index t = 0; t < T; ++t) s.inputs(2 * t, r) = rng.uniform();
    const auto t1 = static_cast<Eigen::Index>(rng.below(10));
    // Uniform over the integers below T/2, excluding t1.
    auto t2 = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>((T + 1) / 2 - 1)));
    if (t2 >= t1) ++t2;
    s.inputs(2 * t1 + 1, r) = 1.0;
    s.inputs(2 * t2 + 1, r) = 1.0;
    const double a = s.inputs(2 * t1, r), b = s.inputs(2 * t2, r);
    s.targets(r) = kind == TaskKind::addition ? a + b : a * b;
  }
  return s;
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at) {
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) | (std::uint32_t(b[at + 2]) << 8) |
         std::uint32_t(b[at + 3]);
}

}  // namespace

TrialSet gen_addition(Eigen::Index R, Eigen::Index T, std::uint64_t seed) {
  return gen_marked(R, T, seed, TaskKind::addition);
}

TrialSet gen_multiplication(Eigen::Index R, Eigen::Index T, std::uint64_t seed) {
  return gen_marked(R, T, seed, TaskKind::multiplication);
}

std::pair<Eigen::Index, Eigen::Index> marked_steps(const TrialSet& set, Eigen::Index r) {
  if (set.K != 2) throw ShapeError("marked_steps: need a two-channel trial set");
  std::vector<Eigen::Index> idx;
  for (Eigen::Index t = 0; t < set.T; ++t)
    if (set.inputs(2 * t + 1, r) != 0.0) idx.push_back(t);
  if (idx.size() != 2) throw ShapeError("trial " + std::to_string(r) + " does not have exactly two markers");
  return {idx[0], idx[1]};
}

IdxFile read_idx(const fs::path& path, std::uint32_t expected_magic) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PlrnnError("cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw FormatError(path.string() + ": truncated magic number", bytes.size());
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != expected_magic) {
    char buf[64];
    std::snprintf(buf, sizeof buf, ": bad magic 0x%08x, expected 0x%08x", magic, expected_magic);
    throw FormatError(path.string() + buf, 0);
  }
  IdxFile f;
  f.type_code = bytes[2];
  const std::size_t ndims = bytes[3];
  std::size_t at = 4;
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < ndims; ++i, at += 4) {
    if (at + 4 > bytes.size()) throw FormatError(path.string() + ": truncated header", bytes.size());
    f.dims.push_back(read_be32(bytes, at));
    count *= f.dims.back();
  }
  if (bytes.size() - at < count)
    throw FormatError(path.string() + ": truncated data, expected " + std::to_string(count) + " bytes",
                      bytes.size());
  f.data.assign(bytes.begin() + at, bytes.begin() + at + count);
  return f;
}

TrialSet load_sequential_mnist(const fs::path& images, const fs::path& labels, std::optional<Eigen::Index> subset) {
  const IdxFile im = read_idx(images, 0x00000803);
  const IdxFile lb = read_idx(labels, 0x00000801);
  if (im.dims.size() != 3) throw FormatError(images.string() + ": expected 3 dimensions", 3);
  if (lb.dims.size() != 1) throw FormatError(labels.string() + ": expected 1 dimension", 3);
  if (im.dims[0] != lb.dims[0])
    throw FormatError("image count " + std::to_string(im.dims[0]) + " does not match label count " +
                          std::to_string(lb.dims[0]),
                      4);
  Eigen::Index R = im.dims[0];
  if (subset) {
    if (*subset < 1) throw ConfigError("subset", "must be positive");
    R = std::min<Eigen::Index>(R, *subset);
  }
  const Eigen::Index T = Eigen::Index(im.dims[1]) * im.dims[2];
  TrialSet s;
  s.kind = TaskKind::mnist;
  s.T = T;
  s.K = 1;
  s.n_classes = 10;
  s.inputs.resize(T, R);
  s.targets.resize(R);
  for (Eigen::Index r = 0; r < R; ++r) {
    for (Eigen::Index t = 0; t < T; ++t) s.inputs(t, r) = im.data[r * T + t] / 255.0;
    const int label = lb.data[r];
    if (label > 9) throw FormatError(labels.string() + ": label out of range", 8 + r);
    s.targets(r) = label;
  }
  return s;
}

void NeuronParams::validate() const {
  for (double g : {g_l, g_na, g_k, g_m, g_nmda})
    if (g < 0) throw ConfigError("neuron", "conductances must be nonnegative");
  if (c_m <= 0) throw ConfigError("neuron.c_m", "must be positive");
  if (tau_n <= 0) throw ConfigError("neuron.tau_n", "must be positive");
  if (tau_h <= 0) throw ConfigError("neuron.tau_h", "must be positive");
}

Eigen::Vector3d neuron_rhs(const NeuronParams& p, const Eigen::Vector3d& y) {
  const double V = y(0), h = y(1), n = y(2);
  auto gate = [V](double vh, double k) { return 1.0 / (1.0 + std::exp((vh - V) / k)); };
  const double sigma = 1.0 / (1.0 + 0.33 * std::exp(-0.0625 * V));
  const double current = p.g_l * (V - p.e_l) + p.g_na * gate(p.v_hna, p.k_na) * (V - p.e_na) +
                         p.g_k * n * (V - p.e_k) + p.g_m * h * (V - p.e_k) + p.g_nmda * sigma * (V - p.e_nmda);
  return {-current / p.c_m, (gate(p.v_hm, p.k_m) - h) / p.tau_h, (gate(p.v_hk, p.k_k) - n) / p.tau_n};
}

namespace {

template <typename F>
Eigen::Vector3d rk4(const F& f, const Eigen::Vector3d& y, double dt) {
  const Eigen::Vector3d k1 = f(y);
  const Eigen::Vector3d k2 = f(y + 0.5 * dt * k1);
  const Eigen::Vector3d k3 = f(y + 0.5 * dt * k2);
  const Eigen::Vector3d k4 = f(y + dt * k3);
  return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

void add_noise(Traj& tr, double noise_std, std::uint64_t seed) {
  if (noise_std < 0) throw ConfigError("noise_std", "must be nonnegative");
  tr.observations = tr.latents;
  if (noise_std == 0) return;
  CounterRng rng(seed, 0x0b5);
  for (Eigen::Index t = 0; t < tr.observations.rows(); ++t)
    for (Eigen::Index j = 0; j < tr.observations.cols(); ++j) tr.observations(t, j) += noise_std * rng.normal();
}

}  // namespace

Traj simulate_neuron(const NeuronParams& p, double T_ms, double dt_ms, double sample_ms, double v0, double h0,
                     double n0, double noise_std, std::uint64_t seed) {
  p.validate();
  if (!(dt_ms > 0)) throw ConfigError("dt_ms", "must be positive");
  if (!(sample_ms > 0)) throw ConfigError("sample_ms", "must be positive");
  const double ratio = sample_ms / dt_ms;
  const auto sub = static_cast<long>(std::llround(ratio));
  if (sub < 1 || std::abs(ratio - double(sub)) > 1e-9 * ratio)
    throw ConfigError("sample_ms", "must be an integer multiple of dt_ms");
  const auto n = static_cast<Eigen::Index>(std::llround(T_ms / sample_ms));
  if (n < 1) throw ConfigError("T_ms", "shorter than one sample");
  Traj tr;
  tr.dt = sample_ms;
  tr.latents.resize(n, 3);
  Eigen::Vector3d y(v0, h0, n0);
  auto f = [&p](const Eigen::Vector3d& s) { return neuron_rhs(p, s); };
  long step = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    tr.latents.row(i) = y.transpose();
    if (i + 1 == n) break;
    for (long j = 0; j < sub; ++j, ++step) {
      y = rk4(f, y, dt_ms);
      if (!y.allFinite()) throw DivergedError("neuron integration produced a non-finite state", step);
    }
  }
  add_noise(tr, noise_std, seed);
  return tr;
}

Traj simulate_lorenz(double sigma, double rho, double beta, Eigen::Index T, double dt, const Eigen::Vector3d& z0,
                     double noise_std, std::uint64_t seed) {
  if (T < 1) throw ConfigError("T", "must be positive");
  if (!(dt > 0)) throw ConfigError("dt", "must be positive");
  auto f = [=](const Eigen::Vector3d& s) {
    return Eigen::Vector3d(sigma * (s(1) - s(0)), s(0) * (rho - s(2)) - s(1), s(0) * s(1) - beta * s(2));
  };
  Traj tr;
  tr.dt = dt;
  tr.latents.resize(T, 3);
  Eigen::Vector3d y = z0;
  for (Eigen::Index t = 0; t < T; ++t) {
    tr.latents.row(t) = y.transpose();
    y = rk4(f, y, dt);
    if (!y.allFinite()) throw DivergedError("Lorenz integration produced a non-finite state", t);
  }
  add_noise(tr, noise_std, seed);
  return tr;
}

void save_trialset(const fs::path& stem, const TrialSet& set) {
  set.validate();
  BlockFile f;
  f.kind = "trialset";
  f.meta = {{"task", to_string(set.kind)}, {"T", set.T},     {"K", set.K},
            {"R", set.size()},             {"seed", set.seed}, {"n_classes", set.n_classes}};
  f.blocks = {{"inputs", set.inputs}, {"targets", set.targets}};
  write_block_file(stem, f);
}

TrialSet load_trialset(const fs::path& stem) {
  BlockFile f = read_block_file(stem);
  if (f.kind != "trialset") throw FormatError("expected a trial set, found '" + f.kind + "'", 0);
  TrialSet s;
  s.kind = task_kind_from_string(f.meta.at("task").get<std::string>());
  s.T = f.meta.at("T").get<Eigen::Index>();
  s.K = f.meta.at("K").get<Eigen::Index>();
  s.seed = f.meta.value("seed", std::uint64_t(0));
  s.n_classes = f.meta.value("n_classes", 0);
  s.inputs = f.block("inputs");
  s.targets = f.block("targets");
  s.validate();
  return s;
}

}  // namespace plrnn
