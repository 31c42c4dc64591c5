#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "plrnn/analysis.hpp"
#include "plrnn/io.hpp"
#include "plrnn/metrics.hpp"
#include "plrnn/regularizers.hpp"
#include "plrnn/tasks.hpp"
#include "plrnn/train_em.hpp"
#include "plrnn/train_sgd.hpp"

#ifndef PLRNN_VERSION
#define PLRNN_VERSION "unknown"
#endif

namespace plrnn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- schema helpers ---------------------------------------------------------

std::string join_field(const std::string& where, const std::string& key) {
  return where.empty() ? key : where + "." + key;
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where.empty() ? "config" : where, "expected a JSON object");
}

void allow_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  require_object(j, where);
  const std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError(join_field(where, k), "unknown key");
  }
}

template <typename T>
T as(const json& v, const std::string& field) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError(field, "expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError(field, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)
        throw ConfigError(field, "must be nonnegative");
    }
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(field, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(field, "expected a string");
  }
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(field, "has the wrong type");
  }
}

template <typename T>
T opt(const json& j, const char* key, T fallback, const std::string& where) {
  return j.contains(key) ? as<T>(j.at(key), join_field(where, key)) : fallback;
}

template <typename T>
T req(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(join_field(where, key), "required");
  return as<T>(j.at(key), join_field(where, key));
}

std::vector<double> number_list(const json& v, const std::string& field) {
  if (!v.is_array()) throw ConfigError(field, "expected an array of numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as<double>(v[i], field + "[" + std::to_string(i) + "]"));
  return out;
}

// Library validation reports bare field names; prefix them with the section.
template <typename F>
void with_prefix(const std::string& where, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    const auto colon = msg.find(": ");
    throw ConfigError(join_field(where, e.field()), colon == std::string::npos ? msg : msg.substr(colon + 2));
  }
}

template <typename E, typename F>
E parse_enum(const json& j, const char* key, E fallback, const std::string& where, F&& from_string) {
  if (!j.contains(key)) return fallback;
  const auto s = as<std::string>(j.at(key), join_field(where, key));
  try {
    return from_string(s);
  } catch (const PlrnnError&) {
    throw ConfigError(join_field(where, key), "unknown value '" + s + "'");
  }
}

std::string tau_label(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw PlrnnError("cannot write " + path.string());
  f << j.dump(2) << "\n";
  if (!f) throw PlrnnError("cannot write " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw PlrnnError("cannot create output directory " + dir.string());
}

json manifest(const std::string& command, const json& config, std::uint64_t seed) {
  return {{"command", command}, {"config", config}, {"seed", seed}, {"version", version_string()}};
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json mat_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

std::string region_bits(const VecXb& d) {
  std::string s;
  for (Eigen::Index i = 0; i < d.size(); ++i) s += d(i) ? '1' : '0';
  return s;
}

double median(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return std::isnan(x); }), v.end());
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Runs jobs 0..n-1 on at most `threads` workers. The first exception is
// rethrown after all workers have joined.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const auto k = std::max<std::size_t>(1, std::min<std::size_t>(n, std::size_t(std::max(threads, 1))));
  std::vector<std::thread> pool;
  for (std::size_t i = 1; i < k; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Mat standardize(const Mat& x, json& stats) {
  const Vec mean = x.colwise().mean().transpose();
  Vec sd = ((x.rowwise() - mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (Eigen::Index i = 0; i < sd.size(); ++i)
    if (!(sd(i) > 0)) sd(i) = 1.0;
  stats = {{"mean", vec_json(mean)}, {"std", vec_json(sd)}};
  return (x.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();
}

// ---- generate ---------------------------------------------------------------

NeuronParams neuron_params(const json& j, const std::string& where, json& record) {
  NeuronParams p;
  const auto preset = opt<std::string>(j, "preset", "paper-bursting", where);
  if (preset != "paper-bursting") throw ConfigError(join_field(where, "preset"), "unknown preset '" + preset + "'");
  p = NeuronParams::paper_bursting();
  const std::vector<std::pair<const char*, double*>> fields = {
      {"c_m", &p.c_m},     {"g_l", &p.g_l},     {"e_l", &p.e_l},       {"g_na", &p.g_na},   {"e_na", &p.e_na},
      {"v_hna", &p.v_hna}, {"k_na", &p.k_na},   {"g_k", &p.g_k},       {"e_k", &p.e_k},     {"v_hk", &p.v_hk},
      {"k_k", &p.k_k},     {"tau_n", &p.tau_n}, {"g_m", &p.g_m},       {"v_hm", &p.v_hm},   {"k_m", &p.k_m},
      {"tau_h", &p.tau_h}, {"g_nmda", &p.g_nmda}, {"e_nmda", &p.e_nmda}};
  for (auto& [name, ptr] : fields) *ptr = opt<double>(j, name, *ptr, where);
  with_prefix(where, [&] { p.validate(); });
  record = json::object();
  for (auto& [name, ptr] : fields) record[name] = *ptr;
  return p;
}

void write_traj_outputs(const fs::path& out, Traj traj, bool standardize_obs, json& man) {
  if (standardize_obs) {
    json stats;
    traj.observations = standardize(traj.observations, stats);
    man["standardization"] = stats;
  }
  save_trajectory(out / "data", traj);
  export_csv(out / "data.csv", traj);
  man["outputs"] = {"data.bin", "data.json", "data.csv"};
  man["length"] = traj.length();
}

}  // namespace

std::string version_string() { return PLRNN_VERSION; }

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("PLRNN_LAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return int(v);
    throw ConfigError("PLRNN_LAB_THREADS", "must be a positive integer");
  }
  return int(std::max(1u, std::thread::hardware_concurrency()));
}

int cmd_generate(const json& config, const RunOptions& opt_in, std::ostream& log) {
  allow_keys(config, {"task", "seed", "T", "R", "test_R", "neuron", "lorenz", "mnist", "standardize"}, "");
  json cfg = config;
  const auto seed = opt_in.seed.value_or(opt<std::uint64_t>(config, "seed", 0, ""));
  cfg["seed"] = seed;
  const auto task = req<std::string>(config, "task", "");
  json man = manifest("generate", cfg, seed);

  if (task == "addition" || task == "multiplication") {
    for (const char* k : {"neuron", "lorenz", "mnist", "standardize"})
      if (config.contains(k)) throw ConfigError(k, "not used by task '" + task + "'");
    const auto T = req<long>(config, "T", "");
    const auto R = req<long>(config, "R", "");
    const auto R_test = opt<long>(config, "test_R", 0, "");
    if (R < 1) throw ConfigError("R", "must be at least 1");
    if (R_test < 0) throw ConfigError("test_R", "must be nonnegative");
    if (T < 20) throw ConfigError("T", "must be at least 20");
    auto gen = task == "addition" ? gen_addition : gen_multiplication;
    const TrialSet train = gen(R, T, seed);
    ensure_dir(opt_in.out);
    save_trialset(opt_in.out / "data", train);
    man["outputs"] = {"data.bin", "data.json"};
    if (R_test > 0) {
      // The test set uses the next seed so it never overlaps the training trials.
      save_trialset(opt_in.out / "test", gen(R_test, T, seed + 1));
      man["outputs"].push_back("test.bin");
      man["outputs"].push_back("test.json");
      man["test_seed"] = seed + 1;
    }
  } else if (task == "neuron") {
    const json j = config.value("neuron", json::object());
    allow_keys(j, {"preset", "c_m", "g_l", "e_l", "g_na", "e_na", "v_hna", "k_na", "g_k", "e_k", "v_hk", "k_k",
                   "tau_n", "g_m", "v_hm", "k_m", "tau_h", "g_nmda", "e_nmda", "T_ms", "dt_ms", "sample_ms", "v0",
                   "h0", "n0", "noise_std", "drop_ms"},
               "neuron");
    json record;
    const NeuronParams p = neuron_params(j, "neuron", record);
    man["neuron_params"] = record;
    const double T_ms = opt<double>(j, "T_ms", 750.0, "neuron");
    const double dt = opt<double>(j, "dt_ms", 0.02, "neuron");
    const double sample = opt<double>(j, "sample_ms", 0.5, "neuron");
    const double drop = opt<double>(j, "drop_ms", 0.0, "neuron");
    if (!(T_ms > 0)) throw ConfigError("neuron.T_ms", "must be positive");
    if (!(drop >= 0)) throw ConfigError("neuron.drop_ms", "must be nonnegative");
    Traj traj;
    with_prefix("neuron", [&] {
      traj = simulate_neuron(p, T_ms + drop, dt, sample, opt<double>(j, "v0", -60.0, "neuron"),
                             opt<double>(j, "h0", 0.0, "neuron"), opt<double>(j, "n0", 0.0, "neuron"),
                             opt<double>(j, "noise_std", 0.0, "neuron"), seed);
    });
    const auto skip = Eigen::Index(std::llround(drop / sample));
    const auto keep = traj.length() - skip;
    traj.latents = traj.latents.bottomRows(keep).eval();
    traj.observations = traj.observations.bottomRows(keep).eval();
    ensure_dir(opt_in.out);
    write_traj_outputs(opt_in.out, traj, opt<bool>(config, "standardize", false, ""), man);
  } else if (task == "lorenz") {
    const json j = config.value("lorenz", json::object());
    allow_keys(j, {"sigma", "rho", "beta", "T", "dt", "z0", "noise_std", "drop"}, "lorenz");
    const auto T = opt<long>(j, "T", 10000, "lorenz");
    const auto drop = opt<long>(j, "drop", 0, "lorenz");
    if (T < 1) throw ConfigError("lorenz.T", "must be at least 1");
    if (drop < 0) throw ConfigError("lorenz.drop", "must be nonnegative");
    Eigen::Vector3d z0(1.0, 1.0, 1.0);
    if (j.contains("z0")) {
      const auto v = number_list(j.at("z0"), "lorenz.z0");
      if (v.size() != 3) throw ConfigError("lorenz.z0", "expected three numbers");
      z0 = Eigen::Vector3d(v[0], v[1], v[2]);
    }
    Traj traj;
    with_prefix("lorenz", [&] {
      traj = simulate_lorenz(opt<double>(j, "sigma", 10.0, "lorenz"), opt<double>(j, "rho", 28.0, "lorenz"),
                             opt<double>(j, "beta", 8.0 / 3.0, "lorenz"), T + drop,
                             opt<double>(j, "dt", 0.01, "lorenz"), z0, opt<double>(j, "noise_std", 0.0, "lorenz"),
                             seed);
    });
    traj.latents = traj.latents.bottomRows(T).eval();
    traj.observations = traj.observations.bottomRows(T).eval();
    ensure_dir(opt_in.out);
    write_traj_outputs(opt_in.out, traj, opt<bool>(config, "standardize", false, ""), man);
  } else if (task == "mnist") {
    const json j = req<json>(config, "mnist", "");
    allow_keys(j, {"images", "labels", "subset"}, "mnist");
    std::optional<Eigen::Index> subset;
    if (j.contains("subset")) subset = as<long>(j.at("subset"), "mnist.subset");
    const TrialSet set = load_sequential_mnist(req<std::string>(j, "images", "mnist"),
                                               req<std::string>(j, "labels", "mnist"), subset);
    ensure_dir(opt_in.out);
    save_trialset(opt_in.out / "data", set);
    man["outputs"] = {"data.bin", "data.json"};
  } else {
    throw ConfigError("task", "unknown task '" + task + "'");
  }
  write_json(opt_in.out / "manifest.json", man);
  log << "generate: wrote " << task << " data to " << opt_in.out.string() << "\n";
  return kExitOk;
}

// ---- train ------------------------------------------------------------------

namespace {

struct ModelSpec {
  ModelKind kind = ModelKind::plrnn;
  int M = 0;
  int m_reg = 0;
  InitScheme init = InitScheme::regularized;
  bool rnn_identity = false;
  ObsKind obs = ObsKind::linear_gaussian;
  double init_scale = 1.0;
};

struct RegPlan {
  RegKind kind = RegKind::none;
  double tau_a = 0, tau_w = 0, tau_h = 0;
  bool per_T = false;
  std::vector<double> sweep;  // empty: a single run with the taus above
};

struct RunSpec {
  fs::path dir;
  std::uint64_t seed = 0;
  double tau_label = std::nan("");  // sweep value as given
  RegSpec reg;
};

struct RunResult {
  bool aborted = false;
  std::string message;
};

ModelSpec parse_model(const json& j, ModelKind default_kind) {
  allow_keys(j, {"kind", "M", "m_reg", "init", "obs", "init_scale"}, "model");
  ModelSpec m;
  m.kind = parse_enum(j, "kind", default_kind, "model", model_kind_from_string);
  m.M = req<int>(j, "M", "model");
  m.m_reg = opt<int>(j, "m_reg", 0, "model");
  if (m.M < 1) throw ConfigError("model.M", "must be at least 1");
  if (m.m_reg < 0 || m.m_reg > m.M)
    throw ConfigError("model.m_reg", "must lie in [0, M] = [0, " + std::to_string(m.M) + "]");
  if (m.kind == ModelKind::vanilla_rnn) {
    const auto init = opt<std::string>(j, "init", "identity", "model");
    if (init != "identity" && init != "random") throw ConfigError("model.init", "vanilla RNN init is identity or random");
    m.rnn_identity = init == "identity";
    if (j.contains("obs")) throw ConfigError("model.obs", "not used by the vanilla RNN");
  } else {
    m.init = parse_enum(j, "init", InitScheme::regularized, "model", init_scheme_from_string);
    m.obs = parse_enum(j, "obs", ObsKind::linear_gaussian, "model", obs_kind_from_string);
  }
  m.init_scale = opt<double>(j, "init_scale", 1.0, "model");
  if (!(m.init_scale > 0)) throw ConfigError("model.init_scale", "must be positive");
  return m;
}

RegPlan parse_reg(const json& j) {
  allow_keys(j, {"kind", "tau", "tau_a", "tau_w", "tau_h", "per_T", "sweep"}, "reg");
  RegPlan r;
  r.kind = parse_enum(j, "kind", RegKind::none, "reg", reg_kind_from_string);
  const double tau = opt<double>(j, "tau", 0.0, "reg");
  r.tau_a = opt<double>(j, "tau_a", tau, "reg");
  r.tau_w = opt<double>(j, "tau_w", tau, "reg");
  r.tau_h = opt<double>(j, "tau_h", tau, "reg");
  r.per_T = opt<bool>(j, "per_T", false, "reg");
  if (j.contains("sweep")) {
    if (j.contains("tau") || j.contains("tau_a") || j.contains("tau_w") || j.contains("tau_h"))
      throw ConfigError("reg.sweep", "cannot be combined with fixed tau values");
    r.sweep = number_list(j.at("sweep"), "reg.sweep");
    if (r.sweep.empty()) throw ConfigError("reg.sweep", "must not be empty");
    for (double v : r.sweep)
      if (!(v >= 0)) throw ConfigError("reg.sweep", "values must be nonnegative");
  }
  for (double v : {r.tau_a, r.tau_w, r.tau_h})
    if (!(v >= 0)) throw ConfigError("reg.tau", "must be nonnegative");
  return r;
}

// tau = 0 in a sweep means "no regularization" for the penalty, but the
// partition (m_reg) and hence the init scheme stays as configured.
RegSpec make_reg(const RegPlan& plan, double tau_a, double tau_w, double tau_h, int m_reg, double T) {
  const double s = plan.per_T ? 1.0 / T : 1.0;
  return {plan.kind, tau_a * s, tau_w * s, tau_h * s, m_reg};
}

std::vector<std::uint64_t> parse_seeds(const json& config, const RunOptions& o) {
  if (o.seed) return {*o.seed};
  if (config.contains("seeds")) {
    if (config.contains("seed")) throw ConfigError("seeds", "give either seed or seeds");
    const auto& v = config.at("seeds");
    if (!v.is_array() || v.empty()) throw ConfigError("seeds", "expected a non-empty array of integers");
    std::vector<std::uint64_t> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as<std::uint64_t>(v[i], "seeds[" + std::to_string(i) + "]"));
    return out;
  }
  return {opt<std::uint64_t>(config, "seed", 0, "")};
}

std::vector<RunSpec> plan_runs(const RegPlan& plan, const std::vector<std::uint64_t>& seeds, int m_reg, double T,
                               const fs::path& out) {
  std::vector<RunSpec> runs;
  const bool many_seeds = seeds.size() > 1;
  auto add = [&](const fs::path& base, double label, const RegSpec& reg) {
    for (auto s : seeds) {
      RunSpec r;
      r.dir = many_seeds ? base / ("seed_" + std::to_string(s)) : base;
      r.seed = s;
      r.tau_label = label;
      r.reg = reg;
      runs.push_back(r);
    }
  };
  if (plan.sweep.empty()) {
    add(out, std::nan(""), make_reg(plan, plan.tau_a, plan.tau_w, plan.tau_h, m_reg, T));
  } else {
    for (double v : plan.sweep) add(out / ("tau_" + tau_label(v)), v, make_reg(plan, v, v, v, m_reg, T));
  }
  return runs;
}

json reg_json(const RegSpec& r) {
  return {{"kind", to_string(r.kind)}, {"tau_a", r.tau_a}, {"tau_w", r.tau_w}, {"tau_h", r.tau_h}, {"m_reg", r.m_reg}};
}

SgdConfig parse_sgd(const json& j, bool classification) {
  allow_keys(j, {"lr", "clip", "batch_size", "epochs", "loss", "task_weight", "correct_threshold"}, "sgd");
  SgdConfig c;
  c.lr = opt<double>(j, "lr", c.lr, "sgd");
  c.clip = opt<double>(j, "clip", c.clip, "sgd");
  c.batch_size = opt<int>(j, "batch_size", c.batch_size, "sgd");
  c.epochs = opt<int>(j, "epochs", c.epochs, "sgd");
  c.loss_kind = parse_enum(j, "loss", classification ? LossKind::cross_entropy_final_step : LossKind::mse_final_step,
                           "sgd", loss_kind_from_string);
  c.task_weight = opt<double>(j, "task_weight", c.task_weight, "sgd");
  c.correct_threshold = opt<double>(j, "correct_threshold", c.correct_threshold, "sgd");
  with_prefix("sgd", [&] { c.validate(); });
  return c;
}

EmConfig parse_em(const json& j) {
  allow_keys(j, {"anneal", "max_iter", "tol", "estep_max_iter", "abort_after", "mode", "refit_gamma", "hold_sigma_while_annealing"}, "em");
  EmConfig c;
  if (j.contains("anneal")) c.anneal = number_list(j.at("anneal"), "em.anneal");
  c.max_iter = opt<int>(j, "max_iter", c.max_iter, "em");
  c.tol = opt<double>(j, "tol", c.tol, "em");
  c.estep_max_iter = opt<int>(j, "estep_max_iter", c.estep_max_iter, "em");
  c.abort_after = opt<int>(j, "abort_after", c.abort_after, "em");
  c.mode = parse_enum(j, "mode", c.mode, "em", expectation_mode_from_string);
  c.refit_gamma = opt<bool>(j, "refit_gamma", c.refit_gamma, "em");
  c.hold_sigma_while_annealing = opt<bool>(j, "hold_sigma_while_annealing", c.hold_sigma_while_annealing, "em");
  with_prefix("em", [&] { c.validate(); });
  return c;
}

template <typename P>
RunResult finish_sgd(const RunSpec& run, const TrainState<P>& st, const json& man_base) {
  save_checkpoint(run.dir / "checkpoint", st);
  write_trace_csv(run.dir / "trace.csv", st.trace);
  if constexpr (std::is_same_v<P, Params>) {
    save_params(run.dir / "model", st.best_params);
  } else {
    save_rnn_params(run.dir / "model", st.best_params);
  }
  json man = man_base;
  man["seed"] = run.seed;
  man["reg"] = reg_json(run.reg);
  if (!std::isnan(run.tau_label)) man["tau_sweep_value"] = run.tau_label;
  man["result"] = {{"best_loss", st.best_loss}, {"best_epoch", st.best_epoch}, {"epochs", st.epoch},
                   {"diverged", st.diverged}, {"diagnostic", st.diagnostic}};
  if (!st.trace.empty()) man["result"]["final_p_correct"] = st.trace.back().p_correct;
  write_json(run.dir / "manifest.json", man);
  return {st.diverged, st.diverged ? st.diagnostic : "best loss " + tau_label(st.best_loss)};
}

}  // namespace

int cmd_train(const json& config, const RunOptions& o, std::ostream& log) {
  allow_keys(config, {"trainer", "data", "test_data", "model", "reg", "sgd", "em", "seed", "seeds", "resume"}, "");
  const auto trainer = req<std::string>(config, "trainer", "");
  if (trainer != "sgd" && trainer != "em") throw ConfigError("trainer", "expected 'sgd' or 'em'");
  if (trainer == "sgd" && config.contains("em")) throw ConfigError("em", "not used by the sgd trainer");
  if (trainer == "em" && config.contains("sgd")) throw ConfigError("sgd", "not used by the em trainer");
  const fs::path data_path = req<std::string>(config, "data", "");
  const auto seeds = parse_seeds(config, o);
  const ModelSpec model = parse_model(req<json>(config, "model", ""), ModelKind::plrnn);
  const RegPlan plan = parse_reg(config.value("reg", json::object()));
  const bool resume = opt<bool>(config, "resume", false, "");

  json cfg = config;
  if (o.seed) {
    cfg.erase("seeds");
    cfg["seed"] = *o.seed;
  }
  const json man_base = manifest("train", cfg, seeds.front());
  std::vector<RunResult> results;
  std::vector<RunSpec> runs;

  if (trainer == "sgd") {
    const TrialSet data = load_trialset(data_path);
    std::optional<TrialSet> test;
    if (config.contains("test_data")) test = load_trialset(req<std::string>(config, "test_data", ""));
    SgdConfig base = parse_sgd(config.value("sgd", json::object()), data.classification());
    const Eigen::Index N = data.classification() ? data.n_classes : 1;
    runs = plan_runs(plan, seeds, model.m_reg, double(data.T), o.out);
    for (const auto& r : runs) with_prefix("reg", [&] { r.reg.validate(model.M); });
    results.resize(runs.size());
    parallel_for(runs.size(), o.threads, [&](std::size_t i) {
      const RunSpec& run = runs[i];
      ensure_dir(run.dir);
      SgdConfig c = base;
      c.seed = run.seed;
      c.reg = run.reg;
      c.model_kind = model.kind;
      const TrialSet* test_ptr = test ? &*test : nullptr;
      const bool have_ckpt = resume && fs::exists(fs::path(run.dir / "checkpoint").replace_extension(".json"));
      if (model.kind == ModelKind::plrnn) {
        TrainState<Params> st = have_ckpt
                                    ? load_plrnn_checkpoint(run.dir / "checkpoint")
                                    : start_training(init_plrnn(model.init, model.M, data.K, N, model.m_reg, run.seed,
                                                                model.obs, model.init_scale));
        results[i] = finish_sgd(run, train(c, std::move(st), data, test_ptr), man_base);
      } else {
        TrainState<RnnParams> st = have_ckpt ? load_rnn_checkpoint(run.dir / "checkpoint")
                                             : start_training(init_vanilla_rnn(model.rnn_identity, model.M, data.K,
                                                                               N, run.seed));
        results[i] = finish_sgd(run, train(c, std::move(st), data, test_ptr), man_base);
      }
    });
  } else {
    if (model.kind != ModelKind::plrnn) throw ConfigError("model.kind", "EM trains the PLRNN only");
    if (resume) throw ConfigError("resume", "only supported by the sgd trainer");
    if (config.contains("test_data")) throw ConfigError("test_data", "not used by the em trainer");
    const Traj data = load_trajectory(data_path);
    if (!data.has_observations()) throw ConfigError("data", "trajectory has no observations");
    const Mat& X = data.observations;
    const Mat S = data.has_inputs() ? data.inputs : Mat(X.rows(), 0);
    const EmConfig base = parse_em(config.value("em", json::object()));
    if (model.obs == ObsKind::softmax_categorical) throw ConfigError("model.obs", "EM needs a Gaussian observation model");
    runs = plan_runs(plan, seeds, model.m_reg, double(X.rows()), o.out);
    for (const auto& r : runs) {
      with_prefix("reg", [&] { r.reg.validate(model.M); });
      if (r.reg.kind == RegKind::orthogonal) throw ConfigError("reg.kind", "orthogonal is not supported by EM");
    }
    results.resize(runs.size());
    parallel_for(runs.size(), o.threads, [&](std::size_t i) {
      const RunSpec& run = runs[i];
      ensure_dir(run.dir);
      EmConfig c = base;
      c.reg = run.reg;
      const Params init = em_initial_params(model.init, model.M, X, S.cols(), model.m_reg, run.seed, model.obs);
      const EmFit fit = fit_em(c, init, X, S);
      save_params(run.dir / "model", fit.params);
      write_em_trace_csv(run.dir / "trace.csv", fit.trace);
      if (fit.state.length() > 0) save_em_state(run.dir / "em_state", fit.state);
      json man = man_base;
      man["seed"] = run.seed;
      man["reg"] = reg_json(run.reg);
      if (!std::isnan(run.tau_label)) man["tau_sweep_value"] = run.tau_label;
      man["result"] = {{"iterations", fit.trace.size()},
                       {"final_elbo", fit.trace.empty() ? std::nan("") : fit.trace.back().elbo},
                       {"aborted", fit.aborted},
                       {"diagnostic", fit.diagnostic}};
      write_json(run.dir / "manifest.json", man);
      results[i] = {fit.aborted, fit.aborted ? fit.diagnostic : "final ELBO " + tau_label(fit.trace.back().elbo)};
    });
  }

  int code = kExitOk;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    log << "train: " << runs[i].dir.string() << ": " << (results[i].aborted ? "ABORTED " : "") << results[i].message
        << "\n";
    if (results[i].aborted) code = kExitAbort;
  }
  return code;
}

// ---- analyze ----------------------------------------------------------------

namespace {

SearchMode parse_search(const json& j, Eigen::Index M) {
  if (j.is_null()) return M <= 20 ? SearchMode::exhaustive() : SearchMode::sampled(10000, 0);
  allow_keys(j, {"mode", "n", "seed"}, "search");
  const auto mode = opt<std::string>(j, "mode", "exhaustive", "search");
  if (mode == "exhaustive") {
    if (M > 20) throw ConfigError("search.mode", "exhaustive search needs M <= 20");
    return SearchMode::exhaustive();
  }
  if (mode != "sampled") throw ConfigError("search.mode", "expected 'exhaustive' or 'sampled'");
  const int n = opt<int>(j, "n", 10000, "search");
  if (n < 1) throw ConfigError("search.n", "must be at least 1");
  return SearchMode::sampled(n, opt<std::uint64_t>(j, "seed", 0, "search"));
}

json fixed_point_json(const FixedPointReport& r) {
  return {{"region", region_bits(r.region.d_vec)},
          {"z", vec_json(r.z_star)},
          {"admissible", r.admissible},
          {"degenerate", r.degenerate},
          {"consistent", r.consistent},
          {"stable", r.stable},
          {"max_abs_eig", r.max_abs_eig}};
}

void write_fixed_points_csv(const fs::path& path, const std::vector<FixedPointReport>& fps, Eigen::Index M) {
  std::vector<std::string> header = {"admissible", "degenerate", "consistent", "stable", "max_abs_eig"};
  for (Eigen::Index m = 0; m < M; ++m) header.push_back("z" + std::to_string(m + 1));
  std::vector<std::vector<double>> rows;
  for (const auto& r : fps) {
    std::vector<double> row = {double(r.admissible), double(r.degenerate), double(r.consistent), double(r.stable),
                               r.max_abs_eig};
    for (Eigen::Index m = 0; m < M; ++m) row.push_back(r.z_star.size() ? r.z_star(m) : std::nan(""));
    rows.push_back(std::move(row));
  }
  write_csv(path, header, rows);
}

int analyze_sweep(const json& config, const RunOptions& o, std::ostream& log) {
  allow_keys(config, {"sweep_dir", "search"}, "");
  const fs::path dir = req<std::string>(config, "sweep_dir", "");
  if (!fs::is_directory(dir)) throw ConfigError("sweep_dir", "not a directory: " + dir.string());
  struct Entry {
    double tau;
    std::string name;
    std::vector<fs::path> models;
  };
  std::vector<Entry> entries;
  for (const auto& d : fs::directory_iterator(dir)) {
    const auto name = d.path().filename().string();
    if (!d.is_directory() || name.rfind("tau_", 0) != 0) continue;
    Entry e{std::strtod(name.c_str() + 4, nullptr), name, {}};
    for (const auto& f : fs::recursive_directory_iterator(d.path()))
      if (f.path().filename() == "model.json") e.models.push_back(f.path().parent_path() / "model");
    std::sort(e.models.begin(), e.models.end());
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ConfigError("sweep_dir", "contains no tau_<value> subdirectories");
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.tau < b.tau; });

  std::vector<std::vector<double>> per_system, summary;
  json report = json::array();
  for (const auto& e : entries) {
    std::vector<std::vector<FixedPointReport>> systems;
    for (const auto& m : e.models) {
      const Params p = load_params(m);
      systems.push_back(enumerate_fixed_points(p, parse_search(config.value("search", json()), p.latent_dim())));
    }
    const EigHistogram h = eig_histogram(systems);
    std::vector<double> finite;
    for (std::size_t i = 0; i < h.system_deviation.size(); ++i) {
      per_system.push_back({e.tau, double(i), h.system_deviation[i]});
      if (!std::isnan(h.system_deviation[i])) finite.push_back(h.system_deviation[i]);
    }
    double mean = std::nan("");
    if (!finite.empty()) {
      mean = 0;
      for (double v : finite) mean += v / double(finite.size());
    }
    const double med = median(h.system_deviation);
    summary.push_back({e.tau, double(systems.size()), double(finite.size()), med, mean});
    report.push_back({{"tau", e.tau}, {"dir", e.name}, {"systems", systems.size()}, {"with_fixed_point", finite.size()},
                      {"median_deviation", med}, {"mean_deviation", mean}});
  }
  ensure_dir(o.out);
  write_csv(o.out / "deviation.csv", {"tau", "system", "deviation"}, per_system);
  write_csv(o.out / "deviation_summary.csv", {"tau", "systems", "with_fixed_point", "median_deviation", "mean_deviation"},
            summary);
  json man = manifest("analyze", config, 0);
  man["summary"] = report;
  write_json(o.out / "manifest.json", man);
  log << "analyze: aggregated " << entries.size() << " tau values into " << (o.out / "deviation_summary.csv").string()
      << "\n";
  return kExitOk;
}

}  // namespace

int cmd_analyze(const json& config, const RunOptions& o, std::ostream& log) {
  require_object(config, "");
  if (config.contains("sweep_dir")) return analyze_sweep(config, o, log);
  allow_keys(config, {"model", "search", "k_max", "theorems", "dataset", "metrics", "kl_bins", "sample_rate_hz",
                      "split_hz", "psd_channel", "nstep", "gen_T", "seed"},
             "");
  const auto seed = o.seed.value_or(opt<std::uint64_t>(config, "seed", 0, ""));
  std::vector<std::string> metrics;
  if (config.contains("metrics")) {
    const auto& v = config.at("metrics");
    if (!v.is_array()) throw ConfigError("metrics", "expected an array of metric names");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const auto m = as<std::string>(v[i], "metrics[" + std::to_string(i) + "]");
      if (m != "kl" && m != "psd" && m != "nstep") throw ConfigError("metrics", "unknown metric '" + m + "'");
      metrics.push_back(m);
    }
  }
  if (!metrics.empty() && !config.contains("dataset"))
    throw ConfigError("dataset", "required when metrics are requested");
  const fs::path model_path = req<std::string>(config, "model", "");
  const BlockFile file = read_block_file(model_path);
  if (file.kind != "plrnn_params") throw ConfigError("model", "expected a PLRNN parameter file, found '" + file.kind + "'");
  const Params p = params_from_blocks(file);
  const auto M = p.latent_dim();
  const SearchMode search = parse_search(config.value("search", json()), M);
  const int k_max = opt<int>(config, "k_max", 2, "");
  if (k_max < 1) throw ConfigError("k_max", "must be at least 1");

  json report;
  report["model"] = model_path.string();
  const auto fps = enumerate_fixed_points(p, search);
  json fp_list = json::array();
  long degenerate = 0, admissible = 0;
  for (const auto& r : fps) {
    if (r.admissible) ++admissible;
    if (r.degenerate) ++degenerate;
    if (r.admissible || r.degenerate) fp_list.push_back(fixed_point_json(r));
  }
  report["fixed_points"] = {{"candidates", fps.size()}, {"admissible", admissible}, {"degenerate_regions", degenerate},
                            {"reported", fp_list}};
  const EigHistogram hist = eig_histogram({fps});
  report["eigenvalues"] = {{"included", hist.included},
                           {"excluded_degenerate", hist.excluded_degenerate},
                           {"excluded_inadmissible", hist.excluded_inadmissible},
                           {"deviation_from_one", hist.system_deviation.front()}};

  const CycleSearchResult cyc = find_cycles(p, k_max, search);
  json cycles = json::array();
  for (const auto& c : cyc.cycles)
    cycles.push_back({{"k", c.k}, {"points", mat_json(c.points)}, {"stable", c.stable}, {"max_abs_eig", c.max_abs_eig}});
  json degenerate_cycles = json::array();
  for (const auto& c : cyc.degenerate) degenerate_cycles.push_back({{"k", c.k}, {"points", mat_json(c.points)}});
  report["cycles"] = {{"k_max", k_max},
                      {"candidates", cyc.candidates},
                      {"found", cycles},
                      {"singular_candidates", cyc.degenerate_count},
                      {"singular_representatives", degenerate_cycles}};
  report["line_attractor"] = degenerate > 0 || cyc.degenerate_count > 0;

  if (config.contains("theorems")) {
    const json& j = config.at("theorems");
    allow_keys(j, {"T_max", "z0"}, "theorems");
    const auto T_max = opt<long>(j, "T_max", 2000, "theorems");
    if (T_max < 1) throw ConfigError("theorems.T_max", "must be at least 1");
    Vec z0 = p.mu0;
    if (j.contains("z0")) {
      const auto v = number_list(j.at("z0"), "theorems.z0");
      if (Eigen::Index(v.size()) != M) throw ConfigError("theorems.z0", "expected " + std::to_string(M) + " numbers");
      z0 = Eigen::Map<const Vec>(v.data(), M);
    }
    const auto tc = check_theorems(p, z0, T_max);
    static const char* kinds[] = {"fixed_point", "cycle", "none"};
    json t = {{"converged_to", kinds[int(tc.converged_to)]},
              {"cycle_k", tc.cycle_k},
              {"converged_at", tc.converged_at},
              {"diverged", tc.diverged},
              {"rho_low", tc.rho_low},
              {"rho_up", tc.rho_up},
              {"attractor_sigma_max", tc.attractor_sigma_max},
              {"visited_sigma_max", tc.visited_sigma_max},
              {"gradient_plateau", norms_plateau(tc.grad_w_norms, std::min<Eigen::Index>(500, T_max / 2))}};
    try {
      t["rho_bound"] = theorem2_rho_bound(p);
    } catch (const ConfigError&) {
      t["rho_bound"] = nullptr;  // partition is not an exact manifold attractor
    }
    report["theorems"] = t;
  }

  ensure_dir(o.out);
  write_fixed_points_csv(o.out / "fixed_points.csv", fps, M);
  {
    std::vector<std::vector<double>> rows;
    for (std::size_t b = 0; b < hist.counts.size(); ++b)
      rows.push_back({hist.bin_left[b], hist.bin_right[b], double(hist.counts[b])});
    write_csv(o.out / "eig_hist.csv", {"bin_left", "bin_right", "count"}, rows);
  }

  int code = kExitOk;
  if (!metrics.empty()) {
    const Traj data = load_trajectory(req<std::string>(config, "dataset", ""));
    if (!data.has_observations()) throw ConfigError("dataset", "trajectory has no observations");
    const Mat& X = data.observations;
    if (X.cols() != p.obs_dim()) throw ConfigError("dataset", "observation dimension does not match the model");
    const Mat S = data.has_inputs() ? data.inputs : Mat(X.rows(), 0);
    if (S.cols() != p.input_dim()) throw ConfigError("dataset", "input dimension does not match the model");
    const auto gen_T = opt<long>(config, "gen_T", long(X.rows()), "");
    if (gen_T < 2) throw ConfigError("gen_T", "must be at least 2");
    json m;
    // Free run from the last inferred state; inputs are absent during the run.
    const EmState st = estep(p, X, S);
    Traj gen;
    try {
      gen = generate(p, Vec(st.latents().row(X.rows() - 1).transpose()), Mat(), gen_T, seed, false);
    } catch (const DivergedError& e) {
      m["generation_diverged_at"] = e.index();
      code = kExitAbort;
    }
    for (const auto& name : metrics) {
      if (name == "kl") {
        const int bins = opt<int>(config, "kl_bins", 30, "");
        if (bins < 1) throw ConfigError("kl_bins", "must be at least 1");
        m["kl_state_space"] = gen.has_observations() ? kl_state_space(X, gen.observations, bins)
                                                      : std::numeric_limits<double>::infinity();
      } else if (name == "psd") {
        const double fs_hz = req<double>(config, "sample_rate_hz", "");
        const double split = req<double>(config, "split_hz", "");
        const int ch = opt<int>(config, "psd_channel", 0, "");
        if (ch < 0 || ch >= X.cols()) throw ConfigError("psd_channel", "out of range");
        if (!gen.has_observations()) continue;
        const Eigen::Index n = std::min<Eigen::Index>(X.rows(), gen.observations.rows());
        const PsdMse e = psd_mse(X.col(ch).head(n), gen.observations.col(ch).head(n), fs_hz, split);
        m["psd_mse"] = {{"total", e.total}, {"low", e.low}, {"high", e.high}, {"channel", ch}};
        const Spectrum a = power_spectrum(X.col(ch).head(n), fs_hz);
        const Spectrum b = power_spectrum(gen.observations.col(ch).head(n), fs_hz);
        std::vector<std::vector<double>> rows;
        for (Eigen::Index i = 0; i < a.freq_hz.size(); ++i) rows.push_back({a.freq_hz(i), a.power(i), b.power(i)});
        write_csv(o.out / "spectrum.csv", {"freq_hz", "p_true", "p_gen"}, rows);
      } else {
        const int n = opt<int>(config, "nstep", 10, "");
        if (n < 1) throw ConfigError("nstep", "must be at least 1");
        m["nstep_mse"] = {{"n", n}, {"mse", nstep_mse(p, X, S, n)}};
      }
    }
    report["metrics"] = m;
  }
  write_json(o.out / "report.json", report);
  json cfg = config;
  cfg["seed"] = seed;
  write_json(o.out / "manifest.json", manifest("analyze", cfg, seed));
  log << "analyze: " << admissible << " admissible fixed points, " << degenerate << " singular regions, "
      << cyc.cycles.size() << " cycles up to k = " << k_max << "\n";
  return code;
}

// ---- evaluate ---------------------------------------------------------------

int cmd_evaluate(const json& config, const RunOptions& o, std::ostream& log) {
  allow_keys(config, {"model", "data", "loss", "correct_threshold"}, "");
  const fs::path model_path = req<std::string>(config, "model", "");
  const TrialSet data = load_trialset(req<std::string>(config, "data", ""));
  const LossKind loss = parse_enum(
      config, "loss", data.classification() ? LossKind::cross_entropy_final_step : LossKind::mse_final_step, "",
      loss_kind_from_string);
  const double thr = opt<double>(config, "correct_threshold", 0.04, "");
  if (!(thr >= 0)) throw ConfigError("correct_threshold", "must be nonnegative");
  const BlockFile file = read_block_file(model_path);
  json res = {{"trials", data.size()}, {"loss_kind", to_string(loss)}};
  try {
    if (file.kind == "plrnn_params") {
      const Params p = params_from_blocks(file);
      res["loss"] = mean_loss(p, data, loss);
      res["p_correct"] = p_correct(p, data, loss, thr);
    } else if (file.kind == "vanilla_rnn_params") {
      const RnnParams p = rnn_params_from_blocks(file);
      res["loss"] = mean_loss(p, data, loss);
      res["p_correct"] = p_correct(p, data, loss, thr);
    } else {
      throw ConfigError("model", "expected a parameter file, found '" + file.kind + "'");
    }
  } catch (const DivergedError& e) {
    log << "evaluate: model diverged on trial " << e.index() << "\n";
    return kExitAbort;
  }
  ensure_dir(o.out);
  write_json(o.out / "metrics.json", res);
  write_json(o.out / "manifest.json", manifest("evaluate", config, 0));
  log << "evaluate: loss " << res["loss"].get<double>() << ", p_correct " << res["p_correct"].get<double>() << "\n";
  return kExitOk;
}

// ---- command line -----------------------------------------------------------

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Piecewise-linear RNN toolkit: data generation, training, analysis and evaluation"};
  app.require_subcommand(1);
  std::string config_path, out_dir = ".";
  std::int64_t seed = -1;
  int threads = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "seed override")->check(CLI::NonNegativeNumber);
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--threads", threads, "worker threads (falls back to PLRNN_LAB_THREADS)")
        ->check(CLI::PositiveNumber);
  };
  auto* gen = app.add_subcommand("generate", "write a benchmark data set");
  auto* trn = app.add_subcommand("train", "train by BPTT (sgd) or EM");
  auto* ana = app.add_subcommand("analyze", "fixed points, cycles, theorem checks and metrics");
  auto* eva = app.add_subcommand("evaluate", "loss and accuracy of a model on a trial set");
  for (auto* s : {gen, trn, ana, eva}) add_common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    json config;
    {
      std::ifstream f(config_path);
      try {
        config = json::parse(f);
      } catch (const json::parse_error& e) {
        throw ConfigError("config", std::string("invalid JSON: ") + e.what());
      }
    }
    RunOptions o;
    o.out = out_dir;
    if (seed >= 0) o.seed = std::uint64_t(seed);
    o.threads = resolve_threads(threads);
    if (gen->parsed()) return cmd_generate(config, o, out);
    if (trn->parsed()) return cmd_train(config, o, out);
    if (ana->parsed()) return cmd_analyze(config, o, out);
    return cmd_evaluate(config, o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DivergedError& e) {
    err << "numerical abort: " << e.what() << "\n";
    return kExitAbort;
  } catch (const PlrnnError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace plrnn::cli
