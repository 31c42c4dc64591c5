#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "plrnn/tasks.hpp"

using namespace plrnn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "plrnn_test_tasks";
  fs::create_directories(dir);
  return dir / name;
}

void put_be32(std::ofstream& os, std::uint32_t v) {
  const char b[4] = {char(v >> 24), char(v >> 16), char(v >> 8), char(v)};
  os.write(b, 4);
}

void write_idx(const fs::path& p, std::uint32_t magic, const std::vector<std::uint32_t>& dims,
               const std::vector<std::uint8_t>& data) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  put_be32(os, magic);
  for (auto d : dims) put_be32(os, d);
  os.write(reinterpret_cast<const char*>(data.data()), std::streamsize(data.size()));
}

}  // namespace

TEST_CASE("addition trials satisfy the task constraints") {
  for (Eigen::Index T : {20, 21, 30, 101}) {
    TrialSet s = gen_addition(2000, T, 7);
    CHECK(s.K == 2);
    CHECK(s.inputs.rows() == 2 * T);
    for (Eigen::Index r = 0; r < s.size(); ++r) {
      int bits = 0;
      for (Eigen::Index t = 0; t < T; ++t) {
        const double m = s.inputs(2 * t + 1, r);
        CHECK((m == 0.0 || m == 1.0));
        bits += m == 1.0;
        CHECK(s.inputs(2 * t, r) >= 0.0);
        CHECK(s.inputs(2 * t, r) < 1.0);
      }
      REQUIRE(bits == 2);
      auto [a, b] = marked_steps(s, r);
      // Either marker may be the one drawn below 10.
      const bool ok = (a < 10 && 2 * b < T) || (b < 10 && 2 * a < T);
      CHECK(ok);
      CHECK(s.targets(r) == s.inputs(2 * a, r) + s.inputs(2 * b, r));
      CHECK(s.targets(r) >= 0.0);
      CHECK(s.targets(r) <= 2.0);
    }
  }
  CHECK_THROWS_AS(gen_addition(10, 19, 1), ConfigError);
}

TEST_CASE("trial generation is deterministic and prefix-stable") {
  TrialSet a = gen_addition(500, 30, 3);
  TrialSet b = gen_addition(500, 30, 3);
  TrialSet c = gen_addition(100, 30, 3);
  TrialSet d = gen_addition(500, 30, 4);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);
  CHECK(c.inputs == a.inputs.leftCols(100));
  CHECK(a.inputs != d.inputs);
  TrialSet sl = a.slice(100, 50);
  CHECK(sl.size() == 50);
  CHECK(sl.targets(0) == a.targets(100));
  CHECK(a.trial_inputs(3)(5, 0) == a.inputs(10, 3));
}

TEST_CASE("target statistics") {
  TrialSet add = gen_addition(100000, 20, 11);
  CHECK(std::abs(add.targets.mean() - 1.0) < 0.01);
  TrialSet mul = gen_multiplication(100000, 20, 11);
  CHECK(std::abs(mul.targets.mean() - 0.25) < 0.01);
  CHECK(mul.targets.minCoeff() >= 0.0);
  CHECK(mul.targets.maxCoeff() <= 1.0);
  for (Eigen::Index r = 0; r < 1000; ++r) {
    auto [a, b] = marked_steps(mul, r);
    CHECK(mul.targets(r) == mul.inputs(2 * a, r) * mul.inputs(2 * b, r));
  }
  // Every admissible marker position occurs.
  std::vector<int> hits(10, 0);
  for (Eigen::Index r = 0; r < 10000; ++r) {
    auto [a, b] = marked_steps(add, r);
    ++hits[a];
    ++hits[b];
  }
  for (int h : hits) CHECK(h > 0);
}

TEST_CASE("IDX loader parses a synthetic fixture bit-exactly") {
  std::vector<std::uint8_t> pixels(3 * 4 * 5);
  for (std::size_t i = 0; i < pixels.size(); ++i) pixels[i] = std::uint8_t((i * 37) % 256);
  pixels[0] = 255;
  for (int i = 20; i < 40; ++i) pixels[i] = 0;  // second image all zero
  write_idx(scratch("img"), 0x803, {3, 4, 5}, pixels);
  write_idx(scratch("lbl"), 0x801, {3}, {7, 0, 9});
  TrialSet s = load_sequential_mnist(scratch("img"), scratch("lbl"));
  CHECK(s.T == 20);
  CHECK(s.K == 1);
  CHECK(s.size() == 3);
  CHECK(s.n_classes == 10);
  CHECK(s.targets == Vec::Map(std::vector<double>{7, 0, 9}.data(), 3));
  CHECK(s.inputs(0, 0) == 1.0);
  CHECK(s.inputs.col(1).isZero(0));
  for (int r = 0; r < 3; ++r)
    for (int t = 0; t < 20; ++t) CHECK(s.inputs(t, r) == pixels[r * 20 + t] / 255.0);
  // Row-major flattening: pixel (row 1, col 2) of image 2 is step 1 * 5 + 2.
  CHECK(s.inputs(7, 2) == pixels[40 + 7] / 255.0);

  TrialSet sub = load_sequential_mnist(scratch("img"), scratch("lbl"), 2);
  CHECK(sub.size() == 2);
}

TEST_CASE("IDX loader rejects malformed files with offsets") {
  write_idx(scratch("bad_magic"), 0x804, {1, 2, 2}, {1, 2, 3, 4});
  write_idx(scratch("lbl1"), 0x801, {1}, {3});
  try {
    load_sequential_mnist(scratch("bad_magic"), scratch("lbl1"));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  write_idx(scratch("short"), 0x803, {2, 2, 2}, {1, 2, 3});
  try {
    read_idx(scratch("short"), 0x803);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 16 + 3);
  }
  {
    std::ofstream os(scratch("header_cut"), std::ios::binary);
    put_be32(os, 0x803);
    os.write("\0\0", 2);
  }
  CHECK_THROWS_AS(read_idx(scratch("header_cut"), 0x803), FormatError);
  write_idx(scratch("img2"), 0x803, {2, 1, 1}, {1, 2});
  CHECK_THROWS_AS(load_sequential_mnist(scratch("img2"), scratch("lbl1")), FormatError);
  write_idx(scratch("lbl_bad"), 0x801, {1}, {12});
  write_idx(scratch("img1"), 0x803, {1, 1, 1}, {1});
  CHECK_THROWS_AS(load_sequential_mnist(scratch("img1"), scratch("lbl_bad")), FormatError);
}

TEST_CASE("standard MNIST training header") {
  std::vector<std::uint8_t> data(std::size_t(60000) * 784, 0);
  write_idx(scratch("train_img"), 0x803, {60000, 28, 28}, data);
  IdxFile f = read_idx(scratch("train_img"), 0x803);
  CHECK(f.dims == std::vector<std::uint32_t>{60000, 28, 28});
  CHECK(f.type_code == 0x08);
  fs::remove(scratch("train_img"));
}

TEST_CASE("neuron leak-only decay matches the closed form") {
  NeuronParams p;
  p.g_na = p.g_k = p.g_m = p.g_nmda = 0;
  Traj tr = simulate_neuron(p, 5.0, 0.001, 0.01, -40, 0.1, 0.2);
  const double tau = p.c_m / p.g_l;
  CHECK(tau == 0.75);
  for (Eigen::Index i = 0; i < tr.latents.rows(); ++i) {
    const double t = i * 0.01;
    CHECK(std::abs(tr.latents(i, 0) - (p.e_l + 40 * std::exp(-t / tau))) < 1e-6);
  }
}

TEST_CASE("RK4 shows fourth-order convergence") {
  NeuronParams p;
  p.g_na = p.g_k = p.g_m = p.g_nmda = 0;
  std::vector<double> hs{0.2, 0.1, 0.05, 0.025}, errs;
  for (double h : hs) {
    Traj tr = simulate_neuron(p, 2.0, h, 0.2, -40, 0, 0);
    const double exact = p.e_l + 40 * std::exp(-2.0 * 0 - (tr.latents.rows() - 1) * 0.2 / 0.75);
    errs.push_back(std::abs(tr.latents(tr.latents.rows() - 1, 0) - exact));
  }
  for (std::size_t i = 1; i < hs.size(); ++i) {
    const double slope = std::log(errs[i - 1] / errs[i]) / std::log(hs[i - 1] / hs[i]);
    CHECK(slope == doctest::Approx(4.0).epsilon(0.3 / 4.0));
  }
}

TEST_CASE("default neuron parameters produce sustained bursting") {
  Traj tr = simulate_neuron(NeuronParams::paper_bursting(), 3000, 0.02, 0.5, -60, 0, 0);
  std::vector<int> bursts;
  double prev = tr.latents(0, 0), last_spike = -1e9;
  for (Eigen::Index i = 1; i < tr.latents.rows(); ++i) {
    const double V = tr.latents(i, 0), t = i * 0.5;
    if (prev < -20 && V >= -20) {
      if (t - last_spike > 20) bursts.push_back(0);
      ++bursts.back();
      last_spike = t;
    }
    prev = V;
  }
  REQUIRE(bursts.size() >= 8);
  // Skip the initial transient and the possibly cut-off final burst.
  int lo = 1000, hi = 0;
  for (std::size_t b = 3; b + 1 < bursts.size(); ++b) {
    lo = std::min(lo, bursts[b]);
    hi = std::max(hi, bursts[b]);
  }
  CHECK(lo >= 3);
  CHECK(hi - lo <= 1);
}

TEST_CASE("neuron step halving") {
  Traj a = simulate_neuron(NeuronParams::paper_bursting(), 500, 0.02, 0.5, -60, 0, 0);
  Traj b = simulate_neuron(NeuronParams::paper_bursting(), 500, 0.01, 0.5, -60, 0, 0);
  CHECK((a.latents - b.latents).cwiseAbs().maxCoeff() < 1e-3);
  CHECK_THROWS_AS(simulate_neuron(NeuronParams::paper_bursting(), 10, 0.02, 0.03, -60, 0, 0), ConfigError);
  CHECK_THROWS_AS(simulate_neuron(NeuronParams::paper_bursting(), 10, 0, 0.5, -60, 0, 0), ConfigError);
}

TEST_CASE("neuron observation noise is seeded") {
  Traj a = simulate_neuron(NeuronParams::paper_bursting(), 50, 0.02, 0.5, -60, 0, 0, 0.5, 3);
  Traj b = simulate_neuron(NeuronParams::paper_bursting(), 50, 0.02, 0.5, -60, 0, 0, 0.5, 3);
  CHECK(a.observations == b.observations);
  CHECK(a.observations != a.latents);
  CHECK(a.latents.rows() == 100);
}

TEST_CASE("Lorenz system") {
  Traj sub = simulate_lorenz(10, 0.5, 8.0 / 3.0, 20000, 0.01, {1, 1, 1});
  CHECK(sub.latents.row(19999).norm() < 1e-6);

  Traj classic = simulate_lorenz(10, 28, 8.0 / 3.0, 100000, 0.01, {1, 1, 1});
  CHECK(classic.latents.col(0).cwiseAbs().maxCoeff() < 25);
  CHECK(classic.latents.bottomRows(50000).col(0).maxCoeff() > 10);
  CHECK(classic.latents.bottomRows(50000).col(0).minCoeff() < -10);

  Traj again = simulate_lorenz(10, 28, 8.0 / 3.0, 1000, 0.01, {1, 1, 1}, 0.0, 99);
  CHECK(again.latents == classic.latents.topRows(1000));
  CHECK_THROWS_AS(simulate_lorenz(10, 1e6, 8.0 / 3.0, 1000, 1.0, {1, 1, 1}), DivergedError);
}

TEST_CASE("trial sets round-trip") {
  TrialSet s = gen_multiplication(64, 25, 5);
  save_trialset(scratch("set"), s);
  TrialSet t = load_trialset(scratch("set"));
  CHECK(t.inputs == s.inputs);
  CHECK(t.targets == s.targets);
  CHECK(t.kind == TaskKind::multiplication);
  CHECK(t.T == 25);
  CHECK(t.seed == 5);
}
