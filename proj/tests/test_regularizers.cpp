#include <doctest.h>

#include "plrnn/regularizers.hpp"

using namespace plrnn;

namespace {

Params random_params(std::uint64_t seed, int M) {
  CounterRng rng(seed);
  Params p = Params::zeros(M, 1, 1);
  for (int i = 0; i < M; ++i) {
    p.a_diag(i) = rng.normal();
    p.h_bias(i) = rng.normal();
    for (int j = 0; j < M; ++j)
      if (i != j) p.w_offdiag(i, j) = rng.normal();
  }
  return p;
}

// Plain index loops, written independently of the library's row decomposition.
double brute_penalty(const RegSpec& s, const Params& p) {
  const int M = int(p.latent_dim());
  double sum = 0;
  if (s.kind == RegKind::orthogonal) {
    for (int i = 0; i < M; ++i)
      for (int j = 0; j < M; ++j) {
        double e = 0;
        for (int k = 0; k < M; ++k) {
          const double pik = (i == k ? p.a_diag(i) : p.w_offdiag(i, k));
          const double pjk = (j == k ? p.a_diag(j) : p.w_offdiag(j, k));
          e += pik * pjk;
        }
        e -= (i == j);
        sum += e * e;
      }
    return s.tau_w * sum;
  }
  const int rows = s.kind == RegKind::l2_full ? M : (s.kind == RegKind::none ? 0 : s.m_reg);
  const double target = s.kind == RegKind::manifold_attractor ? 1.0 : 0.0;
  for (int i = 0; i < rows; ++i) {
    sum += s.tau_a * (p.a_diag(i) - target) * (p.a_diag(i) - target);
    for (int j = 0; j < M; ++j)
      if (j != i) sum += s.tau_w * p.w_offdiag(i, j) * p.w_offdiag(i, j);
    sum += s.tau_h * p.h_bias(i) * p.h_bias(i);
  }
  return sum;
}

const RegKind kAllKinds[] = {RegKind::manifold_attractor, RegKind::l2_full, RegKind::l2_partial,
                             RegKind::orthogonal, RegKind::none};

}  // namespace

TEST_CASE("penalty examples") {
  Params p = init_plrnn(InitScheme::regularized, 5, 2, 1, 5, 1);
  CHECK(penalty(RegSpec::common(RegKind::manifold_attractor, 3.0, 5), p) == 0.0);

  Params q = Params::zeros(3, 0, 1);
  q.a_diag << 0, 0.4, 0.2;
  q.w_offdiag(1, 0) = 2;
  RegSpec one = RegSpec::common(RegKind::manifold_attractor, 1.0, 1);
  CHECK(penalty(one, q) == 1.0);
  PlrnnGrad g = penalty_grad(one, q);
  CHECK(g.a_diag(0) == -2.0);
  CHECK(g.w_offdiag.isZero(0));
}

TEST_CASE("penalty matches the index-loop oracle") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Params p = random_params(seed, 5);
    for (RegKind k : kAllKinds) {
      RegSpec s{k, 0.3 + seed * 0.01, 1.7, 0.9, 2};
      CHECK(penalty(s, p) == doctest::Approx(brute_penalty(s, p)).epsilon(1e-12));
      CHECK(penalty(s, p) >= 0);
    }
  }
}

TEST_CASE("penalty gradient matches central differences") {
  const double h = 1e-6;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Params p = random_params(seed + 50, 4);
    for (RegKind k : kAllKinds) {
      RegSpec s{k, 0.7, 1.3, 0.4, 3};
      PlrnnGrad g = penalty_grad(s, p);
      auto check = [&](double& x, double analytic) {
        const double x0 = x;
        x = x0 + h;
        const double fp = penalty(s, p);
        x = x0 - h;
        const double fm = penalty(s, p);
        x = x0;
        const double fd = (fp - fm) / (2 * h);
        CHECK(std::abs(fd - analytic) <= 1e-6 * std::max({std::abs(fd), std::abs(analytic), 1.0}));
      };
      for (int i = 0; i < 4; ++i) {
        check(p.a_diag(i), g.a_diag(i));
        check(p.h_bias(i), g.h_bias(i));
        for (int j = 0; j < 4; ++j)
          if (i != j) check(p.w_offdiag(i, j), g.w_offdiag(i, j));
      }
      CHECK(g.w_offdiag.diagonal().isZero(0));
      CHECK(g.c_input.isZero(0));
    }
  }
}

TEST_CASE("partial penalties ignore non-regularized rows") {
  Params p = random_params(7, 5);
  for (RegKind k : {RegKind::manifold_attractor, RegKind::l2_partial}) {
    RegSpec s = RegSpec::common(k, 2.0, 2);
    const double before = penalty(s, p);
    Params q = p;
    q.a_diag.tail(3).setConstant(9);
    q.w_offdiag.bottomRows(3).setConstant(-4);
    q.w_offdiag.diagonal().setZero();
    q.h_bias.tail(3).setConstant(3);
    CHECK(penalty(s, q) == before);
    PlrnnGrad g = penalty_grad(s, p);
    CHECK(g.a_diag.tail(3).isZero(0));
    CHECK(g.w_offdiag.bottomRows(3).isZero(0));
  }
}

TEST_CASE("zero penalty exactly at the targeted configuration") {
  Params p = random_params(8, 4);
  p.a_diag.head(2).setOnes();
  p.w_offdiag.topRows(2).setZero();
  p.h_bias.head(2).setZero();
  CHECK(penalty(RegSpec::common(RegKind::manifold_attractor, 5, 2), p) == 0);
  CHECK(penalty(RegSpec::common(RegKind::manifold_attractor, 5, 3), p) > 0);
  PlrnnGrad g = penalty_grad(RegSpec::common(RegKind::manifold_attractor, 5, 2), p);
  CHECK(g.squared_norm() == 0);

  Params o = Params::zeros(3, 0, 1);
  o.a_diag.setOnes();
  CHECK(penalty(RegSpec::common(RegKind::orthogonal, 1, 0), o) == 0);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(RegSpec::common(RegKind::manifold_attractor, 1, 0).validate(), ConfigError);
  CHECK_THROWS_AS((RegSpec{RegKind::l2_full, -1, 0, 0, 0}.validate()), ConfigError);
  CHECK_THROWS_AS(penalty(RegSpec::common(RegKind::manifold_attractor, 1, 4), Params::zeros(3, 0, 1)),
                  ConfigError);
  CHECK_THROWS_AS(row_penalty(RegSpec::common(RegKind::orthogonal, 1, 0), 3, 0), ConfigError);
  for (RegKind k : kAllKinds) CHECK(reg_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(reg_kind_from_string("l1"), ConfigError);
}

TEST_CASE("initialization schemes") {
  Params a = init_plrnn(InitScheme::regularized, 6, 2, 1, 3, 11);
  Params b = init_plrnn(InitScheme::regularized, 6, 2, 1, 3, 11);
  CHECK(a.a_diag == b.a_diag);
  CHECK(a.w_offdiag == b.w_offdiag);
  CHECK(a.c_input == b.c_input);
  CHECK(a.b_loading == b.b_loading);
  CHECK(a.a_diag.head(3) == Vec::Ones(3));
  CHECK(a.w_offdiag.topRows(3).isZero(0));
  CHECK((a.a_diag.tail(3).array() >= 0.5).all());
  CHECK((a.a_diag.tail(3).array() <= 0.9).all());
  CHECK(a.w_offdiag.diagonal().isZero(0));
  CHECK(a.m_reg == 3);
  CHECK_NOTHROW(a.validate());

  Params c = init_plrnn(InitScheme::regularized, 6, 2, 1, 3, 12);
  CHECK(c.w_offdiag != a.w_offdiag);

  Params id = init_plrnn(InitScheme::identity_plrnn, 4, 1, 1, 0, 1);
  CHECK(id.a_diag == Vec::Ones(4));
  CHECK(id.w_offdiag.isZero(0));
  CHECK(id.h_bias.isZero(0));

  RnnParams irnn = init_vanilla_rnn(true, 5, 2, 1, 3);
  CHECK(irnn.w == Mat::Identity(5, 5));
  CHECK(irnn.h_bias.isZero(0));
  CHECK_THROWS_AS(init_plrnn(InitScheme::regularized, 3, 1, 1, 4, 1), ConfigError);
}

TEST_CASE("vanilla RNN penalties") {
  CounterRng rng(21);
  RnnParams p = RnnParams::zeros(4, 1, 1);
  p.w = Mat::NullaryExpr(4, 4, [&] { return rng.normal(); });
  p.h_bias = rng.normal_vec(4);
  for (RegKind k : {RegKind::orthogonal, RegKind::l2_full, RegKind::none}) {
    RegSpec s{k, 0.0, 0.8, 0.6, 0};
    RnnGrad g = penalty_grad(s, p);
    const double h = 1e-6;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        const double x0 = p.w(i, j);
        p.w(i, j) = x0 + h;
        const double fp = penalty(s, p);
        p.w(i, j) = x0 - h;
        const double fm = penalty(s, p);
        p.w(i, j) = x0;
        CHECK(std::abs((fp - fm) / (2 * h) - g.w(i, j)) <= 1e-6 * std::max(1.0, std::abs(g.w(i, j))));
      }
  }
  RnnParams q = RnnParams::zeros(3, 0, 1);
  q.w.setIdentity();
  CHECK(penalty(RegSpec::common(RegKind::orthogonal, 2, 0), q) == 0);
  CHECK_THROWS_AS(penalty(RegSpec::common(RegKind::manifold_attractor, 1, 1), q), ConfigError);
}
