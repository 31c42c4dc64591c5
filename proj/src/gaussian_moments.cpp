#include "plrnn/gaussian_moments.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace plrnn {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Gauss-Legendre nodes on [-1, 1], positive half, for 6, 12 and 20 points.
constexpr double kW[3][10] = {
    {0.1713244923791705, 0.3607615730481384, 0.4679139345726904},
    {0.04717533638651177, 0.1069393259953183, 0.1600783285433464, 0.2031674267230659, 0.2334925365383547,
     0.2491470458134029},
    {0.01761400713915212, 0.04060142980038694, 0.06267204833410906, 0.08327674157670475, 0.1019301198172404,
     0.1181945319615184, 0.1316886384491766, 0.1420961093183821, 0.1491729864726037, 0.1527533871307259}};
constexpr double kX[3][10] = {
    {0.9324695142031522, 0.6612093864662647, 0.2386191860831970},
    {0.9815606342467191, 0.9041172563704750, 0.7699026741943050, 0.5873179542866171, 0.3678314989981802,
     0.1252334085114692},
    {0.9931285991850949, 0.9639719272779138, 0.9122344282513259, 0.8391169718222188, 0.7463319064601508,
     0.6360536807265150, 0.5108670019508271, 0.3737060887154196, 0.2277858511416451, 0.07652652113349733}};
constexpr int kN[3] = {3, 6, 10};

// Below this standard deviation a variable is treated as a point mass.
constexpr double kTinySd = 1e-150;

}  // namespace

double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(kTwoPi); }

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

// Genz's method: Drezner-Wesolowsky integration over the correlation for
// |r| < 0.925, an asymptotic expansion with correction otherwise.
double bvn_upper(double h, double k, double r) {
  if (r >= 1.0) return norm_cdf(-std::max(h, k));
  if (r <= -1.0) return std::max(0.0, norm_cdf(-h) - norm_cdf(k));
  const int g = std::abs(r) < 0.3 ? 0 : (std::abs(r) < 0.75 ? 1 : 2);
  double hk = h * k;
  double bvn = 0.0;
  if (std::abs(r) < 0.925) {
    const double hs = (h * h + k * k) / 2.0;
    const double asr = std::asin(r);
    for (int i = 0; i < kN[g]; ++i) {
      double sn = std::sin(asr * (1.0 - kX[g][i]) / 2.0);
      bvn += kW[g][i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
      sn = std::sin(asr * (1.0 + kX[g][i]) / 2.0);
      bvn += kW[g][i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
    }
    bvn = bvn * asr / (2.0 * kTwoPi) + norm_cdf(-h) * norm_cdf(-k);
  } else {
    if (r < 0) {
      k = -k;
      hk = -hk;
    }
    if (std::abs(r) < 1.0) {
      const double as = (1.0 - r) * (1.0 + r);
      double a = std::sqrt(as);
      const double bs = (h - k) * (h - k);
      const double c = (4.0 - hk) / 8.0;
      const double d = (12.0 - hk) / 16.0;
      bvn = a * std::exp(-(bs / as + hk) / 2.0) * (1.0 - c * (bs - as) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as * as / 5.0);
      if (hk > -160.0) {
        const double b = std::sqrt(bs);
        bvn -= std::exp(-hk / 2.0) * std::sqrt(kTwoPi) * norm_cdf(-b / a) * b * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
      }
      a /= 2.0;
      for (int i = 0; i < kN[g]; ++i) {
        double xs = (a * (1.0 - kX[g][i])) * (a * (1.0 - kX[g][i]));
        double rs = std::sqrt(1.0 - xs);
        bvn += a * kW[g][i] *
               (std::exp(-bs / (2.0 * xs) - hk / (1.0 + rs)) / rs - std::exp(-(bs / xs + hk) / 2.0) * (1.0 + c * xs * (1.0 + d * xs)));
        xs = as * (1.0 + kX[g][i]) * (1.0 + kX[g][i]) / 4.0;
        rs = std::sqrt(1.0 - xs);
        bvn += a * kW[g][i] * std::exp(-(bs / xs + hk) / 2.0) *
               (std::exp(-hk * xs / (2.0 * (1.0 + rs) * (1.0 + rs))) / rs - (1.0 + c * xs * (1.0 + d * xs)));
      }
      bvn = -bvn / kTwoPi;
    }
    if (r > 0) {
      bvn += norm_cdf(-std::max(h, k));
    } else if (h >= k) {
      bvn = -bvn;
    } else {
      const double L = h < 0 ? norm_cdf(k) - norm_cdf(h) : norm_cdf(-h) - norm_cdf(-k);
      bvn = L - bvn;
    }
  }
  return std::clamp(bvn, 0.0, 1.0);
}

double bvn_cdf(double a, double b, double r) { return bvn_upper(-a, -b, r); }

double relu_mean(double mu, double var) {
  const double sd = std::sqrt(std::max(var, 0.0));
  if (sd < kTinySd) return std::max(mu, 0.0);
  const double a = mu / sd;
  return mu * norm_cdf(a) + sd * norm_pdf(a);
}

double relu_second(double mu, double var) {
  const double sd = std::sqrt(std::max(var, 0.0));
  if (sd < kTinySd) return mu > 0 ? mu * mu : 0.0;
  const double a = mu / sd;
  return (mu * mu + var) * norm_cdf(a) + mu * sd * norm_pdf(a);
}

double relu_prob(double mu, double var) {
  const double sd = std::sqrt(std::max(var, 0.0));
  if (sd < kTinySd) return mu > 0 ? 1.0 : (mu < 0 ? 0.0 : 0.5);
  return norm_cdf(mu / sd);
}

// Stein's lemma: E[x f(y)] = E[x] E[f(y)] + cov(x, y) E[f'(y)].
double x_relu_y(double mux, double muy, double vary, double cxy) {
  return mux * relu_mean(muy, vary) + cxy * relu_prob(muy, vary);
}

double relu_relu(double mux, double muy, double varx, double vary, double cxy) {
  const double sx = std::sqrt(std::max(varx, 0.0));
  const double sy = std::sqrt(std::max(vary, 0.0));
  if (sx < kTinySd) return std::max(mux, 0.0) * relu_mean(muy, vary);
  if (sy < kTinySd) return std::max(muy, 0.0) * relu_mean(mux, varx);
  const double r = std::clamp(cxy / (sx * sy), -1.0, 1.0);
  const double a = mux / sx;
  const double b = muy / sy;
  const double s2 = 1.0 - r * r;
  if (s2 < 1e-14) {
    // Perfectly (anti-)correlated: y = muy + sign(r) sy z with x = mux + sx z.
    const double lo = r > 0 ? std::max(-a, -b) : -a;
    const double hi = r > 0 ? INFINITY : b;
    if (hi <= lo) return 0.0;
    const double sg = r > 0 ? 1.0 : -1.0;
    // integral over z in (lo, hi) of (mux + sx z)(muy + sg sy z) phi(z)
    const double p0 = norm_cdf(hi) - norm_cdf(lo);
    const double p1 = norm_pdf(lo) - norm_pdf(hi);
    const double p2 = p0 + (std::isfinite(lo) ? lo * norm_pdf(lo) : 0.0) - (std::isfinite(hi) ? hi * norm_pdf(hi) : 0.0);
    return mux * muy * p0 + (mux * sg * sy + muy * sx) * p1 + sg * sx * sy * p2;
  }
  const double s = std::sqrt(s2);
  const double phi2 = std::exp(-(a * a - 2.0 * r * a * b + b * b) / (2.0 * s2)) / (kTwoPi * s);
  return (mux * muy + cxy) * bvn_cdf(a, b, r) + mux * sy * norm_pdf(b) * norm_cdf((a - r * b) / s) +
         muy * sx * norm_pdf(a) * norm_cdf((b - r * a) / s) + sx * sy * s2 * phi2;
}

}  // namespace plrnn
