#pragma once

// Moments of rectified Gaussian variables, relu(x) with x Gaussian, and the
// bivariate normal distribution function they rely on.

namespace plrnn {

double norm_pdf(double x);
double norm_cdf(double x);

/// P(X > h, Y > k) for standard bivariate normal (X, Y) with correlation r.
double bvn_upper(double h, double k, double r);

/// P(X < a, Y < b) for standard bivariate normal (X, Y) with correlation r.
double bvn_cdf(double a, double b, double r);

// Univariate moments of relu(x), x ~ N(mu, var). var == 0 gives the point values.
double relu_mean(double mu, double var);
double relu_second(double mu, double var);  // E[relu(x)^2]
double relu_prob(double mu, double var);    // P(x > 0), 0.5 at the origin for var == 0

/// E[x relu(y)] for jointly Gaussian (x, y) with cov(x, y) = cxy.
double x_relu_y(double mux, double muy, double vary, double cxy);

/// E[relu(x) relu(y)] for jointly Gaussian (x, y).
double relu_relu(double mux, double muy, double varx, double vary, double cxy);

}  // namespace plrnn
