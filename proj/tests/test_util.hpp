#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "stcn/stcn.hpp"

namespace stcn::testing {

inline Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Scalar-valued function of a set of input matrices, built on a tape.
using TapeFn = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

/// Max relative error between the tape gradient and central differences over
/// every entry of every input.
inline double fd_max_rel_error(const TapeFn& f, std::vector<Mat<double>> inputs, double h = 1e-6) {
  Tape<double> t;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(t.push(m, true, {}));
  Var out = f(t, vars);
  t.backward(out);
  std::vector<Mat<double>> analytic;
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const auto& g = t.grad(vars[i]);
    analytic.push_back(g.size() ? g : Mat<double>::Zero(inputs[i].rows(), inputs[i].cols()));
  }

  auto eval = [&]() {
    Tape<double> tt;
    std::vector<Var> vv;
    for (const auto& m : inputs) vv.push_back(tt.constant(m));
    return tt.value(f(tt, vv))(0, 0);
  };
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      double& w = inputs[i].data()[k];
      const double orig = w;
      w = orig + h;
      const double up = eval();
      w = orig - h;
      const double down = eval();
      w = orig;
      worst = std::max(worst, relative_error(analytic[i].data()[k], (up - down) / (2 * h)));
    }
  return worst;
}

inline ModelConfig small_config(Variant v, ObsFamily fam = ObsFamily::normal) {
  ModelConfig c;
  c.variant = v;
  c.tcn = {2, 2, 8};
  c.latent_dims = {3, 2};
  c.input_dim = 2;
  c.obs.family = fam;
  c.obs.components = 3;
  c.obs.head_depth = 2;
  return c;
}

}  // namespace stcn::testing
