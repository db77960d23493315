#pragma once

// Output network f^(o) and the observation densities (diagonal Normal and
// diagonal-Gaussian mixture).

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stcn/autodiff.hpp"
#include "stcn/errors.hpp"
#include "stcn/latent.hpp"
#include "stcn/tcn.hpp"

namespace stcn {

enum class ObsFamily { normal, gmm };
enum class HeadKind { relu_width1_stack, wavenet_stack };

inline ObsFamily parse_family(std::string_view s) {
  if (s == "normal") return ObsFamily::normal;
  if (s == "gmm") return ObsFamily::gmm;
  throw ConfigError("unknown observation family: " + std::string(s));
}
inline std::string to_string(ObsFamily f) { return f == ObsFamily::normal ? "normal" : "gmm"; }

inline HeadKind parse_head(std::string_view s) {
  if (s == "relu_width1_stack") return HeadKind::relu_width1_stack;
  if (s == "wavenet_stack") return HeadKind::wavenet_stack;
  throw ConfigError("unknown head kind: " + std::string(s));
}
inline std::string to_string(HeadKind h) {
  return h == HeadKind::relu_width1_stack ? "relu_width1_stack" : "wavenet_stack";
}

struct ObsConfig {
  ObsFamily family = ObsFamily::gmm;
  int components = 20;
  HeadKind head = HeadKind::relu_width1_stack;
  int head_depth = 5;

  void validate() const {
    if (components < 1) throw DomainError("ObsConfig: components must be >= 1");
    if (head_depth < 1) throw DomainError("ObsConfig: head_depth must be >= 1");
  }

  Eigen::Index mixture_size() const { return family == ObsFamily::gmm ? components : 1; }
};

struct ObservationHead {
  ObsConfig cfg;
  Eigen::Index input_dim = 0;
  Eigen::Index output_dim = 0;  // D
  std::vector<ConvParams> relu_layers;
  ConvParams projection;  // wavenet_stack only
  std::vector<WavenetBlockParams> blocks;
  ConvParams dist;
};

template <typename S>
ObservationHead add_observation_head(ParamSet<S>& ps, const ObsConfig& cfg, Eigen::Index input_dim,
                                     Eigen::Index filters, Eigen::Index output_dim) {
  cfg.validate();
  ObservationHead h;
  h.cfg = cfg;
  h.input_dim = input_dim;
  h.output_dim = output_dim;
  if (cfg.head == HeadKind::relu_width1_stack) {
    Eigen::Index in = input_dim;
    for (int i = 0; i < cfg.head_depth; ++i) {
      h.relu_layers.push_back(add_conv(ps, "obs.layer" + std::to_string(i + 1), in, filters, 1, 1));
      in = filters;
    }
  } else {
    h.projection = add_conv(ps, "obs.input", input_dim, filters, 1, 1);
    for (int i = 0; i < cfg.head_depth; ++i)
      h.blocks.push_back(add_wavenet_block(ps, "obs.block" + std::to_string(i + 1), filters, 1));
  }
  const Eigen::Index D = output_dim;
  const Eigen::Index width = cfg.family == ObsFamily::normal
                                 ? 2 * D
                                 : cfg.components + 2 * cfg.components * D;
  h.dist = add_conv(ps, "obs.dist", filters, width, 1, 1);
  return h;
}

/// Observation distribution parameters on a tape. For the Normal family
/// `means`/`stds` are [N x D] and `logits` is invalid; for the mixture
/// `logits` is [N x M] and `means`/`stds` are [N x (M*D)], component-major.
struct ObservationVars {
  ObsFamily family = ObsFamily::normal;
  Eigen::Index components = 1;
  Var logits;
  Var means;
  Var stds;
};

/// Observation parameters held by value; same layout as ObservationVars.
template <typename S>
struct ObservationParams {
  ObsFamily family = ObsFamily::normal;
  Eigen::Index components = 1;
  Mat<S> logits;
  Mat<S> means;
  Mat<S> stds;

  /// softmax(logits), [N x M]; all ones for the Normal family.
  Mat<S> weights() const {
    if (family == ObsFamily::normal) return Mat<S>::Ones(means.rows(), 1);
    Mat<S> w = logits;
    for (Eigen::Index n = 0; n < w.rows(); ++n) {
      const S mx = w.row(n).maxCoeff();
      w.row(n) = (w.row(n).array() - mx).exp();
      w.row(n) /= w.row(n).sum();
    }
    return w;
  }
};

template <typename S>
ObservationParams<S> from_tape(const Tape<S>& t, const ObservationVars& o) {
  ObservationParams<S> p;
  p.family = o.family;
  p.components = o.components;
  if (o.logits.valid()) p.logits = t.value(o.logits);
  p.means = t.value(o.means);
  p.stds = t.value(o.stds);
  return p;
}

template <typename S>
ObservationVars to_tape(Tape<S>& t, const ObservationParams<S>& p) {
  ObservationVars o;
  o.family = p.family;
  o.components = p.components;
  if (p.family == ObsFamily::gmm) o.logits = t.constant(p.logits);
  o.means = t.constant(p.means);
  o.stds = t.constant(p.stds);
  return o;
}

/// Runs f^(o) on `z_in` ([(B*T) x input_dim]) and splits the distribution heads.
template <typename S>
ObservationVars output_head(Tape<S>& t, const ObservationHead& h, Var z_in, Eigen::Index T) {
  if (t.value(z_in).cols() != h.input_dim)
    throw ShapeError("output_head: input has " + std::to_string(t.value(z_in).cols()) +
                     " channels, head expects " + std::to_string(h.input_dim));
  Var x = z_in;
  if (h.cfg.head == HeadKind::relu_width1_stack) {
    for (const auto& layer : h.relu_layers) x = ad::relu(t, causal_dilated_conv(t, x, T, layer));
  } else {
    x = causal_dilated_conv(t, x, T, h.projection);
    for (const auto& block : h.blocks) x = wavenet_block(t, x, T, block);
  }
  Var out = causal_dilated_conv(t, x, T, h.dist);
  const Eigen::Index D = h.output_dim;
  ObservationVars o;
  o.family = h.cfg.family;
  if (h.cfg.family == ObsFamily::normal) {
    o.components = 1;
    o.means = ad::slice_cols(t, out, 0, D);
    o.stds = ad::softplus_clamp(t, ad::slice_cols(t, out, D, D), S(kSigmaMin), S(kSigmaMax));
  } else {
    const Eigen::Index M = h.cfg.components;
    o.components = M;
    o.logits = ad::slice_cols(t, out, 0, M);
    o.means = ad::slice_cols(t, out, M, M * D);
    o.stds = ad::softplus_clamp(t, ad::slice_cols(t, out, M + M * D, M * D), S(kSigmaMin),
                                S(kSigmaMax));
  }
  return o;
}

namespace detail {

template <typename S>
S half_log_two_pi() {
  return S(0.5) * std::log(S(2) * std::numbers::pi_v<S>);
}

}  // namespace detail

/// Per-row diagonal Normal log-density summed over D: [N x D] -> [N x 1].
template <typename S>
Var normal_loglik(Tape<S>& t, const Mat<S>& x, const ObservationVars& p) {
  if (p.family != ObsFamily::normal) throw UsageError("normal_loglik: parameters are not Normal");
  ad::detail::require_same_shape(x, t.value(p.means), "normal_loglik");
  using namespace ad;
  Var xc = t.constant(x);
  Var z = mul(t, sub(t, xc, p.means), reciprocal(t, p.stds));
  Var per_dim = add_scalar(t, sub(t, scale(t, square(t, z), S(-0.5)), log(t, p.stds)),
                           -stcn::detail::half_log_two_pi<S>());
  return row_sum(t, per_dim);
}

template <typename S>
Mat<S> normal_loglik(const Mat<S>& x, const ObservationParams<S>& p) {
  Tape<S> t;
  return t.value(normal_loglik(t, x, to_tape(t, p)));
}

/// log sum_m softmax(logits)_m N(x; mu_m, diag(std_m^2)), stabilized by
/// log-sum-exp in both the weight normalizer and the mixture sum.
template <typename S>
Var gmm_loglik(Tape<S>& t, const Mat<S>& x, const ObservationVars& p) {
  if (p.family != ObsFamily::gmm) throw UsageError("gmm_loglik: parameters are not a mixture");
  const Mat<S>& logits = t.value(p.logits);
  const Mat<S>& means = t.value(p.means);
  const Mat<S>& stds = t.value(p.stds);
  const Eigen::Index N = x.rows(), D = x.cols(), M = logits.cols();
  if (logits.rows() != N || means.rows() != N || stds.rows() != N || means.cols() != M * D ||
      stds.cols() != M * D)
    throw ShapeError("gmm_loglik: parameter shapes do not match x");

  Mat<S> ll(N, 1);
  Mat<S> resp(N, M);   // posterior responsibilities
  Mat<S> soft(N, M);   // mixture weights
  const S c = detail::half_log_two_pi<S>();
  for (Eigen::Index n = 0; n < N; ++n) {
    const S lmax = logits.row(n).maxCoeff();
    S lse_w = 0;
    for (Eigen::Index m = 0; m < M; ++m) lse_w += std::exp(logits(n, m) - lmax);
    lse_w = lmax + std::log(lse_w);
    S amax = -std::numeric_limits<S>::infinity();
    for (Eigen::Index m = 0; m < M; ++m) {
      S comp = 0;
      for (Eigen::Index d = 0; d < D; ++d) {
        const S s = stds(n, m * D + d);
        const S z = (x(n, d) - means(n, m * D + d)) / s;
        comp += -c - std::log(s) - S(0.5) * z * z;
      }
      soft(n, m) = logits(n, m) - lse_w;
      resp(n, m) = soft(n, m) + comp;
      amax = std::max(amax, resp(n, m));
    }
    S acc = 0;
    for (Eigen::Index m = 0; m < M; ++m) acc += std::exp(resp(n, m) - amax);
    ll(n, 0) = amax + std::log(acc);
    for (Eigen::Index m = 0; m < M; ++m) {
      resp(n, m) = std::exp(resp(n, m) - ll(n, 0));
      soft(n, m) = std::exp(soft(n, m));
    }
  }

  const bool ng = t.needs_grad(p.logits) || t.needs_grad(p.means) || t.needs_grad(p.stds);
  const Var lg = p.logits, mu = p.means, sd = p.stds;
  return t.push(std::move(ll), ng, [x, resp, soft, lg, mu, sd, D, M](Tape<S>& tp, Var self) {
    const Mat<S>& g = tp.grad(self);
    const Mat<S>& means_v = tp.value(mu);
    const Mat<S>& stds_v = tp.value(sd);
    const Eigen::Index rows = x.rows();
    if (tp.needs_grad(lg)) {
      Mat<S> gl = (resp - soft).array().colwise() * g.col(0).array();
      tp.accumulate(lg, gl);
    }
    if (tp.needs_grad(mu) || tp.needs_grad(sd)) {
      Mat<S> gm(rows, M * D), gs(rows, M * D);
      for (Eigen::Index n = 0; n < rows; ++n)
        for (Eigen::Index m = 0; m < M; ++m)
          for (Eigen::Index d = 0; d < D; ++d) {
            const Eigen::Index k = m * D + d;
            const S s = stds_v(n, k);
            const S diff = x(n, d) - means_v(n, k);
            const S w = g(n, 0) * resp(n, m);
            gm(n, k) = w * diff / (s * s);
            gs(n, k) = w * (diff * diff / (s * s * s) - S(1) / s);
          }
      tp.accumulate(mu, gm);
      tp.accumulate(sd, gs);
    }
  });
}

template <typename S>
Mat<S> gmm_loglik(const Mat<S>& x, const ObservationParams<S>& p) {
  Tape<S> t;
  return t.value(gmm_loglik(t, x, to_tape(t, p)));
}

/// Dispatches on the family.
template <typename S>
Var observation_loglik(Tape<S>& t, const Mat<S>& x, const ObservationVars& p) {
  return p.family == ObsFamily::normal ? normal_loglik(t, x, p) : gmm_loglik(t, x, p);
}

/// Draws one observation for row `n` (or returns the distribution mean when
/// `mean_pred` is set).
template <typename S, typename Rng>
Mat<S> sample_observation(const ObservationParams<S>& p, Eigen::Index n, Rng& rng, bool mean_pred) {
  const Eigen::Index M = p.family == ObsFamily::normal ? 1 : p.components;
  const Eigen::Index D = p.means.cols() / M;
  Mat<S> out = Mat<S>::Zero(1, D);
  const Mat<S> w = p.weights();
  if (mean_pred) {
    for (Eigen::Index m = 0; m < M; ++m)
      out += w(n, m) * p.means.block(n, m * D, 1, D);
    return out;
  }
  Eigen::Index comp = 0;
  if (M > 1) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double r = u(rng), acc = 0;
    comp = M - 1;
    for (Eigen::Index m = 0; m < M; ++m) {
      acc += static_cast<double>(w(n, m));
      if (r < acc) {
        comp = m;
        break;
      }
    }
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index d = 0; d < D; ++d)
    out(0, d) = p.means(n, comp * D + d) + p.stds(n, comp * D + d) * static_cast<S>(normal(rng));
  return out;
}

}  // namespace stcn
