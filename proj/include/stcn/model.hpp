#pragma once

// Full STCN / STCN-dense / WaveNet / WaveNet-dense computation: per-step
// ELBO, exact log-likelihood for the deterministic baselines and
// autoregressive sampling.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "stcn/autodiff.hpp"
#include "stcn/errors.hpp"
#include "stcn/latent.hpp"
#include "stcn/observation.hpp"
#include "stcn/seqdata.hpp"
#include "stcn/tcn.hpp"

namespace stcn {

enum class Variant { stcn, stcn_dense, wavenet, wavenet_dense };

inline Variant parse_variant(std::string_view s) {
  if (s == "stcn") return Variant::stcn;
  if (s == "stcn_dense") return Variant::stcn_dense;
  if (s == "wavenet") return Variant::wavenet;
  if (s == "wavenet_dense") return Variant::wavenet_dense;
  throw ConfigError("unknown model variant: " + std::string(s));
}

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::stcn: return "stcn";
    case Variant::stcn_dense: return "stcn_dense";
    case Variant::wavenet: return "wavenet";
    case Variant::wavenet_dense: return "wavenet_dense";
  }
  return "?";
}

struct ModelConfig {
  Variant variant = Variant::stcn_dense;
  TcnConfig tcn;
  std::vector<Eigen::Index> latent_dims{32, 16, 8, 5, 2};  // bottom first
  ObsConfig obs;
  Eigen::Index input_dim = 0;

  bool stochastic() const { return variant == Variant::stcn || variant == Variant::stcn_dense; }
  bool dense() const { return variant == Variant::stcn_dense || variant == Variant::wavenet_dense; }

  /// Channel count fed to the observation head.
  Eigen::Index head_input_dim() const {
    if (stochastic()) {
      if (!dense()) return latent_dims.front();
      Eigen::Index s = 0;
      for (auto d : latent_dims) s += d;
      return s;
    }
    return dense() ? Eigen::Index{tcn.layers} * tcn.filters : tcn.filters;
  }

  void validate() const {
    tcn.validate();
    obs.validate();
    if (input_dim < 1) throw DomainError("ModelConfig: input_dim must be >= 1");
    if (stochastic()) {
      if (static_cast<int>(latent_dims.size()) != tcn.layers)
        throw DomainError("ModelConfig: latent_dims has " + std::to_string(latent_dims.size()) +
                          " entries but tcn.layers = " + std::to_string(tcn.layers));
      for (auto d : latent_dims)
        if (d < 1) throw DomainError("ModelConfig: latent dimensions must be >= 1");
    }
  }
};

template <typename S>
struct Model {
  ModelConfig cfg;
  ParamSet<S> params;
  TcnParams tcn;
  LatentNets latents;
  ObservationHead head;
};

/// Fan-in scaled uniform kernels, zero biases.
template <typename S>
void init_parameters(Model<S>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : model.params) {
    const std::string_view name = p.name;
    if (name.ends_with(".bias")) {
      p.value.setZero();
      continue;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.value.rows()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) p.value(i, j) = static_cast<S>(u(rng));
  }
}

template <typename S>
Model<S> build_model(const ModelConfig& cfg, std::uint64_t seed = 0) {
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  m.tcn = add_tcn(m.params, "tcn", cfg.tcn, cfg.input_dim);
  if (cfg.stochastic()) m.latents = add_latent_nets(m.params, cfg.latent_dims, cfg.tcn.filters);
  m.head = add_observation_head(m.params, cfg.obs, cfg.head_input_dim(), cfg.tcn.filters,
                                cfg.input_dim);
  init_parameters(m, seed);
  return m;
}

/// Copies parameter values between precisions (names and shapes must agree).
template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
  Model<To> dst = build_model<To>(src.cfg, 0);
  for (std::size_t i = 0; i < src.params.size(); ++i)
    dst.params[i].value = src.params[i].value.template cast<To>();
  return dst;
}

/// Each layer moved one step later in time; step 0 reads d_0 = 0.
template <typename S>
std::vector<Var> shift_pyramid(Tape<S>& t, const std::vector<Var>& pyramid, Eigen::Index T) {
  std::vector<Var> out;
  out.reserve(pyramid.size());
  for (Var d : pyramid) out.push_back(ad::time_shift(t, d, 1, T));
  return out;
}

/// Per-step reconstruction and per-layer KL, each [B x T] with zeros at
/// padded positions, and per-sequence totals.
template <typename S>
struct ElboBreakdown {
  Mat<S> recon;
  std::vector<Mat<S>> kl_per_layer;  // bottom first
  Mat<S> per_sequence;               // [B x 1]
  S elbo = 0;                        // mean of per_sequence

  S recon_total() const { return recon.sum(); }
  S kl_total() const {
    S s = 0;
    for (const auto& k : kl_per_layer) s += k.sum();
    return s;
  }
};

/// Tape handles of one evaluated batch; every column is [(B*T) x 1] and masked.
struct ElboGraph {
  Var recon;
  std::vector<Var> kl;
};

/// Noise for every (sequence, step, layer). The stream of sequence b is
/// seeded from (seed, batch.indices[b]) and consumed step by step, so a
/// step's noise does not depend on the padded length or on batch grouping.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

template <typename S>
LatentNoise<S> draw_noise(const SequenceBatch<S>& batch, const std::vector<Eigen::Index>& dims,
                          std::uint64_t seed) {
  const Eigen::Index B = batch.batch_size(), T = batch.max_len();
  LatentNoise<S> noise;
  for (auto d : dims) noise.push_back(Mat<S>::Zero(B * T, d));
  for (Eigen::Index b = 0; b < B; ++b) {
    std::mt19937_64 rng(mix_seed(seed, batch.indices.empty() ? static_cast<std::uint64_t>(b)
                                                             : batch.indices[static_cast<std::size_t>(b)]));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index t = 0; t < T; ++t)
      for (auto& n : noise)
        for (Eigen::Index k = 0; k < n.cols(); ++k) n(b * T + t, k) = static_cast<S>(normal(rng));
  }
  return noise;
}

namespace detail {

template <typename S>
void require_batch(const Model<S>& model, const SequenceBatch<S>& batch) {
  if (batch.feature_dim() != model.cfg.input_dim)
    throw ShapeError("batch has D=" + std::to_string(batch.feature_dim()) + ", model expects " +
                     std::to_string(model.cfg.input_dim));
}

template <typename S>
Var head_input_from_samples(Tape<S>& t, const ModelConfig& cfg, const std::vector<Var>& z) {
  return cfg.dense() ? ad::concat_cols(t, z) : z.front();
}

template <typename S>
Var head_input_from_pyramid(Tape<S>& t, const ModelConfig& cfg, const std::vector<Var>& shifted) {
  return cfg.dense() ? ad::concat_cols(t, shifted) : shifted.back();
}

template <typename S>
ElboBreakdown<S> collect(const Tape<S>& t, const ElboGraph& g, const SequenceBatch<S>& batch) {
  const Eigen::Index B = batch.batch_size(), T = batch.max_len();
  auto to_bt = [&](Var v) {
    const Mat<S>& c = t.value(v);
    return Mat<S>(Eigen::Map<const Mat<S>>(c.data(), B, T));
  };
  ElboBreakdown<S> out;
  out.recon = to_bt(g.recon);
  Mat<S> per_step = out.recon;
  for (Var k : g.kl) {
    out.kl_per_layer.push_back(to_bt(k));
    per_step -= out.kl_per_layer.back();
  }
  out.per_sequence = per_step.rowwise().sum();
  out.elbo = out.per_sequence.mean();
  return out;
}

}  // namespace detail

/// Builds the masked per-step terms on `t`. For stochastic variants the
/// posterior pass supplies the samples; deterministic variants ignore `noise`.
template <typename S>
ElboGraph build_elbo_graph(Tape<S>& t, const Model<S>& model, const SequenceBatch<S>& batch,
                           const LatentNoise<S>& noise) {
  detail::require_batch(model, batch);
  const Eigen::Index T = batch.max_len();
  const Mat<S> mask = batch.mask_column();
  Var x = t.constant(batch.data);
  DeterministicPyramid pyr = tcn_forward(t, x, T, model.tcn);
  std::vector<Var> prev = shift_pyramid(t, pyr.d, T);

  ElboGraph g;
  Var head_in;
  if (model.cfg.stochastic()) {
    LatentStack st = posterior_pass(t, pyr.d, prev, model.latents, noise);
    for (std::size_t l = 0; l < st.sample.size(); ++l)
      g.kl.push_back(ad::weight(t, gaussian_kl(t, *st.posterior[l], st.prior[l]), mask));
    head_in = detail::head_input_from_samples(t, model.cfg, st.sample);
  } else {
    head_in = detail::head_input_from_pyramid(t, model.cfg, prev);
  }
  ObservationVars obs = output_head(t, model.head, head_in, T);
  g.recon = ad::weight(t, observation_loglik(t, batch.data, obs), mask);
  return g;
}

/// Training objective: -(sum recon - kl_weight * sum KL) / B.
template <typename S>
Var negative_objective(Tape<S>& t, const ElboGraph& g, Eigen::Index batch_size, S kl_weight) {
  Var total = ad::sum(t, g.recon);
  for (Var k : g.kl) total = ad::sub(t, total, ad::scale(t, ad::sum(t, k), kl_weight));
  return ad::scale(t, total, S(-1) / static_cast<S>(batch_size));
}

/// Per-step ELBO with the supplied posterior noise. Works for every variant;
/// for the deterministic ones the KL list is empty and recon is exact.
template <typename S>
ElboBreakdown<S> elbo_step(const Model<S>& model, const SequenceBatch<S>& batch,
                           const LatentNoise<S>& noise) {
  Tape<S> t(&model.params);
  ElboGraph g = build_elbo_graph(t, model, batch, noise);
  return detail::collect(t, g, batch);
}

template <typename S>
ElboBreakdown<S> elbo_step(const Model<S>& model, const SequenceBatch<S>& batch,
                           std::uint64_t noise_seed) {
  return elbo_step(model, batch, draw_noise(batch, model.cfg.stochastic() ? model.cfg.latent_dims
                                                                          : std::vector<Eigen::Index>{},
                                            noise_seed));
}

/// Exact log-likelihood of the WaveNet baselines.
template <typename S>
ElboBreakdown<S> deterministic_loglik(const Model<S>& model, const SequenceBatch<S>& batch) {
  if (model.cfg.stochastic())
    throw UsageError("deterministic_loglik: variant " + to_string(model.cfg.variant) +
                     " has latent variables");
  return elbo_step(model, batch, LatentNoise<S>{});
}

/// Ancestral generation. Each new step recomputes the pyramid on the current
/// prefix, draws the latents top-down from the priors and samples x_t from
/// the observation model (or takes its mean with `mean_pred`).
template <typename S>
Mat<double> sample_sequence(const Model<S>& model, const Mat<double>& prefix, Eigen::Index steps,
                            std::uint64_t seed, bool mean_pred = false) {
  const ModelConfig& cfg = model.cfg;
  const Eigen::Index D = cfg.input_dim;
  if (prefix.size() > 0 && prefix.cols() != D)
    throw ShapeError("sample_sequence: prefix has D=" + std::to_string(prefix.cols()) +
                     ", model expects " + std::to_string(D));
  const Eigen::Index T0 = prefix.size() > 0 ? prefix.rows() : 0;
  Mat<double> out(T0 + steps, D);
  if (T0 > 0) out.topRows(T0) = prefix;
  if (steps <= 0) return out;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Eigen::Index rows, Eigen::Index cols) {
    Mat<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(normal(rng));
    return m;
  };

  // Head inputs of the steps generated so far (stochastic variants).
  Mat<S> head_hist(0, cfg.head_input_dim());
  if (cfg.stochastic() && T0 > 0) {
    Tape<S> t(&model.params);
    Var x = t.constant(prefix.cast<S>());
    auto pyr = tcn_forward(t, x, T0, model.tcn);
    auto prev = shift_pyramid(t, pyr.d, T0);
    LatentNoise<S> noise;
    for (auto d : cfg.latent_dims) noise.push_back(draw(T0, d));
    LatentStack st = posterior_pass(t, pyr.d, prev, model.latents, noise);
    head_hist = t.value(detail::head_input_from_samples(t, cfg, st.sample));
  }

  for (Eigen::Index n = T0; n < T0 + steps; ++n) {
    Tape<S> t(&model.params);
    // Current prefix plus a placeholder row for the step being generated.
    Mat<S> xs = Mat<S>::Zero(n + 1, D);
    if (n > 0) xs.topRows(n) = out.topRows(n).template cast<S>();
    auto pyr = tcn_forward(t, t.constant(xs), n + 1, model.tcn);
    auto prev = shift_pyramid(t, pyr.d, n + 1);
    Var head_in;
    if (cfg.stochastic()) {
      std::vector<Var> last;
      for (Var d : prev) last.push_back(ad::slice_rows(t, d, n, 1));
      LatentNoise<S> noise;
      for (auto d : cfg.latent_dims) noise.push_back(draw(1, d));
      LatentStack st = prior_pass(t, last, model.latents, noise);
      const Mat<S> row = t.value(detail::head_input_from_samples(t, cfg, st.sample));
      Mat<S> grown(head_hist.rows() + 1, head_hist.cols());
      grown << head_hist, row;
      head_hist = std::move(grown);
      head_in = t.constant(head_hist);
    } else {
      head_in = detail::head_input_from_pyramid(t, cfg, prev);
    }
    ObservationParams<S> obs = from_tape(t, output_head(t, model.head, head_in, n + 1));
    out.row(n) = sample_observation(obs, n, rng, mean_pred).template cast<double>();
  }
  return out;
}

}  // namespace stcn
