#pragma once

// Dataset-level evaluation and model-comparison tables.

#include <charconv>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "stcn/model.hpp"
#include "stcn/seqdata.hpp"

namespace stcn {

/// KL entries are nats per sequence, averaged over sequences; index 0 is the
/// bottom layer and index L-1 the top-most.
struct EvalReport {
  double avg_elbo_per_sequence = 0;
  double avg_recon = 0;
  double kl_total = 0;
  std::vector<double> kl_per_layer;
  std::size_t n_sequences = 0;
  std::size_t total_steps = 0;
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;

  /// Layer KL divided by the mean sequence length.
  double kl_per_step(std::size_t layer) const {
    return kl_per_layer.at(layer) * static_cast<double>(n_sequences) /
           static_cast<double>(total_steps);
  }
};

/// Averages elbo_step over `mc_samples` noise draws. The noise of sequence i
/// in draw k comes from (mix_seed(seed, k), i), so batch grouping does not
/// change the result.
template <typename S>
EvalReport evaluate(const Model<S>& model, const SequenceSet& set, std::size_t mc_samples,
                    std::uint64_t seed, std::size_t batch_size = 64) {
  if (mc_samples < 1) throw DomainError("evaluate: mc_samples must be >= 1");
  if (set.empty()) throw DomainError("evaluate: empty sequence set");
  if (set.feature_dim != model.cfg.input_dim)
    throw ShapeError("evaluate: data has D=" + std::to_string(set.feature_dim) + ", model expects " +
                     std::to_string(model.cfg.input_dim));
  const std::size_t L = model.cfg.stochastic() ? model.cfg.latent_dims.size() : 0;
  double elbo = 0, recon = 0;
  std::vector<double> kl(L, 0.0);
  const auto batches = make_batches<S>(set, batch_size);
  for (std::size_t k = 0; k < mc_samples; ++k) {
    const std::uint64_t draw_seed = mix_seed(seed, k);
    for (const auto& batch : batches) {
      const auto br = elbo_step(model, batch, draw_seed);
      elbo += static_cast<double>(br.per_sequence.sum());
      recon += static_cast<double>(br.recon.sum());
      for (std::size_t l = 0; l < L; ++l) kl[l] += static_cast<double>(br.kl_per_layer[l].sum());
    }
  }
  const double denom = static_cast<double>(set.size() * mc_samples);
  EvalReport r;
  r.avg_elbo_per_sequence = elbo / denom;
  r.avg_recon = recon / denom;
  for (auto& v : kl) v /= denom;
  r.kl_per_layer = kl;
  r.kl_total = std::accumulate(kl.begin(), kl.end(), 0.0);
  r.n_sequences = set.size();
  r.total_steps = set.total_steps();
  r.mc_samples = mc_samples;
  r.seed = seed;
  return r;
}

namespace detail {

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// CSV table, one row per model sorted by name. Header is
/// `model,avg_elbo,avg_recon,kl_total,kl_1,...,kl_L` with L the deepest
/// report; kl_1 is the bottom layer and kl_L the top-most. Shallower rows
/// leave the missing KL cells empty.
inline std::string compare_csv(const std::map<std::string, EvalReport>& reports) {
  std::size_t L = 0;
  for (const auto& [name, r] : reports) L = std::max(L, r.kl_per_layer.size());
  std::string out = "model,avg_elbo,avg_recon,kl_total";
  for (std::size_t l = 1; l <= L; ++l) out += ",kl_" + std::to_string(l);
  out += "\n";
  for (const auto& [name, r] : reports) {
    out += name + "," + detail::format_number(r.avg_elbo_per_sequence) + "," +
           detail::format_number(r.avg_recon) + "," + detail::format_number(r.kl_total);
    for (std::size_t l = 0; l < L; ++l) {
      out += ",";
      if (l < r.kl_per_layer.size()) out += detail::format_number(r.kl_per_layer[l]);
    }
    out += "\n";
  }
  return out;
}

inline nlohmann::ordered_json to_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["avg_elbo"] = r.avg_elbo_per_sequence;
  j["avg_recon"] = r.avg_recon;
  j["kl_total"] = r.kl_total;
  for (std::size_t l = 0; l < r.kl_per_layer.size(); ++l)
    j["kl_" + std::to_string(l + 1)] = r.kl_per_layer[l];
  j["kl_layer_order"] = "kl_1 = bottom layer, kl_L = top-most layer";
  j["units"] = "nats per sequence, averaged over sequences";
  j["n_sequences"] = r.n_sequences;
  j["mc_samples"] = r.mc_samples;
  j["seed"] = r.seed;
  return j;
}

/// JSON variant of compare_csv with identical fields.
inline std::string compare_json(const std::map<std::string, EvalReport>& reports) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& [name, r] : reports) {
    nlohmann::ordered_json row;
    row["model"] = name;
    const nlohmann::ordered_json fields = to_json(r);
    for (const auto& [k, v] : fields.items()) row[k] = v;
    arr.push_back(row);
  }
  return arr.dump(2) + "\n";
}

}  // namespace stcn
