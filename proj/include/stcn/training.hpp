#pragma once

// Optimization loop (KL annealing, learning-rate decay, early stopping),
// checkpoints and the finite-difference gradient check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "stcn/eval.hpp"
#include "stcn/model.hpp"
#include "stcn/seqdata.hpp"

namespace stcn {

enum class Precision { f32, f64 };

inline Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::f32;
  if (s == "f64") return Precision::f64;
  throw ConfigError("unknown precision: " + std::string(s));
}
inline std::string to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

struct TrainConfig {
  std::size_t batch_size = 20;
  double lr = 5e-4;
  double lr_decay = 0.94;
  long lr_decay_steps = 1000;
  double kl_anneal_rate = 1e-4;
  long max_steps = 10000;
  long eval_every = 100;
  int patience = 5;
  std::uint64_t seed = 0;
  Precision precision = Precision::f64;
  int threads = 1;
  // Test hook: overwrite one parameter with NaN before this step.
  std::optional<long> inject_nan_at_step;

  void validate() const {
    if (batch_size < 1) throw DomainError("TrainConfig: batch_size must be >= 1");
    if (!(lr > 0) || !(lr_decay > 0) || !(kl_anneal_rate > 0) || lr_decay_steps < 1)
      throw DomainError("TrainConfig: rates must be positive");
    if (max_steps < 1 || eval_every < 1) throw DomainError("TrainConfig: steps must be >= 1");
    if (patience < 1) throw DomainError("TrainConfig: patience must be >= 1");
    if (threads < 1) throw DomainError("TrainConfig: threads must be >= 1");
  }
};

/// min(1, step * rate).
inline double kl_anneal_weight(long step, double rate) {
  return std::min(1.0, static_cast<double>(step) * rate);
}

/// lr0 * rate^(step / decay_steps), continuous exponent.
inline double lr_schedule(long step, double lr0, double rate, long decay_steps) {
  return lr0 * std::pow(rate, static_cast<double>(step) / static_cast<double>(decay_steps));
}

/// Adaptive-moment optimizer with bias correction.
template <typename S>
class Adam {
 public:
  explicit Adam(const ParamSet<S>& ps, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(zero_gradients(ps)), v_(zero_gradients(ps)), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet<S>& ps, const Gradients<S>& g, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_[i] = S(beta1_) * m_[i] + S(1 - beta1_) * g[i];
      v_[i] = S(beta2_) * v_[i] + S(1 - beta2_) * g[i].cwiseProduct(g[i]);
      auto mhat = m_[i].array() / S(c1);
      auto vhat = v_[i].array() / S(c2);
      ps[i].value.array() -= S(lr) * mhat / (vhat.sqrt() + S(eps_));
    }
  }

  long steps() const { return t_; }

 private:
  Gradients<S> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

namespace detail {

/// Rows of `batch` for sequences [begin, end).
template <typename S>
SequenceBatch<S> sub_batch(const SequenceBatch<S>& batch, Eigen::Index begin, Eigen::Index end) {
  const Eigen::Index T = batch.max_len();
  SequenceBatch<S> out;
  out.data = batch.data.middleRows(begin * T, (end - begin) * T);
  out.mask = batch.mask.middleRows(begin, end - begin);
  out.lengths.assign(batch.lengths.begin() + begin, batch.lengths.begin() + end);
  out.indices.assign(batch.indices.begin() + begin, batch.indices.begin() + end);
  return out;
}

template <typename S>
LatentNoise<S> sub_noise(const LatentNoise<S>& noise, Eigen::Index begin, Eigen::Index end,
                         Eigen::Index T) {
  LatentNoise<S> out;
  for (const auto& n : noise) out.push_back(n.middleRows(begin * T, (end - begin) * T));
  return out;
}

}  // namespace detail

template <typename S>
struct LossAndGrad {
  S loss = 0;
  S recon = 0;  // sum over the batch
  std::vector<S> kl;
  Gradients<S> grads;
};

/// Objective and parameter gradients for one batch. The batch is split into
/// `threads` contiguous chunks evaluated concurrently; partial results are
/// summed in chunk order, so a fixed thread count gives fixed results.
template <typename S>
LossAndGrad<S> loss_and_gradients(const Model<S>& model, const SequenceBatch<S>& batch,
                                  const LatentNoise<S>& noise, S kl_weight, int threads = 1) {
  const Eigen::Index B = batch.batch_size();
  const int chunks = static_cast<int>(std::min<Eigen::Index>(std::max(threads, 1), B));
  std::vector<LossAndGrad<S>> parts(static_cast<std::size_t>(chunks));
  auto work = [&](int c) {
    const Eigen::Index begin = B * c / chunks, end = B * (c + 1) / chunks;
    const bool whole = chunks == 1;
    const SequenceBatch<S> sb = whole ? SequenceBatch<S>{} : detail::sub_batch(batch, begin, end);
    const SequenceBatch<S>& use = whole ? batch : sb;
    const LatentNoise<S> sn = whole ? LatentNoise<S>{} : detail::sub_noise(noise, begin, end, batch.max_len());
    Tape<S> t(&model.params);
    ElboGraph g = build_elbo_graph(t, model, use, whole ? noise : sn);
    Var obj = negative_objective(t, g, B, kl_weight);
    t.backward(obj);
    auto& p = parts[static_cast<std::size_t>(c)];
    p.loss = t.value(obj)(0, 0);
    p.recon = t.value(g.recon).sum();
    for (Var k : g.kl) p.kl.push_back(t.value(k).sum());
    p.grads = t.param_grads();
  };
  if (chunks == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int c = 0; c < chunks; ++c) pool.emplace_back(work, c);
    for (auto& th : pool) th.join();
  }
  LossAndGrad<S> total = std::move(parts[0]);
  for (std::size_t c = 1; c < parts.size(); ++c) {
    total.loss += parts[c].loss;
    total.recon += parts[c].recon;
    for (std::size_t l = 0; l < total.kl.size(); ++l) total.kl[l] += parts[c].kl[l];
    for (std::size_t i = 0; i < total.grads.size(); ++i) total.grads[i] += parts[c].grads[i];
  }
  return total;
}

struct HistoryRow {
  long step = 0;
  double loss = 0;        // mean training objective since the previous row
  double valid_elbo = 0;  // unweighted, per sequence
  double kl_weight = 0;
  double lr = 0;
  std::vector<double> kl_layers;  // validation KL per layer, bottom first
};

inline std::string history_csv(const std::vector<HistoryRow>& rows, std::size_t layers) {
  std::string out = "step,loss,valid_elbo,kl_weight,lr";
  for (std::size_t l = 1; l <= layers; ++l) out += ",kl_layer_" + std::to_string(l);
  out += "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + detail::format_number(r.loss) + "," +
           detail::format_number(r.valid_elbo) + "," + detail::format_number(r.kl_weight) + "," +
           detail::format_number(r.lr);
    for (double k : r.kl_layers) out += "," + detail::format_number(k);
    out += "\n";
  }
  return out;
}

template <typename S>
struct TrainResult {
  Model<S> best;
  std::vector<HistoryRow> history;
  long best_step = -1;
  double best_valid_elbo = -std::numeric_limits<double>::infinity();
  long steps_run = 0;
  bool early_stopped = false;
};

/// Minimizes -(recon - w_kl * KL) with Adam. Every `eval_every` steps the
/// unweighted validation ELBO is measured; the best model is kept and
/// training stops after `patience` evaluations without improvement.
template <typename S>
TrainResult<S> train(const ModelConfig& model_cfg, const TrainConfig& cfg, const SequenceSet& train_set,
                     const SequenceSet& valid_set,
                     const std::function<void(const HistoryRow&)>& on_eval = {}) {
  cfg.validate();
  if (train_set.empty() || valid_set.empty()) throw DomainError("train: empty data set");
  Model<S> model = build_model<S>(model_cfg, mix_seed(cfg.seed, 1));
  Adam<S> opt(model.params);
  TrainResult<S> res{model, {}, -1, -std::numeric_limits<double>::infinity(), 0, false};

  const std::vector<Eigen::Index> dims =
      model_cfg.stochastic() ? model_cfg.latent_dims : std::vector<Eigen::Index>{};
  const std::uint64_t valid_seed = mix_seed(cfg.seed, 2);
  long step = 0;
  std::uint64_t epoch = 0;
  int bad_evals = 0;
  double loss_acc = 0;
  long loss_n = 0;
  bool stop = false;
  while (!stop && step < cfg.max_steps) {
    const auto batches = make_batches<S>(train_set, cfg.batch_size, mix_seed(cfg.seed, 100 + epoch++));
    for (const auto& batch : batches) {
      if (cfg.inject_nan_at_step && *cfg.inject_nan_at_step == step)
        model.params[0].value(0, 0) = std::numeric_limits<S>::quiet_NaN();
      const double w = kl_anneal_weight(step, cfg.kl_anneal_rate);
      const double lr = lr_schedule(step, cfg.lr, cfg.lr_decay, cfg.lr_decay_steps);
      const auto noise = draw_noise(batch, dims, mix_seed(cfg.seed, 1000003ULL + static_cast<std::uint64_t>(step)));
      auto lg = loss_and_gradients(model, batch, noise, static_cast<S>(w), cfg.threads);
      bool finite = std::isfinite(static_cast<double>(lg.loss));
      for (const auto& g : lg.grads) finite = finite && g.allFinite();
      if (!finite)
        throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                        ": non-finite loss or gradient");
      opt.step(model.params, lg.grads, lr);
      loss_acc += static_cast<double>(lg.loss);
      ++loss_n;

      const bool last = step + 1 >= cfg.max_steps;
      if ((step + 1) % cfg.eval_every == 0 || last) {
        const EvalReport rep = evaluate(model, valid_set, 1, valid_seed);
        HistoryRow row{step, loss_acc / static_cast<double>(loss_n), rep.avg_elbo_per_sequence, w, lr,
                       rep.kl_per_layer};
        loss_acc = 0;
        loss_n = 0;
        if (!std::isfinite(row.valid_elbo))
          throw DivergenceError(step, "training diverged at step " + std::to_string(step) +
                                          ": non-finite validation ELBO");
        res.history.push_back(row);
        if (on_eval) on_eval(row);
        if (row.valid_elbo > res.best_valid_elbo) {
          res.best_valid_elbo = row.valid_elbo;
          res.best_step = step;
          res.best.params = model.params;
          bad_evals = 0;
        } else if (++bad_evals >= cfg.patience) {
          res.early_stopped = true;
          stop = true;
        }
      }
      ++step;
      if (stop || step >= cfg.max_steps) break;
    }
  }
  res.steps_run = step;
  return res;
}

// ---------------------------------------------------------------------------
// Configuration <-> JSON

inline nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["variant"] = to_string(c.variant);
  j["input_dim"] = c.input_dim;
  j["layers"] = c.tcn.layers;
  j["blocks"] = c.tcn.blocks;
  j["filters"] = c.tcn.filters;
  j["latent_dims"] = c.latent_dims;
  j["obs_family"] = to_string(c.obs.family);
  j["obs_components"] = c.obs.components;
  j["obs_head"] = to_string(c.obs.head);
  j["obs_head_depth"] = c.obs.head_depth;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.input_dim = j.at("input_dim").get<Eigen::Index>();
  c.tcn.layers = j.at("layers").get<int>();
  c.tcn.blocks = j.at("blocks").get<int>();
  c.tcn.filters = j.at("filters").get<int>();
  c.latent_dims = j.at("latent_dims").get<std::vector<Eigen::Index>>();
  c.obs.family = parse_family(j.at("obs_family").get<std::string>());
  c.obs.components = j.at("obs_components").get<int>();
  c.obs.head = parse_head(j.at("obs_head").get<std::string>());
  c.obs.head_depth = j.at("obs_head_depth").get<int>();
  return c;
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  nlohmann::ordered_json j;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["lr_decay"] = c.lr_decay;
  j["lr_decay_steps"] = c.lr_decay_steps;
  j["kl_anneal_rate"] = c.kl_anneal_rate;
  j["max_steps"] = c.max_steps;
  j["eval_every"] = c.eval_every;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["precision"] = to_string(c.precision);
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr = j.at("lr").get<double>();
  c.lr_decay = j.at("lr_decay").get<double>();
  c.lr_decay_steps = j.at("lr_decay_steps").get<long>();
  c.kl_anneal_rate = j.at("kl_anneal_rate").get<double>();
  c.max_steps = j.at("max_steps").get<long>();
  c.eval_every = j.at("eval_every").get<long>();
  c.patience = j.at("patience").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.precision = parse_precision(j.at("precision").get<std::string>());
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.json and <dir>/params.bin (float32 LE).

inline constexpr int kCheckpointVersion = 1;

template <typename S>
void save_checkpoint(const Model<S>& model, const std::filesystem::path& dir,
                     const std::optional<TrainConfig>& train_cfg = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["format"] = "stcn-checkpoint";
  manifest["version"] = kCheckpointVersion;
  manifest["model"] = to_json(model.cfg);
  if (train_cfg) manifest["train"] = to_json(*train_cfg);
  std::string blob;
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (const auto& p : model.params) {
    nlohmann::ordered_json e;
    e["name"] = p.name;
    e["shape"] = {p.value.rows(), p.value.cols()};
    e["offset"] = blob.size();
    index.push_back(e);
    for (Eigen::Index i = 0; i < p.value.size(); ++i)
      detail::put<float>(blob, static_cast<float>(p.value.data()[i]));
  }
  manifest["params"] = index;
  manifest["blob_bytes"] = blob.size();

  std::ofstream m(dir / "manifest.json");
  if (!m) throw CheckpointError("cannot write " + (dir / "manifest.json").string());
  m << manifest.dump(2) << "\n";
  std::ofstream b(dir / "params.bin", std::ios::binary);
  if (!b) throw CheckpointError("cannot write " + (dir / "params.bin").string());
  b.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

struct CheckpointManifest {
  ModelConfig model;
  std::optional<TrainConfig> train;
};

inline CheckpointManifest read_manifest(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  if (!m) throw CheckpointError("cannot read " + (dir / "manifest.json").string());
  nlohmann::json j;
  try {
    m >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("manifest.json is not valid JSON: ") + e.what());
  }
  if (j.value("format", "") != "stcn-checkpoint")
    throw CheckpointError("manifest.json: not an stcn checkpoint");
  if (j.value("version", -1) != kCheckpointVersion)
    throw CheckpointError("manifest.json: version " + std::to_string(j.value("version", -1)) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  CheckpointManifest out;
  try {
    out.model = model_config_from_json(j.at("model"));
    if (j.contains("train")) out.train = train_config_from_json(j.at("train"));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("manifest.json: bad config: ") + e.what());
  }
  return out;
}

template <typename S>
Model<S> load_checkpoint(const std::filesystem::path& dir) {
  const CheckpointManifest cm = read_manifest(dir);
  nlohmann::json j;
  {
    std::ifstream m(dir / "manifest.json");
    m >> j;
  }
  std::ifstream b(dir / "params.bin", std::ios::binary);
  if (!b) throw CheckpointError("cannot read " + (dir / "params.bin").string());
  const std::string blob((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  if (j.contains("blob_bytes") && j["blob_bytes"].get<std::size_t>() != blob.size())
    throw CheckpointError("params.bin has " + std::to_string(blob.size()) +
                          " bytes, manifest says " + std::to_string(j["blob_bytes"].get<std::size_t>()));

  Model<S> model = build_model<S>(cm.model, 0);
  std::map<std::string, nlohmann::json> entries;
  std::size_t expected = 0;
  for (const auto& e : j.at("params")) {
    const std::string name = e.at("name").get<std::string>();
    const std::size_t off = e.at("offset").get<std::size_t>();
    const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
    if (off != expected)
      throw CheckpointError("parameter '" + name + "': offset " + std::to_string(off) +
                            " is not contiguous (expected " + std::to_string(expected) + ")");
    if (shape.size() != 2) throw CheckpointError("parameter '" + name + "': shape must be 2-D");
    expected += static_cast<std::size_t>(shape[0] * shape[1]) * sizeof(float);
    if (!entries.emplace(name, e).second)
      throw CheckpointError("parameter '" + name + "' listed twice");
  }
  if (expected != blob.size())
    throw CheckpointError("parameter index covers " + std::to_string(expected) +
                          " bytes but params.bin has " + std::to_string(blob.size()));
  for (const auto& [name, e] : entries)
    if (!model.params.find(name)) throw CheckpointError("parameter '" + name + "' is not part of the model");

  for (auto& p : model.params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw CheckpointError("missing parameter '" + p.name + "'");
    const auto shape = it->second.at("shape").template get<std::vector<Eigen::Index>>();
    if (shape[0] != p.value.rows() || shape[1] != p.value.cols())
      throw CheckpointError("parameter '" + p.name + "': shape " + std::to_string(shape[0]) + "x" +
                            std::to_string(shape[1]) + " does not match model " +
                            std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()));
    std::size_t off = it->second.at("offset").template get<std::size_t>();
    for (Eigen::Index i = 0; i < p.value.size(); ++i, off += sizeof(float)) {
      float v;
      std::memcpy(&v, blob.data() + off, sizeof(float));
      p.value.data()[i] = static_cast<S>(detail::byteswap_if_big(v));
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_param;
  Eigen::Index worst_index = -1;
  std::size_t checked = 0;
  bool passed = false;
};

/// |a - n| / max(1e-8, |a| + |n|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// Fixed tiny batch: B=2, T=6 drawn from the "sines" preset.
inline SequenceSet gradcheck_data(Eigen::Index D, std::uint64_t seed) {
  return generate_synthetic(SynthPreset::sines, 2, 6, D, seed);
}

/// Compares the analytic float64 gradient of -elbo with central differences
/// (h = 1e-5, frozen noise) for every parameter entry. The differences are
/// evaluated in extended precision so that rounding in the loss does not
/// swamp small gradient entries. `corrupt` scales the analytic gradient of
/// the named parameter by 2.
inline GradCheckReport grad_check(const ModelConfig& cfg, double tol, std::uint64_t seed,
                                  const std::string& corrupt = {}) {
  using Ext = long double;
  Model<double> model = build_model<double>(cfg, seed);
  // Zero biases put ReLU pre-activations of the all-zero first step exactly
  // on the kink; move to a generic point.
  {
    std::mt19937_64 rng(mix_seed(seed, 3));
    std::uniform_real_distribution<double> u(-0.1, 0.1);
    for (auto& p : model.params)
      if (std::string_view(p.name).ends_with(".bias"))
        for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = u(rng);
  }
  const SequenceSet data = gradcheck_data(cfg.input_dim, seed);
  const auto batch = make_batch<double>(data, {0, 1});
  const auto noise = draw_noise(batch, cfg.stochastic() ? cfg.latent_dims : std::vector<Eigen::Index>{},
                                mix_seed(seed, 7));
  const auto grads = loss_and_gradients(model, batch, noise, 1.0).grads;

  Model<Ext> ext = convert_model<Ext>(model);
  const auto ext_batch = make_batch<Ext>(data, {0, 1});
  LatentNoise<Ext> ext_noise;
  for (const auto& n : noise) ext_noise.push_back(n.cast<Ext>());
  auto loss_at = [&]() {
    Tape<Ext> t(&ext.params);
    ElboGraph g = build_elbo_graph(t, ext, ext_batch, ext_noise);
    return t.value(negative_objective(t, g, ext_batch.batch_size(), Ext(1)))(0, 0);
  };

  const Ext h = 1e-5L;
  GradCheckReport rep;
  for (std::size_t i = 0; i < ext.params.size(); ++i) {
    auto& p = ext.params[i];
    const double factor = p.name == corrupt ? 2.0 : 1.0;
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      Ext& w = p.value.data()[k];
      const Ext orig = w;
      w = orig + h;
      const Ext up = loss_at();
      w = orig - h;
      const Ext down = loss_at();
      w = orig;
      const double numeric = static_cast<double>((up - down) / (2 * h));
      const double err = relative_error(factor * grads[i].data()[k], numeric);
      ++rep.checked;
      if (rep.worst_index < 0 || err > rep.max_rel_err) {
        rep.max_rel_err = err;
        rep.worst_param = p.name;
        rep.worst_index = k;
      }
    }
  }
  rep.passed = rep.max_rel_err < tol;
  return rep;
}

/// Named tiny configurations for grad_check.
inline ModelConfig gradcheck_preset(std::string_view name) {
  ModelConfig c;
  c.tcn = {2, 2, 8};
  c.latent_dims = {3, 2};
  c.input_dim = 2;
  c.obs.family = ObsFamily::normal;
  c.obs.head_depth = 2;
  if (name == "tiny")
    c.variant = Variant::stcn;
  else if (name == "tiny-dense")
    c.variant = Variant::stcn_dense;
  else if (name == "tiny-wavenet")
    c.variant = Variant::wavenet;
  else
    throw UsageError("unknown gradcheck preset: " + std::string(name));
  return c;
}

}  // namespace stcn
