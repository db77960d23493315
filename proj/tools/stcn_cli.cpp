#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "stcn/stcn.hpp"

namespace fs = std::filesystem;
using namespace stcn;

namespace {

constexpr int kOk = 0;
constexpr int kNumericFailure = 1;
constexpr int kUsageOrIo = 2;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int threads_from(std::optional<int> flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("STCN_THREADS")) {
    try {
      return std::stoi(env);
    } catch (const std::exception&) {
      throw UsageError(std::string("STCN_THREADS is not an integer: ") + env);
    }
  }
  return 0;  // keep the config value
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

SequenceSet read_data(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("no ") + what + " data given");
  return read_container(path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string preset = "sines";
  std::size_t n = 0;
  Eigen::Index T = 0, D = 0;
  std::uint64_t seed = 0;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  SequenceSet set;
  try {
    set = generate_synthetic(parse_preset(a.preset), a.n, a.T, a.D, a.seed);
  } catch (const DomainError& e) {
    throw UsageError(e.what());
  }
  write_container(set, a.out);
  std::cout << "wrote " << set.size() << " sequences T=" << a.T << " D=" << a.D << " -> " << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string config, data, valid, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<long> max_steps;
  std::optional<int> threads;
  std::optional<long> inject_nan;
};

template <typename S>
void run_training(const RunConfig& rc, const SequenceSet& train_set, const SequenceSet& valid_set,
                  const fs::path& out_dir) {
  const std::size_t layers = rc.model.stochastic() ? rc.model.latent_dims.size() : 0;
  auto res = train<S>(rc.model, rc.train, train_set, valid_set, [](const HistoryRow& r) {
    std::cerr << "step " << r.step << " loss " << r.loss << " valid_elbo " << r.valid_elbo << "\n";
  });
  fs::create_directories(out_dir);
  save_checkpoint(res.best, out_dir, rc.train);
  write_text(out_dir / "history.csv", history_csv(res.history, layers));
  std::cout << "best valid_elbo " << detail::format_number(res.best_valid_elbo) << " at step " << res.best_step
            << (res.early_stopped ? " (early stop)" : "") << " -> " << out_dir.string() << "\n";
}

int cmd_train(const TrainArgs& a) {
  RunConfig rc = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  auto override_note = [](const char* flag, const char* key) {
    std::cerr << "note: " << flag << " overrides config " << key << "\n";
  };
  if (!a.data.empty()) {
    if (!rc.train_data.empty()) override_note("--data", "data.train");
    rc.train_data = a.data;
  }
  if (!a.valid.empty()) {
    if (!rc.valid_data.empty()) override_note("--valid", "data.valid");
    rc.valid_data = a.valid;
  }
  if (a.seed) {
    if (!a.config.empty()) override_note("--seed", "train.seed");
    rc.train.seed = *a.seed;
  }
  if (a.max_steps) {
    if (!a.config.empty()) override_note("--max-steps", "train.max_steps");
    rc.train.max_steps = *a.max_steps;
  }
  if (const int t = threads_from(a.threads); t != 0) rc.train.threads = t;
  rc.train.inject_nan_at_step = a.inject_nan;

  // Relative data paths in a config file are resolved against its directory.
  auto resolve = [&](const std::string& p, bool from_flag) {
    if (p.empty() || from_flag || a.config.empty() || fs::path(p).is_absolute()) return p;
    return (fs::path(a.config).parent_path() / p).string();
  };
  const auto train_set = read_data(resolve(rc.train_data, !a.data.empty()), "training");
  const auto valid_set = read_data(resolve(rc.valid_data, !a.valid.empty()), "validation");
  rc.model.input_dim = train_set.feature_dim;
  if (valid_set.feature_dim != train_set.feature_dim)
    throw ShapeError("validation data has D=" + std::to_string(valid_set.feature_dim) + ", training data D=" +
                     std::to_string(train_set.feature_dim));
  rc.model.validate();

  if (rc.train.precision == Precision::f32)
    run_training<float>(rc, train_set, valid_set, a.out_dir);
  else
    run_training<double>(rc, train_set, valid_set, a.out_dir);
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, format = "csv", name;
  std::size_t mc_samples = 1;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const auto model = load_checkpoint<double>(a.ckpt);
  const auto set = read_container(a.data);
  const auto rep = evaluate(model, set, a.mc_samples, a.seed);
  const std::string name = a.name.empty() ? to_string(model.cfg.variant) : a.name;
  if (a.format == "json") {
    std::cout << compare_json({{name, rep}});
  } else {
    std::cout << compare_csv({{name, rep}});
    std::cout << "# mc_samples=" << rep.mc_samples << " seed=" << rep.seed
              << " units=nats per sequence; kl_1 = bottom layer, kl_L = top-most layer\n";
  }
  return kOk;
}

struct SampleArgs {
  std::string ckpt, prefix, out;
  Eigen::Index steps = 0;
  std::size_t n = 1;
  std::uint64_t seed = 0;
  bool mean_pred = false;
};

int cmd_sample(const SampleArgs& a) {
  const auto model = load_checkpoint<double>(a.ckpt);
  SequenceSet out;
  out.feature_dim = model.cfg.input_dim;
  std::vector<Mat<double>> prefixes;
  if (!a.prefix.empty()) {
    const auto p = read_container(a.prefix);
    if (p.feature_dim != model.cfg.input_dim)
      throw ShapeError("prefix has D=" + std::to_string(p.feature_dim) + ", model expects " +
                       std::to_string(model.cfg.input_dim));
    prefixes = p.sequences;
  } else {
    prefixes.assign(a.n, Mat<double>(0, model.cfg.input_dim));
  }
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    Mat<double> s = sample_sequence(model, prefixes[i], a.steps, mix_seed(a.seed, i), a.mean_pred);
    if (!s.allFinite()) throw DomainError("sample " + std::to_string(i) + " contains non-finite values");
    out.sequences.push_back(std::move(s));
  }
  write_container(out, a.out);
  std::cout << "wrote " << out.size() << " sequences T=" << out.sequences.front().rows() << " D=" << out.feature_dim
            << " -> " << a.out << "\n";
  return kOk;
}

struct GradcheckArgs {
  std::string preset = "tiny";
  double tol = 1e-4;
  std::uint64_t seed = 0;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto rep = grad_check(gradcheck_preset(a.preset), a.tol, a.seed);
  std::cout << "preset=" << a.preset << " checked=" << rep.checked << "\n"
            << "max_rel_err=" << rep.max_rel_err << "\n"
            << "worst_param=" << rep.worst_param << "[" << rep.worst_index << "]\n"
            << (rep.passed ? "PASS" : "FAIL") << " (tol=" << a.tol << ")\n";
  return rep.passed ? kOk : kNumericFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic temporal convolutional networks: synthesize, train, evaluate, sample"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic sequence container");
  synth->add_option("--preset", sa.preset, "sines | switching | strokes")->capture_default_str();
  synth->add_option("--n", sa.n, "Number of sequences")->required();
  synth->add_option("--T", sa.T, "Steps per sequence")->required();
  synth->add_option("--D", sa.D, "Features per step")->required();
  synth->add_option("--seed", sa.seed)->capture_default_str();
  synth->add_option("--out", sa.out, "Output container path")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint plus history.csv");
  trn->add_option("--config", ta.config, "INI run configuration");
  trn->add_option("--data", ta.data, "Training container (overrides data.train)");
  trn->add_option("--valid", ta.valid, "Validation container (overrides data.valid)");
  trn->add_option("--out-dir", ta.out_dir, "Checkpoint directory")->required();
  trn->add_option("--seed", ta.seed, "Overrides train.seed");
  trn->add_option("--max-steps", ta.max_steps, "Overrides train.max_steps");
  trn->add_option("--threads", ta.threads, "Worker threads; 1 is deterministic (fallback: STCN_THREADS)");
  trn->add_option("--inject-nan-at-step", ta.inject_nan)->group("");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a data set");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint directory")->required();
  ev->add_option("--data", ea.data, "Sequence container")->required();
  ev->add_option("--mc-samples", ea.mc_samples, "Noise draws per sequence")->capture_default_str();
  ev->add_option("--seed", ea.seed)->capture_default_str();
  ev->add_option("--format", ea.format)->check(CLI::IsMember({"csv", "json"}))->capture_default_str();
  ev->add_option("--name", ea.name, "Row label (default: the model variant)");
  std::optional<int> eval_threads;
  ev->add_option("--threads", eval_threads, "Accepted for symmetry; evaluation is single-threaded");

  SampleArgs spa;
  auto* smp = app.add_subcommand("sample", "Generate sequences from a checkpoint");
  smp->add_option("--ckpt", spa.ckpt, "Checkpoint directory")->required();
  smp->add_option("--steps", spa.steps, "Steps to generate after the prefix")->required();
  smp->add_option("--seed", spa.seed)->capture_default_str();
  smp->add_option("--prefix", spa.prefix, "Container of prefixes; one output per prefix");
  smp->add_option("--n", spa.n, "Sequences to generate without a prefix")->capture_default_str();
  smp->add_flag("--mean-pred", spa.mean_pred, "Emit the predictive mean instead of sampling");
  smp->add_option("--out", spa.out, "Output container path")->required();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc->add_option("--preset", ga.preset)->check(CLI::IsMember({"tiny", "tiny-dense", "tiny-wavenet"}))
      ->capture_default_str();
  gc->add_option("--tol", ga.tol)->capture_default_str();
  gc->add_option("--seed", ga.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsageOrIo;
  }

  try {
    if (*synth) return cmd_synth(sa);
    if (*trn) return cmd_train(ta);
    if (*ev) return cmd_eval(ea);
    if (*smp) return cmd_sample(spa);
    if (*gc) return cmd_gradcheck(ga);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumericFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageOrIo;
  }
  return kUsageOrIo;
}
