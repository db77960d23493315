#pragma once

// Run configuration: INI-style text with [model], [tcn], [obs], [train] and
// [data] sections. Unknown sections or keys are rejected.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "stcn/errors.hpp"
#include "stcn/model.hpp"
#include "stcn/training.hpp"

namespace stcn {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string train_data;
  std::string valid_data;
};

namespace detail {

inline const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys{
      {"model", {"variant", "latent_dims"}},
      {"tcn", {"layers", "blocks", "filters"}},
      {"obs", {"family", "components", "head", "head_depth"}},
      {"train",
       {"batch_size", "lr", "lr_decay", "lr_decay_steps", "kl_anneal_rate", "max_steps",
        "eval_every", "patience", "seed", "precision", "threads"}},
      {"data", {"train", "valid"}},
  };
  return keys;
}

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof())
    throw ConfigError("config key '" + key + "': cannot parse value '" + text + "'");
  return v;
}

inline std::vector<Eigen::Index> parse_dims(const std::string& key, const std::string& text) {
  std::vector<Eigen::Index> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) dims.push_back(parse_value<Eigen::Index>(key, item));
  if (dims.empty()) throw ConfigError("config key '" + key + "': empty list");
  return dims;
}

}  // namespace detail

/// Parses config text. Keys absent from the text keep their defaults.
inline RunConfig parse_run_config(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax error: ") + e.what());
  }
  const auto& known = detail::known_keys();
  RunConfig rc;
  for (const auto& [section, body] : tree) {
    auto sec = known.find(section);
    if (sec == known.end()) {
      if (body.empty()) throw ConfigError("unknown config key '" + section + "' (keys belong in a section)");
      throw ConfigError("unknown config section '[" + section + "]'");
    }
    for (const auto& [key, node] : body) {
      const std::string full = section + "." + key;
      if (!sec->second.count(key)) throw ConfigError("unknown config key '" + key + "' in [" + section + "]");
      const std::string v = node.get_value<std::string>();
      using detail::parse_value;
      if (full == "model.variant") rc.model.variant = parse_variant(v);
      else if (full == "model.latent_dims") rc.model.latent_dims = detail::parse_dims(full, v);
      else if (full == "tcn.layers") rc.model.tcn.layers = parse_value<int>(full, v);
      else if (full == "tcn.blocks") rc.model.tcn.blocks = parse_value<int>(full, v);
      else if (full == "tcn.filters") rc.model.tcn.filters = parse_value<int>(full, v);
      else if (full == "obs.family") rc.model.obs.family = parse_family(v);
      else if (full == "obs.components") rc.model.obs.components = parse_value<int>(full, v);
      else if (full == "obs.head") rc.model.obs.head = parse_head(v);
      else if (full == "obs.head_depth") rc.model.obs.head_depth = parse_value<int>(full, v);
      else if (full == "train.batch_size") rc.train.batch_size = parse_value<std::size_t>(full, v);
      else if (full == "train.lr") rc.train.lr = parse_value<double>(full, v);
      else if (full == "train.lr_decay") rc.train.lr_decay = parse_value<double>(full, v);
      else if (full == "train.lr_decay_steps") rc.train.lr_decay_steps = parse_value<long>(full, v);
      else if (full == "train.kl_anneal_rate") rc.train.kl_anneal_rate = parse_value<double>(full, v);
      else if (full == "train.max_steps") rc.train.max_steps = parse_value<long>(full, v);
      else if (full == "train.eval_every") rc.train.eval_every = parse_value<long>(full, v);
      else if (full == "train.patience") rc.train.patience = parse_value<int>(full, v);
      else if (full == "train.seed") rc.train.seed = parse_value<std::uint64_t>(full, v);
      else if (full == "train.precision") rc.train.precision = parse_precision(v);
      else if (full == "train.threads") rc.train.threads = parse_value<int>(full, v);
      else if (full == "data.train") rc.train_data = v;
      else if (full == "data.valid") rc.valid_data = v;
    }
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace stcn
