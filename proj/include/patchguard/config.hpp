#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "patchguard/attacks.hpp"
#include "patchguard/train.hpp"
#include "patchguard/vit.hpp"

namespace patchguard::config {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Flat "section.key" -> value view of a run configuration. Layers are
/// merged by plain overwrite, so later layers win.
using Layer = std::map<std::string, std::string>;

/// Parses "a/b" as a / b (one rounding) or a plain decimal number.
inline double parse_rational(const std::string& s) {
  auto number = [&](std::string_view t) {
    double v = 0.0;
    auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc{} || end != t.data() + t.size() || t.empty()) throw ConfigError("not a number: '" + s + "'");
    return v;
  };
  const auto slash = s.find('/');
  if (slash == std::string::npos) return number(s);
  const double den = number(std::string_view(s).substr(slash + 1));
  if (den == 0.0) throw ConfigError("zero denominator in '" + s + "'");
  return number(std::string_view(s).substr(0, slash)) / den;
}

inline Layer defaults() {
  Layer d;
  for (const auto& [k, v] : vit::to_kv(vit::ViTConfig{})) d["model." + k] = v;
  const train::TrainConfig t;
  auto num = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  d["train.epochs"] = std::to_string(t.epochs);
  d["train.batch_size"] = std::to_string(t.batch_size);
  d["train.lr"] = num(t.lr);
  d["train.weight_decay"] = num(t.weight_decay);
  d["train.lr_decay_factor"] = num(t.lr_decay_factor);
  d["train.patience"] = std::to_string(t.patience);
  d["train.val_fraction"] = num(t.val_fraction);
  d["train.eps"] = "8/255";
  d["train.iters"] = std::to_string(t.attack.iters);
  d["train.step"] = "auto";
  d["attack.kind"] = "pgd";
  d["attack.eps"] = "8/255";
  d["attack.iters"] = "1000";
  d["attack.step"] = "auto";
  d["attack.random_start"] = "false";
  d["eval.batch"] = "16";
  d["eval.heatmaps"] = "0";
  d["analyze.clusters"] = "5";
  d["gen.k_soft"] = "3";
  d["gen.k_hard_min"] = "1";
  d["gen.k_hard_max"] = "3";
  d["gen.saliency"] = "gradcam";
  d["gen.proxy_steps"] = "150";
  d["data.path"] = "";
  d["run.seed"] = "0";
  d["run.deterministic"] = "false";
  return d;
}

/// Reads an INI file; every key must already exist in `known`.
inline Layer read_ini(const std::filesystem::path& path, const Layer& known) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  Layer out;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) {
      const auto full = section + "." + key;
      if (!known.count(full)) throw ConfigError("unknown config key '" + full + "' in " + path.string());
      out[full] = value.get_value<std::string>();
    }
  }
  return out;
}

inline void merge(Layer& base, const Layer& over) {
  for (const auto& [k, v] : over) base[k] = v;
}

/// INI text with sections in key order; read_ini of this text restores the layer.
inline std::string to_ini(const Layer& l) {
  boost::property_tree::ptree tree;
  for (const auto& [k, v] : l) tree.put(k, v);
  std::ostringstream os;
  boost::property_tree::ini_parser::write_ini(os, tree);
  return os.str();
}

// ---------------------------------------------------------------------------
// Typed views.

inline const std::string& get(const Layer& l, const std::string& key) {
  auto it = l.find(key);
  if (it == l.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

inline std::size_t get_size(const Layer& l, const std::string& key) {
  const auto& s = get(l, key);
  std::size_t v = 0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || end != s.data() + s.size() || s.empty())
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

inline double get_double(const Layer& l, const std::string& key) {
  try {
    return parse_rational(get(l, key));
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline bool get_bool(const Layer& l, const std::string& key) {
  const auto& s = get(l, key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

/// "auto" maps to 0, which the attack reads as 2.5 * eps / iters.
inline double get_step(const Layer& l, const std::string& key) {
  return get(l, key) == "auto" ? 0.0 : get_double(l, key);
}

inline vit::ViTConfig model_config(const Layer& l) {
  std::map<std::string, std::string> kv;
  for (const auto& [k, v] : l)
    if (k.rfind("model.", 0) == 0) kv[k.substr(6)] = v;
  vit::ViTConfig c;
  try {
    c = vit::from_kv(kv);
  } catch (const std::logic_error& e) {
    throw ConfigError(std::string("model section: ") + e.what());
  }
  c.validate();
  return c;
}

inline train::TrainConfig train_config(const Layer& l) {
  train::TrainConfig t;
  t.epochs = get_size(l, "train.epochs");
  t.batch_size = get_size(l, "train.batch_size");
  t.lr = get_double(l, "train.lr");
  t.weight_decay = get_double(l, "train.weight_decay");
  t.lr_decay_factor = get_double(l, "train.lr_decay_factor");
  t.patience = get_size(l, "train.patience");
  t.val_fraction = get_double(l, "train.val_fraction");
  t.attack.epsilon = get_double(l, "train.eps");
  t.attack.iters = get_size(l, "train.iters");
  t.attack.step_size = get_step(l, "train.step");
  t.seed = get_size(l, "run.seed");
  t.gen.k_hard_min = get_size(l, "gen.k_hard_min");
  t.gen.k_hard_max = get_size(l, "gen.k_hard_max");
  if (t.gen.k_hard_min < 1 || t.gen.k_hard_max < t.gen.k_hard_min) throw ConfigError("gen: need 1 <= k_hard_min <= k_hard_max");
  t.validate();
  return t;
}

/// Evaluation attack, or nullopt for attack.kind = none. FGSM is one step
/// of size eps.
inline std::optional<attacks::AttackSpec> eval_attack(const Layer& l) {
  const auto& kind = get(l, "attack.kind");
  if (kind == "none") return std::nullopt;
  attacks::AttackSpec a;
  a.epsilon = get_double(l, "attack.eps");
  a.seed = get_size(l, "run.seed");
  if (kind == "fgsm") {
    a = attacks::fgsm(a.epsilon, attacks::Objective::LocalizeMap);
    a.seed = get_size(l, "run.seed");
  } else if (kind == "pgd" || kind == "segpgd") {
    a.iters = get_size(l, "attack.iters");
    a.step_size = get_step(l, "attack.step");
    a.random_start = get_bool(l, "attack.random_start");
    a.objective = kind == "pgd" ? attacks::Objective::LocalizeMap : attacks::Objective::SegPGDPatchwise;
  } else {
    throw ConfigError("attack.kind must be pgd, segpgd, fgsm or none, got '" + kind + "'");
  }
  a.validate();
  return a;
}

}  // namespace patchguard::config
