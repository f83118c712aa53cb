#pragma once

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tucan/checkpoint.hpp"
#include "tucan/error.hpp"
#include "tucan/net.hpp"
#include "tucan/trainer.hpp"

namespace tucan {

/// Everything a CLI run needs. Keys are "section.name" and map 1:1 to
/// fields; see config_schema() for the full list.
struct RunConfig {
  // [data]
  std::string data_root;
  std::string data_manifest;
  // [model]
  std::string scale = "canonical";
  CapsuleConfig capsules;
  // [bins]
  std::string bins_file;
  double bins_grid = 10.0;
  int bins_stride = 4;
  double bins_lambda = 0.5;
  double bins_sigma = 5.0;
  int bins_prior_images = 10000;
  // [train]
  Scheme scheme = Scheme::end_to_end;
  std::optional<int> epochs;
  int batch_size = 32;
  double lr = 2e-3;
  int rho = 10;
  int xi = 20;
  std::vector<Level> levels{Level::pcu, Level::up1, Level::up2, Level::up3, Level::up4};
  double conv_lr = 2e-4;
  double capsule_lr = 2e-3;
  std::optional<double> head_lr;
  int checkpoint_every = 0;
  // [eval]
  std::string lpips_plugin;
  // [run]
  std::uint64_t seed = 0;
  std::string out = "run";

  NetworkConfig network(int Q) const {
    NetworkConfig c = scale == "toy" ? NetworkConfig::toy_scale(Q) : NetworkConfig::canonical(Q);
    c.capsules = capsules;
    c.seed = seed;
    return c;
  }

  TrainPlan plan() const {
    TrainPlan p = TrainPlan::canonical(scheme);
    if (epochs) p.epochs = *epochs;
    p.batch_size = batch_size;
    p.base_lr = lr;
    p.rho = rho;
    p.xi = xi;
    p.levels = levels;
    p.seed = seed;
    p.checkpoint_every = checkpoint_every;
    if (scheme == Scheme::finetune) p.split_lr = SplitLr{conv_lr, capsule_lr, head_lr.value_or(conv_lr)};
    return p;
  }
};

struct ConfigKey {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  if (!(is >> out) || !is.eof()) throw ConfigError(key, key + ": '" + v + "' is not a valid number");
  return out;
}

inline int parse_int(const std::string& key, const std::string& v, int lo) {
  const int x = parse_number<int>(key, v);
  if (x < lo) throw ConfigError(key, key + ": must be >= " + std::to_string(lo));
  return x;
}

inline double parse_positive(const std::string& key, const std::string& v) {
  const double x = parse_number<double>(key, v);
  if (!(x > 0.0)) throw ConfigError(key, key + ": must be > 0");
  return x;
}

}  // namespace detail

inline const std::vector<ConfigKey>& config_schema() {
  using detail::parse_int;
  using detail::parse_number;
  using detail::parse_positive;
  static const std::vector<ConfigKey> keys = {
      {"data.root", "dataset directory (falls back to $TUCAN_DATA_ROOT)", [](RunConfig& c, const std::string& v) { c.data_root = v; }},
      {"data.manifest", "optional split file, one relative image path per line",
       [](RunConfig& c, const std::string& v) { c.data_manifest = v; }},
      {"model.scale", "canonical (224 input) or toy (64 input, channels / 4)",
       [](RunConfig& c, const std::string& v) {
         if (v != "canonical" && v != "toy") throw ConfigError("model.scale", "model.scale: expected canonical or toy");
         c.scale = v;
       }},
      {"model.capsule_dim", "k, primary capsule dimension",
       [](RunConfig& c, const std::string& v) { c.capsules.dim = parse_int("model.capsule_dim", v, 1); }},
      {"model.capsule_out_dim", "k_hat, entity capsule dimension",
       [](RunConfig& c, const std::string& v) { c.capsules.out_dim = parse_int("model.capsule_out_dim", v, 1); }},
      {"model.capsule_count", "number of entity capsules",
       [](RunConfig& c, const std::string& v) { c.capsules.out_caps = parse_int("model.capsule_count", v, 1); }},
      {"model.capsule_groups", "primary capsules per spatial position",
       [](RunConfig& c, const std::string& v) { c.capsules.groups = parse_int("model.capsule_groups", v, 1); }},
      {"model.routing_iterations", "routing-by-agreement iterations",
       [](RunConfig& c, const std::string& v) { c.capsules.iterations = parse_int("model.routing_iterations", v, 1); }},
      {"bins.file", "bin table file to use instead of the sRGB sweep",
       [](RunConfig& c, const std::string& v) { c.bins_file = v; }},
      {"bins.grid", "lattice spacing in chroma units",
       [](RunConfig& c, const std::string& v) { c.bins_grid = parse_positive("bins.grid", v); }},
      {"bins.stride", "sRGB cube sampling stride for the sweep",
       [](RunConfig& c, const std::string& v) { c.bins_stride = parse_int("bins.stride", v, 1); }},
      {"bins.lambda", "rebalance mix with the uniform distribution, in [0,1]",
       [](RunConfig& c, const std::string& v) {
         const double x = parse_number<double>("bins.lambda", v);
         if (x < 0.0 || x > 1.0) throw ConfigError("bins.lambda", "bins.lambda: must be in [0,1]");
         c.bins_lambda = x;
       }},
      {"bins.sigma", "Gaussian smoothing of the empirical prior (0 disables)",
       [](RunConfig& c, const std::string& v) {
         const double x = parse_number<double>("bins.sigma", v);
         if (x < 0.0) throw ConfigError("bins.sigma", "bins.sigma: must be >= 0");
         c.bins_sigma = x;
       }},
      {"bins.prior_images", "images sampled to fit the prior",
       [](RunConfig& c, const std::string& v) { c.bins_prior_images = parse_int("bins.prior_images", v, 1); }},
      {"train.scheme", "end_to_end, progressive or finetune",
       [](RunConfig& c, const std::string& v) {
         const auto s = scheme_from_name(v);
         if (!s) throw ConfigError("train.scheme", "train.scheme: expected end_to_end, progressive or finetune");
         c.scheme = *s;
       }},
      {"train.epochs", "epochs for end_to_end (40) and finetune (35)",
       [](RunConfig& c, const std::string& v) { c.epochs = parse_int("train.epochs", v, 1); }},
      {"train.batch_size", "images per step",
       [](RunConfig& c, const std::string& v) { c.batch_size = parse_int("train.batch_size", v, 1); }},
      {"train.lr", "Adam learning rate (end_to_end, progressive)",
       [](RunConfig& c, const std::string& v) { c.lr = parse_positive("train.lr", v); }},
      {"train.rho", "progressive: epochs per level",
       [](RunConfig& c, const std::string& v) { c.rho = parse_int("train.rho", v, 1); }},
      {"train.xi", "progressive: epochs of the final stage",
       [](RunConfig& c, const std::string& v) { c.xi = parse_int("train.xi", v, 0); }},
      {"train.levels", "progressive: comma list of PCU,1stUP,2ndUP,3rdUP,4thUP",
       [](RunConfig& c, const std::string& v) {
         std::vector<Level> out;
         std::istringstream is(v);
         for (std::string t; std::getline(is, t, ',');) {
           const auto l = level_from_name(detail::trim(t));
           if (!l || *l == Level::final) throw ConfigError("train.levels", "train.levels: unknown level '" + t + "'");
           if (!out.empty() && static_cast<int>(*l) <= static_cast<int>(out.back()))
             throw ConfigError("train.levels", "train.levels: levels must be increasing");
           out.push_back(*l);
         }
         if (out.empty()) throw ConfigError("train.levels", "train.levels: empty");
         c.levels = out;
       }},
      {"train.conv_lr", "finetune: learning rate of DBD/DBU and pre/post blocks",
       [](RunConfig& c, const std::string& v) { c.conv_lr = parse_positive("train.conv_lr", v); }},
      {"train.capsule_lr", "finetune: learning rate of PCD/PCU",
       [](RunConfig& c, const std::string& v) { c.capsule_lr = parse_positive("train.capsule_lr", v); }},
      {"train.head_lr", "finetune: learning rate of the heads (defaults to conv_lr)",
       [](RunConfig& c, const std::string& v) { c.head_lr = parse_positive("train.head_lr", v); }},
      {"train.checkpoint_every", "write a checkpoint every N epochs (0: only at the end)",
       [](RunConfig& c, const std::string& v) { c.checkpoint_every = parse_int("train.checkpoint_every", v, 0); }},
      {"eval.lpips_plugin", "command scoring two PNG paths, printing one number",
       [](RunConfig& c, const std::string& v) { c.lpips_plugin = v; }},
      {"run.seed", "seed for initialisation and batch order",
       [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("run.seed", v); }},
      {"run.out", "output directory", [](RunConfig& c, const std::string& v) { c.out = v; }},
  };
  return keys;
}

inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : config_schema())
    if (k.key == key) return k.set(cfg, value);
  throw ConfigError(key, "unknown config key '" + key + "'");
}

/// "key=value" as given to --set.
inline void apply_override(RunConfig& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw ConfigError(kv, "override '" + kv + "' is not key=value");
  apply_setting(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

/// INI-like text: [section] headers, key = value lines, '#' or ';' comments.
inline void parse_config(std::istream& is, RunConfig& cfg) {
  std::string section, line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    line = detail::trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(line, "line " + std::to_string(lineno) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string name = detail::trim(line.substr(0, eq));
    apply_setting(cfg, section.empty() ? name : section + "." + name, detail::trim(line.substr(eq + 1)));
  }
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot read config file " + path.string());
  RunConfig cfg;
  parse_config(in, cfg);
  return cfg;
}

/// Documented schema as a commented config file.
inline std::string config_template() {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_schema()) {
    const auto dot = k.key.find('.');
    const std::string s = k.key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << "[" << s << "]\n";
      section = s;
    }
    os << "# " << k.key.substr(dot + 1) << " = ...   " << k.help << "\n";
  }
  return os.str();
}

}  // namespace tucan
