#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tucan/checkpoint.hpp"
#include "tucan/colorspace.hpp"
#include "tucan/config.hpp"
#include "tucan/datapipe.hpp"
#include "tucan/evalkit.hpp"
#include "tucan/image_io.hpp"
#include "tucan/log.hpp"
#include "tucan/net.hpp"
#include "tucan/trainer.hpp"

namespace tucan {

enum ExitCode { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitArtifact = 3 };

namespace cli_detail {

namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> scheme;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string checkpoint;
  std::string lpips_plugin;
  std::string data;
  std::string stub;
  std::vector<std::string> inputs;
  bool dry_run = false;
};

inline RunConfig resolve_config(const Options& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  for (const auto& kv : o.overrides) apply_override(cfg, kv);
  if (o.scheme) apply_setting(cfg, "train.scheme", *o.scheme);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (!o.lpips_plugin.empty()) cfg.lpips_plugin = o.lpips_plugin;
  if (!o.data.empty()) cfg.data_root = o.data;
  if (cfg.data_root.empty())
    if (const char* env = std::getenv("TUCAN_DATA_ROOT")) cfg.data_root = env;
  return cfg;
}

inline std::vector<fs::path> dataset_files(const RunConfig& cfg) {
  if (cfg.data_root.empty()) throw ConfigError("data.root", "data.root is not set (nor TUCAN_DATA_ROOT)");
  return scan_dataset(cfg.data_root, cfg.data_manifest);
}

inline BinTable base_bins(const RunConfig& cfg) {
  if (cfg.bins_file.empty()) return build_gamut_bins(cfg.bins_grid, cfg.bins_stride);
  std::ifstream in(cfg.bins_file);
  if (!in) throw ArtifactError("cannot read bin table " + cfg.bins_file);
  return read_bin_table(in);
}

/// Rebalance weights from a seeded subsample of the records.
inline BinTable fitted_bins(BinTable bins, const std::vector<SampleRecord>& data, const RunConfig& cfg) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(cfg.bins_prior_images)));
  std::vector<AbImage> sample;
  for (auto i : idx) sample.push_back(data[i].ab);
  return fit_rebalance_weights(std::move(bins), std::span<const AbImage>(sample), {cfg.bins_lambda, cfg.bins_sigma});
}

inline void write_plan_only(const RunConfig& cfg, const TrainPlan& plan, const NetworkConfig& net, std::ostream& out) {
  fs::create_directories(cfg.out);
  const nlohmann::json m{{"plan", plan.to_json()},
                         {"config", to_json(net)},
                         {"config_fingerprint", config_fingerprint(net)},
                         {"dry_run", true}};
  std::ofstream(fs::path(cfg.out) / "manifest.json") << m.dump(2) << "\n";
  out << m.at("plan").dump(2) << "\n";
}

inline int cmd_train(const Options& o, bool finetune_cmd, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  if (finetune_cmd) cfg.scheme = Scheme::finetune;
  if (!finetune_cmd && cfg.scheme == Scheme::finetune)
    throw ConfigError("train.scheme", "use the finetune command for the finetune scheme");
  if (cfg.scheme == Scheme::finetune && o.checkpoint.empty())
    throw ConfigError("--checkpoint", "finetune needs --checkpoint");
  const TrainPlan plan = cfg.plan();

  if (o.dry_run) {
    BinTable bins = base_bins(cfg);
    write_plan_only(cfg, plan, cfg.network(bins.size()), out);
    return kExitOk;
  }

  std::unique_ptr<TucanNet> net;
  BinTable bins = base_bins(cfg);
  std::vector<SampleRecord> data;
  TrainOptions topt;
  topt.out_dir = cfg.out;
  if (!o.checkpoint.empty()) {
    // Resume or finetune: the checkpoint fixes architecture and bin table.
    RestoredModel rm = restore_model(o.checkpoint);
    net = std::move(rm.net);
    bins = std::move(rm.bins);
    if (!finetune_cmd) topt.start_epoch = rm.info.epoch;
    data = load_dataset(dataset_files(cfg), net->config().plan.input_size, bins);
  } else {
    const NetworkConfig ncfg = cfg.network(bins.size());
    validate(ncfg);
    data = load_dataset(dataset_files(cfg), ncfg.plan.input_size, bins);
    bins = fitted_bins(std::move(bins), data, cfg);
    net = std::make_unique<TucanNet>(ncfg);
  }
  out << "scheme " << scheme_name(plan.scheme) << ", " << plan.total_epochs() << " epochs, batch " << plan.batch_size
      << ", " << data.size() << " images\n";
  if (finetune_cmd)
    finetune(*net, data, bins, plan, o.checkpoint, topt);
  else
    train(*net, data, bins, plan, topt);
  out << "wrote " << (fs::path(cfg.out) / "manifest.json").string() << " and " << (fs::path(cfg.out) / "last.ckpt").string()
      << "\n";
  return kExitOk;
}

inline RgbImage colorize_image(TucanNet& net, const BinTable& bins, const DecodedImage& img) {
  const int S = net.config().plan.input_size;
  const SampleRecord rec = prepare_sample(img, S, bins);
  const AbImage ab224 = network_colorizer(net)(rec);
  const LabImage full = rgb_to_lab(img.rgb);
  LabImage lab(full.height, full.width);
  lab.L = full.L;
  const AbImage ab = resize(ab224, full.height, full.width, false);
  lab.a = ab.a;
  lab.b = ab.b;
  return lab_to_rgb_keep_lightness(lab);
}

inline int cmd_colorize(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint", "colorize needs --checkpoint");
  if (o.inputs.empty()) throw ConfigError("inputs", "colorize needs at least one input image");
  RestoredModel rm = restore_model(o.checkpoint);
  if (rm.net->temp_level()) set_level(*rm.net, Level::final, 0);
  fs::create_directories(cfg.out);
  for (const auto& in : o.inputs) {
    const DecodedImage img = read_image(in);
    const fs::path dst = fs::path(cfg.out) / (fs::path(in).stem().string() + "_color.png");
    write_image(dst, colorize_image(*rm.net, rm.bins, img));
    out << in << " -> " << dst.string() << "\n";
  }
  return kExitOk;
}

inline int cmd_evaluate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  if (o.checkpoint.empty() == o.stub.empty())
    throw ConfigError("--checkpoint", "evaluate needs exactly one of --checkpoint or --stub");
  std::optional<RestoredModel> rm;
  std::optional<BinTable> bins;
  int size = 0;
  Colorizer colorize;
  std::string model_id;
  if (!o.checkpoint.empty()) {
    rm = restore_model(o.checkpoint);
    if (rm->net->temp_level()) set_level(*rm->net, Level::final, 0);
    bins = rm->bins;
    size = rm->net->config().plan.input_size;
    colorize = network_colorizer(*rm->net);
    model_id = "checkpoint:" + o.checkpoint + " epoch " + std::to_string(rm->info.epoch);
  } else {
    if (o.stub != "perfect" && o.stub != "gray") throw ConfigError("--stub", "--stub must be perfect or gray");
    bins = base_bins(cfg);
    size = cfg.network(bins->size()).plan.input_size;
    colorize = o.stub == "perfect" ? perfect_colorizer() : gray_colorizer();
    model_id = "stub:" + o.stub;
  }
  const auto data = load_dataset(dataset_files(cfg), size, *bins);
  std::unique_ptr<LpipsPlugin> plugin;
  if (!cfg.lpips_plugin.empty()) plugin = std::make_unique<CommandLpips>(cfg.lpips_plugin);
  const MetricReport rep = evaluate(data, colorize, plugin.get(), model_id, cfg.data_root);
  fs::create_directories(cfg.out);
  const fs::path path = fs::path(cfg.out) / "report.tsv";
  std::ofstream os(path);
  write_report(os, rep);
  if (!os) throw ArtifactError("cannot write " + path.string());
  out << report_summary(rep) << "\nreport " << path.string() << "\n";
  return kExitOk;
}

inline int cmd_inspect(const Options& o, std::ostream& out) {
  if (!o.checkpoint.empty()) {
    const CheckpointInfo info = read_checkpoint_info(o.checkpoint);
    out << "checkpoint " << o.checkpoint << "\nversion " << info.version << "\nepoch " << info.epoch << "\nlevel "
        << level_name(info.level) << "\nconfig_fingerprint " << info.config_fingerprint << "\nbins_fingerprint "
        << info.bins_fingerprint << "\nplan " << info.plan.dump() << "\n";
    return kExitOk;
  }
  const RunConfig cfg = resolve_config(o);
  const BinTable bins = base_bins(cfg);
  const NetworkConfig ncfg = cfg.network(bins.size());
  out << format_plan_report(freeze_plan_report(ncfg));
  out << "levels";
  for (int d : ncfg.plan.level_dims()) out << " " << d;
  out << "\nQ " << bins.size() << "\n";
  return kExitOk;
}

}  // namespace cli_detail

/// Entry point of the tucan tool; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"tucan: colourisation training, inference and evaluation"};
  app.require_subcommand(1);
  Options o;
  const auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "config file");
    c->add_option("--set", o.overrides, "override a config key (key=value)");
    c->add_option("--seed", o.seed, "seed");
    c->add_option("--out", o.out, "output directory");
    c->add_option("--data", o.data, "dataset root (else data.root or $TUCAN_DATA_ROOT)");
  };
  auto* train = app.add_subcommand("train", "train a model");
  common(train);
  train->add_option("--scheme", o.scheme, "end_to_end or progressive");
  train->add_option("--checkpoint", o.checkpoint, "resume from a checkpoint");
  train->add_flag("--dry-run", o.dry_run, "write the manifest with the resolved plan and stop");
  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint with split learning rates");
  common(ft);
  ft->add_option("--checkpoint", o.checkpoint, "checkpoint to fine-tune");
  ft->add_flag("--dry-run", o.dry_run, "write the manifest with the resolved plan and stop");
  auto* col = app.add_subcommand("colorize", "colourise images");
  common(col);
  col->add_option("--checkpoint", o.checkpoint, "trained checkpoint");
  col->add_option("inputs", o.inputs, "input images");
  auto* ev = app.add_subcommand("evaluate", "score a model on a dataset");
  common(ev);
  ev->add_option("--checkpoint", o.checkpoint, "trained checkpoint");
  ev->add_option("--stub", o.stub, "perfect or gray reference model");
  ev->add_option("--lpips-plugin", o.lpips_plugin, "command scoring two PNG paths");
  auto* ins = app.add_subcommand("inspect", "print a shape trace or checkpoint metadata");
  common(ins);
  ins->add_option("--checkpoint", o.checkpoint, "checkpoint to describe");
  auto* schema = app.add_subcommand("config-template", "print every config key with its meaning");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  try {
    if (*train) return cmd_train(o, false, out);
    if (*ft) return cmd_train(o, true, out);
    if (*col) return cmd_colorize(o, out);
    if (*ev) return cmd_evaluate(o, out);
    if (*ins) return cmd_inspect(o, out);
    if (*schema) {
      out << config_template();
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error [" << e.key() << "]: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ArtifactError& e) {
    err << "artifact error: " << e.what() << "\n";
    return kExitArtifact;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace tucan
