#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tucan/checkpoint.hpp"
#include "tucan/datapipe.hpp"
#include "tucan/log.hpp"
#include "tucan/losses.hpp"
#include "tucan/net.hpp"
#include "tucan/optim.hpp"

namespace tucan {

enum class Scheme { end_to_end, progressive, finetune };

inline const char* scheme_name(Scheme s) {
  switch (s) {
    case Scheme::end_to_end: return "end_to_end";
    case Scheme::progressive: return "progressive";
    case Scheme::finetune: return "finetune";
  }
  return "?";
}

inline std::optional<Scheme> scheme_from_name(const std::string& s) {
  for (Scheme x : {Scheme::end_to_end, Scheme::progressive, Scheme::finetune})
    if (s == scheme_name(x)) return x;
  return std::nullopt;
}

struct SplitLr {
  double conv = 2e-4;
  double capsule = 2e-3;
  double head = 2e-4;
};

struct TrainPlan {
  Scheme scheme = Scheme::end_to_end;
  int epochs = 40;  // end_to_end / finetune
  int batch_size = 32;
  double base_lr = 2e-3;
  int rho = 10;
  int xi = 20;
  std::vector<Level> levels{Level::pcu, Level::up1, Level::up2, Level::up3, Level::up4};
  std::optional<SplitLr> split_lr;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  AdamSettings adam;

  static TrainPlan canonical(Scheme s) {
    TrainPlan p;
    p.scheme = s;
    if (s == Scheme::finetune) {
      p.epochs = 35;
      p.split_lr = SplitLr{};
    }
    return p;
  }

  int total_epochs() const {
    return scheme == Scheme::progressive ? static_cast<int>(levels.size()) * rho + xi : epochs;
  }

  nlohmann::json to_json() const {
    nlohmann::json j{{"scheme", scheme_name(scheme)}, {"total_epochs", total_epochs()}, {"batch_size", batch_size},
                     {"base_lr", base_lr}, {"seed", seed}, {"checkpoint_every", checkpoint_every},
                     {"adam", {{"beta1", adam.beta1}, {"beta2", adam.beta2}, {"eps", adam.eps}}}};
    if (scheme == Scheme::progressive) {
      j["rho"] = rho;
      j["xi"] = xi;
      auto& lv = j["levels"] = nlohmann::json::array();
      for (Level l : levels) lv.push_back(level_name(l));
    } else {
      j["epochs"] = epochs;
    }
    if (split_lr) j["split_lr"] = {{"conv", split_lr->conv}, {"capsule", split_lr->capsule}, {"head", split_lr->head}};
    return j;
  }
};

struct Phase {
  Level level = Level::final;
  bool is_final = true;
  int index = 0;  // position in the level list; levels.size() for the final stage
};

/// Progressive: [i*rho, (i+1)*rho) trains levels[i], then xi epochs of the
/// full network. Other schemes are always at the final level.
inline Phase schedule(int epoch, const TrainPlan& plan) {
  const int total = plan.total_epochs();
  if (epoch < 0 || epoch >= total)
    throw InputError("schedule: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(total) + ")");
  if (plan.scheme != Scheme::progressive) return {};
  const int i = epoch / plan.rho;
  if (i < static_cast<int>(plan.levels.size())) return {plan.levels[static_cast<std::size_t>(i)], false, i};
  return {Level::final, true, static_cast<int>(plan.levels.size())};
}

struct EpochRecord {
  int epoch = 0;
  Level level = Level::final;
  double loss = 0.0, l_q = 0.0, l_c = 0.0;
  double seconds = 0.0;
  std::size_t steps = 0;
};

struct GrowthEvent {
  int epoch = 0;
  std::string from, to;
  std::uint64_t checksum_before = 0, checksum_after = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // manifest and checkpoints; empty: nothing written
  int start_epoch = 0;
  int stop_epoch = -1;  // exclusive; -1 runs to the end of the plan
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::vector<GrowthEvent> growth;
  nlohmann::json manifest;
};

/// Training aborted on a non-finite loss; a diagnostic checkpoint may exist.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Puts the network at `level`, swapping temporary heads as needed.
inline std::optional<GrowthEvent> set_level(TucanNet& net, Level level, int epoch) {
  const Level cur = net.temp_level().value_or(Level::final);
  if (cur == level) return std::nullopt;
  GrowthEvent ev{epoch, level_name(cur), level_name(level), net.backbone_checksum(), 0};
  if (net.temp_level()) net.detach_temp_head();
  if (level != Level::final) net.attach_temp_head(level);
  ev.checksum_after = net.backbone_checksum();
  return ev;
}

/// L input and level targets for a batch of records.
struct Batch {
  Tensor L;
  LossTargets targets;
};

inline Batch make_batch(std::vector<SampleRecord>& data, const std::vector<std::size_t>& idx, const TucanNet& net,
                        const BinTable& bins, Level level) {
  const auto& plan = net.config().plan;
  const int S = plan.input_size;
  const int zres = level == Level::final ? plan.post_out : net.level_size(level);
  const int abres = level == Level::final ? plan.head_out : net.level_size(level);
  const int B = static_cast<int>(idx.size());
  Batch b{Tensor(B, 1, S, S), {{}, Tensor(B, 2, abres, abres)}};
  const std::size_t plane = static_cast<std::size_t>(abres) * abres;
  for (int n = 0; n < B; ++n) {
    auto& r = data[idx[static_cast<std::size_t>(n)]];
    if (r.size != S) throw ShapeError("record " + r.path + " has size " + std::to_string(r.size) + ", network expects " + std::to_string(S));
    if (!std::all_of(r.L.begin(), r.L.end(), [](double v) { return std::isfinite(v); }))
      throw InputError("record " + r.path + " has non-finite lightness");
    std::copy(r.L.begin(), r.L.end(), b.L.sample(n));
    b.targets.z.push_back(r.level(zres, bins).z);
    const AbImage& ab = r.level(abres, bins).ab;
    std::copy(ab.a.begin(), ab.a.end(), b.targets.ab.sample(n));
    std::copy(ab.b.begin(), ab.b.end(), b.targets.ab.sample(n) + plane);
  }
  return b;
}

inline std::vector<ParamGroup> optimizer_groups(TucanNet& net, const TrainPlan& plan, Level level) {
  auto params = net.active_parameters(level);
  if (plan.split_lr) return split_groups(params, plan.split_lr->conv, plan.split_lr->capsule, plan.split_lr->head);
  return single_group(std::move(params), plan.base_lr);
}

inline nlohmann::json epoch_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"level", level_name(r.level)}, {"loss", r.loss}, {"l_q", r.l_q},
          {"l_c", r.l_c}, {"steps", r.steps}, {"seconds", r.seconds}};
}

/// Runs epochs [start, stop) of `plan`. Adam moments persist in the
/// parameters across epochs and head swaps; new temporary heads start fresh.
inline TrainResult train(TucanNet& net, std::vector<SampleRecord>& data, const BinTable& bins, const TrainPlan& plan,
                         const TrainOptions& opt = {}) {
  if (data.empty()) throw InputError("train: empty dataset");
  if (plan.batch_size < 1) throw InputError("train: batch_size must be >= 1");
  if (plan.scheme == Scheme::progressive && (plan.rho < 1 || plan.xi < 0 || plan.levels.empty()))
    throw InputError("train: progressive plan needs rho >= 1, xi >= 0 and at least one level");
  if (plan.scheme == Scheme::finetune && !plan.split_lr) throw InputError("train: finetune plan needs split learning rates");
  if (bins.size() != net.config().plan.Q) throw ShapeError("train: bin table Q differs from network Q");
  const int total = plan.total_epochs();
  const int stop = opt.stop_epoch < 0 ? total : std::min(opt.stop_epoch, total);

  TrainResult res;
  res.manifest = {{"plan", plan.to_json()},
                  {"config", to_json(net.config())},
                  {"config_fingerprint", config_fingerprint(net.config())},
                  {"bins_fingerprint", bins_fingerprint(bins)},
                  {"dataset_size", data.size()},
                  {"start_epoch", opt.start_epoch},
                  {"epochs", nlohmann::json::array()},
                  {"growth", nlohmann::json::array()}};
  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);
  const auto write_manifest = [&] {
    if (opt.out_dir.empty()) return;
    std::ofstream(opt.out_dir / "manifest.json") << res.manifest.dump(2) << "\n";
  };

  for (int e = opt.start_epoch; e < stop; ++e) {
    const Phase ph = schedule(e, plan);
    if (auto ev = set_level(net, ph.level, e)) {
      res.growth.push_back(*ev);
      res.manifest["growth"].push_back({{"epoch", ev->epoch}, {"from", ev->from}, {"to", ev->to},
                                        {"checksum_before", hex64(ev->checksum_before)},
                                        {"checksum_after", hex64(ev->checksum_after)}});
    }
    Adam adam(optimizer_groups(net, plan, ph.level), plan.adam);
    EpochRecord rec{e, ph.level};
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t seen = 0;
    for (const auto& idx : batches(data.size(), static_cast<std::size_t>(plan.batch_size), plan.seed,
                                   static_cast<std::uint64_t>(e))) {
      Batch b = make_batch(data, idx, net, bins, ph.level);
      net.zero_grad();
      const ForwardOutput out = net.forward(b.L, Mode::train);
      LossGrads g;
      const LossBreakdown lb = combined_loss(out, b.targets, bins, &g);
      if (!std::isfinite(lb.total)) {
        if (!opt.out_dir.empty())
          save_checkpoint(opt.out_dir / "diagnostic.ckpt", net, bins, e, plan.to_json(),
                          {{"reason", "non-finite loss"}, {"l_q", lb.l_q}, {"l_c", lb.l_c}, {"step", rec.steps}});
        throw NumericError("non-finite loss at epoch " + std::to_string(e) + " step " + std::to_string(rec.steps));
      }
      net.backward(g.z_hat, g.ab_hat);
      adam.step();
      const double w = static_cast<double>(idx.size());
      rec.loss += lb.total * w;
      rec.l_q += lb.l_q * w;
      rec.l_c += lb.l_c * w;
      seen += idx.size();
      ++rec.steps;
    }
    rec.loss /= static_cast<double>(seen);
    rec.l_q /= static_cast<double>(seen);
    rec.l_c /= static_cast<double>(seen);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.epochs.push_back(rec);
    res.manifest["epochs"].push_back(epoch_json(rec));
    log_info("epoch " + std::to_string(e) + " [" + level_name(rec.level) + "] loss " + std::to_string(rec.loss) +
             " (L_q " + std::to_string(rec.l_q) + ", L_c " + std::to_string(rec.l_c) + ")");
    if (opt.on_epoch) opt.on_epoch(rec);
    if (!opt.out_dir.empty()) {
      if (plan.checkpoint_every > 0 && (e + 1) % plan.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", e + 1);
        save_checkpoint(opt.out_dir / name, net, bins, e + 1, plan.to_json());
      }
      if (e + 1 == stop) save_checkpoint(opt.out_dir / "last.ckpt", net, bins, e + 1, plan.to_json());
      write_manifest();
    }
  }
  write_manifest();
  return res;
}

inline TrainResult train_end_to_end(TucanNet& net, std::vector<SampleRecord>& data, const BinTable& bins,
                                    const TrainPlan& plan, const TrainOptions& opt = {}) {
  if (plan.scheme != Scheme::end_to_end) throw InputError("train_end_to_end: plan scheme is " + std::string(scheme_name(plan.scheme)));
  return train(net, data, bins, plan, opt);
}

inline TrainResult train_progressive(TucanNet& net, std::vector<SampleRecord>& data, const BinTable& bins,
                                     const TrainPlan& plan, const TrainOptions& opt = {}) {
  if (plan.scheme != Scheme::progressive) throw InputError("train_progressive: plan scheme is " + std::string(scheme_name(plan.scheme)));
  return train(net, data, bins, plan, opt);
}

/// Loads `checkpoint` into `net`, then trains with split learning rates.
inline TrainResult finetune(TucanNet& net, std::vector<SampleRecord>& data, const BinTable& bins, const TrainPlan& plan,
                            const std::filesystem::path& checkpoint, const TrainOptions& opt = {}) {
  if (plan.scheme != Scheme::finetune) throw InputError("finetune: plan scheme is " + std::string(scheme_name(plan.scheme)));
  if (checkpoint.empty() || !std::filesystem::exists(checkpoint))
    throw ArtifactError("finetune: checkpoint not found: " + checkpoint.string());
  load_checkpoint(checkpoint, net, bins);
  set_level(net, Level::final, 0);
  return train(net, data, bins, plan, opt);
}

}  // namespace tucan
