#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "json.hpp"
#include "tucan/colorspace.hpp"
#include "tucan/error.hpp"
#include "tucan/net.hpp"

namespace tucan {

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string config_fingerprint(const NetworkConfig& cfg) { return hex64(fnv1a(cfg.serialize())); }
inline std::string bins_fingerprint(const BinTable& bins) { return hex64(fnv1a(bin_table_text(bins))); }

inline nlohmann::json to_json(const ConvSpec& c) { return {c.kernel, c.stride, c.pad}; }
inline ConvSpec conv_spec_from_json(const nlohmann::json& j) { return {j.at(0), j.at(1), j.at(2)}; }

inline nlohmann::json to_json(const NetworkConfig& c) {
  nlohmann::json dbd = nlohmann::json::array();
  for (const auto& blk : c.dbd_convs) dbd.push_back({to_json(blk[0]), to_json(blk[1])});
  const auto& p = c.plan;
  return {{"input_size", p.input_size}, {"pre_out", p.pre_out}, {"dbd_sizes", p.dbd_sizes},
          {"pcd_size", p.pcd_size}, {"dbu_sizes", p.dbu_sizes}, {"post_out", p.post_out},
          {"head_out", p.head_out}, {"Q", p.Q}, {"pre_channels", c.pre_channels},
          {"dbd_channels", c.dbd_channels}, {"pcu_channels", c.pcu_channels}, {"dbu_channels", c.dbu_channels},
          {"capsules",
           {{"dim", c.capsules.dim}, {"out_dim", c.capsules.out_dim}, {"out_caps", c.capsules.out_caps},
            {"groups", c.capsules.groups}, {"iterations", c.capsules.iterations}, {"kernel", c.capsules.kernel}}},
          {"pre_conv", to_json(c.pre_conv)}, {"dbd_convs", dbd}, {"bn_eps", c.bn_eps}, {"toy", c.toy},
          {"seed", c.seed}};
}

inline NetworkConfig network_config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  auto& p = c.plan;
  p.input_size = j.at("input_size");
  p.pre_out = j.at("pre_out");
  p.dbd_sizes = j.at("dbd_sizes");
  p.pcd_size = j.at("pcd_size");
  p.dbu_sizes = j.at("dbu_sizes");
  p.post_out = j.at("post_out");
  p.head_out = j.at("head_out");
  p.Q = j.at("Q");
  c.pre_channels = j.at("pre_channels");
  c.dbd_channels = j.at("dbd_channels");
  c.pcu_channels = j.at("pcu_channels");
  c.dbu_channels = j.at("dbu_channels");
  const auto& k = j.at("capsules");
  c.capsules = {k.at("dim"), k.at("out_dim"), k.at("out_caps"), k.at("groups"), k.at("iterations"), k.at("kernel")};
  c.pre_conv = conv_spec_from_json(j.at("pre_conv"));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t s = 0; s < 2; ++s) c.dbd_convs[i][s] = conv_spec_from_json(j.at("dbd_convs").at(i).at(s));
  c.bn_eps = j.at("bn_eps");
  c.toy = j.at("toy");
  c.seed = j.at("seed");
  return c;
}

inline std::optional<Level> level_from_name(const std::string& s) {
  for (int i = 0; i <= static_cast<int>(Level::final); ++i)
    if (s == level_name(static_cast<Level>(i))) return static_cast<Level>(i);
  return std::nullopt;
}

inline constexpr char kCheckpointMagic[8] = {'T', 'U', 'C', 'A', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Metadata block of a checkpoint.
struct CheckpointInfo {
  std::uint32_t version = kCheckpointVersion;
  int epoch = 0;             // next epoch to run
  Level level = Level::final;  // level active when saved
  std::string config_fingerprint;
  std::string bins_fingerprint;
  nlohmann::json config;
  nlohmann::json plan;
  std::string bins_text;
  nlohmann::json extra;
};

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw ArtifactError("checkpoint truncated");
  return v;
}
inline void put_doubles(std::ostream& os, const std::vector<double>& v) {
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}
inline void get_doubles(std::istream& is, std::vector<double>& v) {
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double))))
    throw ArtifactError("checkpoint truncated");
}

inline CheckpointInfo read_header(std::istream& is, nlohmann::json& meta) {
  char magic[8];
  if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic)) throw ArtifactError("not a checkpoint file");
  CheckpointInfo info;
  info.version = get<std::uint32_t>(is);
  if (info.version != kCheckpointVersion)
    throw ArtifactError("unsupported checkpoint version " + std::to_string(info.version));
  const auto len = get<std::uint64_t>(is);
  if (len > (1ULL << 31)) throw ArtifactError("checkpoint metadata length is implausible");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ArtifactError("checkpoint truncated");
  try {
    meta = nlohmann::json::parse(text);
    info.epoch = meta.at("epoch");
    const auto lv = level_from_name(meta.at("level").get<std::string>());
    if (!lv) throw ArtifactError("checkpoint names unknown level");
    info.level = *lv;
    info.config_fingerprint = meta.at("config_fingerprint");
    info.bins_fingerprint = meta.at("bins_fingerprint");
    info.config = meta.at("config");
    info.plan = meta.value("plan", nlohmann::json::object());
    info.bins_text = meta.at("bins");
    info.extra = meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("checkpoint metadata invalid: ") + e.what());
  }
  return info;
}

}  // namespace detail

/// Weights, Adam moments and BN statistics plus metadata. A temporary head,
/// when attached, is saved with the backbone.
inline void save_checkpoint(const std::filesystem::path& path, TucanNet& net, const BinTable& bins, int epoch,
                            const nlohmann::json& plan = nlohmann::json::object(),
                            const nlohmann::json& extra = nlohmann::json::object()) {
  const auto params = net.parameters();
  const auto bufs = net.buffers();
  nlohmann::json meta;
  meta["epoch"] = epoch;
  meta["level"] = level_name(net.temp_level().value_or(Level::final));
  meta["config_fingerprint"] = config_fingerprint(net.config());
  meta["bins_fingerprint"] = bins_fingerprint(bins);
  meta["config"] = to_json(net.config());
  meta["plan"] = plan;
  meta["bins"] = bin_table_text(bins);
  meta["extra"] = extra;
  auto& pl = meta["parameters"] = nlohmann::json::array();
  for (const auto* p : params) pl.push_back({p->name, p->size()});
  auto& bl = meta["buffers"] = nlohmann::json::array();
  for (const auto& b : bufs) bl.push_back({b.name, b.data->size()});
  const std::string text = meta.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ArtifactError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, 8);
    detail::put(os, kCheckpointVersion);
    detail::put(os, static_cast<std::uint64_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* p : params) {
      detail::put_doubles(os, p->value);
      detail::put_doubles(os, p->m);
      detail::put_doubles(os, p->v);
      detail::put(os, static_cast<std::int64_t>(p->steps));
    }
    for (const auto& b : bufs) detail::put_doubles(os, *b.data);
    if (!os) throw ArtifactError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("cannot open checkpoint " + path.string());
  nlohmann::json meta;
  return detail::read_header(is, meta);
}

/// Restores state into `net`. Refuses when the stored fingerprints disagree
/// with the network config or the bin table in use.
inline CheckpointInfo load_checkpoint(const std::filesystem::path& path, TucanNet& net, const BinTable& bins) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ArtifactError("cannot open checkpoint " + path.string());
  nlohmann::json meta;
  CheckpointInfo info = detail::read_header(is, meta);
  const auto cfp = config_fingerprint(net.config());
  if (info.config_fingerprint != cfp)
    throw ArtifactError("checkpoint config fingerprint " + info.config_fingerprint + " does not match network config " +
                        cfp + "; the architecture or its settings changed since the checkpoint was written");
  const auto bfp = bins_fingerprint(bins);
  if (info.bins_fingerprint != bfp)
    throw ArtifactError("checkpoint bin-table fingerprint " + info.bins_fingerprint + " does not match bin table " +
                        bfp + "; the quantisation or its weights changed");

  if (net.temp_level()) net.detach_temp_head();
  if (info.level != Level::final) net.attach_temp_head(info.level);
  const auto params = net.parameters();
  const auto bufs = net.buffers();
  const auto& pl = meta.at("parameters");
  const auto& bl = meta.at("buffers");
  if (pl.size() != params.size() || bl.size() != bufs.size())
    throw ArtifactError("checkpoint parameter layout differs from the network");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (pl[i].at(0).get<std::string>() != params[i]->name || pl[i].at(1).get<std::size_t>() != params[i]->size())
      throw ArtifactError("checkpoint parameter " + pl[i].at(0).get<std::string>() + " does not match " +
                          params[i]->name);
  for (std::size_t i = 0; i < bufs.size(); ++i)
    if (bl[i].at(0).get<std::string>() != bufs[i].name || bl[i].at(1).get<std::size_t>() != bufs[i].data->size())
      throw ArtifactError("checkpoint buffer " + bl[i].at(0).get<std::string>() + " does not match " + bufs[i].name);
  for (auto* p : params) {
    detail::get_doubles(is, p->value);
    detail::get_doubles(is, p->m);
    detail::get_doubles(is, p->v);
    p->steps = detail::get<std::int64_t>(is);
    p->zero_grad();
  }
  for (auto& b : bufs) detail::get_doubles(is, *b.data);
  return info;
}

struct RestoredModel {
  std::unique_ptr<TucanNet> net;
  BinTable bins;
  CheckpointInfo info;
};

/// Rebuilds the network and bin table stored in a checkpoint.
inline RestoredModel restore_model(const std::filesystem::path& path) {
  const CheckpointInfo info = read_checkpoint_info(path);
  NetworkConfig cfg;
  try {
    cfg = network_config_from_json(info.config);
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("checkpoint config invalid: ") + e.what());
  }
  std::istringstream bs(info.bins_text);
  BinTable bins = read_bin_table(bs);
  std::unique_ptr<TucanNet> net;
  try {
    net = std::make_unique<TucanNet>(cfg);
  } catch (const ShapeError& e) {
    throw ArtifactError(std::string("checkpoint config does not build: ") + e.what());
  }
  load_checkpoint(path, *net, bins);
  return {std::move(net), std::move(bins), info};
}

}  // namespace tucan
