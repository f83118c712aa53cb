#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tucan/layers.hpp"

namespace tucan {

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct ParamGroup {
  std::string name;
  double lr = 0.0;
  std::vector<Parameter*> params;
};

/// Adam over parameter groups; moments live in each Parameter so they
/// survive head swaps and checkpoints.
class Adam {
 public:
  explicit Adam(std::vector<ParamGroup> groups, AdamSettings s = {}) : groups_(std::move(groups)), s_(s) {}

  const std::vector<ParamGroup>& groups() const { return groups_; }
  const AdamSettings& settings() const { return s_; }

  const ParamGroup* group_of(const Parameter* p) const {
    for (const auto& g : groups_)
      for (const auto* q : g.params)
        if (q == p) return &g;
    return nullptr;
  }

  void step() {
    for (auto& g : groups_)
      for (auto* p : g.params) update(*p, g.lr);
  }

  void update(Parameter& p, double lr) const {
    ++p.steps;
    const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(p.steps));
    const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(p.steps));
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad[i];
      p.m[i] = s_.beta1 * p.m[i] + (1.0 - s_.beta1) * g;
      p.v[i] = s_.beta2 * p.v[i] + (1.0 - s_.beta2) * g * g;
      p.value[i] -= lr * (p.m[i] / c1) / (std::sqrt(p.v[i] / c2) + s_.eps);
    }
  }

 private:
  std::vector<ParamGroup> groups_;
  AdamSettings s_;
};

/// Single group holding every parameter.
inline std::vector<ParamGroup> single_group(std::vector<Parameter*> params, double lr) {
  return {ParamGroup{"all", lr, std::move(params)}};
}

/// Conv blocks (DBD/DBU plus pre/post), capsule blocks (PCD/PCU) and heads.
inline std::vector<ParamGroup> split_groups(const std::vector<Parameter*>& params, double conv_lr, double capsule_lr,
                                            double head_lr) {
  ParamGroup conv{"conv", conv_lr, {}}, caps{"capsule", capsule_lr, {}}, head{"head", head_lr, {}};
  for (auto* p : params) {
    switch (p->stage) {
      case Stage::pcd:
      case Stage::pcu: caps.params.push_back(p); break;
      case Stage::head:
      case Stage::temp_head: head.params.push_back(p); break;
      default: conv.params.push_back(p); break;
    }
  }
  return {conv, caps, head};
}

}  // namespace tucan
