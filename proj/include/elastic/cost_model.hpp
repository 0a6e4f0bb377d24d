#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "elastic/model.hpp"

namespace elastic {

// FLOPs accounting for the prefill pass. One formula is the single source of
// truth for both the per-layer totals and the per-switch costs:
//
//   attention projections : 4 matrices, 2 * seq * d_model^2 each
//   attention scores+mix  : 2 * (2 * seq^2 * d_model)
//   MLP                   : 2 (or 3 if gated) matrices, 2 * seq * d * d_mlp
//
// Per head, the projection and score terms divide evenly by n_heads; per MLP
// group, the MLP term divides evenly by n_heads. Embedding lookups, norms,
// softmax and the LM head are excluded: they are negligible at this counting
// granularity and keeping the budget arithmetic exact over layer units makes
// the fixed fraction of the even split exactly 0.5.

inline double layer_attn_proj_flops(const ModelConfig& cfg, size_t seq_len) {
  return 4.0 * 2.0 * seq_len * double(cfg.d_model) * double(cfg.d_model);
}

inline double layer_attn_score_flops(const ModelConfig& cfg, size_t seq_len) {
  return 2.0 * 2.0 * double(seq_len) * double(seq_len) * double(cfg.d_model);
}

inline double layer_mlp_flops(const ModelConfig& cfg, size_t seq_len) {
  const double mats = cfg.mlp_gated ? 3.0 : 2.0;
  return mats * 2.0 * seq_len * double(cfg.d_model) * double(cfg.d_mlp);
}

inline double layer_flops(const ModelConfig& cfg, size_t seq_len) {
  return layer_attn_proj_flops(cfg, seq_len) +
         layer_attn_score_flops(cfg, seq_len) + layer_mlp_flops(cfg, seq_len);
}

inline double base_prefill_flops(const ModelConfig& cfg, size_t seq_len) {
  return cfg.n_layers * layer_flops(cfg, seq_len);
}

class CostModel {
 public:
  static CostModel build(const ModelConfig& cfg, size_t seq_len) {
    cfg.validate();
    CostModel cm;
    cm.seq_len_ = seq_len;
    cm.base_ = elastic::base_prefill_flops(cfg, seq_len);
    cm.fixed_ = cfg.split_layer() * layer_flops(cfg, seq_len);
    const SwitchTopology topo = SwitchTopology::build(cfg);
    cm.costs_.resize(topo.K);
    for (const auto& d : topo.descriptors) {
      switch (d.kind) {
        case SwitchKind::Block:
          cm.costs_[d.switch_id] = layer_flops(cfg, seq_len);
          break;
        case SwitchKind::AttnHead:
          cm.costs_[d.switch_id] = (layer_attn_proj_flops(cfg, seq_len) +
                                    layer_attn_score_flops(cfg, seq_len)) /
                                   cfg.n_heads;
          break;
        case SwitchKind::MlpGroup:
          cm.costs_[d.switch_id] = layer_mlp_flops(cfg, seq_len) / cfg.n_heads;
          break;
      }
    }
    return cm;
  }

  double base_prefill_flops() const { return base_; }
  double fixed_flops() const { return fixed_; }
  double switch_cost(size_t id) const { return costs_.at(id); }
  size_t num_switches() const { return costs_.size(); }
  size_t seq_len() const { return seq_len_; }
  double min_budget() const { return fixed_ / base_; }
  double allowance(double l) const { return l * base_; }

  double plan_flops(const ExecutionPlan& plan) const {
    if (plan.size() != costs_.size())
      throw std::invalid_argument("plan_flops: plan length mismatch");
    double total = fixed_;
    for (size_t i = 0; i < costs_.size(); ++i)
      if (plan.bits[i]) total += costs_[i];
    return total;
  }

  double utilization(const ExecutionPlan& plan, double l) const {
    return plan_flops(plan) / allowance(l);
  }

  bool is_feasible(const ExecutionPlan& plan, double l) const {
    return plan_flops(plan) <= allowance(l);
  }

  bool uniform_costs() const {
    for (double c : costs_)
      if (std::abs(c - costs_[0]) > 1e-9 * costs_[0]) return false;
    return true;
  }

  // Maximum number of uniform-cost switches activatable within budget l.
  int affordable_count(double l) const {
    if (!uniform_costs())
      throw std::logic_error("affordable_count: costs are not uniform");
    const double c = costs_.empty() ? 1.0 : costs_[0];
    int k = 0;
    while (k < static_cast<int>(costs_.size()) &&
           fixed_ + (k + 1) * c <= allowance(l))
      ++k;
    return k;
  }

 private:
  double base_ = 0.0, fixed_ = 0.0;
  std::vector<double> costs_;
  size_t seq_len_ = 0;
};

// A 7B-class decoder configuration used to calibrate the FLOPs formulas
// against well-known published numbers. Never instantiated as a live model.
inline ModelConfig reference_7b_config() {
  ModelConfig cfg;
  cfg.n_layers = 32;
  cfg.d_model = 4096;
  cfg.n_heads = 32;
  cfg.d_mlp = 11008;
  cfg.vocab_size = 32000;
  cfg.mlp_gated = true;
  cfg.max_seq_len = 4096;
  cfg.switch_design = SwitchDesign::LayerLevel;
  return cfg;
}

}  // namespace elastic
