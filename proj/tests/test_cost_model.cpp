#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "elastic/cost_model.hpp"
#include "elastic/scheduler.hpp"

using namespace elastic;

TEST_CASE("7B-class calibration lands near the published scale") {
  const ModelConfig cfg = reference_7b_config();
  const CostModel cm = CostModel::build(cfg, 620);
  CHECK(cm.base_prefill_flops() > 7.7e12);
  CHECK(cm.base_prefill_flops() < 9.5e12);
  // 32 layers, even split: fixed fraction is exactly one half.
  CHECK(cm.min_budget() == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("budget 0.60 plan matches the published FLOPs ratio") {
  const ModelConfig cfg = reference_7b_config();
  const CostModel cm = CostModel::build(cfg, 620);
  const ExecutionPlan plan =
      argmax_plan(std::vector<double>(cm.num_switches(), 0.0), 0.60, cm);
  const double ratio = cm.plan_flops(plan) / cm.base_prefill_flops();
  CHECK(ratio >= 0.59);
  CHECK(ratio <= 0.61);
}

TEST_CASE("switch costs add back up to the layer totals") {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_mlp = 64;
  cfg.switch_design = SwitchDesign::HeadLevel;
  cfg.max_seq_len = 64;
  const size_t seq = 17;
  const CostModel cm = CostModel::build(cfg, seq);
  // All switches of one layer sum to that layer's FLOPs.
  const SwitchTopology topo = SwitchTopology::build(cfg);
  double layer_sum = 0;
  for (const auto& d : topo.descriptors)
    if (d.layer_index == 2) layer_sum += cm.switch_cost(d.switch_id);
  CHECK(layer_sum == doctest::Approx(layer_flops(cfg, seq)).epsilon(1e-12));
  // Full plan reaches the base FLOPs exactly.
  CHECK(cm.plan_flops(ExecutionPlan::ones(topo.K)) ==
        doctest::Approx(cm.base_prefill_flops()).epsilon(1e-12));
  // Empty plan is the fixed part.
  CHECK(cm.plan_flops(ExecutionPlan::zeros(topo.K)) ==
        doctest::Approx(cm.fixed_flops()).epsilon(1e-12));
}

TEST_CASE("gated MLP accounting uses three matrices") {
  ModelConfig cfg;
  cfg.d_model = 32;
  cfg.d_mlp = 64;
  cfg.n_heads = 4;
  CHECK(layer_mlp_flops(cfg, 10) == doctest::Approx(2 * 2.0 * 10 * 32 * 64));
  cfg.mlp_gated = true;
  CHECK(layer_mlp_flops(cfg, 10) == doctest::Approx(3 * 2.0 * 10 * 32 * 64));
}

TEST_CASE("affordable count on the 32-layer even split") {
  const ModelConfig cfg = reference_7b_config();
  const CostModel cm = CostModel::build(cfg, 620);
  CHECK(cm.uniform_costs());
  // l = 0.75 affords 24 layer units; 16 are fixed, so k = 8.
  CHECK(cm.affordable_count(0.75) == 8);
  CHECK(cm.affordable_count(1.0) == 16);
  CHECK(cm.affordable_count(0.5) == 0);
  // exact boundary: 17/32 affords exactly one switch
  CHECK(cm.affordable_count(17.0 / 32.0) == 1);
}

TEST_CASE("feasibility and utilization are consistent") {
  const ModelConfig cfg = reference_7b_config();
  const CostModel cm = CostModel::build(cfg, 33);
  ExecutionPlan plan = ExecutionPlan::zeros(16);
  for (int i = 0; i < 5; ++i) plan.bits[i] = 1;
  const double l = 21.0 / 32.0;
  CHECK(cm.is_feasible(plan, l));
  CHECK(cm.utilization(plan, l) == doctest::Approx(1.0).epsilon(1e-12));
  plan.bits[5] = 1;
  CHECK_FALSE(cm.is_feasible(plan, l));
}

TEST_CASE("plan length mismatch is an error") {
  const CostModel cm = CostModel::build(reference_7b_config(), 10);
  CHECK_THROWS_AS(cm.plan_flops(ExecutionPlan::ones(3)),
                  std::invalid_argument);
}

TEST_CASE("head-level costs are not uniform") {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.d_model = 32;
  cfg.n_heads = 4;
  cfg.d_mlp = 64;
  cfg.switch_design = SwitchDesign::HeadLevel;
  cfg.max_seq_len = 64;
  const CostModel cm = CostModel::build(cfg, 16);
  CHECK_FALSE(cm.uniform_costs());
  CHECK_THROWS_AS(cm.affordable_count(0.8), std::logic_error);
}
