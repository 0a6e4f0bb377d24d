#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "elastic/dataset.hpp"
#include "elastic/scheduler.hpp"

using namespace elastic;

namespace {

ModelConfig l_design(int K) {
  ModelConfig cfg;
  cfg.n_layers = 2 * K;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.max_seq_len = 32;
  return cfg;
}

}  // namespace

TEST_CASE("latency code matches the sinusoid ladder") {
  const int dim = 8;  // 4 (sin, cos) pairs
  const double l = 0.37;
  Tensor<double> code = latency_code<double>(l, dim);
  for (int i = 0; i < 4; ++i) {
    const double freq = 1.0 / std::pow(1e4, i / 4.0);
    CHECK(code.data[2 * i] ==
          doctest::Approx(std::sin(l * 1e4 * freq)).epsilon(1e-12));
    CHECK(code.data[2 * i + 1] ==
          doctest::Approx(std::cos(l * 1e4 * freq)).epsilon(1e-12));
  }
}

TEST_CASE("latency code at zero is all (0, 1) pairs") {
  Tensor<double> code = latency_code<double>(0.0, 16);
  for (int i = 0; i < 8; ++i) {
    CHECK(code.data[2 * i] == 0.0);
    CHECK(code.data[2 * i + 1] == 1.0);
  }
}

TEST_CASE("distinct budgets produce distinct codes") {
  Tensor<double> a = latency_code<double>(0.61, 256);
  Tensor<double> b = latency_code<double>(0.62, 256);
  double diff = 0;
  for (size_t i = 0; i < a.size(); ++i) diff += std::abs(a.data[i] - b.data[i]);
  CHECK(diff > 0.1);
  CHECK_THROWS_AS(latency_code<double>(0.5, 7), std::invalid_argument);
}

TEST_CASE("budget range is enforced") {
  CHECK_THROWS_WITH_AS(check_budget_range(0.4, 0.5),
                       "budget out of range [l_min, 1]", std::invalid_argument);
  CHECK_THROWS_AS(check_budget_range(1.2, 0.5), std::invalid_argument);
  CHECK_NOTHROW(check_budget_range(0.5, 0.5));
  CHECK_NOTHROW(check_budget_range(1.0, 0.5));
}

TEST_CASE("graph and plain latency encoders agree") {
  ModelConfig cfg = l_design(2);
  cfg.latency_code_dim = 32;
  Rng rng(9);
  ParamStore<float> pf = init_params(cfg, rng);
  ParamStore<double> pd = pf.cast<double>();
  Tensor<double> plain = encode_latency(0.8, 0.5, pd, 32);
  VarStore<double> vars = VarStore<double>::leaves(pd);
  ag::Var<double> graph = encode_latency_graph(0.8, 0.5, vars, 32);
  for (size_t i = 0; i < plain.size(); ++i)
    CHECK(plain.data[i] == doctest::Approx(graph.value().data[i]).epsilon(1e-12));
}

TEST_CASE("sample_plan activates exactly k switches under uniform costs") {
  const CostModel cm = CostModel::build(l_design(6), 10);
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(6);
    for (double& v : logits) v = rng.normal() * 2;
    const double l = rng.uniform(0.5, 1.0);
    const ExecutionPlan plan = sample_plan(logits, l, cm, rng);
    CHECK(plan.popcount() == cm.affordable_count(l));
    CHECK(cm.is_feasible(plan, l));
  }
}

TEST_CASE("sampled plans are maximal: nothing affordable remains") {
  const CostModel cm = CostModel::build(l_design(5), 10);
  Rng rng(32);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(5);
    for (double& v : logits) v = rng.normal();
    const double l = rng.uniform(0.5, 1.0);
    ExecutionPlan plan = sample_plan(logits, l, cm, rng);
    const double allowance = cm.allowance(l);
    const double used = cm.plan_flops(plan);
    for (size_t i = 0; i < plan.size(); ++i)
      if (!plan.bits[i]) CHECK(used + cm.switch_cost(i) > allowance);
  }
}

TEST_CASE("sample_plan validates its inputs") {
  const CostModel cm = CostModel::build(l_design(3), 10);
  Rng rng(33);
  CHECK_THROWS_AS(sample_plan({0.0, 0.0}, 0.8, cm, rng), std::invalid_argument);
  CHECK_THROWS_AS(
      sample_plan({0.0, std::numeric_limits<double>::infinity(), 0.0}, 0.8, cm,
                  rng),
      std::invalid_argument);
}

TEST_CASE("plan context: hard bits, feasibility, temperature guard") {
  const CostModel cm = CostModel::build(l_design(6), 10);
  Rng rng(34);
  std::vector<double> logits = {0.5, -1.0, 2.0, 0.0, 0.1, -0.4};
  CHECK_THROWS_WITH_AS(make_plan_context(logits, 0.8, cm, 0.0, rng),
                       "temperature must be positive", std::invalid_argument);
  for (int trial = 0; trial < 50; ++trial) {
    const double l = rng.uniform(0.5, 1.0);
    PlanContext ctx = make_plan_context(logits, l, cm, 1.0, rng);
    CHECK(cm.is_feasible(ctx.plan, l));
    CHECK(int(ctx.draws.size()) == ctx.plan.popcount());
    // Straight-through gates evaluate to exactly the hard bits.
    ag::Var<double> lv = ag::Var<double>::leaf(
        Tensor<double>({1, 6}, std::vector<double>(logits)));
    ag::Var<double> gates = gates_from_context(lv, ctx);
    for (int i = 0; i < 6; ++i)
      CHECK(gates.value().data[i] ==
            doctest::Approx(double(ctx.plan.bits[i])).epsilon(1e-9));
  }
}

TEST_CASE("frozen offset reproduces the live gates at the base point") {
  const CostModel cm = CostModel::build(l_design(4), 10);
  Rng rng(35);
  std::vector<double> logits = {1.0, 0.0, -0.5, 0.3};
  PlanContext ctx = make_plan_context(logits, 0.9, cm, 1.0, rng);
  ag::Var<double> lv =
      ag::Var<double>::leaf(Tensor<double>({1, 4}, std::vector<double>(logits)));
  Tensor<double> offset = st_offset(lv, ctx);
  ag::Var<double> live = gates_from_context(lv, ctx);
  ag::Var<double> frozen = gates_from_context<double>(lv, ctx, offset);
  for (int i = 0; i < 4; ++i)
    CHECK(live.value().data[i] ==
          doctest::Approx(frozen.value().data[i]).epsilon(1e-12));
}

TEST_CASE("straight-through gates carry gradient to the logits") {
  const CostModel cm = CostModel::build(l_design(4), 10);
  Rng rng(36);
  std::vector<double> logits = {0.2, -0.1, 0.4, 0.0};
  PlanContext ctx = make_plan_context(logits, 0.75, cm, 1.0, rng);
  REQUIRE(ctx.plan.popcount() >= 1);
  ag::Var<double> lv =
      ag::Var<double>::leaf(Tensor<double>({1, 4}, std::vector<double>(logits)));
  ag::Var<double> gates = gates_from_context(lv, ctx);
  // Weighted sum of gates as a stand-in loss.
  Tensor<double> w({1, 4}, {1.0, 2.0, -1.0, 0.5});
  ag::backward(ag::sum(ag::mul(gates, ag::Var<double>::constant(w))));
  double norm = 0;
  for (double g : lv.grad().data) norm += std::abs(g);
  CHECK(norm > 1e-6);
}

TEST_CASE("argmax plan is top-k with ties to the lowest switch id") {
  const CostModel cm = CostModel::build(l_design(6), 10);
  // k = 2 at l = 8/12
  const double l = 8.0 / 12.0;
  ExecutionPlan p = argmax_plan({0.0, 0.0, 0.0, 0.0, 0.0, 0.0}, l, cm);
  CHECK(p.bits == std::vector<uint8_t>({1, 1, 0, 0, 0, 0}));
  p = argmax_plan({-1.0, 0.5, 0.2, 0.5, 3.0, -2.0}, l, cm);
  CHECK(p.bits == std::vector<uint8_t>({0, 1, 0, 0, 1, 0}));
}

TEST_CASE("scheduler logits reject non-finite activations") {
  ModelConfig cfg = l_design(2);
  Rng rng(37);
  ParamStore<float> params = init_params(cfg, rng);
  Tensor<float> bad = Tensor<float>::full({1, (size_t)cfg.d_model},
                                          std::numeric_limits<float>::infinity());
  CHECK_THROWS_AS(scheduler_logits(bad, params), std::runtime_error);
}
