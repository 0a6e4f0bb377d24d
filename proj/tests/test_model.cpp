#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "elastic/dataset.hpp"
#include "elastic/model.hpp"
#include "elastic/oracle.hpp"
#include "elastic/runtime.hpp"

using namespace elastic;

namespace {

struct Fixture {
  TaskSpec spec;
  ModelConfig cfg;
  ParamStore<float> params;
  Sample sample;
  PromptRows prompt;

  explicit Fixture(SwitchDesign design, uint64_t seed = 21) {
    spec.grid = 3;
    spec.colors = 3;
    spec.mode = TaskMode::Lookup;
    spec.d_feat = 6;
    cfg.n_layers = 4;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.d_mlp = 64;
    cfg.vocab_size = VocabLayout::build(spec).vocab_size;
    cfg.n_visual_tokens = spec.n_cells();
    cfg.d_feat = spec.d_feat;
    cfg.max_seq_len = spec.n_cells() + 8;
    cfg.switch_design = design;
    cfg.latency_code_dim = 64;
    Rng rng(seed);
    params = init_params(cfg, rng);
    sample = make_synthetic_dataset(spec, 1, seed, Split::Eval)[0];
    prompt = build_prompt_rows(cfg, params, sample.features, sample.query, 0.8,
                               0.5);
  }

  int K() const { return SwitchTopology::build(cfg).K; }
};

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  REQUIRE(a.shape == b.shape);
  double mx = 0;
  for (size_t i = 0; i < a.size(); ++i)
    mx = std::max(mx, std::abs(double(a.data[i]) - double(b.data[i])));
  return mx;
}

}  // namespace

TEST_CASE("full plan matches the plain reference transformer") {
  for (SwitchDesign design :
       {SwitchDesign::LayerLevel, SwitchDesign::HeadLevel}) {
    Fixture f(design);
    InferenceSession session(f.cfg, f.params);
    Tensor<float> got =
        session
            .prefill(f.prompt.rows, ExecutionPlan::ones(f.K()),
                     f.prompt.layout.latency_pos)
            .all_logits;
    Tensor<float> want = reference_forward(f.cfg, f.params, f.prompt.rows);
    CHECK(max_abs_diff(got, want) < 1e-4);
  }
}

TEST_CASE("disabled blocks bypass exactly: zero plan equals the fixed half") {
  Fixture f(SwitchDesign::LayerLevel);
  InferenceSession session(f.cfg, f.params);
  Tensor<float> got =
      session
          .prefill(f.prompt.rows, ExecutionPlan::zeros(f.K()),
                   f.prompt.layout.latency_pos)
          .all_logits;
  // Reference: a model that only has the fixed layers.
  ModelConfig trunc = f.cfg;
  trunc.n_layers = f.cfg.split_layer();
  trunc.switchable_start_layer = 1;  // keep validate() happy; layers unchanged
  Tensor<float> want = reference_forward(trunc, f.params, f.prompt.rows);
  CHECK(max_abs_diff(got, want) < 1e-4);
}

TEST_CASE("head-level zero plan is also the identity on the switch half") {
  Fixture f(SwitchDesign::HeadLevel);
  InferenceSession session(f.cfg, f.params);
  Tensor<float> got =
      session
          .prefill(f.prompt.rows, ExecutionPlan::zeros(f.K()),
                   f.prompt.layout.latency_pos)
          .all_logits;
  ModelConfig trunc = f.cfg;
  trunc.n_layers = f.cfg.split_layer();
  trunc.switchable_start_layer = 1;
  Tensor<float> want = reference_forward(trunc, f.params, f.prompt.rows);
  CHECK(max_abs_diff(got, want) < 1e-4);
}

TEST_CASE("split prefill equals straight prefill bit for bit") {
  Fixture f(SwitchDesign::LayerLevel);
  ExecutionPlan plan = ExecutionPlan::zeros(f.K());
  plan.bits[1] = 1;
  InferenceSession a(f.cfg, f.params);
  Tensor<float> direct =
      a.prefill(f.prompt.rows, plan, f.prompt.layout.latency_pos).all_logits;
  InferenceSession b(f.cfg, f.params);
  b.prefill_first_half(f.prompt.rows, f.prompt.layout.latency_pos);
  Tensor<float> resumed = b.resume_prefill(plan).all_logits;
  CHECK(max_abs_diff(direct, resumed) == 0.0);
}

TEST_CASE("decode step agrees with prefill over the extended sequence") {
  for (SwitchDesign design :
       {SwitchDesign::LayerLevel, SwitchDesign::HeadLevel}) {
    Fixture f(design, 33);
    ExecutionPlan plan = ExecutionPlan::zeros(f.K());
    for (int i = 0; i < f.K(); i += 2) plan.bits[i] = 1;
    InferenceSession inc(f.cfg, f.params);
    inc.prefill(f.prompt.rows, plan, f.prompt.layout.latency_pos);
    const int tok = f.sample.gold;
    Tensor<float> dec = inc.decode_step(tok, plan);

    // Same computation as one long prefill.
    Tensor<float> ext = Tensor<float>::zeros(
        {f.prompt.rows.rows() + 1, (size_t)f.cfg.d_model});
    std::copy(f.prompt.rows.data.begin(), f.prompt.rows.data.end(),
              ext.data.begin());
    Tensor<float> row = embed_text({tok}, f.params.at("tok_embed"),
                                   f.params.at("pos_embed"),
                                   f.prompt.rows.rows());
    std::copy(row.data.begin(), row.data.end(),
              ext.row_ptr(f.prompt.rows.rows()));
    InferenceSession full(f.cfg, f.params);
    Tensor<float> all =
        full.prefill(ext, plan, f.prompt.layout.latency_pos).all_logits;
    Tensor<float> last = Tensor<float>::zeros({1, (size_t)f.cfg.vocab_size});
    std::copy(all.row_ptr(ext.rows() - 1),
              all.row_ptr(ext.rows() - 1) + f.cfg.vocab_size,
              last.data.begin());
    CHECK(max_abs_diff(dec, last) < 1e-5);
  }
}

TEST_CASE("changing the plan mid-generation is rejected") {
  Fixture f(SwitchDesign::LayerLevel);
  ExecutionPlan plan = ExecutionPlan::ones(f.K());
  InferenceSession session(f.cfg, f.params);
  session.prefill(f.prompt.rows, plan, f.prompt.layout.latency_pos);
  ExecutionPlan other = plan;
  other.bits[0] = 0;
  CHECK_THROWS_WITH_AS(session.decode_step(0, other),
                       "plan changed mid-generation", std::invalid_argument);
}

TEST_CASE("latency hidden state is read at the split layer") {
  Fixture f(SwitchDesign::LayerLevel);
  InferenceSession a(f.cfg, f.params);
  PrefillResult pre = a.prefill(f.prompt.rows, ExecutionPlan::ones(f.K()),
                                f.prompt.layout.latency_pos);
  InferenceSession b(f.cfg, f.params);
  Tensor<float> lat =
      b.prefill_first_half(f.prompt.rows, f.prompt.layout.latency_pos);
  CHECK(max_abs_diff(pre.latency_hidden, lat) == 0.0);
}

TEST_CASE("masking a head equals removing its weights") {
  Fixture f(SwitchDesign::HeadLevel, 44);
  const SwitchTopology topo = SwitchTopology::build(f.cfg);
  for (const auto& d : topo.descriptors) {
    if (d.kind != SwitchKind::AttnHead) continue;
    ExecutionPlan plan = ExecutionPlan::ones(topo.K);
    plan.bits[d.switch_id] = 0;
    InferenceSession masked(f.cfg, f.params);
    Tensor<float> got =
        masked.prefill(f.prompt.rows, plan, f.prompt.layout.latency_pos)
            .all_logits;
    ParamStore<float> cut =
        surgery_remove_head(f.cfg, f.params, d.layer_index, d.group_index);
    InferenceSession zeroed(f.cfg, cut);
    Tensor<float> want =
        zeroed.prefill(f.prompt.rows, ExecutionPlan::ones(topo.K),
                       f.prompt.layout.latency_pos)
            .all_logits;
    CHECK(max_abs_diff(got, want) < 1e-5);
  }
}

TEST_CASE("parameter layout covers every tensor the model reads") {
  Fixture f(SwitchDesign::LayerLevel);
  for (auto& [name, shape] : param_layout(f.cfg)) {
    CHECK(f.params.has(name));
    CHECK(f.params.at(name).shape == shape);
  }
  CHECK(is_scheduler_param("sched_w"));
  CHECK(is_scheduler_param("lat_ln_g"));
  CHECK_FALSE(is_scheduler_param("layers.0.wq"));
  CHECK_FALSE(is_scheduler_param("lm_head"));
}

TEST_CASE("config validation rejects bad dimensions") {
  ModelConfig cfg;
  cfg.d_model = 30;  // not divisible by 4 heads
  cfg.n_heads = 4;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  ModelConfig cfg2;
  cfg2.switchable_start_layer = cfg2.n_layers;  // nothing switchable
  CHECK_THROWS_AS(cfg2.validate(), std::invalid_argument);
}

TEST_CASE("training graph forward matches the inference session") {
  // Same plan, same parameters: the autodiff forward and the plain-float
  // session must agree on the answer NLL.
  Fixture f(SwitchDesign::LayerLevel, 55);
  const SwitchTopology topo = SwitchTopology::build(f.cfg);
  ExecutionPlan plan = ExecutionPlan::zeros(topo.K);
  plan.bits[0] = 1;
  const double l = 0.8;

  const double plain =
      score_plan_nll(f.cfg, f.params, f.sample.features, f.sample.query,
                     f.sample.answer, l, 0.5, plan);

  ParamStore<double> pd = f.params.cast<double>();
  VarStore<double> vars = VarStore<double>::leaves(pd);
  ag::Var<double> lat = encode_latency_graph(l, 0.5, vars, f.cfg.latency_code_dim);
  SequenceGraph<double> sg = build_sequence_graph(
      f.cfg, vars, f.sample.features.cast<double>(), f.sample.query, lat,
      f.sample.answer);
  ag::Var<double> x = first_half_graph(f.cfg, vars, sg.rows);
  Tensor<double> gates = Tensor<double>::zeros({1, (size_t)topo.K});
  for (int i = 0; i < topo.K; ++i) gates.data[i] = plan.bits[i];
  ag::Var<double> nll = second_half_nll_graph(
      f.cfg, vars, topo, x, ag::Var<double>::constant(gates), sg.layout,
      f.sample.answer);
  CHECK(nll.value().data[0] == doctest::Approx(plain).epsilon(1e-4));
}
