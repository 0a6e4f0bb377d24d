#include "elastic/oracle_checks.hpp"

#include <cmath>
#include <map>

#include "elastic/dataset.hpp"
#include "elastic/oracle.hpp"
#include "elastic/training.hpp"

namespace elastic {

namespace {

// L-design config with exactly K switchable layers out of 2K.
ModelConfig l_design(int K) {
  ModelConfig cfg;
  cfg.n_layers = 2 * K;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.max_seq_len = 32;
  cfg.switch_design = SwitchDesign::LayerLevel;
  return cfg;
}

// The 2-layer head-level toy used by the gradient and surgery checks.
struct TinySetup {
  TaskSpec spec;
  ModelConfig cfg;
};

TinySetup tiny_head_model() {
  TinySetup s;
  s.spec.grid = 2;
  s.spec.colors = 2;
  s.spec.mode = TaskMode::Lookup;
  s.spec.noise_sigma = 0.05;
  s.spec.d_feat = 4;
  s.cfg.n_layers = 2;
  s.cfg.d_model = 16;
  s.cfg.n_heads = 2;
  s.cfg.d_mlp = 32;
  s.cfg.vocab_size = VocabLayout::build(s.spec).vocab_size;
  s.cfg.n_visual_tokens = s.spec.n_cells();
  s.cfg.d_feat = s.spec.d_feat;
  s.cfg.max_seq_len = s.spec.n_cells() + 8;
  s.cfg.switch_design = SwitchDesign::HeadLevel;
  s.cfg.switchable_start_layer = 1;
  s.cfg.latency_code_dim = 64;
  return s;
}

}  // namespace

CheckResult check_set_probability() {
  CheckResult out;
  out.pass = true;
  // K=2, k=1, logits (ln 3, ln 1): the singletons split 0.75 / 0.25.
  {
    const CostModel cm = CostModel::build(l_design(2), 8);
    const std::vector<double> logits = {std::log(3.0), std::log(1.0)};
    ExecutionPlan p0 = ExecutionPlan::zeros(2), p1 = ExecutionPlan::zeros(2);
    p0.bits[0] = 1;
    p1.bits[1] = 1;
    const double a = exact_set_probability(logits, 0.75, cm, p0);
    const double b = exact_set_probability(logits, 0.75, cm, p1);
    out.details["k2_p0"] = a;
    out.details["k2_p1"] = b;
    out.pass = out.pass && std::abs(a - 0.75) < 1e-12 &&
               std::abs(b - 0.25) < 1e-12;
  }
  // K=3, k=2, equal logits: each 2-set has probability 1/3, and the feasible
  // maximal plans sum to 1.
  {
    const CostModel cm = CostModel::build(l_design(3), 8);
    const std::vector<double> logits(3, 0.0);
    const double l = 5.0 / 6.0;
    double sum = 0.0;
    double worst = 0.0;
    for (const ExecutionPlan& p : enumerate_plans(3)) {
      const double prob = exact_set_probability(logits, l, cm, p);
      sum += prob;
      if (p.popcount() == 2) worst = std::max(worst, std::abs(prob - 1.0 / 3));
    }
    out.details["k3_pair_max_dev"] = worst;
    out.details["k3_total"] = sum;
    out.pass = out.pass && worst < 1e-12 && std::abs(sum - 1.0) < 1e-10;
  }
  // k = K: the full set is certain.
  {
    const CostModel cm = CostModel::build(l_design(3), 8);
    const std::vector<double> logits = {0.3, -1.0, 2.0};
    const double p =
        exact_set_probability(logits, 1.0, cm, ExecutionPlan::ones(3));
    out.details["full_set"] = p;
    out.pass = out.pass && std::abs(p - 1.0) < 1e-12;
  }
  return out;
}

CheckResult check_sampler_tv(int n_vectors, int draws, uint64_t seed) {
  CheckResult out;
  const ModelConfig cfg = l_design(6);
  const CostModel cm = CostModel::build(cfg, 8);
  const double l = 0.75;  // k = 3 of K = 6
  Rng rng(Rng::derive(seed, 0x0aac1e));
  double worst = 0.0;
  for (int v = 0; v < n_vectors; ++v) {
    std::vector<double> logits(6);
    for (double& x : logits) x = rng.normal();
    // Exact distribution over all maximal plans.
    std::map<std::vector<uint8_t>, double> exact;
    for (const ExecutionPlan& p : enumerate_plans(6)) {
      const double prob = exact_set_probability(logits, l, cm, p);
      if (prob > 0.0) exact[p.bits] = prob;
    }
    std::map<std::vector<uint8_t>, double> freq;
    for (int d = 0; d < draws; ++d)
      freq[sample_plan(logits, l, cm, rng).bits] += 1.0 / draws;
    double tv = 0.0;
    for (const auto& [bits, p] : exact) {
      const auto it = freq.find(bits);
      tv += std::abs(p - (it == freq.end() ? 0.0 : it->second));
    }
    for (const auto& [bits, q] : freq)
      if (!exact.count(bits)) tv += q;
    worst = std::max(worst, 0.5 * tv);
  }
  out.details["n_vectors"] = n_vectors;
  out.details["draws"] = draws;
  out.details["worst_tv"] = worst;
  out.pass = worst < 0.01;
  return out;
}

GradientCheck check_gradients(uint64_t seed) {
  GradientCheck out;
  const TinySetup setup = tiny_head_model();
  const ModelConfig& cfg = setup.cfg;
  const SwitchTopology topo = SwitchTopology::build(cfg);

  Rng init_rng(Rng::derive(seed, 0x91adc));
  ParamStore<float> params_f = init_params(cfg, init_rng);
  // Give the scheduler head some signal so its gradients are not trivially 0.
  for (float& v : params_f.at("sched_w").data)
    v = static_cast<float>(init_rng.normal() * 0.2);
  ParamStore<double> params = params_f.cast<double>();

  const Sample sample = make_synthetic_dataset(setup.spec, 1, seed, Split::Train)[0];
  const Tensor<double> features = sample.features.cast<double>();
  const size_t prompt_len = sample.features.rows() + sample.query.size() + 1;
  const CostModel cm = CostModel::build(cfg, prompt_len);
  const double l = 0.7;

  // Base pass: record the sampling context and freeze the hard-soft offset.
  Rng noise(Rng::derive(seed, 0x90153));
  VarStore<double> vars = VarStore<double>::leaves(params);
  SampleForward<double> fw = forward_to_logits(cfg, vars, features,
                                               sample.query, sample.answer, l,
                                               cm.min_budget());
  const PlanContext ctx = make_plan_context(logits_to_vec(fw.logits.value()),
                                            l, cm, 1.0, noise);
  const Tensor<double> offset = st_offset(fw.logits, ctx);

  // Analytic gradients of the frozen surrogate.
  ag::Var<double> loss = sample_nll_graph<double>(cfg, vars, topo, features,
                                                  sample.query, sample.answer,
                                                  l, cm.min_budget(), ctx,
                                                  offset);
  ag::backward(loss);

  auto loss_fn = [&](const ParamStore<double>& p) {
    VarStore<double> v = VarStore<double>::leaves(p);
    return sample_nll_graph<double>(cfg, v, topo, features, sample.query,
                                    sample.answer, l, cm.min_budget(), ctx,
                                    offset)
        .value()
        .data[0];
  };

  out.pass = true;
  for (auto& [name, var] : vars.items) {
    Tensor<double> fd = finite_difference_gradient(params, name, loss_fn, 1e-4);
    const Tensor<double>& an = var.grad();
    double diff2 = 0.0, ref2 = 0.0;
    for (size_t i = 0; i < fd.size(); ++i) {
      const double a = an.data.empty() ? 0.0 : an.data[i];
      diff2 += (a - fd.data[i]) * (a - fd.data[i]);
      ref2 += fd.data[i] * fd.data[i];
    }
    const double rel = std::sqrt(diff2) / (std::sqrt(ref2) + 1e-12);
    out.details[name] = rel;
    if (is_scheduler_param(name)) {
      out.max_rel_err_phi = std::max(out.max_rel_err_phi, rel);
    } else {
      out.max_rel_err_theta = std::max(out.max_rel_err_theta, rel);
    }
  }
  out.pass = out.max_rel_err_phi < 1e-3 && out.max_rel_err_theta < 1e-4;
  out.details["max_rel_err_phi"] = out.max_rel_err_phi;
  out.details["max_rel_err_theta"] = out.max_rel_err_theta;
  return out;
}

CheckResult check_surgery(uint64_t seed) {
  CheckResult out;
  const TinySetup setup = tiny_head_model();
  const ModelConfig& cfg = setup.cfg;
  const SwitchTopology topo = SwitchTopology::build(cfg);

  Rng rng(Rng::derive(seed, 0x5a9e));
  const ParamStore<float> params = init_params(cfg, rng);
  const Sample sample = make_synthetic_dataset(setup.spec, 1, seed, Split::Eval)[0];
  PromptRows prompt =
      build_prompt_rows(cfg, params, sample.features, sample.query, 1.0, 0.5);

  out.pass = true;
  double worst = 0.0;
  for (const auto& d : topo.descriptors) {
    if (d.kind != SwitchKind::AttnHead) continue;
    ExecutionPlan plan = ExecutionPlan::ones(topo.K);
    plan.bits[d.switch_id] = 0;
    InferenceSession masked(cfg, params);
    Tensor<float> a =
        masked.prefill(prompt.rows, plan, prompt.layout.latency_pos).all_logits;

    const ParamStore<float> cut =
        surgery_remove_head(cfg, params, d.layer_index, d.group_index);
    InferenceSession zeroed(cfg, cut);
    Tensor<float> b = zeroed
                          .prefill(prompt.rows, ExecutionPlan::ones(topo.K),
                                   prompt.layout.latency_pos)
                          .all_logits;
    double mx = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
      mx = std::max(mx, std::abs(double(a.data[i]) - double(b.data[i])));
    out.details["layer" + std::to_string(d.layer_index) + "_head" +
                std::to_string(d.group_index)] = mx;
    worst = std::max(worst, mx);
  }
  out.details["max_abs_diff"] = worst;
  out.pass = worst < 1e-5;
  return out;
}

}  // namespace elastic
