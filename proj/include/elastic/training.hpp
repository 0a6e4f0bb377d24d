#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "elastic/cost_model.hpp"
#include "elastic/dataset.hpp"
#include "elastic/graph.hpp"
#include "elastic/model.hpp"
#include "elastic/rng.hpp"
#include "elastic/scheduler.hpp"

namespace elastic {

// Training arms. "Probabilistic" is the full method; the rest are the
// ablation baselines it is compared against.
enum class TrainArm { Probabilistic, DeterministicHinge, RandomUniform, BaseNoSwitches };

std::string arm_name(TrainArm arm);
TrainArm arm_from_name(const std::string& name);

struct TrainConfig {
  TrainArm arm = TrainArm::Probabilistic;
  double lambda = 1.0;      // hinge weight (DeterministicHinge only)
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int steps = 300;
  int batch_size = 8;
  double tau = 1.0;         // Gumbel-softmax temperature, fixed
  double budget_lo = -1.0;  // -1: cost model's minimum budget
  double budget_hi = 1.0;
  uint64_t seed = 1;
  int log_every = 10;
  int n_train = 4096;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json task_spec_to_json(const TaskSpec& spec);
TaskSpec task_spec_from_json(const nlohmann::json& j);

// ---- differentiable per-sample forward ----
//
// Shared by the training loop and the gradient-verification harness, which
// re-runs it at double precision with frozen sampling noise.

template <typename T>
struct SampleForward {
  ag::Var<T> logits;   // scheduler logits [1, K]
  ag::Var<T> x_half;   // hidden state after the first-half layers
  PromptLayout layout;
  std::vector<int> answer_ids;
};

// Runs embeddings and layers [0, split), then the scheduler head off the
// latency token's hidden state.
template <typename T>
SampleForward<T> forward_to_logits(const ModelConfig& cfg,
                                   const VarStore<T>& vars,
                                   const Tensor<T>& features,
                                   const std::vector<int>& query_ids,
                                   const std::vector<int>& answer_ids,
                                   double l, double l_min) {
  ag::Var<T> lat = encode_latency_graph(l, l_min, vars, cfg.latency_code_dim);
  SequenceGraph<T> sg =
      build_sequence_graph(cfg, vars, features, query_ids, lat, answer_ids);
  ag::Var<T> x = first_half_graph(cfg, vars, sg.rows);
  ag::Var<T> lat_hidden = ag::slice_rows(x, sg.layout.latency_pos, 1);
  SampleForward<T> out;
  out.logits = scheduler_logits_graph(lat_hidden, vars);
  out.x_half = x;
  out.layout = sg.layout;
  out.answer_ids = sg.answer_ids;
  return out;
}

// Completes the forward under the given gates and returns the answer NLL.
template <typename T>
ag::Var<T> nll_from_gates(const ModelConfig& cfg, const VarStore<T>& vars,
                          const SwitchTopology& topo,
                          const SampleForward<T>& fw, const ag::Var<T>& gates) {
  return second_half_nll_graph(cfg, vars, topo, fw.x_half, gates, fw.layout,
                               fw.answer_ids);
}

// The full probabilistic-arm sample loss under a fixed sampling context;
// the finite-difference oracle differentiates exactly this.
template <typename T>
ag::Var<T> sample_nll_graph(const ModelConfig& cfg, const VarStore<T>& vars,
                            const SwitchTopology& topo,
                            const Tensor<T>& features,
                            const std::vector<int>& query_ids,
                            const std::vector<int>& answer_ids, double l,
                            double l_min, const PlanContext& ctx,
                            std::optional<Tensor<T>> frozen_offset = {}) {
  SampleForward<T> fw =
      forward_to_logits(cfg, vars, features, query_ids, answer_ids, l, l_min);
  ag::Var<T> gates = gates_from_context(fw.logits, ctx, frozen_offset);
  return nll_from_gates(cfg, vars, topo, fw, gates);
}

// ---- optimizer ----

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  // Applies one update; grads are keyed by the store's item order.
  void step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<Tensor<float>> m_, v_;
};

// ---- training loop ----

struct LogRow {
  int step;
  double loss;
  double budget_mean;
  double utilization_mean;
  double success_rate;  // fraction of sampled plans within budget, in percent
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<LogRow> log;
};

// Trains from the given initialization. Deterministic per (configs, seed).
// Throws on non-finite loss, naming the step.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Sample>& data, ParamStore<float> params);

// Convenience overload: fresh initialization from the training seed.
TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Sample>& data);

// CSV with header: step,loss,budget_mean,utilization_mean,success_rate
void write_training_log(const std::string& path, const std::vector<LogRow>& log);

}  // namespace elastic
