#include "elastic/training.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace elastic {

std::string arm_name(TrainArm arm) {
  switch (arm) {
    case TrainArm::Probabilistic: return "probabilistic";
    case TrainArm::DeterministicHinge: return "deterministic_hinge";
    case TrainArm::RandomUniform: return "random_uniform";
    case TrainArm::BaseNoSwitches: return "base";
  }
  throw std::logic_error("arm_name: bad arm");
}

TrainArm arm_from_name(const std::string& name) {
  if (name == "probabilistic") return TrainArm::Probabilistic;
  if (name == "deterministic_hinge") return TrainArm::DeterministicHinge;
  if (name == "random_uniform") return TrainArm::RandomUniform;
  if (name == "base") return TrainArm::BaseNoSwitches;
  throw std::invalid_argument("unknown training arm: " + name);
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return {
      {"arm", arm_name(cfg.arm)},     {"lambda", cfg.lambda},
      {"lr", cfg.lr},                 {"beta1", cfg.beta1},
      {"beta2", cfg.beta2},           {"adam_eps", cfg.adam_eps},
      {"steps", cfg.steps},           {"batch_size", cfg.batch_size},
      {"tau", cfg.tau},               {"budget_lo", cfg.budget_lo},
      {"budget_hi", cfg.budget_hi},   {"seed", cfg.seed},
      {"log_every", cfg.log_every},   {"n_train", cfg.n_train},
  };
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  cfg.arm = arm_from_name(j.value("arm", arm_name(cfg.arm)));
  cfg.lambda = j.value("lambda", cfg.lambda);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.beta1 = j.value("beta1", cfg.beta1);
  cfg.beta2 = j.value("beta2", cfg.beta2);
  cfg.adam_eps = j.value("adam_eps", cfg.adam_eps);
  cfg.steps = j.value("steps", cfg.steps);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.tau = j.value("tau", cfg.tau);
  cfg.budget_lo = j.value("budget_lo", cfg.budget_lo);
  cfg.budget_hi = j.value("budget_hi", cfg.budget_hi);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.log_every = j.value("log_every", cfg.log_every);
  cfg.n_train = j.value("n_train", cfg.n_train);
  return cfg;
}

nlohmann::json task_spec_to_json(const TaskSpec& spec) {
  return {
      {"grid", spec.grid},
      {"colors", spec.colors},
      {"mode", spec.mode == TaskMode::Lookup ? "lookup" : "count_mod"},
      {"modulus", spec.modulus},
      {"noise_sigma", spec.noise_sigma},
      {"d_feat", spec.d_feat},
  };
}

TaskSpec task_spec_from_json(const nlohmann::json& j) {
  TaskSpec spec;
  spec.grid = j.value("grid", spec.grid);
  spec.colors = j.value("colors", spec.colors);
  const std::string mode =
      j.value("mode", spec.mode == TaskMode::Lookup ? "lookup" : "count_mod");
  if (mode == "lookup") {
    spec.mode = TaskMode::Lookup;
  } else if (mode == "count_mod") {
    spec.mode = TaskMode::CountMod;
  } else {
    throw std::invalid_argument("unknown task mode: " + mode);
  }
  spec.modulus = j.value("modulus", spec.modulus);
  spec.noise_sigma = j.value("noise_sigma", spec.noise_sigma);
  spec.d_feat = j.value("d_feat", spec.d_feat);
  spec.validate();
  return spec;
}

void Adam::step(ParamStore<float>& params,
                const std::vector<Tensor<float>>& grads) {
  if (grads.size() != params.items.size())
    throw std::invalid_argument("adam: gradient count mismatch");
  if (m_.empty()) {
    for (auto& [name, t] : params.items) {
      m_.push_back(Tensor<float>::zeros(t.shape));
      v_.push_back(Tensor<float>::zeros(t.shape));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, t_);
  const double bc2 = 1.0 - std::pow(beta2_, t_);
  for (size_t p = 0; p < params.items.size(); ++p) {
    Tensor<float>& w = params.items[p].second;
    const Tensor<float>& g = grads[p];
    if (g.data.empty()) continue;  // parameter untouched this step
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = g.data[i];
      m_[p].data[i] = static_cast<float>(beta1_ * m_[p].data[i] +
                                         (1.0 - beta1_) * gi);
      v_[p].data[i] = static_cast<float>(beta2_ * v_[p].data[i] +
                                         (1.0 - beta2_) * gi * gi);
      const double mhat = m_[p].data[i] / bc1;
      const double vhat = v_[p].data[i] / bc2;
      w.data[i] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

namespace {

// Cost models keyed by prompt length (budgets are fractions of the prefill
// FLOPs of the actual prompt).
const CostModel& cost_model_for(std::map<size_t, CostModel>& cache,
                                const ModelConfig& cfg, size_t prompt_len) {
  auto it = cache.find(prompt_len);
  if (it == cache.end())
    it = cache.emplace(prompt_len, CostModel::build(cfg, prompt_len)).first;
  return it->second;
}

}  // namespace

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Sample>& data, ParamStore<float> params) {
  mcfg.validate();
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (tcfg.batch_size <= 0 || tcfg.steps < 0)
    throw std::invalid_argument("train: bad steps/batch");
  const SwitchTopology topo = SwitchTopology::build(mcfg);
  std::map<size_t, CostModel> cm_cache;
  Rng rng(Rng::derive(tcfg.seed, 0x7421, static_cast<uint64_t>(tcfg.arm)));
  Adam adam(tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.adam_eps);

  TrainResult result;
  double acc_loss = 0, acc_budget = 0, acc_util = 0, acc_success = 0;
  int acc_n = 0;

  for (int step = 1; step <= tcfg.steps; ++step) {
    VarStore<float> vars = VarStore<float>::leaves(params);
    std::vector<ag::Var<float>> losses;
    losses.reserve(tcfg.batch_size);
    for (int b = 0; b < tcfg.batch_size; ++b) {
      const Sample& s = data[rng.next_u64() % data.size()];
      const size_t prompt_len = s.features.rows() + s.query.size() + 1;
      const CostModel& cm = cost_model_for(cm_cache, mcfg, prompt_len);
      const double lo = tcfg.budget_lo < 0 ? cm.min_budget() : tcfg.budget_lo;
      // A continuous draw almost never lands on budget_hi exactly, so the
      // all-switches plan would get no training mass. Reserve an atom at the
      // top so the full configuration is exercised like every other size.
      const double l = tcfg.arm == TrainArm::BaseNoSwitches
                           ? 1.0
                           : (rng.uniform(0.0, 1.0) < 0.125
                                  ? tcfg.budget_hi
                                  : rng.uniform(lo, tcfg.budget_hi));

      SampleForward<float> fw = forward_to_logits(
          mcfg, vars, s.features, s.query, s.answer, l, cm.min_budget());
      ag::Var<float> gates;
      ExecutionPlan plan;
      ag::Var<float> loss_b;
      switch (tcfg.arm) {
        case TrainArm::Probabilistic: {
          PlanContext ctx = make_plan_context(logits_to_vec(fw.logits.value()),
                                              l, cm, tcfg.tau, rng);
          plan = ctx.plan;
          gates = gates_from_context(fw.logits, ctx);
          loss_b = nll_from_gates(mcfg, vars, topo, fw, gates);
          break;
        }
        case TrainArm::RandomUniform: {
          // Scheduler bypassed: uniform logits, hard constant gates.
          std::vector<double> uniform(topo.K, 0.0);
          PlanContext ctx = make_plan_context(uniform, l, cm, tcfg.tau, rng);
          plan = ctx.plan;
          Tensor<float> bits = Tensor<float>::zeros({1, (size_t)topo.K});
          for (int i = 0; i < topo.K; ++i) bits.data[i] = plan.bits[i];
          gates = ag::Var<float>::constant(std::move(bits));
          loss_b = nll_from_gates(mcfg, vars, topo, fw, gates);
          break;
        }
        case TrainArm::BaseNoSwitches: {
          plan = ExecutionPlan::ones(topo.K);
          gates = ag::Var<float>::constant(
              Tensor<float>::full({1, (size_t)topo.K}, 1.0f));
          loss_b = nll_from_gates(mcfg, vars, topo, fw, gates);
          break;
        }
        case TrainArm::DeterministicHinge: {
          // Sigmoid gates, straight-through binarized at 0.5. No feasibility
          // projection; violations are only discouraged by the hinge.
          ag::Var<float> soft = ag::sigmoid(fw.logits);
          plan = ExecutionPlan::zeros(topo.K);
          Tensor<float> offset = Tensor<float>::zeros({1, (size_t)topo.K});
          for (int i = 0; i < topo.K; ++i) {
            plan.bits[i] = soft.value().data[i] >= 0.5f;
            offset.data[i] = float(plan.bits[i]) - soft.value().data[i];
          }
          gates = ag::add_const(soft, offset);
          ag::Var<float> nll = nll_from_gates(mcfg, vars, topo, fw, gates);
          Tensor<float> cost_col =
              Tensor<float>::zeros({(size_t)topo.K, 1});
          for (int i = 0; i < topo.K; ++i)
            cost_col.data[i] = static_cast<float>(cm.switch_cost(i) /
                                                  cm.base_prefill_flops());
          ag::Var<float> frac =
              ag::matmul(gates, ag::Var<float>::constant(std::move(cost_col)));
          Tensor<float> shift(
              {1, 1}, {static_cast<float>(cm.fixed_flops() /
                                              cm.base_prefill_flops() -
                                          l)});
          ag::Var<float> pen = ag::relu(ag::add_const(frac, shift));
          loss_b = ag::add(nll, ag::scale(pen, static_cast<float>(tcfg.lambda)));
          break;
        }
      }
      losses.push_back(loss_b);
      acc_budget += l;
      acc_util += cm.utilization(plan, l);
      acc_success += cm.is_feasible(plan, l) ? 1.0 : 0.0;
    }
    ag::Var<float> loss = ag::mean(losses);
    const double loss_v = loss.value().data[0];
    if (!std::isfinite(loss_v))
      throw std::runtime_error("train: non-finite loss at step " +
                               std::to_string(step) + " (arm " +
                               arm_name(tcfg.arm) + ")");
    acc_loss += loss_v * tcfg.batch_size;
    acc_n += tcfg.batch_size;
    ag::backward(loss);

    std::vector<Tensor<float>> grads;
    grads.reserve(vars.items.size());
    for (auto& [name, var] : vars.items) grads.push_back(var.grad());
    adam.step(params, grads);

    if (step % tcfg.log_every == 0 || step == tcfg.steps) {
      result.log.push_back({step, acc_loss / acc_n, acc_budget / acc_n,
                            acc_util / acc_n, 100.0 * acc_success / acc_n});
      acc_loss = acc_budget = acc_util = acc_success = 0;
      acc_n = 0;
    }
  }
  result.params = std::move(params);
  return result;
}

TrainResult train(const ModelConfig& mcfg, const TrainConfig& tcfg,
                  const std::vector<Sample>& data) {
  Rng init_rng(Rng::derive(tcfg.seed, 0x1217));
  return train(mcfg, tcfg, data, init_params(mcfg, init_rng));
}

void write_training_log(const std::string& path,
                        const std::vector<LogRow>& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << "step,loss,budget_mean,utilization_mean,success_rate\n";
  char buf[160];
  for (const LogRow& r : log) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.2f\n", r.step, r.loss,
                  r.budget_mean, r.utilization_mean, r.success_rate);
    os << buf;
  }
}

}  // namespace elastic
