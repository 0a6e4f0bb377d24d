#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "elastic/cost_model.hpp"
#include "elastic/graph.hpp"
#include "elastic/model.hpp"
#include "elastic/rng.hpp"

namespace elastic {

// ---- latency encoder ----

// Sinusoidal code for a scalar budget: 128 (sin, cos) pairs on the standard
// geometric frequency ladder with base period 1e4, with the budget scaled by
// 1e4 so l in [0, 1] sweeps the whole ladder.
template <typename T>
Tensor<T> latency_code(double l, int dim = 256) {
  if (dim % 2 != 0) throw std::invalid_argument("latency_code: dim must be even");
  const int pairs = dim / 2;
  const double scaled = l * 1e4;
  Tensor<T> out = Tensor<T>::zeros({1, (size_t)dim});
  for (int i = 0; i < pairs; ++i) {
    const double freq = 1.0 / std::pow(1e4, double(i) / pairs);
    out.data[2 * i] = static_cast<T>(std::sin(scaled * freq));
    out.data[2 * i + 1] = static_cast<T>(std::cos(scaled * freq));
  }
  return out;
}

inline void check_budget_range(double l, double l_min) {
  if (!(l >= l_min - 1e-12 && l <= 1.0 + 1e-12))
    throw std::invalid_argument("budget out of range [l_min, 1]");
}

// Plain-math latency token: sinusoid -> linear -> GELU -> layer norm -> linear.
template <typename T>
Tensor<T> encode_latency(double l, double l_min, const ParamStore<T>& params,
                         int code_dim = 256) {
  check_budget_range(l, l_min);
  Tensor<T> code = latency_code<T>(l, code_dim);
  Tensor<T> h = matmul(code, params.at("lat_w1"));
  for (size_t j = 0; j < h.size(); ++j) h.data[j] += params.at("lat_b1").data[j];
  h = gelu(h);
  h = layer_norm(h, params.at("lat_ln_g"), params.at("lat_ln_b"));
  Tensor<T> z = matmul(h, params.at("lat_w2"));
  for (size_t j = 0; j < z.size(); ++j) z.data[j] += params.at("lat_b2").data[j];
  return z;
}

// Graph version used on the training path.
template <typename T>
ag::Var<T> encode_latency_graph(double l, double l_min, const VarStore<T>& vars,
                                int code_dim = 256) {
  check_budget_range(l, l_min);
  ag::Var<T> code = ag::Var<T>::constant(latency_code<T>(l, code_dim));
  ag::Var<T> h = ag::add(ag::matmul(code, vars.at("lat_w1")), vars.at("lat_b1"));
  h = ag::layer_norm(ag::gelu(h), vars.at("lat_ln_g"), vars.at("lat_ln_b"));
  return ag::add(ag::matmul(h, vars.at("lat_w2")), vars.at("lat_b2"));
}

// ---- scheduler head ----

template <typename T>
Tensor<T> scheduler_logits(const Tensor<T>& latency_hidden,
                           const ParamStore<T>& params) {
  Tensor<T> out = matmul(latency_hidden, params.at("sched_w"));
  for (size_t j = 0; j < out.size(); ++j)
    out.data[j] += params.at("sched_b").data[j];
  if (!out.all_finite())
    throw std::runtime_error("scheduler_logits: non-finite output");
  return out;
}

template <typename T>
ag::Var<T> scheduler_logits_graph(const ag::Var<T>& latency_hidden,
                                  const VarStore<T>& vars) {
  return ag::add(ag::matmul(latency_hidden, vars.at("sched_w")),
                 vars.at("sched_b"));
}

// ---- plan sampling ----

namespace detail {

inline std::vector<double> softmax_masked(const std::vector<double>& logits,
                                          const std::vector<uint8_t>& mask) {
  double mx = -1e300;
  for (size_t i = 0; i < logits.size(); ++i)
    if (mask[i]) mx = std::max(mx, logits[i]);
  std::vector<double> probs(logits.size(), 0.0);
  double sum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (!mask[i]) continue;
    probs[i] = std::exp(logits[i] - mx);
    sum += probs[i];
  }
  for (double& p : probs) p /= sum;
  return probs;
}

// Switches still affordable: unselected, and the plan cost with the switch
// added stays within the allowance. Cost sums run in switch-id order so the
// comparison agrees exactly with plan_flops().
inline std::vector<uint8_t> affordable_mask(const ExecutionPlan& plan,
                                            const CostModel& cm,
                                            double allowance) {
  const size_t K = cm.num_switches();
  double used = cm.fixed_flops();
  for (size_t i = 0; i < K; ++i)
    if (plan.bits[i]) used += cm.switch_cost(i);
  std::vector<uint8_t> mask(K, 0);
  bool any = false;
  for (size_t i = 0; i < K; ++i) {
    if (plan.bits[i]) continue;
    if (used + cm.switch_cost(i) <= allowance) {
      mask[i] = 1;
      any = true;
    }
  }
  if (!any) mask.clear();
  return mask;
}

}  // namespace detail

// Without-replacement sampling over the affordable set: renormalize the
// categorical over the remaining affordable switches, draw one, deduct its
// cost, repeat until nothing fits. For uniform costs this activates exactly
// affordable_count(l) switches.
inline ExecutionPlan sample_plan(const std::vector<double>& logits, double l,
                                 const CostModel& cm, Rng& rng) {
  if (logits.size() != cm.num_switches())
    throw std::invalid_argument("sample_plan: logits length mismatch");
  for (double v : logits)
    if (!std::isfinite(v))
      throw std::invalid_argument("sample_plan: non-finite logits");
  const double allowance = cm.allowance(l);
  ExecutionPlan plan = ExecutionPlan::zeros(static_cast<int>(logits.size()));
  while (true) {
    auto mask = detail::affordable_mask(plan, cm, allowance);
    if (mask.empty()) break;
    auto probs = detail::softmax_masked(logits, mask);
    const double u = rng.uniform();
    double acc = 0.0;
    size_t pick = 0;
    bool found = false;
    for (size_t i = 0; i < probs.size(); ++i) {
      if (!mask[i]) continue;
      acc += probs[i];
      pick = i;
      if (u < acc) {
        found = true;
        break;
      }
    }
    (void)found;  // fp rounding may leave acc slightly under 1; take the last
    plan.bits[pick] = 1;
  }
  return plan;
}

// Recorded state of one differentiable sampling pass, enough to rebuild the
// straight-through gates against fresh logits (frozen noise for gradient
// verification, or the live training step).
struct PlanContext {
  struct Draw {
    std::vector<uint8_t> mask;    // affordable set at this draw
    std::vector<double> gumbel;   // noise, one per switch (unused where masked)
    int pick = -1;                // argmax over the masked perturbed logits
  };
  std::vector<Draw> draws;
  ExecutionPlan plan;
  double tau = 1.0;
};

// Hard selection pass with Gumbel noise; equivalent to sample_plan through
// the Gumbel-max identity. Records everything needed for the soft path.
inline PlanContext make_plan_context(const std::vector<double>& logits,
                                     double l, const CostModel& cm, double tau,
                                     Rng& rng) {
  if (tau <= 0.0) throw std::invalid_argument("temperature must be positive");
  const double allowance = cm.allowance(l);
  PlanContext ctx;
  ctx.tau = tau;
  ctx.plan = ExecutionPlan::zeros(static_cast<int>(logits.size()));
  while (true) {
    auto mask = detail::affordable_mask(ctx.plan, cm, allowance);
    if (mask.empty()) break;
    PlanContext::Draw draw;
    draw.mask = mask;
    draw.gumbel.resize(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) draw.gumbel[i] = rng.gumbel();
    double best = -1e300;
    for (size_t i = 0; i < logits.size(); ++i) {
      if (!mask[i]) continue;
      const double z = logits[i] + draw.gumbel[i];
      if (z > best) {
        best = z;
        draw.pick = static_cast<int>(i);
      }
    }
    ctx.plan.bits[draw.pick] = 1;
    ctx.draws.push_back(std::move(draw));
  }
  return ctx;
}

// Straight-through gates: forward value is exactly the hard plan bits, the
// backward path flows through the per-draw softmax over perturbed logits.
// `frozen_offset`, when given, replaces the live hard-minus-soft correction;
// the finite-difference harness uses it to differentiate the surrogate.
template <typename T>
ag::Var<T> gates_from_context(const ag::Var<T>& logits, const PlanContext& ctx,
                              std::optional<Tensor<T>> frozen_offset = {}) {
  const size_t K = logits.value().size();
  std::vector<ag::Var<T>> softs;
  for (const auto& draw : ctx.draws) {
    Tensor<T> shift = Tensor<T>::zeros({1, K});
    for (size_t i = 0; i < K; ++i)
      shift.data[i] = draw.mask[i]
                          ? static_cast<T>(draw.gumbel[i])
                          : static_cast<T>(-1e30);
    ag::Var<T> perturbed = ag::add_const(logits, shift);
    softs.push_back(ag::softmax_rows(
        ag::scale(perturbed, static_cast<T>(1.0 / ctx.tau))));
  }
  if (softs.empty()) {
    // Nothing affordable: gates are a hard all-zero constant.
    return ag::Var<T>::constant(Tensor<T>::zeros({1, K}));
  }
  ag::Var<T> soft_sum = softs[0];
  for (size_t i = 1; i < softs.size(); ++i)
    soft_sum = ag::add(soft_sum, softs[i]);
  Tensor<T> offset;
  if (frozen_offset) {
    offset = *frozen_offset;
  } else {
    offset = Tensor<T>::zeros({1, K});
    for (size_t i = 0; i < K; ++i)
      offset.data[i] =
          static_cast<T>(ctx.plan.bits[i]) - soft_sum.value().data[i];
  }
  return ag::add_const(soft_sum, offset);
}

// Current hard-minus-soft offset for a context at given logits; the gradient
// check freezes this and re-evaluates the surrogate under perturbed params.
template <typename T>
Tensor<T> st_offset(const ag::Var<T>& logits, const PlanContext& ctx) {
  Tensor<T> offset = Tensor<T>::zeros({1, logits.value().size()});
  const size_t K = logits.value().size();
  std::vector<T> soft_sum(K, T(0));
  for (const auto& draw : ctx.draws) {
    std::vector<double> z(K);
    double mx = -1e300;
    for (size_t i = 0; i < K; ++i) {
      z[i] = draw.mask[i]
                 ? (double(logits.value().data[i]) + draw.gumbel[i]) / ctx.tau
                 : -1e300;
      mx = std::max(mx, z[i]);
    }
    double sum = 0.0;
    for (size_t i = 0; i < K; ++i) {
      z[i] = draw.mask[i] ? std::exp(z[i] - mx) : 0.0;
      sum += z[i];
    }
    for (size_t i = 0; i < K; ++i) soft_sum[i] += static_cast<T>(z[i] / sum);
  }
  for (size_t i = 0; i < K; ++i)
    offset.data[i] = static_cast<T>(ctx.plan.bits[i]) - soft_sum[i];
  return offset;
}

// Greedy most-probable plan: repeatedly activate the highest-logit affordable
// switch; ties break toward the lowest switch id. Top-k under uniform costs.
inline ExecutionPlan argmax_plan(const std::vector<double>& logits, double l,
                                 const CostModel& cm) {
  if (logits.size() != cm.num_switches())
    throw std::invalid_argument("argmax_plan: logits length mismatch");
  const double allowance = cm.allowance(l);
  ExecutionPlan plan = ExecutionPlan::zeros(static_cast<int>(logits.size()));
  while (true) {
    auto mask = detail::affordable_mask(plan, cm, allowance);
    if (mask.empty()) break;
    size_t pick = 0;
    double best = -1e300;
    for (size_t i = 0; i < logits.size(); ++i) {
      if (!mask[i]) continue;
      if (logits[i] > best) {
        best = logits[i];
        pick = i;
      }
    }
    plan.bits[pick] = 1;
  }
  return plan;
}

template <typename T>
std::vector<double> logits_to_vec(const Tensor<T>& logits) {
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits.data[i];
  return out;
}

}  // namespace elastic
