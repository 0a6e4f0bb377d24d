#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

#include "elastic/cost_model.hpp"
#include "elastic/kernels.hpp"
#include "elastic/model.hpp"
#include "elastic/runtime.hpp"
#include "elastic/scheduler.hpp"

namespace elastic {

// Brute-force references for the tests. Everything here is deliberately
// slow and independent of the production code paths it checks.

// Exact probability that without-replacement sampling emits `plan`: sum over
// all selection orders of the product of per-draw renormalized probabilities.
// Orders where a pick is not affordable at its turn contribute zero, and the
// plan itself must be maximal (the sampler only stops when nothing fits).
inline double exact_set_probability(const std::vector<double>& logits,
                                    double l, const CostModel& cm,
                                    const ExecutionPlan& plan) {
  if (logits.size() != cm.num_switches() || plan.size() != cm.num_switches())
    throw std::invalid_argument("exact_set_probability: length mismatch");
  const int k = plan.popcount();
  if (k > 10) throw std::invalid_argument("enumeration bound exceeded");
  const double allowance = cm.allowance(l);

  std::vector<size_t> members;
  for (size_t i = 0; i < plan.size(); ++i)
    if (plan.bits[i]) members.push_back(i);

  // Terminal state must have an empty affordable set.
  if (!detail::affordable_mask(plan, cm, allowance).empty()) return 0.0;

  std::vector<size_t> order(members);
  std::sort(order.begin(), order.end());
  double total = 0.0;
  do {
    ExecutionPlan partial = ExecutionPlan::zeros(static_cast<int>(plan.size()));
    double prob = 1.0;
    for (size_t pick : order) {
      auto mask = detail::affordable_mask(partial, cm, allowance);
      if (mask.empty() || !mask[pick]) {
        prob = 0.0;
        break;
      }
      auto probs = detail::softmax_masked(logits, mask);
      prob *= probs[pick];
      partial.bits[pick] = 1;
    }
    total += prob;
  } while (std::next_permutation(order.begin(), order.end()));
  return total;
}

// All 2^K plans in bit order (switch 0 is the least significant bit).
inline std::vector<ExecutionPlan> enumerate_plans(int K) {
  if (K > 16) throw std::invalid_argument("enumeration bound exceeded");
  std::vector<ExecutionPlan> out;
  out.reserve(size_t(1) << K);
  for (uint32_t bits = 0; bits < (uint32_t(1) << K); ++bits) {
    ExecutionPlan p = ExecutionPlan::zeros(K);
    for (int i = 0; i < K; ++i) p.bits[i] = (bits >> i) & 1u;
    out.push_back(std::move(p));
  }
  return out;
}

struct BestPlanResult {
  ExecutionPlan plan;
  double nll = 0.0;
};

// Exhaustive search over all feasible plans for the lowest teacher-forced
// answer NLL. Ties resolve to the first plan in enumeration order.
inline BestPlanResult exhaustive_best_plan(const ModelConfig& cfg,
                                           const ParamStore<float>& params,
                                           const CostModel& cm,
                                           const Tensor<float>& features,
                                           const std::vector<int>& query_ids,
                                           const std::vector<int>& answer_ids,
                                           double l) {
  const int K = static_cast<int>(cm.num_switches());
  BestPlanResult best;
  best.nll = 1e300;
  for (const ExecutionPlan& plan : enumerate_plans(K)) {
    if (!cm.is_feasible(plan, l)) continue;
    const double nll = score_plan_nll(cfg, params, features, query_ids,
                                      answer_ids, l, cm.min_budget(), plan);
    if (nll < best.nll) {
      best.nll = nll;
      best.plan = plan;
    }
  }
  if (best.plan.size() == 0)
    throw std::logic_error("exhaustive_best_plan: no feasible plan");
  return best;
}

// Central finite differences of a scalar loss with respect to one named
// parameter. `loss` must be a pure function of the store.
inline Tensor<double> finite_difference_gradient(
    ParamStore<double>& params, const std::string& name,
    const std::function<double(const ParamStore<double>&)>& loss,
    double eps = 1e-4) {
  Tensor<double>& p = params.at(name);
  Tensor<double> grad = Tensor<double>::zeros(p.shape);
  for (size_t i = 0; i < p.size(); ++i) {
    const double saved = p.data[i];
    p.data[i] = saved + eps;
    const double up = loss(params);
    p.data[i] = saved - eps;
    const double down = loss(params);
    p.data[i] = saved;
    grad.data[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// Weight surgery that removes attention head `head` of `layer` from the
// computation: zero its value-projection columns and its output-projection
// rows. Must match masking the head's switch to within float noise.
inline ParamStore<float> surgery_remove_head(const ModelConfig& cfg,
                                             const ParamStore<float>& params,
                                             int layer, int head) {
  ParamStore<float> out = params.cast<float>();
  const std::string p = "layers." + std::to_string(layer) + ".";
  const int dh = cfg.head_dim();
  Tensor<float>& wv = out.at(p + "wv");
  for (size_t r = 0; r < wv.rows(); ++r)
    for (int c = head * dh; c < (head + 1) * dh; ++c) wv.at(r, c) = 0.0f;
  Tensor<float>& wo = out.at(p + "wo");
  for (int r = head * dh; r < (head + 1) * dh; ++r)
    for (size_t c = 0; c < wo.cols(); ++c) wo.at(r, c) = 0.0f;
  return out;
}

// Plain full-sequence transformer forward with no switch machinery and no KV
// cache: the reference for full-plan equivalence and decode consistency.
// Returns logits at every position.
template <typename T>
Tensor<T> reference_forward(const ModelConfig& cfg, const ParamStore<T>& params,
                            const Tensor<T>& rows) {
  const size_t n = rows.rows();
  const size_t dh = cfg.head_dim();
  Tensor<T> x = rows;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "layers." + std::to_string(layer) + ".";
    Tensor<T> xn = layer_norm(x, params.at(p + "attn_ln_g"),
                              params.at(p + "attn_ln_b"));
    Tensor<T> q = matmul(xn, params.at(p + "wq"));
    Tensor<T> k = matmul(xn, params.at(p + "wk"));
    Tensor<T> v = matmul(xn, params.at(p + "wv"));
    Tensor<T> ctx = Tensor<T>::zeros({n, (size_t)cfg.d_model});
    const T scale = T(1) / std::sqrt(T(dh));
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor<T> scores = Tensor<T>::zeros({n, n});
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j < n; ++j) {
          if (j > i) {
            scores.at(i, j) = T(-1e30);
            continue;
          }
          T acc = T(0);
          for (size_t t = 0; t < dh; ++t)
            acc += q.at(i, h * dh + t) * k.at(j, h * dh + t);
          scores.at(i, j) = acc * scale;
        }
      Tensor<T> probs = softmax_rows(scores);
      for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j)
          for (size_t t = 0; t < dh; ++t)
            ctx.at(i, h * dh + t) += probs.at(i, j) * v.at(j, h * dh + t);
    }
    Tensor<T> attn_out = matmul(ctx, params.at(p + "wo"));
    for (size_t i = 0; i < x.size(); ++i) x.data[i] += attn_out.data[i];

    Tensor<T> mn = layer_norm(x, params.at(p + "mlp_ln_g"),
                              params.at(p + "mlp_ln_b"));
    Tensor<T> hidden = gelu(matmul(mn, params.at(p + "w_up")));
    Tensor<T> mlp_out = matmul(hidden, params.at(p + "w_down"));
    for (size_t i = 0; i < x.size(); ++i) x.data[i] += mlp_out.data[i];
  }
  Tensor<T> xn = layer_norm(x, params.at("final_ln_g"), params.at("final_ln_b"));
  return matmul(xn, params.at("lm_head"));
}

}  // namespace elastic
