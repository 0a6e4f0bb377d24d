#pragma once

#include <vector>

#include "elastic/cost_model.hpp"
#include "elastic/dataset.hpp"
#include "elastic/kernels.hpp"
#include "elastic/model.hpp"
#include "elastic/scheduler.hpp"

namespace elastic {

// Plain-math (inference-path) glue: prompt assembly, scheduling, greedy
// decoding and plan scoring.

struct PromptRows {
  Tensor<float> rows;
  PromptLayout layout;
};

// [visual | query | latency] rows with learned absolute positions.
inline PromptRows build_prompt_rows(const ModelConfig& cfg,
                                    const ParamStore<float>& params,
                                    const Tensor<float>& features,
                                    const std::vector<int>& query_ids,
                                    double l, double l_min) {
  PromptRows out;
  Tensor<float> vis = encode_visual(features, params.at("visual_proj_w"),
                                    params.at("visual_proj_b"));
  Tensor<float> lat =
      encode_latency(l, l_min, params, cfg.latency_code_dim);
  const size_t n = vis.rows() + query_ids.size() + 1;
  if (n > static_cast<size_t>(cfg.max_seq_len))
    throw std::invalid_argument("sequence too long");
  out.rows = Tensor<float>::zeros({n, (size_t)cfg.d_model});
  size_t pos = 0;
  for (size_t i = 0; i < vis.rows(); ++i, ++pos)
    std::copy(vis.row_ptr(i), vis.row_ptr(i) + cfg.d_model,
              out.rows.row_ptr(pos));
  if (!query_ids.empty()) {
    Tensor<float> q = embedding_lookup(params.at("tok_embed"), query_ids);
    for (size_t i = 0; i < q.rows(); ++i, ++pos)
      std::copy(q.row_ptr(i), q.row_ptr(i) + cfg.d_model,
                out.rows.row_ptr(pos));
  }
  std::copy(lat.data.begin(), lat.data.end(), out.rows.row_ptr(pos));
  out.layout.latency_pos = static_cast<int>(pos);
  out.layout.total_rows = static_cast<int>(n);
  const Tensor<float>& pe = params.at("pos_embed");
  for (size_t i = 0; i < n; ++i)
    for (int j = 0; j < cfg.d_model; ++j) out.rows.at(i, j) += pe.at(i, j);
  return out;
}

struct ScheduleResult {
  std::vector<double> logits;
  ExecutionPlan plan;
};

// First-half forward, scheduler head, greedy plan. The session is left ready
// for resume_prefill(plan).
inline ScheduleResult schedule(InferenceSession& session,
                               const ParamStore<float>& params,
                               const PromptRows& prompt, const CostModel& cm,
                               double l) {
  Tensor<float> lat_hidden =
      session.prefill_first_half(prompt.rows, prompt.layout.latency_pos);
  Tensor<float> logits = scheduler_logits(lat_hidden, params);
  ScheduleResult out;
  out.logits = logits_to_vec(logits);
  out.plan = argmax_plan(out.logits, l, cm);
  return out;
}

struct GenerateResult {
  std::vector<int> tokens;
  ExecutionPlan plan;
  std::vector<double> sched_logits;
};

// Greedy decode under the scheduler's most probable plan; stops at eos or
// max_len tokens.
inline GenerateResult generate(const ModelConfig& cfg,
                               const ParamStore<float>& params,
                               const CostModel& cm, const Tensor<float>& features,
                               const std::vector<int>& query_ids, double l,
                               int eos_id, int max_len,
                               bool keep_attention = false,
                               std::vector<std::vector<Tensor<float>>>*
                                   attention_out = nullptr) {
  PromptRows prompt =
      build_prompt_rows(cfg, params, features, query_ids, l, cm.min_budget());
  InferenceSession session(cfg, params, keep_attention);
  ScheduleResult sched = schedule(session, params, prompt, cm, l);
  PrefillResult pre = session.resume_prefill(sched.plan);
  if (attention_out) *attention_out = pre.attention;

  GenerateResult out;
  out.plan = sched.plan;
  out.sched_logits = sched.logits;
  Tensor<float> logits = pre.last_logits;
  for (int step = 0; step < max_len; ++step) {
    int best = 0;
    for (int j = 1; j < cfg.vocab_size; ++j)
      if (logits.data[j] > logits.data[best]) best = j;
    if (best == eos_id) break;
    out.tokens.push_back(best);
    if (step + 1 < max_len) logits = session.decode_step(best, sched.plan);
  }
  return out;
}

// Greedy decode under an externally fixed plan (identity-configuration and
// oracle comparisons).
inline std::vector<int> generate_with_plan(const ModelConfig& cfg,
                                           const ParamStore<float>& params,
                                           const Tensor<float>& features,
                                           const std::vector<int>& query_ids,
                                           double l, double l_min,
                                           const ExecutionPlan& plan,
                                           int eos_id, int max_len) {
  PromptRows prompt =
      build_prompt_rows(cfg, params, features, query_ids, l, l_min);
  InferenceSession session(cfg, params);
  PrefillResult pre =
      session.prefill(prompt.rows, plan, prompt.layout.latency_pos);
  std::vector<int> tokens;
  Tensor<float> logits = pre.last_logits;
  for (int step = 0; step < max_len; ++step) {
    int best = 0;
    for (int j = 1; j < cfg.vocab_size; ++j)
      if (logits.data[j] > logits.data[best]) best = j;
    if (best == eos_id) break;
    tokens.push_back(best);
    if (step + 1 < max_len) logits = session.decode_step(best, plan);
  }
  return tokens;
}

// Teacher-forced NLL of the gold answer under a fixed plan: prefill over
// [prompt | answer] and average the answer-position cross entropy.
inline double score_plan_nll(const ModelConfig& cfg,
                             const ParamStore<float>& params,
                             const Tensor<float>& features,
                             const std::vector<int>& query_ids,
                             const std::vector<int>& answer_ids, double l,
                             double l_min, const ExecutionPlan& plan) {
  PromptRows prompt =
      build_prompt_rows(cfg, params, features, query_ids, l, l_min);
  const size_t n = prompt.rows.rows() + answer_ids.size();
  Tensor<float> rows = Tensor<float>::zeros({n, (size_t)cfg.d_model});
  std::copy(prompt.rows.data.begin(), prompt.rows.data.end(),
            rows.data.begin());
  Tensor<float> ans = embed_text(answer_ids, params.at("tok_embed"),
                                 params.at("pos_embed"), prompt.rows.rows());
  std::copy(ans.data.begin(), ans.data.end(),
            rows.data.begin() + prompt.rows.size());
  InferenceSession session(cfg, params);
  PrefillResult pre = session.prefill(rows, plan, prompt.layout.latency_pos);
  Tensor<float> pred = Tensor<float>::zeros(
      {answer_ids.size(), (size_t)cfg.vocab_size});
  for (size_t i = 0; i < answer_ids.size(); ++i)
    std::copy(pre.all_logits.row_ptr(prompt.layout.latency_pos + i),
              pre.all_logits.row_ptr(prompt.layout.latency_pos + i) +
                  cfg.vocab_size,
              pred.row_ptr(i));
  return cross_entropy(pred, answer_ids);
}

}  // namespace elastic
