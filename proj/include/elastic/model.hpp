#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "elastic/graph.hpp"
#include "elastic/kernels.hpp"
#include "elastic/rng.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

enum class SwitchDesign { LayerLevel, HeadLevel };

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 128;
  int vocab_size = 32;
  int n_visual_tokens = 16;
  int d_feat = 16;
  int max_seq_len = 64;
  SwitchDesign switch_design = SwitchDesign::LayerLevel;
  int switchable_start_layer = -1;  // -1: n_layers / 2
  // Accounting-only flag: a gated (three-matrix) MLP in the FLOPs formulas.
  // The executable toy model always uses the two-matrix MLP.
  bool mlp_gated = false;
  int latency_code_dim = 256;

  int split_layer() const {
    return switchable_start_layer < 0 ? n_layers / 2 : switchable_start_layer;
  }
  int head_dim() const { return d_model / n_heads; }
  int mlp_group_dim() const { return d_mlp / n_heads; }

  void validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_mlp <= 0 ||
        vocab_size <= 0)
      throw std::invalid_argument("config: dimensions must be positive");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("config: d_model not divisible by n_heads");
    if (d_mlp % n_heads != 0)
      throw std::invalid_argument("config: d_mlp not divisible by n_heads");
    const int s = split_layer();
    if (s <= 0 || s >= n_layers)
      throw std::invalid_argument(
          "config: switchable_start_layer must be in (0, n_layers)");
  }
};

enum class SwitchKind { Block, AttnHead, MlpGroup };

struct SwitchDescriptor {
  int switch_id;
  SwitchKind kind;
  int layer_index;
  int group_index;  // head / MLP-group index; 0 for Block switches
};

struct SwitchTopology {
  std::vector<SwitchDescriptor> descriptors;
  int K = 0;

  static SwitchTopology build(const ModelConfig& cfg) {
    cfg.validate();
    SwitchTopology t;
    const int start = cfg.split_layer();
    int id = 0;
    for (int layer = start; layer < cfg.n_layers; ++layer) {
      if (cfg.switch_design == SwitchDesign::LayerLevel) {
        t.descriptors.push_back({id++, SwitchKind::Block, layer, 0});
      } else {
        for (int h = 0; h < cfg.n_heads; ++h)
          t.descriptors.push_back({id++, SwitchKind::AttnHead, layer, h});
        for (int g = 0; g < cfg.n_heads; ++g)
          t.descriptors.push_back({id++, SwitchKind::MlpGroup, layer, g});
      }
    }
    t.K = id;
    return t;
  }
};

struct ExecutionPlan {
  std::vector<uint8_t> bits;

  static ExecutionPlan ones(int k) {
    ExecutionPlan p;
    p.bits.assign(k, 1);
    return p;
  }
  static ExecutionPlan zeros(int k) {
    ExecutionPlan p;
    p.bits.assign(k, 0);
    return p;
  }
  size_t size() const { return bits.size(); }
  int popcount() const {
    int n = 0;
    for (uint8_t b : bits) n += b;
    return n;
  }
  bool operator==(const ExecutionPlan& o) const { return bits == o.bits; }
};

// Named parameter tensors in a stable order (checkpoint layout, Adam slots
// and finite-difference sweeps all iterate this order).
template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Tensor<T>>> items;
  std::map<std::string, size_t> index;

  void add(const std::string& name, Tensor<T> t) {
    index[name] = items.size();
    items.emplace_back(name, std::move(t));
  }
  Tensor<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end())
      throw std::out_of_range("param not found: " + name);
    return items[it->second].second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw std::out_of_range("param not found: " + name);
    return items[it->second].second;
  }
  bool has(const std::string& name) const { return index.count(name) > 0; }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (auto& [name, t] : items) out.add(name, t.template cast<U>());
    return out;
  }
};

inline std::vector<std::pair<std::string, std::vector<size_t>>> param_layout(
    const ModelConfig& cfg) {
  const size_t d = cfg.d_model, dm = cfg.d_mlp, v = cfg.vocab_size;
  const int K = SwitchTopology::build(cfg).K;
  std::vector<std::pair<std::string, std::vector<size_t>>> layout;
  layout.push_back({"tok_embed", {v, d}});
  layout.push_back({"pos_embed", {(size_t)cfg.max_seq_len, d}});
  layout.push_back({"visual_proj_w", {(size_t)cfg.d_feat, d}});
  layout.push_back({"visual_proj_b", {1, d}});
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    layout.push_back({p + "attn_ln_g", {1, d}});
    layout.push_back({p + "attn_ln_b", {1, d}});
    layout.push_back({p + "wq", {d, d}});
    layout.push_back({p + "wk", {d, d}});
    layout.push_back({p + "wv", {d, d}});
    layout.push_back({p + "wo", {d, d}});
    layout.push_back({p + "mlp_ln_g", {1, d}});
    layout.push_back({p + "mlp_ln_b", {1, d}});
    layout.push_back({p + "w_up", {d, dm}});
    layout.push_back({p + "w_down", {dm, d}});
  }
  layout.push_back({"final_ln_g", {1, d}});
  layout.push_back({"final_ln_b", {1, d}});
  layout.push_back({"lm_head", {d, v}});
  // Scheduler side (phi): latency encoder + linear head.
  layout.push_back({"lat_w1", {(size_t)cfg.latency_code_dim, d}});
  layout.push_back({"lat_b1", {1, d}});
  layout.push_back({"lat_ln_g", {1, d}});
  layout.push_back({"lat_ln_b", {1, d}});
  layout.push_back({"lat_w2", {d, d}});
  layout.push_back({"lat_b2", {1, d}});
  layout.push_back({"sched_w", {d, (size_t)K}});
  layout.push_back({"sched_b", {1, (size_t)K}});
  return layout;
}

inline bool is_scheduler_param(const std::string& name) {
  return name.rfind("lat_", 0) == 0 || name.rfind("sched_", 0) == 0;
}

inline ParamStore<float> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamStore<float> ps;
  for (auto& [name, shape] : param_layout(cfg)) {
    Tensor<float> t = Tensor<float>::zeros(shape);
    const bool is_gain = name.find("ln_g") != std::string::npos;
    const bool is_bias = name.find("_b") != std::string::npos ||
                         name.find("ln_b") != std::string::npos;
    // Scheduler head starts at zero so initial plans are uniform.
    const bool is_sched_head = name.rfind("sched_", 0) == 0;
    if (is_gain) {
      for (float& v : t.data) v = 1.0f;
    } else if (is_bias || is_sched_head) {
      // stay zero
    } else {
      for (float& v : t.data) v = static_cast<float>(rng.normal() * 0.02);
    }
    ps.add(name, std::move(t));
  }
  return ps;
}

// ---- prompt construction (shared by the training graph and inference) ----

struct PromptLayout {
  int latency_pos = 0;   // index of the latency token row
  int total_rows = 0;    // prompt rows (visual + query + latency)
};

// Embeds the visual features through the learned linear projector.
template <typename T>
Tensor<T> encode_visual(const Tensor<T>& features, const Tensor<T>& proj_w,
                        const Tensor<T>& proj_b) {
  if (features.cols() != proj_w.rows())
    throw std::invalid_argument("encode_visual: feature dim " +
                                features.shape_str() + " vs projector " +
                                proj_w.shape_str());
  Tensor<T> out = matmul(features, proj_w);
  for (size_t r = 0; r < out.rows(); ++r)
    for (size_t c = 0; c < out.cols(); ++c) out.at(r, c) += proj_b.data[c];
  return out;
}

// Text rows: embedding table lookup plus learned absolute positions starting
// at `pos_offset`.
template <typename T>
Tensor<T> embed_text(const std::vector<int>& ids, const Tensor<T>& tok_embed,
                     const Tensor<T>& pos_embed, size_t pos_offset) {
  Tensor<T> rows = embedding_lookup(tok_embed, ids);
  if (pos_offset + ids.size() > pos_embed.rows())
    throw std::out_of_range("embed_text: sequence too long");
  for (size_t i = 0; i < ids.size(); ++i)
    for (size_t c = 0; c < rows.cols(); ++c)
      rows.at(i, c) += pos_embed.at(pos_offset + i, c);
  return rows;
}

// ---- differentiable forward (training path) ----

template <typename T>
struct VarStore {
  std::vector<std::pair<std::string, ag::Var<T>>> items;
  std::map<std::string, size_t> index;

  static VarStore leaves(const ParamStore<T>& ps) {
    VarStore vs;
    for (auto& [name, t] : ps.items) {
      vs.index[name] = vs.items.size();
      vs.items.emplace_back(name, ag::Var<T>::leaf(t));
    }
    return vs;
  }
  const ag::Var<T>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end())
      throw std::out_of_range("var not found: " + name);
    return items[it->second].second;
  }
};

// One pre-LN transformer block on the graph. `gates` is an optional row of
// switch activations; descriptors map (layer, head/group) to gate indices.
template <typename T>
ag::Var<T> block_forward_graph(const ModelConfig& cfg, const VarStore<T>& vars,
                               int layer, ag::Var<T> x,
                               const ag::Var<T>* gates,
                               const SwitchTopology* topo) {
  const std::string p = "layers." + std::to_string(layer) + ".";
  const size_t n = x.value().rows();
  const size_t dh = cfg.head_dim();
  const T scale_f = T(1) / std::sqrt(T(dh));

  // Gate lookup for this layer (only meaningful above the split layer).
  auto gate_index = [&](SwitchKind kind, int group) -> int {
    if (!gates) return -1;
    for (const auto& d : topo->descriptors)
      if (d.kind == kind && d.layer_index == layer && d.group_index == group)
        return d.switch_id;
    return -1;
  };

  // Attention sublayer.
  ag::Var<T> xn = ag::layer_norm(x, vars.at(p + "attn_ln_g"),
                                 vars.at(p + "attn_ln_b"));
  ag::Var<T> q = ag::matmul(xn, vars.at(p + "wq"));
  ag::Var<T> k = ag::matmul(xn, vars.at(p + "wk"));
  ag::Var<T> v = ag::matmul(xn, vars.at(p + "wv"));

  // Causal mask as an additive constant.
  Tensor<T> mask = Tensor<T>::zeros({n, n});
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) mask.at(i, j) = T(-1e30);

  std::vector<ag::Var<T>> heads;
  for (int h = 0; h < cfg.n_heads; ++h) {
    ag::Var<T> qh = ag::slice_cols(q, h * dh, dh);
    ag::Var<T> kh = ag::slice_cols(k, h * dh, dh);
    ag::Var<T> vh = ag::slice_cols(v, h * dh, dh);
    ag::Var<T> scores = ag::scale(ag::matmul_nt_op(qh, kh), scale_f);
    ag::Var<T> probs = ag::softmax_rows(ag::add_const(scores, mask));
    ag::Var<T> ctx = ag::matmul(probs, vh);
    const int gi = gate_index(SwitchKind::AttnHead, h);
    if (gi >= 0) ctx = ag::scale_by_entry(ctx, *gates, gi);
    heads.push_back(ctx);
  }
  ag::Var<T> attn_out = ag::matmul(ag::concat_cols(heads), vars.at(p + "wo"));
  const int gblock = gate_index(SwitchKind::Block, 0);
  if (gblock >= 0) attn_out = ag::scale_by_entry(attn_out, *gates, gblock);
  x = ag::add(x, attn_out);

  // MLP sublayer.
  ag::Var<T> mn = ag::layer_norm(x, vars.at(p + "mlp_ln_g"),
                                 vars.at(p + "mlp_ln_b"));
  ag::Var<T> hidden = ag::gelu(ag::matmul(mn, vars.at(p + "w_up")));
  if (gates && cfg.switch_design == SwitchDesign::HeadLevel) {
    const size_t gd = cfg.mlp_group_dim();
    std::vector<ag::Var<T>> groups;
    for (int g = 0; g < cfg.n_heads; ++g) {
      ag::Var<T> part = ag::slice_cols(hidden, g * gd, gd);
      const int gi = gate_index(SwitchKind::MlpGroup, g);
      if (gi >= 0) part = ag::scale_by_entry(part, *gates, gi);
      groups.push_back(part);
    }
    hidden = ag::concat_cols(groups);
  }
  ag::Var<T> mlp_out = ag::matmul(hidden, vars.at(p + "w_down"));
  if (gblock >= 0) mlp_out = ag::scale_by_entry(mlp_out, *gates, gblock);
  return ag::add(x, mlp_out);
}

// Builds prompt+answer rows as a graph node: [visual | query | latency | answer].
// The latency token row is supplied by the caller (scheduler module).
template <typename T>
struct SequenceGraph {
  ag::Var<T> rows;       // [n, d] input embeddings
  PromptLayout layout;   // latency token position
  std::vector<int> answer_ids;
};

template <typename T>
SequenceGraph<T> build_sequence_graph(const ModelConfig& cfg,
                                      const VarStore<T>& vars,
                                      const Tensor<T>& features,
                                      const std::vector<int>& query_ids,
                                      ag::Var<T> latency_token,
                                      const std::vector<int>& answer_ids) {
  const size_t n_vis = features.rows();
  const size_t n = n_vis + query_ids.size() + 1 + answer_ids.size();
  if (n > static_cast<size_t>(cfg.max_seq_len))
    throw std::invalid_argument("sequence too long: " + std::to_string(n) +
                                " > max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  ag::Var<T> vis =
      ag::matmul(ag::Var<T>::constant(features), vars.at("visual_proj_w"));
  ag::Var<T> bias_mat = [&] {
    std::vector<ag::Var<T>> reps(n_vis, vars.at("visual_proj_b"));
    return ag::concat_rows(reps);
  }();
  vis = ag::add(vis, bias_mat);

  std::vector<ag::Var<T>> parts = {vis};
  if (!query_ids.empty())
    parts.push_back(ag::gather_rows(vars.at("tok_embed"), query_ids));
  parts.push_back(latency_token);
  if (!answer_ids.empty())
    parts.push_back(ag::gather_rows(vars.at("tok_embed"), answer_ids));
  ag::Var<T> rows = ag::concat_rows(parts);

  std::vector<int> positions(n);
  for (size_t i = 0; i < n; ++i) positions[i] = static_cast<int>(i);
  rows = ag::add(rows, ag::gather_rows(vars.at("pos_embed"), positions));

  SequenceGraph<T> sg;
  sg.rows = rows;
  sg.layout.latency_pos = static_cast<int>(n_vis + query_ids.size());
  sg.layout.total_rows = static_cast<int>(n);
  sg.answer_ids = answer_ids;
  return sg;
}

// Runs layers [0, split) and returns the full hidden state.
template <typename T>
ag::Var<T> first_half_graph(const ModelConfig& cfg, const VarStore<T>& vars,
                            ag::Var<T> x) {
  for (int layer = 0; layer < cfg.split_layer(); ++layer)
    x = block_forward_graph<T>(cfg, vars, layer, x, nullptr, nullptr);
  return x;
}

// Runs layers [split, n_layers) under the gates, applies the final norm and
// returns NLL of the answer tokens (mean over answer positions).
template <typename T>
ag::Var<T> second_half_nll_graph(const ModelConfig& cfg,
                                 const VarStore<T>& vars,
                                 const SwitchTopology& topo, ag::Var<T> x,
                                 const ag::Var<T>& gates,
                                 const PromptLayout& layout,
                                 const std::vector<int>& answer_ids) {
  if (answer_ids.empty())
    throw std::invalid_argument("second_half_nll_graph: empty answer");
  for (int layer = cfg.split_layer(); layer < cfg.n_layers; ++layer)
    x = block_forward_graph(cfg, vars, layer, x, &gates, &topo);
  x = ag::layer_norm(x, vars.at("final_ln_g"), vars.at("final_ln_b"));
  // Positions latency_pos .. latency_pos + |answer| - 1 predict the answer.
  ag::Var<T> pred = ag::slice_rows(x, layout.latency_pos, answer_ids.size());
  ag::Var<T> logits = ag::matmul(pred, vars.at("lm_head"));
  return ag::cross_entropy(logits, answer_ids);
}

// ---- inference path (plain float math, KV cache, plan-aware) ----

struct PrefillResult {
  Tensor<float> last_logits;        // [1, vocab]
  Tensor<float> latency_hidden;     // [1, d] at the split layer
  Tensor<float> all_logits;        // [n, vocab] logits at every position (for scoring)
  // attention[layer][head] rows sum to 1; row i attends over 0..i.
  std::vector<std::vector<Tensor<float>>> attention;
};

class InferenceSession {
 public:
  InferenceSession(const ModelConfig& cfg, const ParamStore<float>& params,
                   bool keep_attention = false)
      : cfg_(cfg),
        params_(&params),
        topo_(SwitchTopology::build(cfg)),
        keep_attention_(keep_attention) {
    cfg.validate();
    kv_k_.resize(cfg.n_layers);
    kv_v_.resize(cfg.n_layers);
  }

  const SwitchTopology& topology() const { return topo_; }

  // Full prefill under a fixed plan. `rows` are input embeddings [n, d].
  PrefillResult prefill(const Tensor<float>& rows, const ExecutionPlan& plan,
                        int latency_pos) {
    check_plan(plan);
    plan_ = plan;
    plan_set_ = true;
    seq_len_ = 0;
    for (auto& t : kv_k_) t.clear();
    for (auto& t : kv_v_) t.clear();
    attention_.assign(cfg_.n_layers, {});

    Tensor<float> x = rows;
    PrefillResult out;
    for (int layer = 0; layer < cfg_.n_layers; ++layer) {
      if (layer == cfg_.split_layer()) {
        out.latency_hidden = Tensor<float>::zeros({1, (size_t)cfg_.d_model});
        std::copy(x.row_ptr(latency_pos), x.row_ptr(latency_pos) + cfg_.d_model,
                  out.latency_hidden.data.begin());
      }
      x = run_block(layer, x, /*prefill=*/true);
    }
    seq_len_ = rows.rows();
    Tensor<float> xn = layer_norm(x, params_->at("final_ln_g"),
                                  params_->at("final_ln_b"));
    out.all_logits = matmul(xn, params_->at("lm_head"));
    const size_t v = cfg_.vocab_size;
    out.last_logits = Tensor<float>::zeros({1, v});
    std::copy(out.all_logits.row_ptr(rows.rows() - 1),
              out.all_logits.row_ptr(rows.rows() - 1) + v,
              out.last_logits.data.begin());
    out.attention = attention_;
    return out;
  }

  // Runs only layers [0, split) so the scheduler can read the latency token
  // before a plan exists. Follow with resume_prefill().
  Tensor<float> prefill_first_half(const Tensor<float>& rows, int latency_pos) {
    seq_len_ = 0;
    plan_set_ = false;
    for (auto& t : kv_k_) t.clear();
    for (auto& t : kv_v_) t.clear();
    attention_.assign(cfg_.n_layers, {});
    Tensor<float> x = rows;
    for (int layer = 0; layer < cfg_.split_layer(); ++layer)
      x = run_block(layer, x, true);
    pending_x_ = x;
    Tensor<float> lat = Tensor<float>::zeros({1, (size_t)cfg_.d_model});
    std::copy(x.row_ptr(latency_pos), x.row_ptr(latency_pos) + cfg_.d_model,
              lat.data.begin());
    return lat;
  }

  PrefillResult resume_prefill(const ExecutionPlan& plan) {
    check_plan(plan);
    plan_ = plan;
    plan_set_ = true;
    Tensor<float> x = pending_x_;
    for (int layer = cfg_.split_layer(); layer < cfg_.n_layers; ++layer)
      x = run_block(layer, x, true);
    seq_len_ = x.rows();
    Tensor<float> xn = layer_norm(x, params_->at("final_ln_g"),
                                  params_->at("final_ln_b"));
    PrefillResult out;
    out.all_logits = matmul(xn, params_->at("lm_head"));
    const size_t v = cfg_.vocab_size;
    out.last_logits = Tensor<float>::zeros({1, v});
    std::copy(out.all_logits.row_ptr(x.rows() - 1),
              out.all_logits.row_ptr(x.rows() - 1) + v,
              out.last_logits.data.begin());
    out.attention = attention_;
    return out;
  }

  // One autoregressive step; the plan must equal the prefill plan.
  Tensor<float> decode_step(int token_id, const ExecutionPlan& plan) {
    if (!plan_set_) throw std::logic_error("decode_step before prefill");
    if (!(plan == plan_))
      throw std::invalid_argument("plan changed mid-generation");
    const size_t pos = seq_len_;
    Tensor<float> x = embed_text({token_id}, params_->at("tok_embed"),
                                 params_->at("pos_embed"), pos);
    for (int layer = 0; layer < cfg_.n_layers; ++layer)
      x = run_block(layer, x, false);
    seq_len_ += 1;
    Tensor<float> xn = layer_norm(x, params_->at("final_ln_g"),
                                  params_->at("final_ln_b"));
    return matmul(xn, params_->at("lm_head"));
  }

  size_t seq_len() const { return seq_len_; }

 private:
  void check_plan(const ExecutionPlan& plan) const {
    if (plan.size() != static_cast<size_t>(topo_.K))
      throw std::invalid_argument("plan length " + std::to_string(plan.size()) +
                                  " != K " + std::to_string(topo_.K));
  }

  bool block_enabled(int layer) const {
    if (layer < cfg_.split_layer()) return true;
    if (cfg_.switch_design != SwitchDesign::LayerLevel) return true;
    for (const auto& d : topo_.descriptors)
      if (d.kind == SwitchKind::Block && d.layer_index == layer)
        return plan_.bits[d.switch_id] != 0;
    return true;
  }

  bool unit_enabled(SwitchKind kind, int layer, int group) const {
    if (layer < cfg_.split_layer()) return true;
    if (cfg_.switch_design != SwitchDesign::HeadLevel) return true;
    for (const auto& d : topo_.descriptors)
      if (d.kind == kind && d.layer_index == layer && d.group_index == group)
        return plan_.bits[d.switch_id] != 0;
    return true;
  }

  // Processes `x` (one or more new rows) through one block, appending to the
  // KV cache. Disabled blocks are skipped entirely (exact bypass).
  Tensor<float> run_block(int layer, const Tensor<float>& x, bool prefill) {
    if (!block_enabled(layer)) return x;
    const std::string p = "layers." + std::to_string(layer) + ".";
    const size_t d = cfg_.d_model;
    const size_t dh = cfg_.head_dim();
    const size_t n_new = x.rows();
    const size_t base = kv_k_[layer].size() / d;

    Tensor<float> xn = layer_norm(x, params_->at(p + "attn_ln_g"),
                                  params_->at(p + "attn_ln_b"));
    Tensor<float> q = matmul(xn, params_->at(p + "wq"));
    Tensor<float> k = matmul(xn, params_->at(p + "wk"));
    Tensor<float> v = matmul(xn, params_->at(p + "wv"));
    kv_k_[layer].insert(kv_k_[layer].end(), k.data.begin(), k.data.end());
    kv_v_[layer].insert(kv_v_[layer].end(), v.data.begin(), v.data.end());
    const size_t total = base + n_new;

    Tensor<float> ctx = Tensor<float>::zeros({n_new, d});
    const float scale_f = 1.0f / std::sqrt(static_cast<float>(dh));
    std::vector<Tensor<float>> layer_attn;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const bool on = unit_enabled(SwitchKind::AttnHead, layer, h);
      if (!on && !keep_attention_) continue;
      Tensor<float> scores = Tensor<float>::zeros({n_new, total});
      for (size_t i = 0; i < n_new; ++i) {
        const float* qrow = q.row_ptr(i) + h * dh;
        const size_t visible = base + i + 1;  // causal
        float* srow = scores.row_ptr(i);
        for (size_t j = 0; j < total; ++j) {
          if (j >= visible) {
            srow[j] = -1e30f;
            continue;
          }
          const float* krow = kv_k_[layer].data() + j * d + h * dh;
          float acc = 0.0f;
          for (size_t t = 0; t < dh; ++t) acc += qrow[t] * krow[t];
          srow[j] = acc * scale_f;
        }
      }
      Tensor<float> probs = softmax_rows(scores);
      if (keep_attention_ && prefill) layer_attn.push_back(probs);
      if (!on) continue;
      for (size_t i = 0; i < n_new; ++i) {
        float* crow = ctx.row_ptr(i) + h * dh;
        const float* prow = probs.row_ptr(i);
        const size_t visible = base + i + 1;
        for (size_t j = 0; j < visible; ++j) {
          const float pv = prow[j];
          const float* vrow = kv_v_[layer].data() + j * d + h * dh;
          for (size_t t = 0; t < dh; ++t) crow[t] += pv * vrow[t];
        }
      }
    }
    if (keep_attention_ && prefill) attention_[layer] = std::move(layer_attn);
    Tensor<float> attn_out = matmul(ctx, params_->at(p + "wo"));
    Tensor<float> x1 = x;
    for (size_t i = 0; i < x1.size(); ++i) x1.data[i] += attn_out.data[i];

    Tensor<float> mn = layer_norm(x1, params_->at(p + "mlp_ln_g"),
                                  params_->at(p + "mlp_ln_b"));
    Tensor<float> hidden = gelu(matmul(mn, params_->at(p + "w_up")));
    if (cfg_.switch_design == SwitchDesign::HeadLevel &&
        layer >= cfg_.split_layer()) {
      const size_t gd = cfg_.mlp_group_dim();
      for (int g = 0; g < cfg_.n_heads; ++g) {
        if (unit_enabled(SwitchKind::MlpGroup, layer, g)) continue;
        for (size_t i = 0; i < hidden.rows(); ++i)
          std::fill(hidden.row_ptr(i) + g * gd, hidden.row_ptr(i) + (g + 1) * gd,
                    0.0f);
      }
    }
    Tensor<float> mlp_out = matmul(hidden, params_->at(p + "w_down"));
    for (size_t i = 0; i < x1.size(); ++i) x1.data[i] += mlp_out.data[i];
    return x1;
  }

  ModelConfig cfg_;
  const ParamStore<float>* params_;
  SwitchTopology topo_;
  bool keep_attention_;
  ExecutionPlan plan_;
  bool plan_set_ = false;
  size_t seq_len_ = 0;
  Tensor<float> pending_x_;
  std::vector<std::vector<float>> kv_k_, kv_v_;
  std::vector<std::vector<Tensor<float>>> attention_;
};

}  // namespace elastic
