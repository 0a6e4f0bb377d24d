#include "elastic/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "elastic/rng.hpp"
#include "elastic/scheduler.hpp"

namespace elastic {

std::string plan_rule_name(PlanRule rule) {
  switch (rule) {
    case PlanRule::BudgetedArgmax: return "budgeted_argmax";
    case PlanRule::Threshold: return "threshold";
    case PlanRule::RandomSample: return "random_sample";
    case PlanRule::FullPlan: return "full_plan";
  }
  throw std::logic_error("plan_rule_name: bad rule");
}

PlanRule plan_rule_from_name(const std::string& name) {
  if (name == "budgeted_argmax") return PlanRule::BudgetedArgmax;
  if (name == "threshold") return PlanRule::Threshold;
  if (name == "random_sample") return PlanRule::RandomSample;
  if (name == "full_plan") return PlanRule::FullPlan;
  throw std::invalid_argument("unknown plan rule: " + name);
}

namespace {

const CostModel& cost_model_for(std::map<size_t, CostModel>& cache,
                                const ModelConfig& cfg, size_t prompt_len) {
  auto it = cache.find(prompt_len);
  if (it == cache.end())
    it = cache.emplace(prompt_len, CostModel::build(cfg, prompt_len)).first;
  return it->second;
}

std::vector<int> decode_greedy(InferenceSession& session,
                               const Tensor<float>& first_logits,
                               const ExecutionPlan& plan, int vocab, int eos,
                               int max_len) {
  std::vector<int> tokens;
  Tensor<float> logits = first_logits;
  for (int step = 0; step < max_len; ++step) {
    int best = 0;
    for (int j = 1; j < vocab; ++j)
      if (logits.data[j] > logits.data[best]) best = j;
    if (best == eos) break;
    tokens.push_back(best);
    if (step + 1 < max_len) logits = session.decode_step(best, plan);
  }
  return tokens;
}

}  // namespace

SweepReport evaluate(const ModelConfig& cfg, const ParamStore<float>& params,
                     const std::vector<Sample>& samples,
                     std::vector<double> budgets, uint64_t seed, PlanRule rule,
                     std::vector<EvalRecord>* records) {
  cfg.validate();
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  std::sort(budgets.begin(), budgets.end());
  std::map<size_t, CostModel> cm_cache;
  const int K = SwitchTopology::build(cfg).K;
  Rng rng(Rng::derive(seed, 0xe7a1));

  SweepReport report;
  report.seed = seed;
  report.budgets = budgets;
  const int eos = cfg.vocab_size - 1;

  for (double l : budgets) {
    BudgetAggregate agg{};
    agg.budget = l;
    for (size_t si = 0; si < samples.size(); ++si) {
      const Sample& s = samples[si];
      const size_t prompt_len = s.features.rows() + s.query.size() + 1;
      const CostModel& cm = cost_model_for(cm_cache, cfg, prompt_len);
      check_budget_range(l, cm.min_budget());
      const int max_len = static_cast<int>(s.answer.size());

      ExecutionPlan plan;
      std::vector<int> tokens;
      switch (rule) {
        case PlanRule::BudgetedArgmax: {
          GenerateResult g = generate(cfg, params, cm, s.features, s.query, l,
                                      eos, max_len);
          plan = g.plan;
          tokens = g.tokens;
          break;
        }
        case PlanRule::FullPlan: {
          plan = ExecutionPlan::ones(K);
          tokens = generate_with_plan(cfg, params, s.features, s.query, l,
                                      cm.min_budget(), plan, eos, max_len);
          break;
        }
        case PlanRule::RandomSample: {
          plan = sample_plan(std::vector<double>(K, 0.0), l, cm, rng);
          tokens = generate_with_plan(cfg, params, s.features, s.query, l,
                                      cm.min_budget(), plan, eos, max_len);
          break;
        }
        case PlanRule::Threshold: {
          PromptRows prompt = build_prompt_rows(cfg, params, s.features,
                                                s.query, l, cm.min_budget());
          InferenceSession session(cfg, params);
          Tensor<float> lat_hidden = session.prefill_first_half(
              prompt.rows, prompt.layout.latency_pos);
          Tensor<float> logits = scheduler_logits(lat_hidden, params);
          plan = ExecutionPlan::zeros(K);
          for (int i = 0; i < K; ++i) plan.bits[i] = logits.data[i] >= 0.0f;
          PrefillResult pre = session.resume_prefill(plan);
          tokens = decode_greedy(session, pre.last_logits, plan,
                                 cfg.vocab_size, eos, max_len);
          break;
        }
      }

      std::vector<int> gold(s.answer.begin(), s.answer.end() - 1);
      const bool correct = tokens == gold;
      const double flops = cm.plan_flops(plan);
      const bool feasible = cm.is_feasible(plan, l);
      const double util = cm.utilization(plan, l);
      if (records)
        records->push_back({static_cast<int>(si), l, plan, flops, feasible,
                            util, correct, tokens});
      agg.n += 1;
      agg.accuracy += correct ? 1.0 : 0.0;
      agg.mean_flops += flops;
      agg.success_rate += feasible ? 1.0 : 0.0;
      agg.mean_utilization += util;
    }
    agg.accuracy = 100.0 * agg.accuracy / agg.n;
    agg.mean_flops /= agg.n;
    agg.success_rate = 100.0 * agg.success_rate / agg.n;
    agg.mean_utilization /= agg.n;
    report.rows.push_back(agg);
  }
  return report;
}

nlohmann::json inspect(const ModelConfig& cfg, const ParamStore<float>& params,
                       const Sample& sample, double budget) {
  const size_t prompt_len = sample.features.rows() + sample.query.size() + 1;
  const CostModel cm = CostModel::build(cfg, prompt_len);
  check_budget_range(budget, cm.min_budget());
  const SwitchTopology topo = SwitchTopology::build(cfg);
  const int eos = cfg.vocab_size - 1;

  std::vector<std::vector<Tensor<float>>> attention;
  GenerateResult g =
      generate(cfg, params, cm, sample.features, sample.query, budget, eos,
               static_cast<int>(sample.answer.size()),
               /*keep_attention=*/true, &attention);

  nlohmann::json plan_json = nlohmann::json::array();
  for (const auto& d : topo.descriptors) {
    const char* kind = d.kind == SwitchKind::Block
                           ? "block"
                           : d.kind == SwitchKind::AttnHead ? "attn_head"
                                                            : "mlp_group";
    plan_json.push_back({{"switch_id", d.switch_id},
                         {"kind", kind},
                         {"layer", d.layer_index},
                         {"group", d.group_index},
                         {"bit", int(g.plan.bits[d.switch_id])}});
  }

  // Attention of the latency token over the visual tokens, taken from the
  // last layer whose output feeds the scheduler.
  const int probe_layer = cfg.split_layer() - 1;
  const int lat_pos =
      static_cast<int>(sample.features.rows() + sample.query.size());
  nlohmann::json attn_json = nlohmann::json::array();
  nlohmann::json row_sums = nlohmann::json::array();
  for (const Tensor<float>& head : attention.at(probe_layer)) {
    nlohmann::json weights = nlohmann::json::array();
    for (size_t j = 0; j < sample.features.rows(); ++j)
      weights.push_back(head.at(lat_pos, j));
    attn_json.push_back(weights);
    double sum = 0.0;
    for (size_t j = 0; j < head.cols(); ++j) sum += head.at(lat_pos, j);
    row_sums.push_back(sum);
  }

  return {
      {"budget", budget},
      {"plan", plan_json},
      {"plan_flops", cm.plan_flops(g.plan)},
      {"feasible", cm.is_feasible(g.plan, budget)},
      {"utilization", cm.utilization(g.plan, budget)},
      {"scheduler_logits", g.sched_logits},
      {"latency_attention_layer", probe_layer},
      {"latency_attention", attn_json},
      {"latency_attention_row_sums", row_sums},
      {"generated", g.tokens},
      {"gold", sample.gold},
  };
}

namespace {

constexpr const char* kSweepHeader =
    "arm,seed,budget,n,accuracy,success_rate,mean_utilization,mean_flops";

}  // namespace

void write_sweep_csv(const std::string& path, const std::string& arm,
                     const SweepReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << kSweepHeader << "\n";
  char buf[256];
  for (const BudgetAggregate& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.4f,%d,%.4f,%.4f,%.6f,%.1f\n",
                  arm.c_str(), static_cast<unsigned long long>(report.seed),
                  r.budget, r.n, r.accuracy, r.success_rate,
                  r.mean_utilization, r.mean_flops);
    os << buf;
  }
}

MergedReport merge_reports(const std::vector<std::string>& csv_paths) {
  if (csv_paths.empty()) throw std::invalid_argument("report: no inputs");
  struct Row {
    std::string arm;
    unsigned long long seed;
    double budget;
    std::string rest;  // n,accuracy,success_rate,mean_utilization,mean_flops
  };
  std::vector<Row> rows;
  for (const std::string& path : csv_paths) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line != kSweepHeader)
      throw std::runtime_error("schema mismatch in " + path);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      Row r;
      std::string seed_s, budget_s;
      if (!std::getline(ls, r.arm, ',') || !std::getline(ls, seed_s, ',') ||
          !std::getline(ls, budget_s, ',') || !std::getline(ls, r.rest))
        throw std::runtime_error("malformed row in " + path + ": " + line);
      r.seed = std::stoull(seed_s);
      r.budget = std::stod(budget_s);
      rows.push_back(std::move(r));
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.arm != b.arm) return a.arm < b.arm;
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.budget < b.budget;
  });

  MergedReport out;
  std::ostringstream csv, md;
  csv << kSweepHeader << "\n";
  md << "| arm | seed | budget | n | accuracy (%) | success (%) | "
        "utilization | mean FLOPs |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (const Row& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%llu,%.4f,%s\n", r.arm.c_str(), r.seed,
                  r.budget, r.rest.c_str());
    csv << buf;
    std::istringstream ls(r.rest);
    std::string n, acc, succ, util, flops;
    std::getline(ls, n, ',');
    std::getline(ls, acc, ',');
    std::getline(ls, succ, ',');
    std::getline(ls, util, ',');
    std::getline(ls, flops, ',');
    std::snprintf(buf, sizeof(buf),
                  "| %s | %llu | %.4f | %s | %s | %s | %s | %s |\n",
                  r.arm.c_str(), r.seed, r.budget, n.c_str(), acc.c_str(),
                  succ.c_str(), util.c_str(), flops.c_str());
    md << buf;
  }
  out.csv = csv.str();
  out.markdown = md.str();
  return out;
}

}  // namespace elastic
