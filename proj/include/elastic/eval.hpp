#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "elastic/cost_model.hpp"
#include "elastic/dataset.hpp"
#include "elastic/model.hpp"
#include "elastic/runtime.hpp"

namespace elastic {

// How the plan is chosen at evaluation time. BudgetedArgmax is the scheduler's
// greedy most-probable feasible plan; Threshold matches the hinge-trained
// baseline (sigmoid at 0.5, no feasibility projection); RandomSample draws a
// feasible plan uniformly; FullPlan runs everything.
enum class PlanRule { BudgetedArgmax, Threshold, RandomSample, FullPlan };

std::string plan_rule_name(PlanRule rule);
PlanRule plan_rule_from_name(const std::string& name);

struct EvalRecord {
  int sample_id;
  double budget;
  ExecutionPlan plan;
  double plan_flops;
  bool feasible;
  double utilization;
  bool correct;
  std::vector<int> answer_ids;  // generated tokens (eos stripped)
};

struct BudgetAggregate {
  double budget;
  int n;
  double accuracy;           // percent
  double mean_flops;
  double success_rate;       // percent of feasible plans
  double mean_utilization;
};

struct SweepReport {
  std::vector<double> budgets;  // ascending
  std::vector<BudgetAggregate> rows;
  uint64_t seed = 0;
};

// Evaluates each sample at each budget; deterministic given seed. Throws if a
// budget lies outside [l_min, 1.0].
SweepReport evaluate(const ModelConfig& cfg, const ParamStore<float>& params,
                     const std::vector<Sample>& samples,
                     std::vector<double> budgets, uint64_t seed, PlanRule rule,
                     std::vector<EvalRecord>* records = nullptr);

// Numeric dump for one sample at one budget: plan bits annotated with their
// layer/head, scheduler logits, and the latency token's attention over the
// visual tokens at the last layer feeding the scheduler.
nlohmann::json inspect(const ModelConfig& cfg, const ParamStore<float>& params,
                       const Sample& sample, double budget);

// Sweep CSV schema: arm,seed,budget,n,accuracy,success_rate,mean_utilization,
// mean_flops (one row per budget).
void write_sweep_csv(const std::string& path, const std::string& arm,
                     const SweepReport& report);

// Merges sweep CSVs into one CSV plus a Markdown table, rows sorted by
// (arm, seed, budget). Pure function of its inputs.
struct MergedReport {
  std::string csv;
  std::string markdown;
};
MergedReport merge_reports(const std::vector<std::string>& csv_paths);

}  // namespace elastic
