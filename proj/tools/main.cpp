#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "elastic/checkpoint.hpp"
#include "elastic/cost_model.hpp"
#include "elastic/dataset.hpp"
#include "elastic/eval.hpp"
#include "elastic/oracle_checks.hpp"
#include "elastic/training.hpp"

using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return json::parse(is);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path);
  os << text;
}

struct RunConfig {
  elastic::TaskSpec task;
  elastic::ModelConfig model;
  elastic::TrainConfig train;
};

RunConfig parse_run_config(const json& j) {
  RunConfig rc;
  rc.task = elastic::task_spec_from_json(j.value("task", json::object()));
  // A run config's "model" object overrides the task-derived defaults field
  // by field, so small experiments only list what they change.
  json model = elastic::model_config_to_json(elastic::default_model_config(rc.task));
  if (j.contains("model"))
    for (auto& [key, value] : j.at("model").items()) model[key] = value;
  rc.model = elastic::model_config_from_json(model);
  rc.train = elastic::train_config_from_json(j.value("train", json::object()));
  return rc;
}

struct LoadedCheckpoint {
  RunConfig rc;
  elastic::ParamStore<float> params;
};

LoadedCheckpoint load(const std::string& path) {
  elastic::Checkpoint ckpt = elastic::load_checkpoint(path);
  LoadedCheckpoint lc;
  lc.rc.task = elastic::task_spec_from_json(ckpt.config.at("task"));
  lc.rc.model = elastic::model_config_from_json(ckpt.config.at("model"));
  lc.rc.train = elastic::train_config_from_json(ckpt.config.at("train"));
  lc.params = std::move(ckpt.params);
  return lc;
}

std::vector<double> default_budget_grid() {
  return {0.5, 0.6, 0.65, 0.75, 0.85, 0.95, 1.0};
}

// The evaluation plan rule implied by how a checkpoint was trained.
elastic::PlanRule rule_for_arm(elastic::TrainArm arm) {
  switch (arm) {
    case elastic::TrainArm::Probabilistic:
      return elastic::PlanRule::BudgetedArgmax;
    case elastic::TrainArm::DeterministicHinge:
      return elastic::PlanRule::Threshold;
    case elastic::TrainArm::RandomUniform:
      return elastic::PlanRule::RandomSample;
    case elastic::TrainArm::BaseNoSwitches:
      return elastic::PlanRule::FullPlan;
  }
  return elastic::PlanRule::BudgetedArgmax;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"latency-adaptive transformer toolkit"};
  app.require_subcommand(1);

  // ---- train ----
  auto* train_cmd = app.add_subcommand("train", "train a model");
  std::string train_config_path, train_out = "run";
  int64_t train_seed = -1;
  train_cmd->add_option("--config", train_config_path, "run config JSON");
  train_cmd->add_option("--seed", train_seed, "override training seed");
  train_cmd->add_option("--out", train_out,
                        "output prefix (<out>.ckpt, <out>_log.csv)");

  // ---- evaluate / sweep ----
  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate at one budget");
  auto* sweep_cmd = app.add_subcommand("sweep", "evaluate across a budget grid");
  std::string eval_ckpt, eval_out, eval_rule_s, eval_arm_label;
  std::vector<double> eval_budgets;
  int eval_n = 200;
  uint64_t eval_seed = 1;
  for (CLI::App* c : {eval_cmd, sweep_cmd}) {
    c->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    c->add_option("--budget", eval_budgets, "budget(s) in [l_min, 1]");
    c->add_option("--n", eval_n, "number of eval samples");
    c->add_option("--seed", eval_seed, "eval seed");
    c->add_option("--rule", eval_rule_s,
                  "plan rule (default: inferred from the training arm)");
    c->add_option("--arm", eval_arm_label, "arm label for the sweep CSV");
    c->add_option("--out", eval_out, "output path (sweep: CSV)");
  }

  // ---- inspect ----
  auto* inspect_cmd = app.add_subcommand("inspect", "dump plan/attention JSON");
  std::string ins_ckpt, ins_out;
  int ins_index = 0;
  double ins_budget = 0.75;
  uint64_t ins_seed = 1;
  inspect_cmd->add_option("--checkpoint", ins_ckpt)->required();
  inspect_cmd->add_option("--index", ins_index, "eval sample index");
  inspect_cmd->add_option("--budget", ins_budget);
  inspect_cmd->add_option("--seed", ins_seed, "dataset seed");
  inspect_cmd->add_option("--out", ins_out, "output JSON path");

  // ---- flops ----
  auto* flops_cmd = app.add_subcommand("flops", "cost model numbers");
  std::string flops_ckpt;
  int flops_seq = 620;
  double flops_budget = -1.0;
  bool flops_7b = false;
  flops_cmd->add_option("--checkpoint", flops_ckpt,
                        "use this checkpoint's model config");
  flops_cmd->add_flag("--reference-7b", flops_7b, "use the 7B-class config");
  flops_cmd->add_option("--seq-len", flops_seq);
  flops_cmd->add_option("--budget", flops_budget,
                        "also report the argmax plan at this budget");

  // ---- oracle ----
  auto* oracle_cmd = app.add_subcommand("oracle", "brute-force verification");
  std::string oracle_check = "all";
  int oracle_vectors = 10, oracle_draws = 200000;
  uint64_t oracle_seed = 7;
  oracle_cmd->add_option("--check", oracle_check,
                         "all|set_prob|sampler_tv|gradient|surgery");
  oracle_cmd->add_option("--vectors", oracle_vectors);
  oracle_cmd->add_option("--draws", oracle_draws);
  oracle_cmd->add_option("--seed", oracle_seed);

  // ---- report ----
  auto* report_cmd = app.add_subcommand("report", "merge sweep CSVs");
  std::vector<std::string> report_inputs;
  std::string report_csv, report_md;
  report_cmd->add_option("inputs", report_inputs, "sweep CSV files")
      ->required();
  report_cmd->add_option("--out-csv", report_csv);
  report_cmd->add_option("--out-md", report_md);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      RunConfig rc = train_config_path.empty()
                         ? parse_run_config(json::object())
                         : parse_run_config(read_json_file(train_config_path));
      if (train_seed >= 0) rc.train.seed = static_cast<uint64_t>(train_seed);
      const std::vector<elastic::Sample> data = elastic::make_synthetic_dataset(
          rc.task, rc.train.n_train, rc.train.seed, elastic::Split::Train);
      elastic::TrainResult result = elastic::train(rc.model, rc.train, data);
      const json echo = {{"model", elastic::model_config_to_json(rc.model)},
                         {"task", elastic::task_spec_to_json(rc.task)},
                         {"train", elastic::train_config_to_json(rc.train)}};
      elastic::save_checkpoint(train_out + ".ckpt", echo, result.params);
      elastic::write_training_log(train_out + "_log.csv", result.log);
      json summary = {{"checkpoint", train_out + ".ckpt"},
                      {"log", train_out + "_log.csv"},
                      {"steps", rc.train.steps}};
      if (!result.log.empty()) summary["final_loss"] = result.log.back().loss;
      std::cout << summary.dump(2) << "\n";
    } else if (*eval_cmd || *sweep_cmd) {
      LoadedCheckpoint lc = load(eval_ckpt);
      std::vector<double> budgets =
          eval_budgets.empty() ? default_budget_grid() : eval_budgets;
      if (*eval_cmd && eval_budgets.empty()) budgets = {1.0};
      const elastic::PlanRule rule =
          eval_rule_s.empty() ? rule_for_arm(lc.rc.train.arm)
                              : elastic::plan_rule_from_name(eval_rule_s);
      const std::string arm_label = eval_arm_label.empty()
                                        ? elastic::arm_name(lc.rc.train.arm)
                                        : eval_arm_label;
      const std::vector<elastic::Sample> samples =
          elastic::make_synthetic_dataset(lc.rc.task, eval_n, eval_seed,
                                          elastic::Split::Eval);
      elastic::SweepReport report = elastic::evaluate(
          lc.rc.model, lc.params, samples, budgets, eval_seed, rule);
      json rows = json::array();
      for (const auto& r : report.rows)
        rows.push_back({{"budget", r.budget},
                        {"n", r.n},
                        {"accuracy", r.accuracy},
                        {"success_rate", r.success_rate},
                        {"mean_utilization", r.mean_utilization},
                        {"mean_flops", r.mean_flops}});
      std::cout << json{{"arm", arm_label},
                        {"rule", elastic::plan_rule_name(rule)},
                        {"rows", rows}}
                       .dump(2)
                << "\n";
      if (!eval_out.empty())
        elastic::write_sweep_csv(eval_out, arm_label, report);
    } else if (*inspect_cmd) {
      LoadedCheckpoint lc = load(ins_ckpt);
      const std::vector<elastic::Sample> samples =
          elastic::make_synthetic_dataset(lc.rc.task, ins_index + 1, ins_seed,
                                          elastic::Split::Eval);
      const json dump =
          elastic::inspect(lc.rc.model, lc.params, samples.at(ins_index),
                           ins_budget);
      if (ins_out.empty()) {
        std::cout << dump.dump(2) << "\n";
      } else {
        write_text(ins_out, dump.dump(2) + "\n");
      }
    } else if (*flops_cmd) {
      elastic::ModelConfig cfg;
      if (!flops_ckpt.empty()) {
        cfg = load(flops_ckpt).rc.model;
      } else if (flops_7b) {
        cfg = elastic::reference_7b_config();
      } else {
        cfg = elastic::default_model_config(elastic::TaskSpec{});
      }
      const elastic::CostModel cm = elastic::CostModel::build(cfg, flops_seq);
      json out = {{"seq_len", flops_seq},
                  {"base_prefill_flops", cm.base_prefill_flops()},
                  {"fixed_flops", cm.fixed_flops()},
                  {"min_budget", cm.min_budget()},
                  {"num_switches", cm.num_switches()}};
      if (flops_budget > 0) {
        const elastic::ExecutionPlan plan = elastic::argmax_plan(
            std::vector<double>(cm.num_switches(), 0.0), flops_budget, cm);
        out["budget"] = flops_budget;
        out["plan_flops"] = cm.plan_flops(plan);
        out["flops_ratio"] = cm.plan_flops(plan) / cm.base_prefill_flops();
        out["active_switches"] = plan.popcount();
      }
      std::cout << out.dump(2) << "\n";
    } else if (*oracle_cmd) {
      json out;
      bool pass = true;
      auto want = [&](const std::string& name) {
        return oracle_check == "all" || oracle_check == name;
      };
      if (want("set_prob")) {
        elastic::CheckResult r = elastic::check_set_probability();
        out["set_prob"] = {{"pass", r.pass}, {"details", r.details}};
        pass = pass && r.pass;
      }
      if (want("sampler_tv")) {
        elastic::CheckResult r =
            elastic::check_sampler_tv(oracle_vectors, oracle_draws, oracle_seed);
        out["sampler_tv"] = {{"pass", r.pass}, {"details", r.details}};
        pass = pass && r.pass;
      }
      if (want("gradient")) {
        elastic::GradientCheck r = elastic::check_gradients(oracle_seed);
        out["gradient"] = {{"pass", r.pass},
                           {"max_rel_err_theta", r.max_rel_err_theta},
                           {"max_rel_err_phi", r.max_rel_err_phi}};
        pass = pass && r.pass;
      }
      if (want("surgery")) {
        elastic::CheckResult r = elastic::check_surgery(oracle_seed);
        out["surgery"] = {{"pass", r.pass}, {"details", r.details}};
        pass = pass && r.pass;
      }
      if (out.empty()) throw std::invalid_argument("unknown check: " + oracle_check);
      out["pass"] = pass;
      std::cout << out.dump(2) << "\n";
      return pass ? 0 : 1;
    } else if (*report_cmd) {
      elastic::MergedReport merged = elastic::merge_reports(report_inputs);
      if (!report_csv.empty()) write_text(report_csv, merged.csv);
      if (!report_md.empty()) write_text(report_md, merged.markdown);
      if (report_csv.empty() && report_md.empty())
        std::cout << merged.markdown;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
