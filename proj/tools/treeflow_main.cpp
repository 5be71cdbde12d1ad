#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "treeflow/harness.hpp"

namespace fs = std::filesystem;
using namespace treeflow;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f.good()) throw std::runtime_error("cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides, long seed_flag) {
  nlohmann::json j;
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f.good()) throw ConfigError("cannot open config file '" + config_path + "'");
    f >> j;
  } else {
    j = nlohmann::json::object();
  }
  for (const std::string& ov : overrides) apply_override(j, ov);
  if (seed_flag >= 0) j["seed"] = seed_flag;
  return config_from_json(j);
}

std::string default_outdir(const RunConfig& cfg) {
  const char* root = std::getenv("TREEFLOW_OUT_ROOT");
  if (!root) return {};
  std::ostringstream name;
  name << root << "/run-" << cfg.objective << "-" << cfg.replay << "-seed" << cfg.seed;
  return name.str();
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              long seed, std::string outdir) {
  RunConfig cfg = resolve_config(config_path, overrides, seed);
  if (outdir.empty()) outdir = default_outdir(cfg);
  if (outdir.empty())
    throw ConfigError("no output directory: pass --outdir or set TREEFLOW_OUT_ROOT");
  TrainResult result = train(cfg, outdir);
  std::cout << "trained " << result.steps_run << " steps; final loss " << result.final_loss
            << "; logZ " << result.params.log_z() << "\n"
            << "run directory: " << outdir << "\n";
  return 0;
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& overrides,
             long seed, const std::string& checkpoint, int samples, std::string outdir) {
  RunConfig cfg = resolve_config(config_path, overrides, seed);
  if (samples > 0) cfg.eval_samples = samples;
  std::unique_ptr<Env> env = make_env(cfg);
  PolicyParams params = PolicyParams::from_json(slurp(checkpoint));
  Rng rng(Rng::derive_seed(cfg.seed, 0xE7A1));
  std::vector<EvalSample> draws = evaluate_policy(params, *env, cfg.eval_samples, rng);
  MetricsReport m =
      compute_metrics(draws, env->solution_set(), params.n_actions(), env->max_len());
  std::string csv = metrics_csv_header() + metrics_csv_row(0, m, params.log_z(), 0.0);
  if (!outdir.empty()) {
    fs::create_directories(outdir);
    std::ofstream(outdir + "/metrics.csv", std::ios::binary) << csv;
    std::ofstream(outdir + "/per_depth.jsonl", std::ios::binary)
        << per_depth_json(0, m) << "\n";
    std::ofstream(outdir + "/config_resolved.json", std::ios::binary)
        << config_to_json(cfg).dump(2) << "\n";
  }
  std::cout << csv;
  return 0;
}

int cmd_enumerate(const std::string& config_path, const std::vector<std::string>& overrides,
                  const std::string& out_path) {
  RunConfig cfg = resolve_config(config_path, overrides, -1);
  std::unique_ptr<Env> env = make_env(cfg);
  std::vector<std::vector<int>> y = env->solution_set();
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    if (!out.good()) throw std::runtime_error("cannot write '" + out_path + "'");
    for (const auto& s : y) out << env->to_string(s) << "\n";
  }
  std::cout << y.size() << "\n";
  return 0;
}

int cmd_select(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& items_path, const std::string& out_path) {
  RunConfig cfg = resolve_config(config_path, overrides, -1);
  std::unique_ptr<Env> env = make_env(cfg);
  std::vector<ReplayItem> items =
      parse_items(slurp(items_path), env->vocab(), cfg.subm.length_bin_size);
  SubmResult res = subm_refresh({}, items, cfg.subm);
  std::ostringstream out;
  for (std::size_t i = 0; i < res.selected.size(); ++i) {
    const ReplayItem& it = res.selected[i];
    char buf[96];
    std::snprintf(buf, sizeof buf, "\t%.17g\t%d\t%.17g\n", it.reward_proxy,
                  it.valid ? 1 : 0, res.gains[i]);
    out << env->to_string(it.tokens) << buf;
  }
  if (!out_path.empty())
    std::ofstream(out_path, std::ios::binary) << out.str();
  else
    std::cout << out.str();
  std::cout << "selected " << res.selected.size() << " items, objective " << res.objective
            << "\n";
  return 0;
}

int cmd_aggregate(const std::vector<std::string>& run_dirs, const std::string& out_path) {
  if (run_dirs.empty()) throw std::runtime_error("aggregate: no run directories given");
  const auto& cols = metric_csv_columns();
  std::vector<std::vector<double>> values(cols.size());
  for (const std::string& dir : run_dirs) {
    std::string csv = slurp(dir + "/metrics.csv");
    std::istringstream in(csv);
    std::string line, last;
    std::getline(in, line);  // header
    while (std::getline(in, line))
      if (!line.empty()) last = line;
    if (last.empty()) throw std::runtime_error("no metric rows in '" + dir + "'");
    std::istringstream row(last);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(row, cell, ',') && c < cols.size()) values[c++].push_back(std::stod(cell));
  }
  std::ostringstream out;
  out << "metric,mean,ci95_halfwidth,n_runs\n";
  for (std::size_t c = 1; c < cols.size(); ++c) {  // skip the step column
    double mean = 0.0;
    for (double v : values[c]) mean += v;
    mean /= static_cast<double>(values[c].size());
    auto hw = t_interval_halfwidth(values[c]);
    char buf[160];
    if (hw)
      std::snprintf(buf, sizeof buf, "%s,%.10g,%.10g,%zu\n", cols[c].c_str(), mean, *hw,
                    values[c].size());
    else
      std::snprintf(buf, sizeof buf, "%s,%.10g,,%zu\n", cols[c].c_str(), mean,
                    values[c].size());
    out << buf;
  }
  if (!out_path.empty())
    std::ofstream(out_path, std::ios::binary) << out.str();
  else
    std::cout << out.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"treeflow: GFlowNet training on terminable prefix trees"};
  app.require_subcommand(1);

  std::string config_path, outdir, checkpoint, items_path, out_path;
  std::vector<std::string> overrides, run_dirs;
  long seed = -1;
  int samples = 0;

  auto add_common = [&](CLI::App* sub, bool with_seed = true) {
    sub->add_option("--config", config_path, "config JSON file");
    sub->add_option("--set", overrides, "dotted-path override key=value")->take_all();
    if (with_seed) sub->add_option("--seed", seed, "random seed (overrides config)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "run a training job");
  add_common(train_cmd);
  train_cmd->add_option("--outdir", outdir, "run output directory");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "parameter checkpoint")->required();
  eval_cmd->add_option("--samples", samples, "evaluation sample count");
  eval_cmd->add_option("--outdir", outdir, "where to write the report");

  CLI::App* enum_cmd = app.add_subcommand("enumerate", "enumerate the exact solution set");
  add_common(enum_cmd, false);
  enum_cmd->add_option("--out", out_path, "write solutions to this file");

  CLI::App* select_cmd = app.add_subcommand("select", "offline submodular selection");
  add_common(select_cmd, false);
  select_cmd->add_option("--items", items_path, "newline-delimited items file")->required();
  select_cmd->add_option("--out", out_path, "write the selected subset here");

  CLI::App* agg_cmd = app.add_subcommand("aggregate", "aggregate metrics across runs");
  agg_cmd->add_option("--out", out_path, "output CSV path");
  agg_cmd->add_option("dirs", run_dirs, "run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_cmd->parsed()) return cmd_train(config_path, overrides, seed, outdir);
    if (eval_cmd->parsed())
      return cmd_eval(config_path, overrides, seed, checkpoint, samples, outdir);
    if (enum_cmd->parsed()) return cmd_enumerate(config_path, overrides, out_path);
    if (select_cmd->parsed()) return cmd_select(config_path, overrides, items_path, out_path);
    if (agg_cmd->parsed()) return cmd_aggregate(run_dirs, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
