#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "treeflow/env.hpp"
#include "treeflow/objectives.hpp"
#include "treeflow/policy.hpp"
#include "treeflow/replay.hpp"

namespace treeflow {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Linear interpolation from start to end over horizon steps, clamped after.
struct LinearSched {
  double start = 0.0;
  double end = 0.0;
  long horizon = 1;

  double value(long step) const;
  // Integer-valued schedules round half away from zero after interpolation.
  int value_int(long step) const;
};

struct TinyTreeConfig {
  std::vector<std::string> vocab = {"a", "b"};
  std::map<std::string, double> rewards;
};

struct RunConfig {
  std::string objective = "raptb";
  std::string replay = "rp";  // none | rp | prt | subm | oracle
  long seed = 0;
  long max_steps = 5000;
  int n_samples = 32;
  int grad_accum = 4;
  long eval_period = 500;
  int eval_samples = 6400;

  int embed_dim = 32;
  int hidden_dim = 64;
  OptimConfig optim;

  LinearSched temp_hi{1.5, 1.0, 5000};
  LinearSched temp_lo{0.8, 1.0, 5000};
  double low_temp_prob = 0.666;

  LinearSched replay_fraction{0.5, 0.25, 5000};
  double replay_fraction_const = -1.0;  // >= 0 replaces the schedule
  int rp_capacity = 200;
  double rp_near_dup_tol = 0.25;
  double prt_alpha_frac = 0.5;
  double prt_beta_tier = 0.1;
  SubmConfig subm;
  int subm_refresh_period = 1;

  std::string env_kind = "expr24";  // expr24 | tinytree
  EnvConfig env;
  TinyTreeConfig tinytree;

  RaptbConfig raptb;
  LinearSched k_min_sched{7, 3, 5000};
  SubtbConfig subtb;
};

// Fully-resolved JSON with every default materialized; the inverse of
// config_from_json. Runs echo this file so they are self-describing.
nlohmann::json config_to_json(const RunConfig& cfg);

// Unknown keys anywhere in the tree are rejected.
RunConfig config_from_json(const nlohmann::json& j);

RunConfig load_config_file(const std::string& path);

// Dotted-path override "a.b.c=value"; the value is parsed as JSON when
// possible and treated as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

std::unique_ptr<Env> make_env(const RunConfig& cfg);

}  // namespace treeflow
