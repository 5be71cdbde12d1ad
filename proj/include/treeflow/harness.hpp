#pragma once

#include <functional>
#include <string>
#include <vector>

#include "treeflow/config.hpp"
#include "treeflow/metrics.hpp"
#include "treeflow/objectives.hpp"
#include "treeflow/policy.hpp"
#include "treeflow/replay.hpp"

namespace treeflow {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Replay storage for one run; which member is active depends on the strategy.
class ReplayState {
 public:
  ReplayState(const RunConfig& cfg, const Env& env);

  // Number of stored items available for replay draws.
  int available() const;
  // Token sequences for n replay slots under the active strategy.
  std::vector<std::vector<int>> draw(int n, Rng& rng) const;
  // Offer an on-policy terminal (rp/prt insert now, subm batched).
  void offer(const std::vector<int>& tokens, double reward, bool valid);
  // Run the submodular refresh over buffer + pending batch (no-op otherwise).
  void refresh();

  const std::vector<ReplayItem>& items() const;
  const std::vector<std::vector<int>>& oracle_set() const { return y_star_; }

 private:
  std::string kind_;
  RunConfig cfg_;
  RpBuffer rp_;
  std::vector<ReplayItem> subm_buffer_;
  std::vector<ReplayItem> subm_pending_;
  std::vector<std::vector<int>> y_star_;
};

struct BatchStats {
  int n_replay = 0;
  int n_onpolicy = 0;
  int replay_fallbacks = 0;  // requested replay slots served on-policy
};

std::vector<Rollout> build_batch(const PolicyParams& params, const Env& env,
                                 ReplayState& replay, const RunConfig& cfg, long step,
                                 Rng& rng, BatchStats* stats);

// Fresh temperature-1 constrained rollouts scored for the metric suite.
std::vector<EvalSample> evaluate_policy(const PolicyParams& params, const Env& env, int n,
                                        Rng& rng);

struct TrainResult {
  PolicyParams params;
  MetricsReport final_metrics;
  double final_loss = 0.0;
  long steps_run = 0;
};

// Full training loop: scheduled sampling temperatures, replay mixing,
// gradient accumulation, periodic evaluation, and checkpointing. Writes
// config_resolved.json, metrics.csv, per_depth.jsonl, train_log.csv,
// checkpoints, and a final buffer snapshot into outdir ("" disables output).
TrainResult train(const RunConfig& cfg, const std::string& outdir);

}  // namespace treeflow
