#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treeflow/rng.hpp"

namespace treeflow {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One evaluation draw.
struct EvalSample {
  std::vector<int> tokens;
  bool valid = false;
  double score = 0.0;
  double log_pterm_at_stop = 0.0;  // raw q(stop | s_tau), no masking
};

struct PrefixDiagnostics {
  // Indexed by depth k = 1..max_depth (element 0 is depth 1).
  std::vector<double> surv, pef_ent, eff, top1, unique_rate;
};

struct MetricsReport {
  int n_samples = 0;
  int n_valid = 0;
  double acc = 0.0;
  double score = 0.0;
  double len_mean = 0.0, len_p50 = 0.0, len_p90 = 0.0;
  std::vector<double> frac_len;  // valid-sample fraction per exact length 1..max_depth
  double log_pterm_mean = 0.0;   // over all samples
  double token_entropy = 0.0;
  long unique_valid = 0;
  long cov_count = 0;
  double cov = 0.0;
  double norm_cov = 0.0;
  double kl_pi_to_pstar = 0.0;
  double kl_pstar_to_pi = 0.0;
  double js_tok = 0.0;
  PrefixDiagnostics prefix;
};

// Acc, Score over valid, length statistics, and the termination calibration
// mean. Throws when the sample set is empty.
void terminal_metrics(std::span<const EvalSample> samples, int max_depth, MetricsReport& out);

// Ragged token entropy over valid samples (positions with > 1 survivor).
double token_entropy(std::span<const EvalSample> samples);

// Length-bucketed variant: entropy over the fixed-length bucket of each
// pre-stop length (0 when a bucket has <= 1 sample).
std::vector<double> token_entropy_by_length(std::span<const EvalSample> samples, int max_depth);

PrefixDiagnostics prefix_diagnostics(std::span<const EvalSample> samples, int max_depth);

void coverage_metrics(std::span<const EvalSample> samples,
                      const std::vector<std::vector<int>>& y_star, MetricsReport& out);

// Stabilized position-wise KL/JS between the sampled valid marginals and the
// uniform-over-solutions reference. Throws on an empty solution set.
void distribution_fidelity(std::span<const EvalSample> samples,
                           const std::vector<std::vector<int>>& y_star, int n_actions,
                           MetricsReport& out);

MetricsReport compute_metrics(std::span<const EvalSample> samples,
                              const std::vector<std::vector<int>>& y_star, int n_actions,
                              int max_depth);

// Two-sided 95% t-interval half width for S values; nullopt when S < 2.
std::optional<double> t_interval_halfwidth(std::span<const double> values);
double t_critical_975(int dof);

// Frozen CSV column order shared by the trainer, the evaluator, and the
// aggregate subcommand.
const std::vector<std::string>& metric_csv_columns();
std::string metrics_csv_header();
std::string metrics_csv_row(long step, const MetricsReport& m, double log_z, double loss);

std::string per_depth_json(long step, const MetricsReport& m);

}  // namespace treeflow
