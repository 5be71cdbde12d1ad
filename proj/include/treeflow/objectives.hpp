#pragma once

#include <span>
#include <string>
#include <vector>

#include "treeflow/policy.hpp"

namespace treeflow {

enum class Objective { kTb, kSubtb, kRaptb, kAvgPrefixTb, kRootSubtbLogZ };

Objective objective_from_string(const std::string& name);
std::string objective_name(Objective obj);

struct RaptbConfig {
  double eta = 0.25;        // auxiliary weight
  double alpha = 0.8;       // max/soft mix
  double beta = 3.0;        // soft temperature
  double rho = 0.5;         // distance penalty
  double gamma = 0.99;      // distance discount on the correction term
  int k_min = 3;            // minimum eligible prefix depth (scheduled)
  int horizon_cap = 0;      // K; 0 means the trajectory length (max_len)
  double absorb_gate = 1e-6;
  bool detach_pterm = true;
  bool absorb = true;       // disable to use raw u as its own target
  std::vector<double> w_k;  // per-depth weights, 1-indexed by k; empty = uniform
};

struct SubtbConfig {
  std::vector<double> w_l;  // per-window-length weights, 1-indexed; empty = uniform
};

struct LossOutput {
  double loss = 0.0;
  std::vector<double> grad;          // parameter layout, logZ last
  std::vector<double> residuals;     // per-trajectory terminal TB residuals
};

// Residual algebra (pure functions of the stored log arrays).
double tb_residual(const Trajectory& traj, double log_z);
double prefix_tb_residual(const Trajectory& traj, double log_z, int k);
// prefix residual at k minus the residual at the root; logZ cancels exactly.
double rooted_residual(const Trajectory& traj, int k);

// Absorbed suffix targets u_tgt for k = 0..h, h = min(tau, K).
std::vector<double> absorbed_targets(std::span<const double> u, int tau,
                                     const RaptbConfig& cfg);

// Per-trajectory auxiliary loss value (diagnostic form without gradients).
double raptb_aux_value(const Trajectory& traj, const RaptbConfig& cfg);

// Gradient of the per-trajectory loss with respect to the stored log arrays;
// shared by the batch losses and by the array-level unit tests.
LogGradCoeffs objective_coeffs(Objective obj, const Trajectory& traj, double log_z,
                               const RaptbConfig& raptb, const SubtbConfig& subtb,
                               double* loss_out);

// Batch loss = mean over rollouts of the per-trajectory loss; the gradient is
// accumulated through the policy in fixed batch order.
LossOutput compute_loss(Objective obj, const PolicyParams& params,
                        std::span<const Rollout> batch, const RaptbConfig& raptb,
                        const SubtbConfig& subtb);

}  // namespace treeflow
