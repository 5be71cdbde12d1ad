#include "treeflow/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace treeflow {

namespace {

// A prefix cut participates in prefix-level residuals only where the stop
// reward is finite; under the grammar-gated reference prior, cuts where
// stopping is ungrammatical carry log R = -inf and no balance constraint.
bool finite_cut(const Trajectory& traj, int k) {
  if (!traj.stop_legal.empty() && !traj.stop_legal[k]) return false;
  return std::isfinite(traj.log_r[k]);
}

std::vector<double> prefix_sums(const Trajectory& traj) {
  std::vector<double> p(traj.tau() + 1, 0.0);
  for (int t = 0; t < traj.tau(); ++t) p[t + 1] = p[t] + traj.log_pf[t];
  return p;
}

double weight_at(const std::vector<double>& w, int idx1) {
  if (w.empty()) return 1.0;
  if (idx1 < 1 || idx1 > static_cast<int>(w.size()))
    throw std::invalid_argument("objective weight index out of range");
  return w[idx1 - 1];
}

int raptb_horizon(const Trajectory& traj, const RaptbConfig& cfg) {
  int h = traj.tau();
  if (cfg.horizon_cap > 0) h = std::min(h, cfg.horizon_cap);
  return h;
}

int first_finite_cut(const Trajectory& traj) {
  for (int k = 0; k <= traj.tau(); ++k)
    if (finite_cut(traj, k)) return k;
  return -1;
}

struct CoeffAccum {
  std::vector<double> a, c;
  double d_log_z = 0.0;
  double loss = 0.0;

  explicit CoeffAccum(int tau) : a(tau, 0.0), c(tau + 1, 0.0) {}
};

void tb_terms(const Trajectory& traj, double log_z, CoeffAccum& acc) {
  double delta = tb_residual(traj, log_z);
  acc.loss += delta * delta;
  double g = 2.0 * delta;
  for (int t = 0; t < traj.tau(); ++t) acc.a[t] += g;
  acc.c[traj.tau()] += g;
  acc.d_log_z += g;
}

void subtb_terms(const Trajectory& traj, const SubtbConfig& cfg, CoeffAccum& acc) {
  int tau = traj.tau();
  std::vector<double> pref = prefix_sums(traj);
  double denom = 0.0;
  for (int i = 0; i < tau; ++i) {
    if (!finite_cut(traj, i)) continue;
    for (int j = i + 1; j <= tau; ++j)
      if (finite_cut(traj, j)) denom += weight_at(cfg.w_l, j - i);
  }
  if (!(denom > 0.0)) return;
  for (int i = 0; i < tau; ++i) {
    if (!finite_cut(traj, i)) continue;
    for (int j = i + 1; j <= tau; ++j) {
      if (!finite_cut(traj, j)) continue;
      double w = weight_at(cfg.w_l, j - i);
      double delta = pref[j] - pref[i] + traj.log_r[i] - traj.log_r[j] + traj.log_pterm[j] -
                     traj.log_pterm[i];
      acc.loss += w * delta * delta / denom;
      double g = 2.0 * w * delta / denom;
      for (int t = i; t < j; ++t) acc.a[t] += g;
      acc.c[j] += g;
      acc.c[i] -= g;
    }
  }
}

void avgprefix_terms(const Trajectory& traj, double log_z, CoeffAccum& acc) {
  int tau = traj.tau();
  std::vector<int> cuts;
  for (int k = 1; k <= tau; ++k)
    if (finite_cut(traj, k)) cuts.push_back(k);
  if (cuts.empty()) return;
  std::vector<double> pref = prefix_sums(traj);
  double inv = 1.0 / static_cast<double>(cuts.size());
  for (int k : cuts) {
    double delta = log_z + pref[k] + traj.log_pterm[k] - traj.log_r[k];
    acc.loss += delta * delta * inv;
    double g = 2.0 * delta * inv;
    for (int t = 0; t < k; ++t) acc.a[t] += g;
    acc.c[k] += g;
    acc.d_log_z += g;
  }
}

// Eligible depths, absorbed residuals, and the anchored rooted term of the
// RapTB auxiliary loss. Gradients optionally suppressed on log_pterm.
void raptb_aux_terms(const Trajectory& traj, const RaptbConfig& cfg, double eta_scale,
                     CoeffAccum& acc) {
  int tau = traj.tau();
  int h = raptb_horizon(traj, cfg);
  int anchor = first_finite_cut(traj);
  if (anchor < 0) return;
  std::vector<int> eligible;
  for (int k = std::max(1, cfg.k_min); k <= h; ++k)
    if (finite_cut(traj, k) && k >= anchor) eligible.push_back(k);
  if (eligible.empty()) return;

  std::vector<double> u_tgt = absorbed_targets(traj.u, tau, cfg);
  std::vector<double> pref = prefix_sums(traj);
  double denom = 0.0;
  for (int k : eligible) denom += weight_at(cfg.w_k, k);

  for (int k : eligible) {
    double w = weight_at(cfg.w_k, k);
    double rooted = pref[k] - pref[anchor] + traj.log_pterm[k] - traj.log_pterm[anchor] -
                    traj.log_r[k] + traj.log_r[anchor];
    double corr = 0.0;
    if (cfg.absorb) {
      double diff = traj.u[k] - u_tgt[k];
      if (std::abs(diff) > cfg.absorb_gate) corr = std::pow(cfg.gamma, h - k) * diff;
    }
    double res = rooted + corr;
    acc.loss += eta_scale * w * res * res / denom;
    double g = eta_scale * 2.0 * w * res / denom;
    for (int t = anchor; t < k; ++t) acc.a[t] += g;
    if (!cfg.detach_pterm) {
      acc.c[k] += g;
      acc.c[anchor] -= g;
    }
  }
}

}  // namespace

Objective objective_from_string(const std::string& name) {
  if (name == "tb") return Objective::kTb;
  if (name == "subtb") return Objective::kSubtb;
  if (name == "raptb") return Objective::kRaptb;
  if (name == "avgprefixtb") return Objective::kAvgPrefixTb;
  if (name == "rootsubtblogz") return Objective::kRootSubtbLogZ;
  throw std::invalid_argument("unknown objective '" + name + "'");
}

std::string objective_name(Objective obj) {
  switch (obj) {
    case Objective::kTb: return "tb";
    case Objective::kSubtb: return "subtb";
    case Objective::kRaptb: return "raptb";
    case Objective::kAvgPrefixTb: return "avgprefixtb";
    case Objective::kRootSubtbLogZ: return "rootsubtblogz";
  }
  return "?";
}

double tb_residual(const Trajectory& traj, double log_z) {
  return prefix_tb_residual(traj, log_z, traj.tau());
}

double prefix_tb_residual(const Trajectory& traj, double log_z, int k) {
  if (k < 0 || k > traj.tau())
    throw std::out_of_range("prefix_tb_residual: depth out of range");
  double s = log_z;
  for (int t = 0; t < k; ++t) s += traj.log_pf[t];
  return s + traj.log_pterm[k] - traj.log_r[k];
}

double rooted_residual(const Trajectory& traj, int k) {
  if (k < 1 || k > traj.tau())
    throw std::out_of_range("rooted_residual: depth out of range");
  // logZ cancels; compute without it so the result is bitwise Z-independent.
  double s = 0.0;
  for (int t = 0; t < k; ++t) s += traj.log_pf[t];
  return s + traj.log_pterm[k] - traj.log_r[k] - traj.log_pterm[0] + traj.log_r[0];
}

std::vector<double> absorbed_targets(std::span<const double> u, int tau,
                                     const RaptbConfig& cfg) {
  if (!(cfg.beta > 0)) throw std::invalid_argument("absorbed_targets: beta must be positive");
  int h = tau;
  if (cfg.horizon_cap > 0) h = std::min(h, cfg.horizon_cap);
  if (static_cast<int>(u.size()) < h + 1)
    throw std::invalid_argument("absorbed_targets: u too short");
  std::vector<double> out(h + 1);
  for (int k = 0; k <= h; ++k) {
    double u_max = -std::numeric_limits<double>::infinity();
    for (int j = k; j <= h; ++j) u_max = std::max(u_max, u[j]);
    // LogSumExp with max-shift stabilization.
    double m = -std::numeric_limits<double>::infinity();
    for (int j = k; j <= h; ++j)
      m = std::max(m, cfg.beta * u[j] - cfg.beta * cfg.rho * (j - k));
    double s = 0.0;
    for (int j = k; j <= h; ++j)
      s += std::exp(cfg.beta * u[j] - cfg.beta * cfg.rho * (j - k) - m);
    double u_soft = (m + std::log(s)) / cfg.beta;
    out[k] = cfg.alpha * u_max + (1.0 - cfg.alpha) * u_soft;
  }
  return out;
}

double raptb_aux_value(const Trajectory& traj, const RaptbConfig& cfg) {
  CoeffAccum acc(traj.tau());
  raptb_aux_terms(traj, cfg, 1.0, acc);
  return acc.loss;
}

LogGradCoeffs objective_coeffs(Objective obj, const Trajectory& traj, double log_z,
                               const RaptbConfig& raptb, const SubtbConfig& subtb,
                               double* loss_out) {
  CoeffAccum acc(traj.tau());
  switch (obj) {
    case Objective::kTb:
      tb_terms(traj, log_z, acc);
      break;
    case Objective::kSubtb:
      subtb_terms(traj, subtb, acc);
      break;
    case Objective::kRaptb:
      tb_terms(traj, log_z, acc);
      if (raptb.eta != 0.0) raptb_aux_terms(traj, raptb, raptb.eta, acc);
      break;
    case Objective::kAvgPrefixTb:
    case Objective::kRootSubtbLogZ:
      avgprefix_terms(traj, log_z, acc);
      break;
  }
  if (loss_out) *loss_out = acc.loss;
  LogGradCoeffs out;
  out.a = std::move(acc.a);
  out.c = std::move(acc.c);
  out.d_log_z = acc.d_log_z;
  return out;
}

LossOutput compute_loss(Objective obj, const PolicyParams& params,
                        std::span<const Rollout> batch, const RaptbConfig& raptb,
                        const SubtbConfig& subtb) {
  LossOutput out;
  out.grad.assign(params.size(), 0.0);
  if (batch.empty()) return out;
  double inv_b = 1.0 / static_cast<double>(batch.size());
  for (const Rollout& r : batch) {
    double loss_i = 0.0;
    LogGradCoeffs coeffs =
        objective_coeffs(obj, r.traj, params.log_z(), raptb, subtb, &loss_i);
    out.loss += loss_i * inv_b;
    out.residuals.push_back(tb_residual(r.traj, params.log_z()));
    backprop_sequence(params, r.score, r.traj.tokens, coeffs, inv_b, out.grad);
  }
  return out;
}

}  // namespace treeflow
