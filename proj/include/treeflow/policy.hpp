#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "treeflow/env.hpp"
#include "treeflow/rng.hpp"

namespace treeflow {

struct PolicyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One sampled or teacher-forced sequence with everything the objectives need.
// Per-prefix arrays have length tau+1, the per-step array length tau. Stored
// log-probs are unrestricted full-softmax values at temperature 1.
struct Trajectory {
  std::vector<int> tokens;
  std::vector<double> log_pf;
  std::vector<double> log_pterm;
  std::vector<double> log_r;
  std::vector<double> u;
  std::vector<char> stop_legal;
  bool from_replay = false;

  int tau() const { return static_cast<int>(tokens.size()); }
};

struct TensorSpec {
  std::string name;
  int rows, cols;
  bool decay;
  std::size_t offset;
};

// Single-layer GRU policy over V + stop with a learnable global normalizer.
// Parameters live in one flat vector so the optimizer, gradient checks, and
// serialization can treat them uniformly.
class PolicyParams {
 public:
  PolicyParams(int vocab_size, int embed_dim, int hidden_dim);

  // Embeddings and recurrent weights uniform in [-0.1, 0.1]; output head and
  // logZ zero, so the starting policy is uniform.
  static PolicyParams init(int vocab_size, int embed_dim, int hidden_dim, Rng& rng);

  int vocab() const { return vocab_; }
  int embed_dim() const { return emb_; }
  int hidden_dim() const { return hid_; }
  int n_actions() const { return vocab_ + 1; }  // tokens + stop
  int stop_action() const { return vocab_; }
  int bos_row() const { return vocab_; }        // embedding row for begin-of-sequence

  std::size_t size() const { return data_.size(); }
  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }

  double& log_z() { return data_.back(); }
  double log_z() const { return data_.back(); }

  const std::vector<TensorSpec>& tensors() const { return specs_; }
  std::span<double> tensor(const std::string& name);
  std::span<const double> tensor(const std::string& name) const;

  const double* row(const TensorSpec& spec, int r) const {
    return data_.data() + spec.offset + static_cast<std::size_t>(r) * spec.cols;
  }

  std::string to_json() const;
  static PolicyParams from_json(const std::string& text);

 private:
  void register_tensors();

  int vocab_, emb_, hid_;
  std::vector<TensorSpec> specs_;
  std::vector<double> data_;
};

// Per-prefix forward cache: everything needed to backpropagate later.
struct StepCache {
  int input_row;
  std::vector<double> h_prev, z, r, n, q, h;  // q = w_hn h_prev + b_hn
  std::vector<double> logp;                   // log-softmax over actions
  std::vector<double> p;                      // softmax probs
};

struct SeqScore {
  std::vector<StepCache> steps;  // one per prefix 0..tau
};

// Gradient of some scalar loss with respect to the stored log-probabilities
// of one trajectory: a[t] multiplies log_pf[t], c[k] multiplies log_pterm[k],
// d_log_z multiplies logZ.
struct LogGradCoeffs {
  std::vector<double> a;
  std::vector<double> c;
  double d_log_z = 0.0;
};

// Logits at every prefix of a token sequence (teacher-forced).
SeqScore forward_states(const PolicyParams& params, std::span<const int> tokens);

// Fill a Trajectory's policy-side arrays from a forward cache and the env's
// reward arrays.
Trajectory make_trajectory(const SeqScore& score, std::span<const int> tokens,
                           const Env& env, bool from_replay);

struct Rollout {
  Trajectory traj;
  SeqScore score;
};

// Constrained sampling: actions drawn from the temperature-scaled softmax
// restricted to the legal set; stored log-probs are unrestricted at temp 1.
Rollout sample_trajectory(const PolicyParams& params, const Env& env, double temp, Rng& rng);

// Teacher-forced scoring of a replayed sequence under current params.
Rollout score_trajectory(const PolicyParams& params, const Env& env,
                         std::span<const int> tokens);

// Accumulate d(loss)/d(params) for one trajectory into grad (same layout as
// params.flat(), logZ last), scaled by `scale`.
void backprop_sequence(const PolicyParams& params, const SeqScore& score,
                       std::span<const int> tokens, const LogGradCoeffs& coeffs,
                       double scale, std::vector<double>& grad);

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled, matrix parameters only
  double grad_clip = 0.5;      // global norm
};

class OptimState {
 public:
  OptimState(std::size_t n, OptimConfig cfg) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  const OptimConfig& config() const { return cfg_; }
  long step_count() const { return t_; }

  // Global-norm clip, then Adam with decoupled weight decay. Throws on a
  // non-finite gradient, leaving params and moments untouched.
  void step(PolicyParams& params, std::span<const double> grad);

 private:
  OptimConfig cfg_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace treeflow
