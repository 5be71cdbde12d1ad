#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treeflow/grammar.hpp"
#include "treeflow/rational.hpp"

namespace treeflow {

struct EnvError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EnvConfig {
  int min_len = 3;
  int max_len = 9;
  double kappa = 1.0;        // reference-prior weight
  double lambda = 50.0;      // task-reward scale
  Rational target{24, 1};
};

struct EvalResult {
  std::optional<Rational> value;  // empty when undefined
  bool valid = false;
};

// Legal action set at a prefix under grammar + length bounds: which tokens may
// be emitted, and whether stopping is allowed.
struct LegalActions {
  std::vector<int> tokens;  // sorted token ids; empty at max_len
  bool stop = false;        // grammatical stop and length >= min_len
  int size() const { return static_cast<int>(tokens.size()) + (stop ? 1 : 0); }
};

// Per-prefix reward data for one terminal sequence, k = 0..len.
// log_r[k] is -inf at prefixes where stopping has zero reference probability.
struct RewardArrays {
  std::vector<double> log_r;
  std::vector<double> u;            // task-only component, always finite
  std::vector<char> stop_legal;
};

// Incremental prefix walker owned by one sampler/scorer.
class EnvWalk {
 public:
  virtual ~EnvWalk() = default;
  virtual LegalActions legal() const = 0;
  virtual void push(int token) = 0;
  virtual void pop() = 0;
  virtual int length() const = 0;
  // log q_ref(action | prefix); action = token id, or -1 for stop.
  virtual double ref_log_prob(int action) const = 0;
};

class Env {
 public:
  virtual ~Env() = default;
  virtual int vocab_size() const = 0;
  virtual const std::vector<std::string>& vocab() const = 0;
  virtual int min_len() const = 0;
  virtual int max_len() const = 0;
  virtual std::unique_ptr<EnvWalk> walk() const = 0;
  virtual RewardArrays reward_arrays(std::span<const int> tokens) const = 0;
  // All terminal sequences counted as correct, in lexicographic order.
  virtual std::vector<std::vector<int>> solution_set() const = 0;
  // Metric-level validity/score of a terminal (App.-E semantics).
  virtual bool metric_valid(std::span<const int> tokens) const = 0;
  virtual double metric_score(std::span<const int> tokens) const = 0;
  virtual std::string to_string(std::span<const int> tokens) const = 0;
};

// The Expr24 environment: digit/operator alphabet, exact rational evaluation,
// sparse task reward, and a frozen uniform-over-legal-actions reference prior.
class Expr24Env : public Env {
 public:
  explicit Expr24Env(EnvConfig cfg);

  const EnvConfig& config() const { return cfg_; }
  const Grammar& grammar() const { return grammar_; }

  EvalResult evaluate(std::span<const int> tokens) const;
  EvalResult evaluate_str(const std::string& text) const;
  int task_score(std::span<const int> tokens) const;  // 0 or 1

  // log q_ref(action | prefix) from scratch; walk() is the incremental form.
  double ref_log_prob(std::span<const int> prefix, int action) const;
  // kappa * logP_ref(prefix + stop) + lambda * S(prefix); -inf when stopping
  // is not reference-legal and kappa > 0.
  double stop_reward_log(std::span<const int> prefix) const;

  std::vector<std::vector<int>> enumerate_solutions() const;

  int vocab_size() const override { return static_cast<int>(grammar_.alphabet().size()); }
  const std::vector<std::string>& vocab() const override { return grammar_.alphabet(); }
  int min_len() const override { return cfg_.min_len; }
  int max_len() const override { return cfg_.max_len; }
  std::unique_ptr<EnvWalk> walk() const override;
  RewardArrays reward_arrays(std::span<const int> tokens) const override;
  std::vector<std::vector<int>> solution_set() const override { return enumerate_solutions(); }
  bool metric_valid(std::span<const int> tokens) const override {
    return task_score(tokens) == 1;
  }
  double metric_score(std::span<const int> tokens) const override {
    return static_cast<double>(task_score(tokens));
  }
  std::string to_string(std::span<const int> tokens) const override {
    return grammar_.detokenize(tokens);
  }

  static const char* grammar_text();

 private:
  EnvConfig cfg_;
  Grammar grammar_;
};

// A fully enumerable toy tree: every sequence over a small vocabulary with
// length in [min_len, max_len] is a terminal carrying a configured reward.
// The stop-reward is the pure task term (kappa = 0 semantics), so the
// reward-proportional target is directly the configured table.
class TinyTreeEnv : public Env {
 public:
  TinyTreeEnv(std::vector<std::string> vocab, int min_len, int max_len,
              std::map<std::string, double> rewards);

  double reward(std::span<const int> tokens) const;
  double log_sum_rewards() const;

  int vocab_size() const override { return static_cast<int>(vocab_.size()); }
  const std::vector<std::string>& vocab() const override { return vocab_; }
  int min_len() const override { return min_len_; }
  int max_len() const override { return max_len_; }
  std::unique_ptr<EnvWalk> walk() const override;
  RewardArrays reward_arrays(std::span<const int> tokens) const override;
  std::vector<std::vector<int>> solution_set() const override;
  bool metric_valid(std::span<const int>) const override { return true; }
  double metric_score(std::span<const int> tokens) const override { return reward(tokens); }
  std::string to_string(std::span<const int> tokens) const override;

 private:
  std::vector<std::string> vocab_;
  int min_len_;
  int max_len_;
  std::map<std::string, double> rewards_;
};

}  // namespace treeflow
