#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "treeflow/rng.hpp"

namespace treeflow {

struct ReplayError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One stored terminal sequence (stop token excluded).
struct ReplayItem {
  std::vector<int> tokens;
  double reward_proxy = 0.0;  // task-only u at the terminal
  bool valid = false;
  std::set<std::uint64_t> shingles;  // 2-gram shingles of token ids
  int length_bin = 0;

  static ReplayItem make(std::vector<int> tokens, double reward, bool valid,
                         int length_bin_size = 1);
};

// Jaccard similarity of 2-gram shingle sets. Two empty signatures are fully
// similar; an empty signature never matches a non-empty one.
double similarity(const ReplayItem& a, const ReplayItem& b);

// Levenshtein distance over token ids divided by the longer length.
double normalized_edit_distance(std::span<const int> a, std::span<const int> b);

// Reward-prioritized buffer: top-capacity items by reward with exact and
// near-duplicate filtering.
class RpBuffer {
 public:
  RpBuffer(int capacity, double near_dup_tol = 0.25)
      : capacity_(capacity), near_dup_tol_(near_dup_tol) {}

  bool insert(ReplayItem item);
  const std::vector<ReplayItem>& items() const { return items_; }
  int size() const { return static_cast<int>(items_.size()); }
  double min_reward() const;

  // Uniform sample with replacement.
  std::vector<ReplayItem> sample(int n, Rng& rng) const;

 private:
  int capacity_;
  double near_dup_tol_;
  std::vector<ReplayItem> items_;
  std::vector<long> inserted_at_;  // tie-break for eviction
  long counter_ = 0;
};

// Two-tier prioritized sampling: an alpha fraction of draws comes uniformly
// from the top-beta reward tier, the rest from the remainder; degenerate
// tiers fall back to uniform over the whole buffer.
std::vector<ReplayItem> prt_sample(const std::vector<ReplayItem>& buffer, int n,
                                   double alpha_frac, double beta_tier, Rng& rng);

struct SubmConfig {
  int capacity = 200;
  double w_rew = 1.0;
  double w_val = 1.0;
  double w_div = 1.0;
  double w_len = 0.0;
  int length_bin_size = 1;
  std::vector<double> alpha_b;       // per-bin coefficients; empty = uniform 1
  double validity_gating_ratio = 1.0;
};

struct SubmResult {
  std::vector<ReplayItem> selected;
  std::vector<double> gains;    // accepted marginal gain per pick
  double objective = 0.0;       // running sum of accepted gains
  std::vector<double> msim;     // final coverage per gated-pool element
  std::vector<ReplayItem> pool; // the gated pool the coverage is over
};

// Greedy facility-location + length-coverage refresh over buffer + batch.
SubmResult subm_refresh(const std::vector<ReplayItem>& buffer,
                        const std::vector<ReplayItem>& new_batch, const SubmConfig& cfg);

// Direct recomputation of the submodular objective for a given selection
// (used by the cache-consistency and additivity checks).
double subm_objective(const std::vector<ReplayItem>& selected,
                      const std::vector<ReplayItem>& gated_pool, const SubmConfig& cfg);

// Uniform-with-replacement sampling from the enumerated solution set.
std::vector<std::vector<int>> oracle_sample(const std::vector<std::vector<int>>& y_star,
                                            int n, Rng& rng);

// Newline-delimited snapshot: token string, reward, validity.
std::string serialize_items(const std::vector<ReplayItem>& items,
                            const std::vector<std::string>& vocab);
std::vector<ReplayItem> parse_items(const std::string& text,
                                    const std::vector<std::string>& vocab,
                                    int length_bin_size = 1);

}  // namespace treeflow
