#include "treeflow/replay.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace treeflow {

namespace {

bool lex_less(const std::vector<int>& a, const std::vector<int>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace

ReplayItem ReplayItem::make(std::vector<int> tokens, double reward, bool valid,
                            int length_bin_size) {
  ReplayItem item;
  item.reward_proxy = reward;
  item.valid = valid;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i)
    item.shingles.insert((static_cast<std::uint64_t>(tokens[i]) << 32) |
                         static_cast<std::uint32_t>(tokens[i + 1]));
  int bin = length_bin_size > 0 ? static_cast<int>(tokens.size()) / length_bin_size : 0;
  item.length_bin = bin;
  item.tokens = std::move(tokens);
  return item;
}

double similarity(const ReplayItem& a, const ReplayItem& b) {
  if (a.shingles.empty() && b.shingles.empty()) return 1.0;
  if (a.shingles.empty() || b.shingles.empty()) return 0.0;
  std::size_t inter = 0;
  for (std::uint64_t s : a.shingles) inter += b.shingles.count(s);
  std::size_t uni = a.shingles.size() + b.shingles.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double normalized_edit_distance(std::span<const int> a, std::span<const int> b) {
  std::size_t n = a.size(), m = b.size();
  if (n == 0 && m == 0) return 0.0;
  std::vector<int> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (std::size_t j = 1; j <= m; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[m]) / static_cast<double>(std::max(n, m));
}

bool RpBuffer::insert(ReplayItem item) {
  for (const ReplayItem& ex : items_)
    if (ex.tokens == item.tokens) return false;  // exact duplicate
  // Near-duplicate filter: reject unless strictly better than every close item.
  for (const ReplayItem& ex : items_) {
    if (normalized_edit_distance(ex.tokens, item.tokens) <= near_dup_tol_ &&
        item.reward_proxy <= ex.reward_proxy)
      return false;
  }
  if (static_cast<int>(items_.size()) >= capacity_) {
    // Evict the minimum-reward item (oldest first on ties); reject items
    // below the current minimum.
    int min_idx = 0;
    for (int i = 1; i < static_cast<int>(items_.size()); ++i) {
      if (items_[i].reward_proxy < items_[min_idx].reward_proxy ||
          (items_[i].reward_proxy == items_[min_idx].reward_proxy &&
           inserted_at_[i] < inserted_at_[min_idx]))
        min_idx = i;
    }
    if (item.reward_proxy < items_[min_idx].reward_proxy) return false;
    items_.erase(items_.begin() + min_idx);
    inserted_at_.erase(inserted_at_.begin() + min_idx);
  }
  items_.push_back(std::move(item));
  inserted_at_.push_back(counter_++);
  return true;
}

double RpBuffer::min_reward() const {
  if (items_.empty()) throw ReplayError("min_reward on empty buffer");
  double m = items_[0].reward_proxy;
  for (const ReplayItem& it : items_) m = std::min(m, it.reward_proxy);
  return m;
}

std::vector<ReplayItem> RpBuffer::sample(int n, Rng& rng) const {
  if (items_.empty()) throw ReplayError("sample from empty buffer");
  std::vector<ReplayItem> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(items_[rng.uniform_int(size())]);
  return out;
}

std::vector<ReplayItem> prt_sample(const std::vector<ReplayItem>& buffer, int n,
                                   double alpha_frac, double beta_tier, Rng& rng) {
  if (buffer.empty()) throw ReplayError("prt_sample from empty buffer");
  // Rank by reward descending, lexicographic tokens as the deterministic tie-break.
  std::vector<int> order(buffer.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (buffer[a].reward_proxy != buffer[b].reward_proxy)
      return buffer[a].reward_proxy > buffer[b].reward_proxy;
    return lex_less(buffer[a].tokens, buffer[b].tokens);
  });

  int tier = static_cast<int>(std::ceil(beta_tier * static_cast<double>(buffer.size())));
  tier = std::clamp(tier, 0, static_cast<int>(buffer.size()));
  int n_top = static_cast<int>(std::ceil(alpha_frac * n));
  n_top = std::clamp(n_top, 0, n);

  auto draw_range = [&](int lo, int hi) {  // [lo, hi) over `order`; whole buffer if empty
    if (hi <= lo) return buffer[order[rng.uniform_int(static_cast<int>(order.size()))]];
    return buffer[order[lo + rng.uniform_int(hi - lo)]];
  };

  std::vector<ReplayItem> out;
  out.reserve(n);
  for (int i = 0; i < n_top; ++i) out.push_back(draw_range(0, tier));
  for (int i = n_top; i < n; ++i) out.push_back(draw_range(tier, static_cast<int>(order.size())));
  return out;
}

double subm_objective(const std::vector<ReplayItem>& selected,
                      const std::vector<ReplayItem>& gated_pool, const SubmConfig& cfg) {
  double total = 0.0;
  for (const ReplayItem& x : selected)
    total += cfg.w_rew * x.reward_proxy + cfg.w_val * (x.valid ? 1.0 : 0.0);
  if (cfg.w_div > 0.0) {
    for (const ReplayItem& u : gated_pool) {
      double best = 0.0;  // msim over the empty set is 0
      for (const ReplayItem& x : selected) best = std::max(best, similarity(u, x));
      total += cfg.w_div * best;
    }
  }
  if (cfg.w_len > 0.0) {
    std::map<int, int> counts;
    for (const ReplayItem& x : selected) ++counts[x.length_bin];
    for (const auto& [bin, c] : counts) {
      double ab = cfg.alpha_b.empty()
                      ? 1.0
                      : cfg.alpha_b[std::min<std::size_t>(bin, cfg.alpha_b.size() - 1)];
      total += cfg.w_len * ab * std::log(1.0 + c);
    }
  }
  return total;
}

SubmResult subm_refresh(const std::vector<ReplayItem>& buffer,
                        const std::vector<ReplayItem>& new_batch, const SubmConfig& cfg) {
  // Ground set: exact-dedup union, canonicalized to lexicographic order.
  std::vector<ReplayItem> ground;
  std::set<std::vector<int>> seen;
  for (const auto* src : {&buffer, &new_batch})
    for (const ReplayItem& it : *src)
      if (seen.insert(it.tokens).second) ground.push_back(it);
  std::sort(ground.begin(), ground.end(),
            [](const ReplayItem& a, const ReplayItem& b) { return lex_less(a.tokens, b.tokens); });

  auto static_score = [&](const ReplayItem& x) {
    return cfg.w_rew * x.reward_proxy + cfg.w_val * (x.valid ? 1.0 : 0.0);
  };

  // Validity gating: all valid items, plus the highest-static invalid items
  // while the valid proportion stays at or above the configured ratio.
  SubmResult res;
  if (cfg.validity_gating_ratio <= 0.0) {
    res.pool = ground;
  } else {
    std::vector<ReplayItem> valid, invalid;
    for (const ReplayItem& it : ground) (it.valid ? valid : invalid).push_back(it);
    std::sort(invalid.begin(), invalid.end(), [&](const ReplayItem& a, const ReplayItem& b) {
      double sa = static_score(a), sb = static_score(b);
      if (sa != sb) return sa > sb;
      return lex_less(a.tokens, b.tokens);
    });
    std::size_t max_invalid = static_cast<std::size_t>(std::floor(
        static_cast<double>(valid.size()) * (1.0 - cfg.validity_gating_ratio) /
        cfg.validity_gating_ratio));
    res.pool = valid;
    for (std::size_t i = 0; i < invalid.size() && i < max_invalid; ++i)
      res.pool.push_back(invalid[i]);
    std::sort(res.pool.begin(), res.pool.end(),
              [](const ReplayItem& a, const ReplayItem& b) { return lex_less(a.tokens, b.tokens); });
  }

  std::vector<double> msim(res.pool.size(), 0.0);
  std::vector<int> bin_counts;
  std::vector<char> taken(ground.size(), 0);
  auto alpha_of = [&](int bin) {
    return cfg.alpha_b.empty()
               ? 1.0
               : cfg.alpha_b[std::min<std::size_t>(bin, cfg.alpha_b.size() - 1)];
  };

  int budget = std::min<int>(cfg.capacity, static_cast<int>(ground.size()));
  for (int pick = 0; pick < budget; ++pick) {
    int best = -1;
    double best_gain = 0.0;
    for (std::size_t i = 0; i < ground.size(); ++i) {
      if (taken[i]) continue;
      const ReplayItem& x = ground[i];
      double gain = static_score(x);
      if (cfg.w_div > 0.0)
        for (std::size_t u = 0; u < res.pool.size(); ++u)
          gain += cfg.w_div * std::max(0.0, similarity(res.pool[u], x) - msim[u]);
      if (cfg.w_len > 0.0) {
        int c = x.length_bin < static_cast<int>(bin_counts.size()) ? bin_counts[x.length_bin] : 0;
        gain += cfg.w_len * alpha_of(x.length_bin) * (std::log(2.0 + c) - std::log(1.0 + c));
      }
      // Ties break toward the lexicographically smallest token sequence;
      // ground is lex-sorted, so strict improvement keeps the first.
      if (best < 0 || gain > best_gain) {
        best = static_cast<int>(i);
        best_gain = gain;
      }
    }
    if (best < 0) break;
    taken[best] = 1;
    const ReplayItem& x = ground[best];
    res.selected.push_back(x);
    res.gains.push_back(best_gain);
    res.objective += best_gain;
    for (std::size_t u = 0; u < res.pool.size(); ++u)
      msim[u] = std::max(msim[u], similarity(res.pool[u], x));
    if (cfg.w_len > 0.0) {
      if (x.length_bin >= static_cast<int>(bin_counts.size()))
        bin_counts.resize(x.length_bin + 1, 0);
      ++bin_counts[x.length_bin];
    }
  }
  res.msim = std::move(msim);
  return res;
}

std::vector<std::vector<int>> oracle_sample(const std::vector<std::vector<int>>& y_star, int n,
                                            Rng& rng) {
  if (y_star.empty()) throw ReplayError("oracle_sample from empty solution set");
  std::vector<std::vector<int>> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i)
    out.push_back(y_star[rng.uniform_int(static_cast<int>(y_star.size()))]);
  return out;
}

std::string serialize_items(const std::vector<ReplayItem>& items,
                            const std::vector<std::string>& vocab) {
  std::ostringstream out;
  for (const ReplayItem& it : items) {
    for (int t : it.tokens) out << vocab[t];
    char buf[64];
    std::snprintf(buf, sizeof buf, "\t%.17g\t%d\n", it.reward_proxy, it.valid ? 1 : 0);
    out << buf;
  }
  return out.str();
}

std::vector<ReplayItem> parse_items(const std::string& text,
                                    const std::vector<std::string>& vocab,
                                    int length_bin_size) {
  // Greedy longest-match tokenization against the vocabulary.
  std::size_t max_len = 0;
  std::map<std::string, int> ids;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    ids[vocab[i]] = static_cast<int>(i);
    max_len = std::max(max_len, vocab[i].size());
  }
  std::vector<ReplayItem> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t tab1 = line.find('\t');
    std::size_t tab2 = tab1 == std::string::npos ? std::string::npos : line.find('\t', tab1 + 1);
    if (tab2 == std::string::npos)
      throw ReplayError("items line " + std::to_string(lineno) +
                        ": expected 'tokens<TAB>reward<TAB>valid'");
    std::string toks_str = line.substr(0, tab1);
    double reward = std::stod(line.substr(tab1 + 1, tab2 - tab1 - 1));
    int valid = std::stoi(line.substr(tab2 + 1));
    std::vector<int> toks;
    std::size_t pos = 0;
    while (pos < toks_str.size()) {
      int found = -1;
      for (std::size_t len = std::min(max_len, toks_str.size() - pos); len >= 1; --len) {
        auto it = ids.find(toks_str.substr(pos, len));
        if (it != ids.end()) {
          found = it->second;
          pos += len;
          break;
        }
      }
      if (found < 0)
        throw ReplayError("items line " + std::to_string(lineno) + ": unknown token text");
      toks.push_back(found);
    }
    out.push_back(ReplayItem::make(std::move(toks), reward, valid != 0, length_bin_size));
  }
  return out;
}

}  // namespace treeflow
