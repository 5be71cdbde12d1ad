#include "treeflow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace treeflow {

namespace {

constexpr double kEntropyEps = 1e-10;   // ragged token entropy
constexpr double kDivergenceEps = 1e-9;  // stabilized KL/JS

// Nearest-rank percentile of a sorted vector.
double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return 0.0;
  std::size_t rank = static_cast<std::size_t>(
      std::ceil(q * static_cast<double>(sorted.size())));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

double entropy_with_eps(const std::map<int, int>& counts, int total) {
  double h = 0.0;
  for (const auto& [v, c] : counts) {
    double p = static_cast<double>(c) / total;
    h -= p * std::log(p + kEntropyEps);
  }
  return h;
}

double kl_eps(const std::map<int, double>& p, const std::map<int, double>& q,
              const std::set<int>& support) {
  double total = 0.0;
  for (int v : support) {
    auto pi = p.find(v);
    auto qi = q.find(v);
    double pv = (pi == p.end() ? 0.0 : pi->second) + kDivergenceEps;
    double qv = (qi == q.end() ? 0.0 : qi->second) + kDivergenceEps;
    total += pv * std::log(pv / qv);
  }
  return total;
}

std::map<int, double> position_marginal(const std::vector<const std::vector<int>*>& seqs,
                                        int t) {
  std::map<int, double> counts;
  int z = 0;
  for (const auto* s : seqs)
    if (static_cast<int>(s->size()) > t) {
      counts[(*s)[t]] += 1.0;
      ++z;
    }
  if (z > 0)
    for (auto& [v, c] : counts) c /= z;
  return counts;
}

}  // namespace

void terminal_metrics(std::span<const EvalSample> samples, int max_depth, MetricsReport& out) {
  if (samples.empty()) throw MetricsError("terminal_metrics: empty sample set");
  out.n_samples = static_cast<int>(samples.size());
  out.n_valid = 0;
  double score_sum = 0.0;
  double pterm_sum = 0.0;
  std::vector<double> lens;
  out.frac_len.assign(max_depth, 0.0);
  for (const EvalSample& s : samples) {
    pterm_sum += s.log_pterm_at_stop;
    if (!s.valid) continue;
    ++out.n_valid;
    score_sum += s.score;
    lens.push_back(static_cast<double>(s.tokens.size()));
    int len = static_cast<int>(s.tokens.size());
    if (len >= 1 && len <= max_depth) out.frac_len[len - 1] += 1.0;
  }
  out.acc = static_cast<double>(out.n_valid) / out.n_samples;
  out.log_pterm_mean = pterm_sum / out.n_samples;
  // Zero-denominator protocol: valid-only metrics report 0 when n_valid = 0.
  if (out.n_valid == 0) {
    out.score = out.len_mean = out.len_p50 = out.len_p90 = 0.0;
    return;
  }
  out.score = score_sum / out.n_valid;
  std::sort(lens.begin(), lens.end());
  double len_sum = 0.0;
  for (double l : lens) len_sum += l;
  out.len_mean = len_sum / out.n_valid;
  out.len_p50 = percentile(lens, 0.50);
  out.len_p90 = percentile(lens, 0.90);
  for (double& f : out.frac_len) f /= out.n_valid;
}

double token_entropy(std::span<const EvalSample> samples) {
  int max_len = 0;
  for (const EvalSample& s : samples)
    if (s.valid) max_len = std::max(max_len, static_cast<int>(s.tokens.size()));
  double total = 0.0;
  int qualifying = 0;
  for (int t = 0; t < max_len; ++t) {
    std::map<int, int> counts;
    int n_t = 0;
    for (const EvalSample& s : samples) {
      if (!s.valid || static_cast<int>(s.tokens.size()) <= t) continue;
      ++counts[s.tokens[t]];
      ++n_t;
    }
    if (n_t <= 1) continue;
    total += entropy_with_eps(counts, n_t);
    ++qualifying;
  }
  return qualifying > 0 ? total / qualifying : 0.0;
}

std::vector<double> token_entropy_by_length(std::span<const EvalSample> samples, int max_depth) {
  std::vector<double> out(max_depth, 0.0);
  for (int len = 1; len <= max_depth; ++len) {
    std::vector<EvalSample> bucket;
    for (const EvalSample& s : samples)
      if (s.valid && static_cast<int>(s.tokens.size()) == len) bucket.push_back(s);
    if (bucket.size() <= 1) continue;
    out[len - 1] = token_entropy(bucket);
  }
  return out;
}

PrefixDiagnostics prefix_diagnostics(std::span<const EvalSample> samples, int max_depth) {
  PrefixDiagnostics out;
  out.surv.assign(max_depth, 0.0);
  out.pef_ent.assign(max_depth, 0.0);
  out.eff.assign(max_depth, 0.0);
  out.top1.assign(max_depth, 0.0);
  out.unique_rate.assign(max_depth, 0.0);
  int n_valid = 0;
  for (const EvalSample& s : samples)
    if (s.valid) ++n_valid;
  if (n_valid == 0) return out;

  for (int k = 1; k <= max_depth; ++k) {
    std::map<std::vector<int>, int> counts;
    int n_k = 0;
    for (const EvalSample& s : samples) {
      if (!s.valid || static_cast<int>(s.tokens.size()) < k) continue;
      ++counts[std::vector<int>(s.tokens.begin(), s.tokens.begin() + k)];
      ++n_k;
    }
    if (n_k == 0) continue;  // row stays all-zero
    out.surv[k - 1] = static_cast<double>(n_k) / n_valid;
    double ent = 0.0, top = 0.0;
    for (const auto& [p, c] : counts) {
      double f = static_cast<double>(c) / n_k;
      ent -= f * std::log(f);
      top = std::max(top, f);
    }
    out.pef_ent[k - 1] = ent;
    out.eff[k - 1] = std::exp(ent);
    out.top1[k - 1] = top;
    out.unique_rate[k - 1] = static_cast<double>(counts.size()) / n_k;
  }
  return out;
}

void coverage_metrics(std::span<const EvalSample> samples,
                      const std::vector<std::vector<int>>& y_star, MetricsReport& out) {
  std::set<std::vector<int>> unique;
  for (const EvalSample& s : samples)
    if (s.valid) unique.insert(s.tokens);
  out.unique_valid = static_cast<long>(unique.size());
  std::set<std::vector<int>> oracle(y_star.begin(), y_star.end());
  long hits = 0;
  for (const auto& u : unique)
    if (oracle.count(u)) ++hits;
  out.cov_count = hits;
  out.cov = oracle.empty() ? 0.0 : static_cast<double>(hits) / oracle.size();
  long denom = std::min<long>(static_cast<long>(samples.size()),
                              static_cast<long>(oracle.size()));
  out.norm_cov = denom > 0 ? static_cast<double>(hits) / denom : 0.0;
}

void distribution_fidelity(std::span<const EvalSample> samples,
                           const std::vector<std::vector<int>>& y_star, int n_actions,
                           MetricsReport& out) {
  (void)n_actions;
  if (y_star.empty()) throw MetricsError("distribution_fidelity: empty solution set");
  std::vector<const std::vector<int>*> pi, pstar;
  for (const EvalSample& s : samples)
    if (s.valid) pi.push_back(&s.tokens);  // duplicates kept
  for (const auto& y : y_star) pstar.push_back(&y);

  int t_max = 0;
  for (const auto* s : pi) t_max = std::max(t_max, static_cast<int>(s->size()));
  for (const auto* s : pstar) t_max = std::max(t_max, static_cast<int>(s->size()));
  if (t_max == 0) {
    out.kl_pi_to_pstar = out.kl_pstar_to_pi = out.js_tok = 0.0;
    return;
  }

  double kl_pq = 0.0, kl_qp = 0.0, js = 0.0;
  for (int t = 0; t < t_max; ++t) {
    std::map<int, double> mp = position_marginal(pi, t);
    std::map<int, double> mq = position_marginal(pstar, t);
    // A side with no survivors keeps an all-zero marginal; the epsilon in
    // kl_eps smooths it over the union support.
    std::set<int> support;
    for (const auto& [v, c] : mp) support.insert(v);
    for (const auto& [v, c] : mq) support.insert(v);
    if (support.empty()) continue;
    kl_pq += kl_eps(mp, mq, support);
    kl_qp += kl_eps(mq, mp, support);
    std::map<int, double> mid;
    for (int v : support) {
      double pv = mp.count(v) ? mp.at(v) : 0.0;
      double qv = mq.count(v) ? mq.at(v) : 0.0;
      mid[v] = 0.5 * (pv + qv);
    }
    js += 0.5 * kl_eps(mp, mid, support) + 0.5 * kl_eps(mq, mid, support);
  }
  out.kl_pi_to_pstar = kl_pq / t_max;
  out.kl_pstar_to_pi = kl_qp / t_max;
  out.js_tok = js / t_max;
}

MetricsReport compute_metrics(std::span<const EvalSample> samples,
                              const std::vector<std::vector<int>>& y_star, int n_actions,
                              int max_depth) {
  MetricsReport out;
  terminal_metrics(samples, max_depth, out);
  out.token_entropy = token_entropy(samples);
  out.prefix = prefix_diagnostics(samples, max_depth);
  coverage_metrics(samples, y_star, out);
  distribution_fidelity(samples, y_star, n_actions, out);
  return out;
}

double t_critical_975(int dof) {
  // Two-sided 95% critical values of Student's t.
  static const double table[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365,
                                 2.306,  2.262, 2.228, 2.201, 2.179, 2.160, 2.145,
                                 2.131,  2.120, 2.110, 2.101, 2.093, 2.086, 2.080,
                                 2.074,  2.069, 2.064, 2.060, 2.056, 2.052, 2.048,
                                 2.045,  2.042};
  if (dof < 1) throw MetricsError("t_critical_975: dof must be positive");
  if (dof <= 30) return table[dof - 1];
  if (dof <= 40) return 2.021;
  if (dof <= 60) return 2.000;
  if (dof <= 120) return 1.980;
  return 1.960;
}

std::optional<double> t_interval_halfwidth(std::span<const double> values) {
  int s = static_cast<int>(values.size());
  if (s < 2) return std::nullopt;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= s;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  double sd = std::sqrt(ss / (s - 1));
  return t_critical_975(s - 1) * sd / std::sqrt(static_cast<double>(s));
}

const std::vector<std::string>& metric_csv_columns() {
  static const std::vector<std::string> cols = {
      "step",       "n_samples",     "n_valid",       "acc",
      "score",      "len_mean",      "len_p50",       "len_p90",
      "log_pterm_mean", "token_entropy", "unique_valid", "cov_count",
      "cov",        "norm_cov",      "kl_pi_pstar",   "kl_pstar_pi",
      "js_tok",     "logz",          "loss"};
  return cols;
}

std::string metrics_csv_header() {
  std::string out;
  const auto& cols = metric_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) out += ",";
    out += cols[i];
  }
  return out + "\n";
}

std::string metrics_csv_row(long step, const MetricsReport& m, double log_z, double loss) {
  char buf[640];
  std::snprintf(buf, sizeof buf,
                "%ld,%d,%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%ld,%ld,%.10g,%.10g,"
                "%.10g,%.10g,%.10g,%.10g,%.10g\n",
                step, m.n_samples, m.n_valid, m.acc, m.score, m.len_mean, m.len_p50,
                m.len_p90, m.log_pterm_mean, m.token_entropy, m.unique_valid, m.cov_count,
                m.cov, m.norm_cov, m.kl_pi_to_pstar, m.kl_pstar_to_pi, m.js_tok, log_z, loss);
  return buf;
}

std::string per_depth_json(long step, const MetricsReport& m) {
  nlohmann::json j;
  j["step"] = step;
  j["surv"] = m.prefix.surv;
  j["pef_ent"] = m.prefix.pef_ent;
  j["eff"] = m.prefix.eff;
  j["top1"] = m.prefix.top1;
  j["unique_rate"] = m.prefix.unique_rate;
  j["frac_len"] = m.frac_len;
  return j.dump();
}

}  // namespace treeflow
