#include "treeflow/env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace treeflow {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

const char* kExpr24Grammar = R"(root  ::= expr4
expr4 ::= num | num op num | num op num op num | num op num op num op num
| num op num op num op num op num | num op num op num op num op num op num
op    ::= "+" | "-" | "*" | "/"
num   ::= [0-9]
)";

class Expr24Walk : public EnvWalk {
 public:
  Expr24Walk(const Expr24Env* env)
      : env_(env), state_(env->grammar().start()) {}

  LegalActions legal() const override {
    LegalActions out;
    int len = state_.length();
    if (len < env_->max_len()) out.tokens = state_.allowed_tokens();
    out.stop = state_.can_terminate() && len >= env_->min_len();
    return out;
  }

  void push(int token) override { state_.feed(token); }
  void pop() override { state_.pop(); }
  int length() const override { return state_.length(); }

  double ref_log_prob(int action) const override {
    if (!state_.alive()) throw EnvError("ref_log_prob: dead prefix");
    LegalActions la = legal();
    int n = la.size();
    if (n == 0) throw EnvError("ref_log_prob: no legal action at prefix");
    bool is_legal = action < 0
                        ? la.stop
                        : std::binary_search(la.tokens.begin(), la.tokens.end(), action);
    return is_legal ? -std::log(static_cast<double>(n)) : kNegInf;
  }

 private:
  const Expr24Env* env_;
  ParserState state_;
};

class TinyTreeWalk : public EnvWalk {
 public:
  TinyTreeWalk(const TinyTreeEnv* env) : env_(env) {}

  LegalActions legal() const override {
    LegalActions out;
    int len = static_cast<int>(prefix_.size());
    if (len < env_->max_len()) {
      out.tokens.resize(env_->vocab_size());
      for (int i = 0; i < env_->vocab_size(); ++i) out.tokens[i] = i;
    }
    out.stop = len >= env_->min_len();
    return out;
  }

  void push(int token) override { prefix_.push_back(token); }
  void pop() override { prefix_.pop_back(); }
  int length() const override { return static_cast<int>(prefix_.size()); }

  double ref_log_prob(int action) const override {
    LegalActions la = legal();
    int n = la.size();
    if (n == 0) throw EnvError("ref_log_prob: no legal action at prefix");
    bool is_legal = action < 0 ? la.stop : action < env_->vocab_size();
    return is_legal ? -std::log(static_cast<double>(n)) : kNegInf;
  }

 private:
  const TinyTreeEnv* env_;
  std::vector<int> prefix_;
};

}  // namespace

const char* Expr24Env::grammar_text() { return kExpr24Grammar; }

Expr24Env::Expr24Env(EnvConfig cfg)
    : cfg_(cfg), grammar_(parse_grammar(kExpr24Grammar)) {
  if (cfg_.min_len < 1 || cfg_.min_len > cfg_.max_len)
    throw EnvError("Expr24Env: need 1 <= min_len <= max_len");
  if (cfg_.kappa < 0 || cfg_.lambda < 0)
    throw EnvError("Expr24Env: kappa and lambda must be non-negative");
}

EvalResult Expr24Env::evaluate(std::span<const int> tokens) const {
  EvalResult out;
  if (tokens.empty() || tokens.size() % 2 == 0) return out;
  const auto& alpha = grammar_.alphabet();
  auto digit_of = [&](int id) -> int {
    const std::string& s = alpha[id];
    return (s.size() == 1 && s[0] >= '0' && s[0] <= '9') ? s[0] - '0' : -1;
  };
  auto op_of = [&](int id) -> char {
    const std::string& s = alpha[id];
    return (s.size() == 1 && (s[0] == '+' || s[0] == '-' || s[0] == '*' || s[0] == '/'))
               ? s[0]
               : '\0';
  };

  int d0 = digit_of(tokens[0]);
  if (d0 < 0) return out;
  Rational sum(0);
  Rational prod(d0);
  int sign = 1;
  for (std::size_t i = 1; i + 1 < tokens.size(); i += 2) {
    char op = op_of(tokens[i]);
    int d = digit_of(tokens[i + 1]);
    if (op == '\0' || d < 0) return out;
    if (op == '*') {
      prod = prod * Rational(d);
    } else if (op == '/') {
      if (d == 0) return out;  // division by zero invalidates the expression
      prod = prod / Rational(d);
    } else {
      sum = sum + (sign > 0 ? prod : Rational(0) - prod);
      sign = op == '+' ? 1 : -1;
      prod = Rational(d);
    }
  }
  out.value = sum + (sign > 0 ? prod : Rational(0) - prod);
  out.valid = true;
  return out;
}

EvalResult Expr24Env::evaluate_str(const std::string& text) const {
  return evaluate(grammar_.tokenize(text));
}

int Expr24Env::task_score(std::span<const int> tokens) const {
  int len = static_cast<int>(tokens.size());
  if (len < cfg_.min_len || len > cfg_.max_len) return 0;
  EvalResult r = evaluate(tokens);
  return r.valid && *r.value == cfg_.target ? 1 : 0;
}

double Expr24Env::ref_log_prob(std::span<const int> prefix, int action) const {
  Expr24Walk w(this);
  for (int t : prefix) w.push(t);
  return w.ref_log_prob(action);
}

double Expr24Env::stop_reward_log(std::span<const int> prefix) const {
  RewardArrays arrays = reward_arrays(prefix);
  return arrays.log_r.back();
}

RewardArrays Expr24Env::reward_arrays(std::span<const int> tokens) const {
  RewardArrays out;
  int len = static_cast<int>(tokens.size());
  out.log_r.resize(len + 1);
  out.u.resize(len + 1);
  out.stop_legal.resize(len + 1);

  Expr24Walk w(this);
  double cum_ref = 0.0;  // sum of token-step reference log-probs so far
  for (int k = 0; k <= len; ++k) {
    LegalActions la = w.legal();
    if (la.size() == 0)
      throw EnvError("reward_arrays: dead prefix at depth " + std::to_string(k));
    double s = cfg_.lambda * task_score(tokens.subspan(0, k));
    out.u[k] = s;
    out.stop_legal[k] = la.stop ? 1 : 0;
    if (la.stop) {
      double stop_lp = -std::log(static_cast<double>(la.size()));
      out.log_r[k] = cfg_.kappa * (cum_ref + stop_lp) + s;
    } else {
      out.log_r[k] = cfg_.kappa > 0 ? kNegInf : s;
    }
    if (k < len) {
      if (!std::binary_search(la.tokens.begin(), la.tokens.end(), tokens[k]))
        throw EnvError("reward_arrays: token not legal at depth " + std::to_string(k));
      cum_ref += -std::log(static_cast<double>(la.size()));
      w.push(tokens[k]);
    }
  }
  return out;
}

std::vector<std::vector<int>> Expr24Env::enumerate_solutions() const {
  std::vector<std::vector<int>> out;
  ParserState st = grammar_.start();
  std::vector<int> prefix;
  auto dfs = [&](auto&& self) -> void {
    int len = static_cast<int>(prefix.size());
    if (len >= cfg_.min_len && st.can_terminate() && task_score(prefix) == 1)
      out.push_back(prefix);
    if (len == cfg_.max_len) return;
    for (int t : st.allowed_tokens()) {
      prefix.push_back(t);
      st.feed(t);
      self(self);
      st.pop();
      prefix.pop_back();
    }
  };
  dfs(dfs);
  // DFS over sorted token ids emits prefixes before extensions, which is
  // already lexicographic order over the detokenized strings.
  return out;
}

std::unique_ptr<EnvWalk> Expr24Env::walk() const {
  return std::make_unique<Expr24Walk>(this);
}

TinyTreeEnv::TinyTreeEnv(std::vector<std::string> vocab, int min_len, int max_len,
                         std::map<std::string, double> rewards)
    : vocab_(std::move(vocab)), min_len_(min_len), max_len_(max_len),
      rewards_(std::move(rewards)) {
  if (vocab_.empty()) throw EnvError("TinyTreeEnv: empty vocabulary");
  if (min_len_ < 1 || min_len_ > max_len_)
    throw EnvError("TinyTreeEnv: need 1 <= min_len <= max_len");
  // The reward table must cover every terminal.
  std::vector<int> seq;
  auto check = [&](auto&& self) -> void {
    int len = static_cast<int>(seq.size());
    if (len >= min_len_) {
      std::string key = to_string(seq);
      auto it = rewards_.find(key);
      if (it == rewards_.end() || !(it->second > 0))
        throw EnvError("TinyTreeEnv: missing or non-positive reward for '" + key + "'");
    }
    if (len == max_len_) return;
    for (int t = 0; t < static_cast<int>(vocab_.size()); ++t) {
      seq.push_back(t);
      self(self);
      seq.pop_back();
    }
  };
  check(check);
}

double TinyTreeEnv::reward(std::span<const int> tokens) const {
  auto it = rewards_.find(to_string(tokens));
  if (it == rewards_.end()) throw EnvError("TinyTreeEnv: no reward for sequence");
  return it->second;
}

double TinyTreeEnv::log_sum_rewards() const {
  double total = 0.0;
  for (const auto& leaf : solution_set()) total += reward(leaf);
  return std::log(total);
}

RewardArrays TinyTreeEnv::reward_arrays(std::span<const int> tokens) const {
  RewardArrays out;
  int len = static_cast<int>(tokens.size());
  out.log_r.resize(len + 1);
  out.u.resize(len + 1);
  out.stop_legal.resize(len + 1);
  for (int k = 0; k <= len; ++k) {
    bool stoppable = k >= min_len_;
    out.stop_legal[k] = stoppable ? 1 : 0;
    double lr = stoppable ? std::log(reward(tokens.subspan(0, k))) : kNegInf;
    out.log_r[k] = lr;
    out.u[k] = stoppable ? lr : 0.0;
  }
  return out;
}

std::vector<std::vector<int>> TinyTreeEnv::solution_set() const {
  std::vector<std::vector<int>> out;
  std::vector<int> seq;
  auto walk_all = [&](auto&& self) -> void {
    int len = static_cast<int>(seq.size());
    if (len >= min_len_) out.push_back(seq);
    if (len == max_len_) return;
    for (int t = 0; t < static_cast<int>(vocab_.size()); ++t) {
      seq.push_back(t);
      self(self);
      seq.pop_back();
    }
  };
  walk_all(walk_all);
  std::sort(out.begin(), out.end(), [this](const auto& a, const auto& b) {
    return to_string(a) < to_string(b);
  });
  return out;
}

std::string TinyTreeEnv::to_string(std::span<const int> tokens) const {
  std::string out;
  for (int t : tokens) out += vocab_[t];
  return out;
}

std::unique_ptr<EnvWalk> TinyTreeEnv::walk() const {
  return std::make_unique<TinyTreeWalk>(this);
}

}  // namespace treeflow
