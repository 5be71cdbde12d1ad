#include "treeflow/grammar.hpp"

#include <algorithm>
#include <cctype>
#include <set>

namespace treeflow {

namespace {

struct Lexer {
  enum Kind { kIdent, kDefine, kPipe, kQuestion, kStar, kPlus, kLParen, kRParen,
              kLiteral, kClass, kEnd };
  struct Tok {
    Kind kind;
    std::string text;                          // ident name or literal content
    std::vector<std::pair<char, char>> ranges; // for kClass
    int line, col;
  };

  explicit Lexer(const std::string& src) : src_(&src) { advance(); }

  const Tok& peek() const { return tok_; }
  Tok take() {
    Tok t = tok_;
    advance();
    return t;
  }

  [[noreturn]] void fail(const std::string& msg, int line, int col) const {
    throw GrammarError("grammar syntax error at line " + std::to_string(line) +
                       ", column " + std::to_string(col) + ": " + msg);
  }

 private:
  void advance() {
    while (pos_ < src().size() && std::isspace(static_cast<unsigned char>(src()[pos_]))) bump();
    tok_.line = line_;
    tok_.col = col_;
    tok_.text.clear();
    tok_.ranges.clear();
    if (pos_ >= src().size()) {
      tok_.kind = kEnd;
      return;
    }
    char c = src()[pos_];
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      while (pos_ < src().size() &&
             (std::isalnum(static_cast<unsigned char>(src()[pos_])) || src()[pos_] == '_')) {
        tok_.text += src()[pos_];
        bump();
      }
      tok_.kind = kIdent;
      return;
    }
    if (src().compare(pos_, 3, "::=") == 0) {
      bump(); bump(); bump();
      tok_.kind = kDefine;
      return;
    }
    switch (c) {
      case '|': bump(); tok_.kind = kPipe; return;
      case '?': bump(); tok_.kind = kQuestion; return;
      case '*': bump(); tok_.kind = kStar; return;
      case '+': bump(); tok_.kind = kPlus; return;
      case '(': bump(); tok_.kind = kLParen; return;
      case ')': bump(); tok_.kind = kRParen; return;
      case '"': {
        bump();
        while (pos_ < src().size() && src()[pos_] != '"' && src()[pos_] != '\n') {
          tok_.text += src()[pos_];
          bump();
        }
        if (pos_ >= src().size() || src()[pos_] != '"')
          fail("unterminated string literal", tok_.line, tok_.col);
        bump();
        tok_.kind = kLiteral;
        return;
      }
      case '[': {
        bump();
        bool any = false;
        while (pos_ < src().size() && src()[pos_] != ']') {
          char lo = src()[pos_];
          if (lo == '\n') fail("unterminated character class", tok_.line, tok_.col);
          bump();
          char hi = lo;
          if (pos_ + 1 < src().size() && src()[pos_] == '-' && src()[pos_ + 1] != ']') {
            bump();
            hi = src()[pos_];
            bump();
          }
          if (hi < lo) fail("empty character range", tok_.line, tok_.col);
          tok_.ranges.emplace_back(lo, hi);
          any = true;
        }
        if (pos_ >= src().size()) fail("unterminated character class", tok_.line, tok_.col);
        if (!any) fail("empty character class", tok_.line, tok_.col);
        bump();
        tok_.kind = kClass;
        return;
      }
      default:
        fail(std::string("unexpected character '") + c + "'", line_, col_);
    }
  }

  const std::string& src() const { return *src_; }

  void bump() {
    if (src()[pos_] == '\n') {
      ++line_;
      col_ = 1;
    } else {
      ++col_;
    }
    ++pos_;
  }

  const std::string* src_;
  std::size_t pos_ = 0;
  int line_ = 1, col_ = 1;
  Tok tok_;
};

struct RuleParser {
  Lexer lex;
  std::map<std::string, std::pair<int, int>> ref_pos;  // first use of each rule ref

  explicit RuleParser(const std::string& src) : lex(src) {}

  // An IDENT starts a new rule definition iff followed by '::='.
  bool at_rule_boundary() {
    if (lex.peek().kind != Lexer::kIdent) return false;
    Lexer saved = lex;
    lex.take();
    bool boundary = lex.peek().kind == Lexer::kDefine;
    lex = saved;
    return boundary;
  }

  GrammarExpr parse_alt() {
    GrammarExpr alt;
    alt.kind = GrammarExpr::kAlt;
    alt.children.push_back(parse_seq());
    while (lex.peek().kind == Lexer::kPipe) {
      lex.take();
      alt.children.push_back(parse_seq());
    }
    if (alt.children.size() == 1) return alt.children[0];
    return alt;
  }

  GrammarExpr parse_seq() {
    GrammarExpr seq;
    seq.kind = GrammarExpr::kSeq;
    while (true) {
      Lexer::Kind k = lex.peek().kind;
      if (k == Lexer::kPipe || k == Lexer::kRParen || k == Lexer::kEnd) break;
      if (k == Lexer::kIdent && at_rule_boundary()) break;
      seq.children.push_back(parse_postfix());
    }
    if (seq.children.empty())
      lex.fail("empty rule body or alternative", lex.peek().line, lex.peek().col);
    if (seq.children.size() == 1) return seq.children[0];
    return seq;
  }

  GrammarExpr parse_postfix() {
    GrammarExpr e = parse_primary();
    while (true) {
      Lexer::Kind k = lex.peek().kind;
      if (k != Lexer::kQuestion && k != Lexer::kStar && k != Lexer::kPlus) break;
      GrammarExpr wrap;
      wrap.kind = k == Lexer::kQuestion ? GrammarExpr::kOpt
                : k == Lexer::kStar     ? GrammarExpr::kStar
                                        : GrammarExpr::kPlus;
      lex.take();
      wrap.children.push_back(std::move(e));
      e = std::move(wrap);
    }
    return e;
  }

  GrammarExpr parse_primary() {
    Lexer::Tok t = lex.take();
    GrammarExpr e;
    switch (t.kind) {
      case Lexer::kIdent:
        e.kind = GrammarExpr::kRuleRef;
        e.text = t.text;
        ref_pos.emplace(t.text, std::make_pair(t.line, t.col));
        return e;
      case Lexer::kLiteral:
        e.kind = GrammarExpr::kLiteral;
        e.text = t.text;
        return e;
      case Lexer::kClass:
        e.kind = GrammarExpr::kCharClass;
        e.ranges = t.ranges;
        return e;
      case Lexer::kLParen: {
        e = parse_alt();
        Lexer::Tok close = lex.take();
        if (close.kind != Lexer::kRParen) lex.fail("expected ')'", close.line, close.col);
        return e;
      }
      default:
        lex.fail("expected literal, character class, rule name, or '('", t.line, t.col);
    }
  }
};

void collect_terminals(const GrammarExpr& e, std::set<std::string>& out) {
  switch (e.kind) {
    case GrammarExpr::kLiteral:
      if (!e.text.empty()) out.insert(e.text);
      break;
    case GrammarExpr::kCharClass:
      for (auto [lo, hi] : e.ranges)
        for (char c = lo;; ++c) {
          out.insert(std::string(1, c));
          if (c == hi) break;
        }
      break;
    default:
      for (const auto& ch : e.children) collect_terminals(ch, out);
      break;
  }
}

void collect_refs(const GrammarExpr& e, std::set<std::string>& out) {
  if (e.kind == GrammarExpr::kRuleRef) out.insert(e.text);
  for (const auto& ch : e.children) collect_refs(ch, out);
}

std::uint64_t pack3(int a, int b, int c) {
  return (static_cast<std::uint64_t>(a) << 44) | (static_cast<std::uint64_t>(b) << 22) |
         static_cast<std::uint64_t>(c);
}

}  // namespace

Grammar parse_grammar(const std::string& source_text) {
  RuleParser p(source_text);
  Grammar g;
  while (p.lex.peek().kind != Lexer::kEnd) {
    Lexer::Tok name = p.lex.take();
    if (name.kind != Lexer::kIdent)
      p.lex.fail("expected rule name", name.line, name.col);
    Lexer::Tok def = p.lex.take();
    if (def.kind != Lexer::kDefine)
      p.lex.fail("expected '::=' after rule name", def.line, def.col);
    if (g.rules_.count(name.text))
      p.lex.fail("duplicate rule '" + name.text + "'", name.line, name.col);
    g.rules_[name.text] = p.parse_alt();
    g.rule_names_.push_back(name.text);
  }
  if (g.rule_names_.empty()) throw GrammarError("grammar defines no rules");

  // Undefined references, reported with the position of first use.
  for (const auto& [rname, body] : g.rules_) {
    std::set<std::string> refs;
    collect_refs(body, refs);
    for (const auto& r : refs) {
      if (!g.rules_.count(r)) {
        auto it = p.ref_pos.find(r);
        std::string where = it == p.ref_pos.end()
                                ? std::string()
                                : " at line " + std::to_string(it->second.first) + ", column " +
                                      std::to_string(it->second.second);
        throw GrammarError("undefined rule reference '" + r + "'" + where +
                           " (in rule '" + rname + "')");
      }
    }
  }

  g.compile();
  return g;
}

int Grammar::rule_id(const std::string& name) const {
  return rule_ids_.at(name);
}

int Grammar::token_id(const std::string& tok) const {
  auto it = token_ids_.find(tok);
  return it == token_ids_.end() ? -1 : it->second;
}

void Grammar::build_nfa(const GrammarExpr& e, RuleNfa& nfa, int from, int to) const {
  auto new_state = [&nfa]() {
    nfa.out.emplace_back();
    return static_cast<int>(nfa.out.size()) - 1;
  };
  auto edge = [&nfa](int a, Edge::Kind k, int sym, int b) {
    nfa.out[a].push_back(Edge{k, sym, b});
  };
  switch (e.kind) {
    case GrammarExpr::kLiteral:
      if (e.text.empty())
        edge(from, Edge::kEps, 0, to);
      else
        edge(from, Edge::kTerm, token_ids_.at(e.text), to);
      break;
    case GrammarExpr::kCharClass:
      for (auto [lo, hi] : e.ranges)
        for (char c = lo;; ++c) {
          edge(from, Edge::kTerm, token_ids_.at(std::string(1, c)), to);
          if (c == hi) break;
        }
      break;
    case GrammarExpr::kRuleRef:
      edge(from, Edge::kRule, rule_ids_.at(e.text), to);
      break;
    case GrammarExpr::kSeq: {
      int cur = from;
      for (std::size_t i = 0; i < e.children.size(); ++i) {
        int next = i + 1 == e.children.size() ? to : new_state();
        build_nfa(e.children[i], nfa, cur, next);
        cur = next;
      }
      if (e.children.empty()) edge(from, Edge::kEps, 0, to);
      break;
    }
    case GrammarExpr::kAlt:
      for (const auto& ch : e.children) build_nfa(ch, nfa, from, to);
      break;
    case GrammarExpr::kOpt:
      build_nfa(e.children[0], nfa, from, to);
      edge(from, Edge::kEps, 0, to);
      break;
    case GrammarExpr::kStar: {
      int n1 = new_state(), n2 = new_state();
      edge(from, Edge::kEps, 0, n1);
      build_nfa(e.children[0], nfa, n1, n2);
      edge(n2, Edge::kEps, 0, n1);
      edge(n2, Edge::kEps, 0, to);
      edge(from, Edge::kEps, 0, to);
      break;
    }
    case GrammarExpr::kPlus: {
      int n1 = new_state(), n2 = new_state();
      edge(from, Edge::kEps, 0, n1);
      build_nfa(e.children[0], nfa, n1, n2);
      edge(n2, Edge::kEps, 0, n1);
      edge(n2, Edge::kEps, 0, to);
      break;
    }
  }
}

void Grammar::compile() {
  for (std::size_t i = 0; i < rule_names_.size(); ++i)
    rule_ids_[rule_names_[i]] = static_cast<int>(i);
  root_ = rules_.count("root") ? rule_ids_.at("root") : 0;

  std::set<std::string> terms;
  for (const auto& [name, body] : rules_) collect_terminals(body, terms);
  alphabet_.assign(terms.begin(), terms.end());
  for (std::size_t i = 0; i < alphabet_.size(); ++i)
    token_ids_[alphabet_[i]] = static_cast<int>(i);

  nfas_.resize(rule_names_.size());
  for (std::size_t r = 0; r < rule_names_.size(); ++r) {
    RuleNfa& nfa = nfas_[r];
    nfa.out.resize(2);
    nfa.start = 0;
    nfa.accept = 1;
    build_nfa(rules_.at(rule_names_[r]), nfa, 0, 1);
  }

  // Nullable fixpoint: accept reachable from start via eps and nullable rules.
  nullable_.assign(nfas_.size(), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (std::size_t r = 0; r < nfas_.size(); ++r) {
      if (nullable_[r]) continue;
      const RuleNfa& nfa = nfas_[r];
      std::vector<char> vis(nfa.out.size(), 0);
      std::vector<int> stack{nfa.start};
      vis[nfa.start] = 1;
      bool hit = false;
      while (!stack.empty() && !hit) {
        int s = stack.back();
        stack.pop_back();
        if (s == nfa.accept) { hit = true; break; }
        for (const Edge& e : nfa.out[s]) {
          bool pass = e.kind == Edge::kEps || (e.kind == Edge::kRule && nullable_[e.sym]);
          if (pass && !vis[e.to]) {
            vis[e.to] = 1;
            stack.push_back(e.to);
          }
        }
      }
      if (vis[nfa.accept]) hit = true;
      if (hit) {
        nullable_[r] = 1;
        changed = true;
      }
    }
  }

  // Left recursion: rule edges reachable from start without consuming input.
  std::vector<std::set<int>> left_refs(nfas_.size());
  for (std::size_t r = 0; r < nfas_.size(); ++r) {
    const RuleNfa& nfa = nfas_[r];
    std::vector<char> vis(nfa.out.size(), 0);
    std::vector<int> stack{nfa.start};
    vis[nfa.start] = 1;
    while (!stack.empty()) {
      int s = stack.back();
      stack.pop_back();
      for (const Edge& e : nfa.out[s]) {
        if (e.kind == Edge::kRule) left_refs[r].insert(e.sym);
        bool pass = e.kind == Edge::kEps || (e.kind == Edge::kRule && nullable_[e.sym]);
        if (pass && !vis[e.to]) {
          vis[e.to] = 1;
          stack.push_back(e.to);
        }
      }
    }
  }
  {
    // DFS cycle detection over the left-reference digraph.
    std::vector<int> color(nfas_.size(), 0);
    std::vector<int> stack;
    auto dfs = [&](auto&& self, int r) -> void {
      color[r] = 1;
      for (int s : left_refs[r]) {
        if (color[s] == 1)
          throw GrammarError("left-recursive rule '" + rule_names_[s] + "' is not supported");
        if (color[s] == 0) self(self, s);
      }
      color[r] = 2;
    };
    for (std::size_t r = 0; r < nfas_.size(); ++r)
      if (color[r] == 0) dfs(dfs, static_cast<int>(r));
  }

  // Productive fixpoint: rule can derive some finite terminal string.
  productive_.assign(nfas_.size(), 0);
  changed = true;
  while (changed) {
    changed = false;
    for (std::size_t r = 0; r < nfas_.size(); ++r) {
      if (productive_[r]) continue;
      const RuleNfa& nfa = nfas_[r];
      std::vector<char> vis(nfa.out.size(), 0);
      std::vector<int> stack{nfa.start};
      vis[nfa.start] = 1;
      while (!stack.empty()) {
        int s = stack.back();
        stack.pop_back();
        for (const Edge& e : nfa.out[s]) {
          bool pass = e.kind == Edge::kEps || e.kind == Edge::kTerm ||
                      (e.kind == Edge::kRule && productive_[e.sym]);
          if (pass && !vis[e.to]) {
            vis[e.to] = 1;
            stack.push_back(e.to);
          }
        }
      }
      if (vis[nfa.accept]) {
        productive_[r] = 1;
        changed = true;
      }
    }
  }

  // Per-state viability: accept reachable via eps/term edges and productive
  // rule edges. Items whose state fails this are pruned, which makes a
  // non-empty chart row equivalent to prefix viability.
  for (RuleNfa& nfa : nfas_) {
    std::vector<std::vector<int>> rev(nfa.out.size());
    for (std::size_t s = 0; s < nfa.out.size(); ++s)
      for (const Edge& e : nfa.out[s]) {
        bool pass = e.kind != Edge::kRule || productive_[e.sym];
        if (pass) rev[e.to].push_back(static_cast<int>(s));
      }
    nfa.reach_accept.assign(nfa.out.size(), 0);
    std::vector<int> stack{nfa.accept};
    nfa.reach_accept[nfa.accept] = 1;
    while (!stack.empty()) {
      int s = stack.back();
      stack.pop_back();
      for (int p : rev[s])
        if (!nfa.reach_accept[p]) {
          nfa.reach_accept[p] = 1;
          stack.push_back(p);
        }
    }
  }
}

ParserState Grammar::start() const {
  return ParserState(this);
}

bool Grammar::accepts(std::span<const int> tokens) const {
  ParserState st = start();
  for (int t : tokens)
    if (!st.feed(t)) return false;
  return st.can_terminate();
}

bool Grammar::can_terminate(std::span<const int> prefix) const {
  ParserState st = start();
  for (int t : prefix)
    if (!st.feed(t)) return false;
  return st.can_terminate();
}

std::vector<int> Grammar::allowed_next(std::span<const int> prefix) const {
  ParserState st = start();
  for (int t : prefix)
    if (!st.feed(t)) return {};
  return st.allowed_tokens();
}

std::vector<int> Grammar::tokenize(const std::string& text) const {
  std::size_t max_len = 0;
  for (const auto& t : alphabet_) max_len = std::max(max_len, t.size());
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    int found = -1;
    for (std::size_t len = std::min(max_len, text.size() - pos); len >= 1; --len) {
      auto it = token_ids_.find(text.substr(pos, len));
      if (it != token_ids_.end()) {
        found = it->second;
        pos += len;
        break;
      }
    }
    if (found < 0)
      throw GrammarError("tokenize: no grammar token matches text at offset " +
                         std::to_string(pos));
    out.push_back(found);
  }
  return out;
}

std::string Grammar::detokenize(std::span<const int> tokens) const {
  std::string out;
  for (int t : tokens) out += alphabet_[t];
  return out;
}

ParserState::ParserState(const Grammar* g) : g_(g) {
  rows_.emplace_back();
  add_item(0, Item{g_->root_, g_->nfas_[g_->root_].start, 0});
  close_row(0);
}

bool ParserState::add_item(int n, Item it) {
  const Grammar::RuleNfa& nfa = g_->nfas_[it.rule];
  if (!nfa.reach_accept[it.state]) return false;
  std::uint64_t key = pack3(it.rule, it.state, it.origin);
  Row& row = rows_[n];
  if (!row.seen.insert(key).second) return false;
  if (static_cast<int>(row.items.size()) >= g_->max_items_)
    throw GrammarError("live item-set size exceeded cap of " +
                       std::to_string(g_->max_items_));
  row.items.push_back(it);
  return true;
}

void ParserState::complete(int n, int rule, int origin) {
  std::uint64_t key = pack3(rule, 0, origin);
  if (!rows_[n].completed.insert(key).second) return;
  Row& from = rows_[origin];
  for (std::size_t i = 0; i < from.items.size(); ++i) {
    Item jt = from.items[i];
    const Grammar::RuleNfa& nfa = g_->nfas_[jt.rule];
    for (const Grammar::Edge& e : nfa.out[jt.state])
      if (e.kind == Grammar::Edge::kRule && e.sym == rule)
        add_item(n, Item{jt.rule, e.to, jt.origin});
  }
}

void ParserState::close_row(int n) {
  Row& row = rows_[n];
  for (std::size_t i = 0; i < row.items.size(); ++i) {
    Item it = row.items[i];
    const Grammar::RuleNfa& nfa = g_->nfas_[it.rule];
    for (const Grammar::Edge& e : nfa.out[it.state]) {
      if (e.kind == Grammar::Edge::kEps) {
        add_item(n, Item{it.rule, e.to, it.origin});
      } else if (e.kind == Grammar::Edge::kRule) {
        if (!g_->productive_[e.sym] || !nfa.reach_accept[e.to]) continue;
        add_item(n, Item{e.sym, g_->nfas_[e.sym].start, n});
        // If the predicted rule already completed as nullable on this row,
        // advance past it immediately.
        if (row.completed.count(pack3(e.sym, 0, n)))
          add_item(n, Item{it.rule, e.to, it.origin});
      }
    }
    if (it.state == nfa.accept) complete(n, it.rule, it.origin);
  }
}

bool ParserState::feed(int token_id) {
  int n = static_cast<int>(rows_.size()) - 1;
  rows_.emplace_back();
  for (const Item& it : rows_[n].items) {
    const Grammar::RuleNfa& nfa = g_->nfas_[it.rule];
    for (const Grammar::Edge& e : nfa.out[it.state])
      if (e.kind == Grammar::Edge::kTerm && e.sym == token_id)
        add_item(n + 1, Item{it.rule, e.to, it.origin});
  }
  close_row(n + 1);
  return alive();
}

void ParserState::pop() {
  if (rows_.size() > 1) rows_.pop_back();
}

bool ParserState::can_terminate() const {
  const Row& row = rows_.back();
  int accept = g_->nfas_[g_->root_].accept;
  for (const Item& it : row.items)
    if (it.rule == g_->root_ && it.state == accept && it.origin == 0) return true;
  return false;
}

std::vector<int> ParserState::allowed_tokens() const {
  std::set<int> syms;
  for (const Item& it : rows_.back().items) {
    const Grammar::RuleNfa& nfa = g_->nfas_[it.rule];
    for (const Grammar::Edge& e : nfa.out[it.state])
      if (e.kind == Grammar::Edge::kTerm && nfa.reach_accept[e.to]) syms.insert(e.sym);
  }
  return std::vector<int>(syms.begin(), syms.end());
}

}  // namespace treeflow
