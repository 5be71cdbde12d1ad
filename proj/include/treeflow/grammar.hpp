#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace treeflow {

struct GrammarError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Expression tree of one EBNF rule body.
struct GrammarExpr {
  enum Kind { kSeq, kAlt, kOpt, kStar, kPlus, kLiteral, kCharClass, kRuleRef };
  Kind kind = kSeq;
  std::vector<GrammarExpr> children;           // kSeq / kAlt / kOpt / kStar / kPlus
  std::string text;                            // kLiteral value or kRuleRef name
  std::vector<std::pair<char, char>> ranges;   // kCharClass, inclusive ranges
};

class ParserState;

// Compiled EBNF-subset grammar. Immutable after parse_grammar; shareable.
//
// Tokens are whole grammar terminals: a quoted literal is one token (so "Br"
// is a single token) and every character of a character class is its own
// one-character token. Token ids index the sorted alphabet.
class Grammar {
 public:
  static constexpr int kDefaultMaxItems = 10000;

  const std::string& root_rule() const { return rule_names_[root_]; }
  const std::map<std::string, GrammarExpr>& rules() const { return rules_; }
  std::size_t rule_count() const { return rule_names_.size(); }

  const std::vector<std::string>& alphabet() const { return alphabet_; }
  int token_id(const std::string& tok) const;
  const std::string& token_str(int id) const { return alphabet_[id]; }

  // Cap on live Earley items per chart row; exceeding it throws.
  int max_live_items() const { return max_items_; }
  void set_max_live_items(int n) { max_items_ = n; }

  ParserState start() const;
  bool accepts(std::span<const int> tokens) const;
  bool can_terminate(std::span<const int> prefix) const;
  // Sorted token ids that keep the prefix viable; empty set for a dead prefix.
  std::vector<int> allowed_next(std::span<const int> prefix) const;

  // Greedy longest-match split of text into alphabet tokens.
  std::vector<int> tokenize(const std::string& text) const;
  std::string detokenize(std::span<const int> tokens) const;

 private:
  friend class ParserState;
  friend Grammar parse_grammar(const std::string& source_text);

  struct Edge {
    enum Kind { kEps, kTerm, kRule };
    Kind kind;
    int sym;  // token id (kTerm) or rule id (kRule)
    int to;
  };
  struct RuleNfa {
    int start = 0;
    int accept = 0;
    std::vector<std::vector<Edge>> out;
    std::vector<char> reach_accept;  // state can still reach accept
  };

  void compile();
  void build_nfa(const GrammarExpr& e, RuleNfa& nfa, int from, int to) const;
  int rule_id(const std::string& name) const;

  std::map<std::string, GrammarExpr> rules_;
  std::vector<std::string> rule_names_;   // id -> name
  std::map<std::string, int> rule_ids_;
  int root_ = 0;
  std::vector<std::string> alphabet_;     // sorted token strings
  std::map<std::string, int> token_ids_;
  std::vector<RuleNfa> nfas_;
  std::vector<char> nullable_;
  std::vector<char> productive_;
  int max_items_ = kDefaultMaxItems;
};

// Parses grammar text in the notation of the EBNF figures:
//   rule ::= expr     with  |  ?  *  +  ( )  "literal"  [a-z0-9] ranges.
// Throws GrammarError (with line/column) on syntax errors, undefined rule
// references, and left-recursive rules.
Grammar parse_grammar(const std::string& source_text);

// Incremental recognition state for one growing prefix. Single-owner; holds
// the full Earley chart so feeds can be undone with pop().
class ParserState {
 public:
  bool alive() const { return !rows_.back().items.empty(); }
  bool can_terminate() const;
  std::vector<int> allowed_tokens() const;  // sorted ids
  bool feed(int token_id);                  // returns alive() afterwards
  void pop();                               // undo the last feed
  int length() const { return static_cast<int>(rows_.size()) - 1; }

 private:
  friend class Grammar;
  explicit ParserState(const Grammar* g);

  struct Item {
    int rule;
    int state;
    int origin;
  };
  struct Row {
    std::vector<Item> items;
    std::unordered_set<std::uint64_t> seen;
    std::unordered_set<std::uint64_t> completed;  // (rule, origin) pairs
  };

  void close_row(int n);
  bool add_item(int n, Item it);
  void complete(int n, int rule, int origin);

  const Grammar* g_;
  std::vector<Row> rows_;
};

}  // namespace treeflow
