#include "prunevolve/expr.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>

namespace prunevolve {

namespace {

struct OpInfo {
  Op op;
  std::string_view name;
  int arity;
};

constexpr std::array<OpInfo, 29> kOps{{
    {Op::add, "add", 2},       {Op::sub, "sub", 2},       {Op::mul, "mul", 2},
    {Op::div, "div", 2},       {Op::abs, "abs", 1},       {Op::sq, "sq", 1},
    {Op::sqrt, "sqrt", 1},     {Op::ridge, "ridge", 1},   {Op::tr, "tr", 1},
    {Op::matmul, "matmul", 2}, {Op::inv, "inv", 1},       {Op::dot, "dot", 2},
    {Op::outprod, "outprod", 2}, {Op::tran, "tran", 1},   {Op::sum_g, "sum_g", 1},
    {Op::sum_s, "sum_s", 1},   {Op::prod_g, "prod_g", 1}, {Op::prod_s, "prod_s", 1},
    {Op::mean_g, "mean_g", 1}, {Op::mean_s, "mean_s", 1}, {Op::std_g, "std_g", 1},
    {Op::std_s, "std_s", 1},   {Op::var_g, "var_g", 1},   {Op::var_s, "var_s", 1},
    {Op::count_g, "count_g", 1}, {Op::count_s, "count_s", 1}, {Op::rbf, "rbf", 2},
    {Op::geo, "geo", 1},       {Op::slice, "slice", 1},
}};

const OpInfo& info(Op op) {
  for (const OpInfo& i : kOps)
    if (i.op == op) return i;
  throw std::logic_error("unknown op code");
}

constexpr std::array<std::pair<Operand, std::string_view>, 6> kOperands{{
    {Operand::W, "W"},
    {Operand::W_I, "W_I"},
    {Operand::B, "B"},
    {Operand::F, "F"},
    {Operand::F_plus, "F+"},
    {Operand::F_minus, "F-"},
}};

}  // namespace

std::string_view op_name(Op op) { return info(op).name; }

std::string_view operand_name(Operand o) {
  for (const auto& [code, name] : kOperands)
    if (code == o) return name;
  throw std::logic_error("unknown operand code");
}

int op_arity(Op op) { return info(op).arity; }

std::string_view kind_name(SemanticKind k) {
  switch (k) {
    case SemanticKind::scalar: return "scalar";
    case SemanticKind::vector: return "vector";
    case SemanticKind::matrix: return "matrix";
    case SemanticKind::map_collection: return "map_collection";
    case SemanticKind::filter_block: return "filter_block";
    case SemanticKind::layer_filter: return "layer_filter";
    case SemanticKind::param_vector: return "param_vector";
    case SemanticKind::invalid: return "invalid";
  }
  return "?";
}

ExprNode ExprNode::make_op(Op op, std::vector<ExprNode> children) {
  ExprNode n;
  n.type = Type::op;
  n.op = op;
  n.children = std::move(children);
  return n;
}

ExprNode ExprNode::make_operand(Operand o) {
  ExprNode n;
  n.type = Type::operand;
  n.operand = o;
  return n;
}

ExprNode ExprNode::make_literal(double v) {
  ExprNode n;
  n.type = Type::literal;
  n.literal = v;
  return n;
}

int depth(const ExprNode& n) {
  int d = 0;
  for (const ExprNode& c : n.children) d = std::max(d, depth(c));
  return d + 1;
}

std::size_t node_count(const ExprNode& n) {
  std::size_t count = 1;
  for (const ExprNode& c : n.children) count += node_count(c);
  return count;
}

bool contains_label_operand(const ExprNode& n) {
  if (n.type == ExprNode::Type::operand &&
      (n.operand == Operand::F_plus || n.operand == Operand::F_minus))
    return true;
  for (const ExprNode& c : n.children)
    if (contains_label_operand(c)) return true;
  return false;
}

bool is_label_aware(const ExprTree& t) { return contains_label_operand(t.root); }

namespace {

using SK = SemanticKind;

bool vector_like(SK k) { return k == SK::vector || k == SK::param_vector || k == SK::filter_block; }
bool matrix_like(SK k) { return k == SK::matrix || k == SK::layer_filter; }
bool tensor_kind(SK k) {
  return k == SK::scalar || vector_like(k) || matrix_like(k);
}

// Dominance for elementwise joins of unequal tensor kinds.
int dominance(SK k) {
  switch (k) {
    case SK::scalar: return 0;
    case SK::param_vector: return 1;
    case SK::vector: return 2;
    case SK::matrix: return 3;
    case SK::filter_block: return 4;
    case SK::layer_filter: return 5;
    default: return -1;
  }
}

SK elementwise_join(SK a, SK b) {
  if (a == SK::invalid || b == SK::invalid) return SK::invalid;
  if (a == SK::map_collection || b == SK::map_collection) return SK::map_collection;
  if (a == b) return a;
  if (a == SK::scalar) return b;
  if (b == SK::scalar) return a;
  return dominance(a) >= dominance(b) ? a : b;
}

SK matmul_kind(SK a, SK b) {
  // Collections must be transposed into the left slot; a bare collection is
  // only accepted on the right, where it reads as its N x d data matrix.
  const bool a_ok = vector_like(a) || matrix_like(a);
  const bool b_ok = vector_like(b) || matrix_like(b) || b == SK::map_collection;
  if (!a_ok || !b_ok) return SK::invalid;
  const bool a_vec = vector_like(a);
  const bool b_vec = vector_like(b);
  if (a_vec && b_vec) return SK::scalar;
  if (a_vec || b_vec) return SK::vector;
  return SK::matrix;
}

}  // namespace

SemanticKind infer_kind(const ExprNode& n) {
  switch (n.type) {
    case ExprNode::Type::literal: return SK::scalar;
    case ExprNode::Type::operand:
      switch (n.operand) {
        case Operand::W: return SK::layer_filter;
        case Operand::W_I: return SK::filter_block;
        case Operand::B: return SK::param_vector;
        case Operand::F:
        case Operand::F_plus:
        case Operand::F_minus: return SK::map_collection;
      }
      return SK::invalid;
    case ExprNode::Type::op: break;
  }

  // slice takes one data child plus an optional literal index.
  if (n.op == Op::slice) {
    if (n.children.size() != 1 && n.children.size() != 2) return SK::invalid;
    if (n.children.size() == 2 && n.children[1].type != ExprNode::Type::literal) return SK::invalid;
    SK a = infer_kind(n.children[0]);
    return tensor_kind(a) ? SK::scalar : SK::invalid;
  }

  if (static_cast<int>(n.children.size()) != op_arity(n.op)) return SK::invalid;

  std::vector<SK> ks;
  ks.reserve(n.children.size());
  for (const ExprNode& c : n.children) {
    SK k = infer_kind(c);
    if (k == SK::invalid) return SK::invalid;
    ks.push_back(k);
  }

  switch (n.op) {
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div:
      return elementwise_join(ks[0], ks[1]);
    case Op::abs:
    case Op::sq:
    case Op::sqrt:
      return ks[0];
    case Op::ridge:
    case Op::inv:
      return (ks[0] == SK::scalar || ks[0] == SK::matrix) ? ks[0] : SK::invalid;
    case Op::tr:
      if (ks[0] == SK::map_collection) return SK::map_collection;
      return (ks[0] == SK::scalar || ks[0] == SK::matrix) ? SK::scalar : SK::invalid;
    case Op::matmul:
      return matmul_kind(ks[0], ks[1]);
    case Op::dot:
      return SK::scalar;
    case Op::outprod:
      return SK::matrix;
    case Op::tran:
      if (ks[0] == SK::map_collection || ks[0] == SK::layer_filter) return SK::matrix;
      return ks[0];
    case Op::sum_g:
    case Op::prod_g:
    case Op::mean_g:
    case Op::std_g:
    case Op::var_g:
    case Op::count_g:
      return SK::scalar;
    case Op::count_s:
      return ks[0] == SK::map_collection ? SK::scalar : SK::invalid;
    case Op::sum_s:
    case Op::prod_s:
    case Op::mean_s:
    case Op::std_s:
    case Op::var_s:
      return ks[0] == SK::map_collection ? SK::vector : SK::invalid;
    case Op::rbf:
      return (ks[0] == SK::map_collection && ks[1] == SK::map_collection) ? SK::matrix : SK::invalid;
    case Op::geo:
      return ks[0] == SK::layer_filter ? SK::filter_block : SK::invalid;
    case Op::slice:
      break;  // handled above
  }
  return SK::invalid;
}

SemanticKind infer_kind(const ExprTree& t) { return infer_kind(t.root); }

namespace {

struct Parser {
  std::string_view text;
  std::size_t pos = 0;
  int nesting = 0;
  static constexpr int kMaxNesting = 256;

  void skip_space() {
    while (pos < text.size()) {
      char c = text[pos];
      if (c == '#') {
        while (pos < text.size() && text[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos;
      } else {
        break;
      }
    }
  }

  bool at_end() {
    skip_space();
    return pos >= text.size();
  }

  [[noreturn]] void fail(const std::string& what) { throw ParseError(what, pos); }

  static bool atom_char(char c) {
    return !std::isspace(static_cast<unsigned char>(c)) && c != '(' && c != ')' && c != '#';
  }

  std::string_view read_atom() {
    std::size_t start = pos;
    while (pos < text.size() && atom_char(text[pos])) ++pos;
    if (pos == start) fail("expected an atom");
    return text.substr(start, pos - start);
  }

  ExprNode parse_node() {
    skip_space();
    if (pos >= text.size()) fail("unexpected end of input");
    if (text[pos] == ')') fail("unexpected ')'");
    if (text[pos] == '(') {
      if (++nesting > kMaxNesting) fail("expression nested too deeply");
      ++pos;
      skip_space();
      std::string_view name = read_atom();
      Op op{};
      bool found = false;
      for (const OpInfo& i : kOps)
        if (i.name == name) {
          op = i.op;
          found = true;
          break;
        }
      if (!found) fail("unknown operator '" + std::string(name) + "'");

      std::vector<ExprNode> children;
      while (true) {
        skip_space();
        if (pos >= text.size()) fail("missing ')'");
        if (text[pos] == ')') {
          ++pos;
          break;
        }
        children.push_back(parse_node());
      }
      --nesting;

      const int arity = op_arity(op);
      const bool arity_ok = op == Op::slice
                                ? (children.size() == 1 ||
                                   (children.size() == 2 && children[1].type == ExprNode::Type::literal))
                                : static_cast<int>(children.size()) == arity;
      if (!arity_ok)
        fail("operator '" + std::string(name) + "' takes " + std::to_string(arity) +
             (op == Op::slice ? " argument plus an optional literal index" : " argument(s)") +
             ", got " + std::to_string(children.size()));
      // Canonical slice form always carries its index child.
      if (op == Op::slice && children.size() == 1)
        children.push_back(ExprNode::make_literal(0.0));
      return ExprNode::make_op(op, std::move(children));
    }

    std::size_t atom_at = pos;
    std::string_view atom = read_atom();
    for (const auto& [code, name] : kOperands)
      if (name == atom) return ExprNode::make_operand(code);

    double value = 0.0;
    auto [ptr, ec] = std::from_chars(atom.data(), atom.data() + atom.size(), value);
    if (ec != std::errc() || ptr != atom.data() + atom.size()) {
      pos = atom_at;
      fail("unknown atom '" + std::string(atom) + "'");
    }
    return ExprNode::make_literal(value);
  }
};

}  // namespace

ExprTree parse_tree(std::string_view text) {
  Parser p{text};
  ExprNode root = p.parse_node();
  if (!p.at_end()) p.fail("trailing input after expression");
  return ExprTree{std::move(root)};
}

std::vector<ExprTree> parse_function_lines(std::string_view text) {
  std::vector<ExprTree> out;
  std::size_t line_start = 0;
  while (line_start <= text.size()) {
    std::size_t eol = text.find('\n', line_start);
    std::string_view line = text.substr(line_start, eol == std::string_view::npos ? std::string_view::npos
                                                                                  : eol - line_start);
    Parser probe{line};
    if (!probe.at_end()) {
      try {
        out.push_back(parse_tree(line));
      } catch (const ParseError& e) {
        // The constructor re-appends the offset, so drop the inner copy.
        std::string what = e.what();
        const std::size_t cut = what.rfind(" at offset ");
        if (cut != std::string::npos) what.erase(cut);
        throw ParseError(what + " (line starting at offset " + std::to_string(line_start) + ")",
                         line_start + e.offset);
      }
    }
    if (eol == std::string_view::npos) break;
    line_start = eol + 1;
  }
  return out;
}

namespace {

std::string format_literal(double v) {
  std::array<char, 32> buf;
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc()) return "0";
  return std::string(buf.data(), ptr);
}

void format_node(const ExprNode& n, std::string& out) {
  switch (n.type) {
    case ExprNode::Type::operand:
      out += operand_name(n.operand);
      return;
    case ExprNode::Type::literal:
      out += format_literal(n.literal);
      return;
    case ExprNode::Type::op:
      break;
  }
  out += '(';
  out += op_name(n.op);
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    const ExprNode& c = n.children[i];
    // A slice index of zero is the default and is omitted.
    if (n.op == Op::slice && i == 1 && c.type == ExprNode::Type::literal && c.literal == 0.0)
      continue;
    out += ' ';
    format_node(c, out);
  }
  out += ')';
}

}  // namespace

std::string format_tree(const ExprNode& n) {
  std::string out;
  format_node(n, out);
  return out;
}

std::string format_tree(const ExprTree& t) { return format_tree(t.root); }

}  // namespace prunevolve
