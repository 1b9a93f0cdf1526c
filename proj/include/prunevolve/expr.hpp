#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace prunevolve {

enum class Operand { W, W_I, B, F, F_plus, F_minus };

enum class Op {
  add, sub, mul, div, abs, sq, sqrt, ridge,
  tr, matmul, inv, dot, outprod, tran,
  sum_g, sum_s, prod_g, prod_s, mean_g, mean_s,
  std_g, std_s, var_g, var_s, count_g, count_s,
  rbf, geo, slice,
};

std::string_view op_name(Op op);
std::string_view operand_name(Operand o);
int op_arity(Op op);  // slice reports 1; an optional literal index child is allowed

enum class SemanticKind {
  scalar, vector, matrix, map_collection, filter_block, layer_filter, param_vector, invalid,
};

std::string_view kind_name(SemanticKind k);

struct ExprNode {
  enum class Type { op, operand, literal };

  Type type = Type::literal;
  Op op{};
  Operand operand{};
  double literal = 0.0;
  std::vector<ExprNode> children;

  static ExprNode make_op(Op op, std::vector<ExprNode> children);
  static ExprNode make_operand(Operand o);
  static ExprNode make_literal(double v);

  bool is_op(Op o) const { return type == Type::op && op == o; }
  friend bool operator==(const ExprNode& a, const ExprNode& b) = default;
};

struct ExprTree {
  ExprNode root;
  friend bool operator==(const ExprTree& a, const ExprTree& b) = default;
};

// Leaf nodes count as depth 1.
int depth(const ExprNode& n);
std::size_t node_count(const ExprNode& n);
bool contains_label_operand(const ExprNode& n);
bool is_label_aware(const ExprTree& t);

// Structural cap on tree depth; the deepest library tree reaches it.
inline constexpr int kMaxTreeDepth = 10;

// Static result kind of a (sub)tree. Deterministic; `invalid` marks trees
// the runtime would reject regardless of data.
SemanticKind infer_kind(const ExprNode& n);
SemanticKind infer_kind(const ExprTree& t);

struct ParseError : std::runtime_error {
  std::size_t offset;
  ParseError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at offset " + std::to_string(offset)), offset(offset) {}
};

// One s-expression: atom | "(" opname tree+ ")".
ExprTree parse_tree(std::string_view text);

// All trees in a .fn stream: one expression per line, '#' starts a comment.
std::vector<ExprTree> parse_function_lines(std::string_view text);

std::string format_tree(const ExprNode& n);
std::string format_tree(const ExprTree& t);

}  // namespace prunevolve
