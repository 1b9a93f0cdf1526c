#include "prunevolve/expr_random.hpp"

#include <array>

namespace prunevolve {

namespace {

using SK = SemanticKind;

// Smallest depth at which a subtree of the kind can bottom out. Scalars,
// vectors and matrices have no leaves and need one operator above the data.
int min_depth(SK k) {
  switch (k) {
    case SK::map_collection:
    case SK::filter_block:
    case SK::layer_filter:
    case SK::param_vector:
      return 1;
    default:
      return 2;
  }
}

bool has_leaf(SK k) { return min_depth(k) == 1; }

std::size_t pick_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

double pick_unit(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

ExprNode leaf_of(std::mt19937_64& rng, SK kind, bool allow_labels) {
  switch (kind) {
    case SK::filter_block: return ExprNode::make_operand(Operand::W_I);
    case SK::layer_filter: return ExprNode::make_operand(Operand::W);
    case SK::param_vector: return ExprNode::make_operand(Operand::B);
    case SK::map_collection: {
      if (!allow_labels) return ExprNode::make_operand(Operand::F);
      constexpr std::array<Operand, 3> choices{Operand::F, Operand::F_plus, Operand::F_minus};
      return ExprNode::make_operand(choices[pick_index(rng, choices.size())]);
    }
    default:
      throw std::logic_error("no leaf for kind");
  }
}

Op pick_binary(std::mt19937_64& rng) {
  constexpr std::array<Op, 4> ops{Op::add, Op::sub, Op::mul, Op::div};
  return ops[pick_index(rng, ops.size())];
}

Op pick_unary(std::mt19937_64& rng) {
  constexpr std::array<Op, 3> ops{Op::abs, Op::sq, Op::sqrt};
  return ops[pick_index(rng, ops.size())];
}

// Weighted pick of a feasible child kind for polymorphic slots.
SK pick_any_kind(std::mt19937_64& rng, int budget) {
  std::vector<SK> pool;
  auto push = [&](SK k, int copies) {
    if (budget >= min_depth(k))
      for (int i = 0; i < copies; ++i) pool.push_back(k);
  };
  push(SK::map_collection, 3);
  push(SK::filter_block, 2);
  push(SK::vector, 2);
  push(SK::layer_filter, 1);
  push(SK::param_vector, 1);
  push(SK::scalar, 1);
  push(SK::matrix, 1);
  return pool[pick_index(rng, pool.size())];
}

SK pick_vector_cat(std::mt19937_64& rng, int budget) {
  std::vector<SK> pool{SK::filter_block, SK::param_vector};
  if (budget >= min_depth(SK::vector)) pool.push_back(SK::vector);
  return pool[pick_index(rng, pool.size())];
}

SK pick_matrix_cat(std::mt19937_64& rng, int budget, bool allow_collection) {
  std::vector<SK> pool{SK::layer_filter};
  if (budget >= min_depth(SK::matrix)) pool.push_back(SK::matrix);
  if (allow_collection) pool.push_back(SK::map_collection);
  return pool[pick_index(rng, pool.size())];
}

struct Production {
  Op op;
  std::vector<SK> kids;
};

ExprNode grow(std::mt19937_64& rng, SK kind, int budget, double p_leaf, bool allow_labels);

ExprNode apply(std::mt19937_64& rng, const Production& p, int budget, double p_leaf,
               bool allow_labels) {
  std::vector<ExprNode> kids;
  kids.reserve(p.kids.size());
  for (SK k : p.kids) kids.push_back(grow(rng, k, budget - 1, p_leaf, allow_labels));
  if (p.op == Op::slice) kids.push_back(ExprNode::make_literal(0.0));
  return ExprNode::make_op(p.op, std::move(kids));
}

ExprNode grow(std::mt19937_64& rng, SK kind, int budget, double p_leaf, bool allow_labels) {
  if (budget < min_depth(kind))
    throw GenerationExhausted("kind " + std::string(kind_name(kind)) + " needs depth " +
                              std::to_string(min_depth(kind)));
  if (has_leaf(kind) && (budget == 1 || pick_unit(rng) < p_leaf))
    return leaf_of(rng, kind, allow_labels);

  const int bd = budget - 1;  // child budget
  std::vector<Production> prods;
  auto add = [&](Op op, std::vector<SK> kids, int copies = 1) {
    for (SK k : kids)
      if (bd < min_depth(k)) return;
    for (int i = 0; i < copies; ++i) prods.push_back({op, kids});
  };
  const SK any = pick_any_kind(rng, bd);
  const SK vec_a = pick_vector_cat(rng, bd);
  const SK vec_b = pick_vector_cat(rng, bd);
  const SK mat_left = pick_matrix_cat(rng, bd, false);
  const SK mat_right = pick_matrix_cat(rng, bd, true);

  switch (kind) {
    case SK::scalar: {
      add(Op::sum_g, {any}, 2);
      add(Op::mean_g, {any}, 2);
      add(Op::var_g, {any}, 2);
      add(Op::std_g, {any}, 2);
      add(Op::count_g, {any});
      add(Op::prod_g, {any});
      add(Op::count_s, {SK::map_collection}, 2);
      add(Op::dot, {any, any}, 2);
      add(Op::slice, {vec_a}, 2);
      add(Op::matmul, {vec_a, vec_b});
      add(Op::tr, {SK::matrix});
      add(pick_binary(rng), {SK::scalar, SK::scalar}, 2);
      add(pick_unary(rng), {SK::scalar});
      break;
    }
    case SK::vector: {
      add(Op::mean_s, {SK::map_collection}, 2);
      add(Op::sum_s, {SK::map_collection});
      add(Op::std_s, {SK::map_collection});
      add(Op::var_s, {SK::map_collection});
      add(Op::prod_s, {SK::map_collection});
      add(Op::matmul, {mat_left, vec_a});
      add(Op::matmul, {vec_a, mat_right});
      add(pick_binary(rng), {SK::vector, SK::scalar});
      add(pick_binary(rng), {SK::vector, SK::vector});
      add(pick_unary(rng), {SK::vector});
      break;
    }
    case SK::matrix: {
      add(Op::rbf, {SK::map_collection, SK::map_collection}, 2);
      add(Op::tran, {SK::map_collection});
      add(Op::tran, {SK::layer_filter});
      add(Op::tran, {SK::matrix});
      add(Op::outprod, {any, any});
      add(Op::matmul, {mat_left, mat_right});
      add(Op::ridge, {SK::matrix});
      add(Op::inv, {SK::matrix});
      add(pick_binary(rng), {SK::matrix, SK::scalar});
      add(pick_unary(rng), {SK::matrix});
      break;
    }
    case SK::map_collection: {
      add(pick_unary(rng), {SK::map_collection}, 2);
      add(pick_binary(rng), {SK::map_collection, SK::scalar}, 2);
      add(pick_binary(rng), {SK::map_collection, vec_a});
      add(pick_binary(rng), {SK::map_collection, SK::map_collection});
      add(Op::tr, {SK::map_collection});
      break;
    }
    case SK::filter_block: {
      add(Op::geo, {SK::layer_filter}, 2);
      add(pick_unary(rng), {SK::filter_block}, 2);
      add(pick_binary(rng), {SK::filter_block, SK::scalar});
      add(pick_binary(rng), {SK::filter_block, SK::filter_block});
      break;
    }
    case SK::layer_filter: {
      add(pick_unary(rng), {SK::layer_filter});
      add(pick_binary(rng), {SK::layer_filter, SK::scalar});
      add(pick_binary(rng), {SK::layer_filter, SK::layer_filter});
      break;
    }
    case SK::param_vector: {
      add(pick_unary(rng), {SK::param_vector});
      add(pick_binary(rng), {SK::param_vector, SK::scalar});
      add(pick_binary(rng), {SK::param_vector, SK::param_vector});
      break;
    }
    case SK::invalid:
      throw std::logic_error("cannot grow invalid kind");
  }

  if (prods.empty()) {
    if (has_leaf(kind)) return leaf_of(rng, kind, allow_labels);
    throw GenerationExhausted("no productions for kind " + std::string(kind_name(kind)) +
                              " at depth " + std::to_string(budget));
  }
  return apply(rng, prods[pick_index(rng, prods.size())], budget, p_leaf, allow_labels);
}

}  // namespace

ExprNode grow_subtree(std::mt19937_64& rng, SemanticKind kind, int max_depth, double p_leaf,
                      bool allow_label_operands) {
  return grow(rng, kind, max_depth, p_leaf, allow_label_operands);
}

ExprTree random_tree(std::mt19937_64& rng, const GrowParams& params, const ChannelContext& probe,
                     const KernelConfig& cfg, long* attempts) {
  for (int attempt = 0; attempt < params.max_tree_retries; ++attempt) {
    ExprTree candidate;
    try {
      candidate.root =
          grow(rng, params.kind_target, params.max_depth, params.p_leaf, params.allow_label_operands);
    } catch (const GenerationExhausted&) {
      if (min_depth(params.kind_target) > params.max_depth)
        throw;  // no candidate can ever fit; retrying would loop forever
      if (attempts) ++*attempts;
      continue;
    }
    if (validity_test(candidate, probe, cfg)) return candidate;
    if (attempts) ++*attempts;
  }
  throw GenerationExhausted("no valid tree after " + std::to_string(params.max_tree_retries) +
                            " attempts");
}

}  // namespace prunevolve
