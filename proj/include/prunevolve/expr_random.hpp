#pragma once

#include <random>
#include <stdexcept>

#include "prunevolve/eval.hpp"
#include "prunevolve/expr.hpp"

namespace prunevolve {

struct GenerationExhausted : std::runtime_error {
  explicit GenerationExhausted(const std::string& what) : std::runtime_error(what) {}
};

struct GrowParams {
  int max_depth = 8;
  double p_leaf = 0.3;
  SemanticKind kind_target = SemanticKind::scalar;
  bool allow_label_operands = true;
  int max_tree_retries = 200;
};

// One random kind-correct subtree of depth <= max_depth. Literal leaves are
// never generated (they only enter trees through parsing). Throws
// GenerationExhausted when the kind cannot be produced within the budget.
ExprNode grow_subtree(std::mt19937_64& rng, SemanticKind kind, int max_depth, double p_leaf,
                      bool allow_label_operands);

// Random tree that passes validity_test on the probe context. Candidates
// failing the test are discarded and regrown; `attempts`, when given,
// accumulates the number of discards. Throws GenerationExhausted when
// max_tree_retries candidates in a row fail.
ExprTree random_tree(std::mt19937_64& rng, const GrowParams& params, const ChannelContext& probe,
                     const KernelConfig& cfg = {}, long* attempts = nullptr);

}  // namespace prunevolve
