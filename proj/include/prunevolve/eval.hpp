#pragma once

#include <cstdint>
#include <vector>

#include "prunevolve/expr.hpp"
#include "prunevolve/tensor.hpp"

namespace prunevolve {

// Everything a scoring function may look at for one channel.
struct ChannelContext {
  Tensor layer_filter;     // c_out x c_in x h x w, the channel's layer
  Tensor incoming_filter;  // c_in x h x w, the channel's own filter block
  Tensor bn_params;        // (gamma, beta, mean, var); (1,0,0,1) without BN
  MapCollection maps;      // one post-activation map per sample
  std::vector<int> labels; // class of each map, values in 1..class_count
  int class_count = 0;
};

// Scalar score of a tree on one channel. Label-aware trees are evaluated
// once per class k (F+ = maps of class k, F- = the rest) and the branch
// scores are averaged; the branch sum runs over sorted values so the result
// is exactly invariant under label renumbering. Throws EvalFailure when the
// tree cannot produce a finite scalar on this context.
double evaluate(const ExprTree& tree, const ChannelContext& ctx, const KernelConfig& cfg = {});

// True iff the tree is well-typed (scalar root kind), within the depth cap,
// and evaluates to a finite value on the probe context.
bool validity_test(const ExprTree& tree, const ChannelContext& probe, const KernelConfig& cfg = {},
                   int depth_cap = kMaxTreeDepth);

// Small synthetic context with non-negative maps (post-ReLU convention),
// three classes with distinct mean levels, and jittered filter data.
// The default seed is the fixed probe used for validity testing.
ChannelContext make_probe_context(std::uint64_t seed = 0xC0FFEE);

}  // namespace prunevolve
