#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "prunevolve/eval.hpp"
#include "prunevolve/soap.hpp"

using namespace prunevolve;

namespace {

Tensor vec1x1(double v) { return Tensor({1, 1}, {v}); }

// Minimal two-class context with hand-sized filters and four 1x1 maps.
ChannelContext tiny_context() {
  ChannelContext ctx;
  ctx.layer_filter = Tensor({2, 1, 1, 2}, {0, 0, 4, 2});
  ctx.incoming_filter = Tensor({1, 1, 2}, {3, 4});
  ctx.bn_params = Tensor({4}, {-2, 0.5, 0, 1});
  ctx.maps.maps = {vec1x1(0), vec1x1(1), vec1x1(1), vec1x1(2)};
  ctx.labels = {1, 1, 2, 2};
  ctx.class_count = 2;
  return ctx;
}

double run(const char* name, const ChannelContext& ctx) {
  return evaluate(find_function(name)->tree, ctx);
}

}  // namespace

TEST_CASE("library shape: ten seeds, five references, fifteen total") {
  CHECK(soap_functions().size() == 10);
  CHECK(evolved_functions().size() == 5);
  CHECK(function_library().size() == 15);
  for (const NamedFunction& f : soap_functions()) CHECK(f.family == NamedFunction::Family::soap);
  for (const NamedFunction& f : evolved_functions()) CHECK(f.family == NamedFunction::Family::evolved);
  CHECK(oracle::names().size() == 15);
  for (std::size_t i = 0; i < oracle::names().size(); ++i)
    CHECK(function_library()[i].name == oracle::names()[i]);

  CHECK(find_function("mmd") != nullptr);
  CHECK(find_function("nope") == nullptr);
}

TEST_CASE("every library function matches its reference formula on seeded contexts") {
  for (const NamedFunction& f : function_library()) {
    ChannelContext probe = make_probe_context();
    const double o = oracle::score(f.name, probe);
    CHECK(std::fabs(evaluate(f.tree, probe) - o) <= 1e-9 * std::max(std::fabs(o), 1e-9));
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
      ChannelContext ctx = oracle::random_context(seed);
      const double ref = oracle::score(f.name, ctx);
      const double got = evaluate(f.tree, ctx);
      CHECK(std::fabs(got - ref) <= 1e-9 * std::max(std::fabs(ref), 1e-9));
    }
  }
}

TEST_CASE("hand-sized pins for the classic scorers") {
  ChannelContext ctx = tiny_context();

  CHECK(run("filter_l1", ctx) == 7.0);
  CHECK(run("filter_l2", ctx) == 5.0);
  CHECK(run("bn_scale", ctx) == 2.0);

  // Maps {0,1} vs {1,2}: gap 1, population variances 0.25 each, stds 0.5.
  CHECK(run("fisher_ratio", ctx) == 2.0);
  CHECK(run("abs_snr", ctx) == 1.0);
  CHECK(run("t_test", ctx) == 2.0);
  CHECK(run("sym_divergence", ctx) == 4.0);
  CHECK(run("evolved_partition_var", ctx) == 0.25);

  // The layer stack holds (0,0) and (4,2); its median is the midpoint (2,1),
  // and the incoming block (3,4) sits at distance sqrt(1 + 9).
  CHECK(run("geo_median", ctx) == doctest::Approx(std::sqrt(10.0)).epsilon(1e-12));

  // Incoming block (3,4): population variance of {3,4}.
  CHECK(run("evolved_filter_var", ctx) == 0.25);
}

TEST_CASE("mmd vanishes when both branch sides hold the same multiset") {
  ChannelContext ctx = tiny_context();
  ctx.maps.maps = {vec1x1(0.3), vec1x1(1.7), vec1x1(0.3), vec1x1(1.7)};
  ctx.labels = {1, 1, 2, 2};
  CHECK(run("mmd", ctx) == 0.0);

  // Identical maps within each side: both self-kernels are exactly 1 and all
  // four cross pairs share one distance d, so each side's bandwidth falls
  // back and the cross term is exp(-1/2) regardless of d.
  ChannelContext sep = tiny_context();
  sep.maps.maps = {vec1x1(1), vec1x1(1), vec1x1(6), vec1x1(6)};
  sep.labels = {1, 1, 2, 2};
  CHECK(run("mmd", sep) == doctest::Approx(2.0 - 2.0 * std::exp(-0.5)).epsilon(1e-15));
}

TEST_CASE("label-aware scores are exactly invariant under class renaming") {
  for (int classes : {2, 3, 5, 10}) {
    ChannelContext ctx = oracle::random_context(77 + classes, classes, 4 * classes);

    std::vector<int> reversed(classes), rotated(classes);
    for (int k = 0; k < classes; ++k) {
      reversed[k] = classes - k;
      rotated[k] = 1 + (k + 1) % classes;
    }

    for (const NamedFunction& f : function_library()) {
      if (!is_label_aware(f.tree)) continue;
      const double base = evaluate(f.tree, ctx);
      CHECK(evaluate(f.tree, oracle::permute_labels(ctx, reversed)) == base);
      CHECK(evaluate(f.tree, oracle::permute_labels(ctx, rotated)) == base);
    }
  }
}

TEST_CASE("label-aware evaluation needs a usable partition") {
  ChannelContext one = tiny_context();
  one.labels = {1, 1, 1, 1};
  one.class_count = 1;
  const ExprTree& fisher = find_function("fisher_ratio")->tree;
  CHECK_THROWS_AS(evaluate(fisher, one), EvalFailure);
  CHECK(evaluate(find_function("filter_l1")->tree, one) == 7.0);  // labelless trees do not care

  // A class with no maps is a failure, not a silent skip.
  ChannelContext missing = tiny_context();
  missing.labels = {1, 1, 1, 1};  // class 2 is declared but empty
  CHECK_THROWS_AS(evaluate(fisher, missing), EvalFailure);

  ChannelContext empty = tiny_context();
  empty.maps.maps.clear();
  empty.labels.clear();
  CHECK_THROWS_AS(evaluate(fisher, empty), EvalFailure);

  ChannelContext mismatch = tiny_context();
  mismatch.labels.pop_back();
  CHECK_THROWS_AS(evaluate(fisher, mismatch), EvalFailure);
}

TEST_CASE("slice evaluation validates the index") {
  ChannelContext ctx = tiny_context();
  CHECK(evaluate(parse_tree("(slice B 3)"), ctx) == 1.0);
  CHECK_THROWS_AS(evaluate(parse_tree("(slice B 7)"), ctx), EvalFailure);
  CHECK_THROWS_AS(evaluate(parse_tree("(slice B 2.5)"), ctx), EvalFailure);

  ExprNode neg = ExprNode::make_op(
      Op::slice, {ExprNode::make_operand(Operand::B), ExprNode::make_literal(-1.0)});
  CHECK_THROWS_AS(evaluate(ExprTree{neg}, ctx), EvalFailure);
}

TEST_CASE("non-scalar trees are rejected before evaluation") {
  ChannelContext ctx = tiny_context();
  CHECK_THROWS_AS(evaluate(parse_tree("(mean_s F)"), ctx), EvalFailure);
  CHECK_THROWS_AS(evaluate(parse_tree("F"), ctx), EvalFailure);
  CHECK_THROWS_AS(evaluate(parse_tree("(matmul F F)"), ctx), EvalFailure);
}

TEST_CASE("validity test demands kind, depth, and a finite probe value") {
  ChannelContext probe = make_probe_context();
  for (const NamedFunction& f : function_library()) CHECK(validity_test(f.tree, probe));

  CHECK_FALSE(validity_test(parse_tree("(mean_s F)"), probe));   // vector kind
  CHECK_FALSE(validity_test(parse_tree("(slice B 100)"), probe));  // probe failure

  std::string deep = "W";
  for (int i = 0; i < kMaxTreeDepth; ++i) deep = "(abs " + deep + ")";
  ExprTree tree = parse_tree("(sum_g " + deep + ")");  // depth cap + 2
  CHECK_FALSE(validity_test(tree, probe));
  CHECK(validity_test(parse_tree("(sum_g (abs W))"), probe));
}

TEST_CASE("probe context is deterministic and well-formed") {
  ChannelContext a = make_probe_context();
  ChannelContext b = make_probe_context();
  CHECK(a.maps.count() == 12);
  CHECK(a.labels.size() == 12);
  CHECK(a.class_count == 3);
  CHECK((a.maps.member_shape() == Shape{4, 4}));
  for (int k = 1; k <= 3; ++k)
    CHECK(std::count(a.labels.begin(), a.labels.end(), k) == 4);
  for (const Tensor& m : a.maps.maps)
    for (double v : m.data()) CHECK(v >= 0.0);

  CHECK(a.layer_filter == b.layer_filter);
  CHECK(a.maps == b.maps);
  for (const NamedFunction& f : function_library())
    CHECK(evaluate(f.tree, a) == evaluate(f.tree, b));

  ChannelContext other = make_probe_context(123);
  CHECK(evaluate(find_function("filter_l1")->tree, other) !=
        evaluate(find_function("filter_l1")->tree, a));
}
