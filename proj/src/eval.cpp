#include "prunevolve/eval.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace prunevolve {

namespace {

using SK = SemanticKind;

// Runtime value: a tensor or a map collection, tagged with its static kind.
struct Value {
  SK kind = SK::scalar;
  Tensor tensor;
  MapCollection coll;

  static Value of(SK kind, Tensor t) { return Value{kind, std::move(t), {}}; }
  static Value collection(MapCollection c) { return Value{SK::map_collection, {}, std::move(c)}; }
  bool is_coll() const { return kind == SK::map_collection; }
};

struct Bindings {
  const ChannelContext* ctx;
  MapCollection f_plus;
  MapCollection f_minus;
  bool has_partition = false;
};

UnaryOp unary_of(Op op) {
  switch (op) {
    case Op::abs: return UnaryOp::abs;
    case Op::sq: return UnaryOp::sq;
    default: return UnaryOp::sqrt;
  }
}

BinaryOp binary_of(Op op) {
  switch (op) {
    case Op::add: return BinaryOp::add;
    case Op::sub: return BinaryOp::sub;
    case Op::mul: return BinaryOp::mul;
    default: return BinaryOp::div;
  }
}

StatOp stat_of(Op op) {
  switch (op) {
    case Op::sum_g: case Op::sum_s: return StatOp::sum;
    case Op::prod_g: case Op::prod_s: return StatOp::prod;
    case Op::mean_g: case Op::mean_s: return StatOp::mean;
    case Op::std_g: case Op::std_s: return StatOp::stddev;
    case Op::var_g: case Op::var_s: return StatOp::var;
    default: return StatOp::count;
  }
}

bool vector_like(SK k) { return k == SK::vector || k == SK::param_vector || k == SK::filter_block; }

// View of a value as a matmul operand: vectors flatten to rank-1 (orientation
// is positional), collections read as their N x d data matrix, filter stacks
// as c_out x d.
Tensor matmul_view(const Value& v) {
  if (v.is_coll()) return collection_matrix(v.coll);
  if (v.kind == SK::layer_filter) return filter_matrix(v.tensor);
  if (vector_like(v.kind)) return v.tensor.flattened();
  return v.tensor;  // matrix: already rank-2, scalars are rejected statically
}

Tensor flat_view(const Value& v) {
  if (!v.is_coll()) return v.tensor.flattened();
  std::vector<double> data;
  data.reserve(v.coll.total_entries());
  for (const Tensor& m : v.coll.maps) data.insert(data.end(), m.data().begin(), m.data().end());
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Value eval_elementwise_binary(Op op, const Value& a, const Value& c) {
  BinaryOp bop = binary_of(op);
  if (a.is_coll() && c.is_coll())
    return Value::collection(binary_elementwise(bop, a.coll, c.coll));
  if (a.is_coll()) return Value::collection(binary_elementwise(bop, a.coll, c.tensor));
  if (c.is_coll()) return Value::collection(binary_elementwise(bop, a.tensor, c.coll));
  return Value::of(SK::scalar, binary_elementwise(bop, a.tensor, c.tensor));
}

Value eval_node(const ExprNode& n, const Bindings& b, const KernelConfig& cfg) {
  switch (n.type) {
    case ExprNode::Type::literal:
      return Value::of(SK::scalar, Tensor::scalar(n.literal));
    case ExprNode::Type::operand:
      switch (n.operand) {
        case Operand::W: return Value::of(SK::layer_filter, b.ctx->layer_filter);
        case Operand::W_I: return Value::of(SK::filter_block, b.ctx->incoming_filter);
        case Operand::B: return Value::of(SK::param_vector, b.ctx->bn_params);
        case Operand::F: return Value::collection(b.ctx->maps);
        case Operand::F_plus:
          if (!b.has_partition) throw EvalFailure("F+ used without a class partition");
          return Value::collection(b.f_plus);
        case Operand::F_minus:
          if (!b.has_partition) throw EvalFailure("F- used without a class partition");
          return Value::collection(b.f_minus);
      }
      throw EvalFailure("unknown operand");
    case ExprNode::Type::op:
      break;
  }

  const SK out_kind = infer_kind(n);
  if (out_kind == SK::invalid) throw EvalFailure("ill-typed subexpression");

  switch (n.op) {
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      Value a = eval_node(n.children[0], b, cfg);
      Value c = eval_node(n.children[1], b, cfg);
      Value out = eval_elementwise_binary(n.op, a, c);
      out.kind = out.is_coll() ? SK::map_collection : out_kind;
      return out;
    }
    case Op::abs:
    case Op::sq:
    case Op::sqrt: {
      Value a = eval_node(n.children[0], b, cfg);
      if (a.is_coll()) return Value::collection(unary_elementwise(unary_of(n.op), a.coll));
      return Value::of(out_kind, unary_elementwise(unary_of(n.op), a.tensor));
    }
    case Op::ridge: {
      Value a = eval_node(n.children[0], b, cfg);
      return Value::of(out_kind, ridge(a.tensor, cfg));
    }
    case Op::inv: {
      Value a = eval_node(n.children[0], b, cfg);
      return Value::of(out_kind, inverse(a.tensor, cfg));
    }
    case Op::tr: {
      Value a = eval_node(n.children[0], b, cfg);
      if (a.is_coll()) return Value::collection(trace_of(a.coll));
      return Value::of(out_kind, trace_of(a.tensor));
    }
    case Op::matmul: {
      Value a = eval_node(n.children[0], b, cfg);
      Value c = eval_node(n.children[1], b, cfg);
      return Value::of(out_kind, matmul(matmul_view(a), matmul_view(c), cfg));
    }
    case Op::dot: {
      Value a = eval_node(n.children[0], b, cfg);
      Value c = eval_node(n.children[1], b, cfg);
      return Value::of(out_kind, dot(flat_view(a), flat_view(c)));
    }
    case Op::outprod: {
      Value a = eval_node(n.children[0], b, cfg);
      Value c = eval_node(n.children[1], b, cfg);
      return Value::of(out_kind, outer_product(flat_view(a), flat_view(c), cfg));
    }
    case Op::tran: {
      Value a = eval_node(n.children[0], b, cfg);
      return Value::of(out_kind, transpose(matmul_view(a)));
    }
    case Op::sum_g:
    case Op::prod_g:
    case Op::mean_g:
    case Op::std_g:
    case Op::var_g:
    case Op::count_g: {
      Value a = eval_node(n.children[0], b, cfg);
      Tensor r = a.is_coll() ? statistic_global(stat_of(n.op), a.coll)
                             : statistic_global(stat_of(n.op), a.tensor);
      return Value::of(SK::scalar, std::move(r));
    }
    case Op::sum_s:
    case Op::prod_s:
    case Op::mean_s:
    case Op::std_s:
    case Op::var_s:
    case Op::count_s: {
      Value a = eval_node(n.children[0], b, cfg);
      if (!a.is_coll()) throw EvalFailure("sample statistic on a non-collection");
      return Value::of(out_kind, statistic_sample(stat_of(n.op), a.coll));
    }
    case Op::rbf: {
      Value a = eval_node(n.children[0], b, cfg);
      Value c = eval_node(n.children[1], b, cfg);
      return Value::of(out_kind, rbf_kernel(a.coll, c.coll, cfg));
    }
    case Op::geo: {
      Value a = eval_node(n.children[0], b, cfg);
      return Value::of(out_kind, geometric_median(a.tensor, cfg));
    }
    case Op::slice: {
      Value a = eval_node(n.children[0], b, cfg);
      double raw = n.children.size() == 2 ? n.children[1].literal : 0.0;
      if (!(raw >= 0.0) || raw != std::floor(raw))
        throw EvalFailure("slice index must be a non-negative integer literal");
      return Value::of(SK::scalar, slice_flat(a.tensor, static_cast<std::size_t>(raw)));
    }
  }
  throw EvalFailure("unhandled operator");
}

double eval_once(const ExprTree& tree, const Bindings& b, const KernelConfig& cfg) {
  Value v = eval_node(tree.root, b, cfg);
  if (v.is_coll() || v.tensor.size() != 1) throw EvalFailure("non-scalar final value");
  double r = v.tensor[0];
  if (!std::isfinite(r)) throw EvalFailure("non-finite final value");
  return r;
}

}  // namespace

double evaluate(const ExprTree& tree, const ChannelContext& ctx, const KernelConfig& cfg) {
  if (infer_kind(tree) != SK::scalar) throw EvalFailure("tree does not have scalar kind");
  if (ctx.maps.count() == 0) throw EvalFailure("context without maps");
  if (ctx.maps.count() != ctx.labels.size()) throw EvalFailure("labels do not match maps");

  Bindings base{&ctx, {}, {}, false};
  if (!is_label_aware(tree)) return eval_once(tree, base, cfg);

  if (ctx.class_count < 2) throw EvalFailure("label-aware tree needs at least two classes");
  std::vector<double> branch;
  branch.reserve(ctx.class_count);
  for (int k = 1; k <= ctx.class_count; ++k) {
    Bindings b{&ctx, {}, {}, true};
    for (std::size_t i = 0; i < ctx.maps.count(); ++i)
      (ctx.labels[i] == k ? b.f_plus : b.f_minus).maps.push_back(ctx.maps.maps[i]);
    if (b.f_plus.count() == 0 || b.f_minus.count() == 0)
      throw EvalFailure("empty class partition for class " + std::to_string(k));
    branch.push_back(eval_once(tree, b, cfg));
  }
  // Sorted accumulation keeps the mean exactly label-permutation invariant.
  std::sort(branch.begin(), branch.end());
  double sum = 0.0;
  for (double v : branch) sum += v;
  double r = sum / static_cast<double>(branch.size());
  if (!std::isfinite(r)) throw EvalFailure("non-finite branch mean");
  return r;
}

bool validity_test(const ExprTree& tree, const ChannelContext& probe, const KernelConfig& cfg,
                   int depth_cap) {
  if (depth(tree.root) > depth_cap) return false;
  if (infer_kind(tree) != SK::scalar) return false;
  try {
    evaluate(tree, probe, cfg);
    return true;
  } catch (const EvalFailure&) {
    return false;
  }
}

ChannelContext make_probe_context(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  ChannelContext ctx;
  ctx.class_count = 3;

  ctx.layer_filter = Tensor::zeros({3, 2, 2, 2});
  for (double& v : ctx.layer_filter.data()) v = gauss(rng);
  ctx.incoming_filter = Tensor::zeros({2, 2, 2});
  for (double& v : ctx.incoming_filter.data()) v = gauss(rng);
  ctx.bn_params = Tensor({4}, {1.0 + 0.1 * gauss(rng), 0.1 * gauss(rng), 0.1 * gauss(rng),
                               1.0 + 0.1 * std::fabs(gauss(rng))});

  // Twelve 4x4 maps, four per class, class mean levels 1,2,3, unit noise,
  // clipped at zero like post-ReLU activations.
  const int per_class = 4;
  for (int k = 1; k <= ctx.class_count; ++k) {
    for (int s = 0; s < per_class; ++s) {
      Tensor m = Tensor::zeros({4, 4});
      for (double& v : m.data()) v = std::max(0.0, static_cast<double>(k) + gauss(rng));
      ctx.maps.maps.push_back(std::move(m));
      ctx.labels.push_back(k);
    }
  }
  return ctx;
}

}  // namespace prunevolve
