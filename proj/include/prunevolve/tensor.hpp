#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace prunevolve {

// Signalled when an operation cannot produce a finite, well-formed result.
// Operations never return NaN/Inf silently; they throw this instead.
struct EvalFailure : std::runtime_error {
  explicit EvalFailure(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<std::size_t>;

std::size_t shape_volume(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major real tensor. Rank 0 is a scalar with a single entry.
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double v);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return shape_.empty(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  // rank-2 accessors
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  // The single entry of a one-element tensor (any rank).
  double single() const;

  bool all_finite() const;
  Tensor reshaped(Shape shape) const;
  Tensor flattened() const;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A set of equally-shaped feature maps.
struct MapCollection {
  std::vector<Tensor> maps;

  MapCollection() = default;
  explicit MapCollection(std::vector<Tensor> ms) : maps(std::move(ms)) {}

  std::size_t count() const { return maps.size(); }
  const Shape& member_shape() const;
  std::size_t member_size() const;
  std::size_t total_entries() const;
  bool uniform() const;

  friend bool operator==(const MapCollection& a, const MapCollection& b) = default;
};

struct KernelConfig {
  double ridge_rel = 1e-3;
  double ridge_abs = 1e-8;
  double weiszfeld_tol = 1e-9;
  int weiszfeld_max_iter = 500;

  enum class Bandwidth { median_heuristic, fixed };
  Bandwidth rbf_bandwidth = Bandwidth::median_heuristic;
  double rbf_sigma = 1.0;  // used when rbf_bandwidth == fixed

  // Upper bound on entries of any produced tensor; exceeding it is an
  // EvalFailure rather than an allocation blow-up.
  std::size_t max_result_entries = std::size_t{1} << 22;
};

enum class UnaryOp { abs, sq, sqrt };
enum class BinaryOp { add, sub, mul, div };
enum class StatOp { sum, prod, mean, stddev, var, count };

Tensor unary_elementwise(UnaryOp op, const Tensor& a);
MapCollection unary_elementwise(UnaryOp op, const MapCollection& a);

// Elementwise with the padding rules for mismatched shapes: a rank-0 operand
// is replicated; otherwise the smaller operand's flattened data is padded at
// the tail with the neutral element (0 for add/sub, 1 for mul/div) and the
// result takes the larger operand's shape.
Tensor binary_elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
MapCollection binary_elementwise(BinaryOp op, const MapCollection& a, const Tensor& b);
MapCollection binary_elementwise(BinaryOp op, const Tensor& a, const MapCollection& b);
MapCollection binary_elementwise(BinaryOp op, const MapCollection& a, const MapCollection& b);

// s + rho*I where rho = ridge_rel * mean(diag(s)) when positive, else
// ridge_abs. Accepts square rank-2 tensors and one-element tensors.
Tensor ridge(const Tensor& s, const KernelConfig& cfg = {});

Tensor trace_of(const Tensor& m);
MapCollection trace_of(const MapCollection& c);  // per-map trace, 1x1 members

// Matrix product with 1-D promotion: a rank-1 left operand is a row, a
// rank-1 right operand is a column. The promoted dimensions are squeezed
// from the result (vector*vector is a scalar).
Tensor matmul(const Tensor& a, const Tensor& b, const KernelConfig& cfg = {});

// Always inverts s + rho*I (same rho rule as ridge).
Tensor inverse(const Tensor& s, const KernelConfig& cfg = {});

Tensor dot(const Tensor& a, const Tensor& b);
Tensor outer_product(const Tensor& a, const Tensor& b, const KernelConfig& cfg = {});

// rank-2 transpose; rank-0/1 tensors pass through unchanged (orientation in
// matmul is positional).
Tensor transpose(const Tensor& m);

Tensor statistic_global(StatOp op, const Tensor& x);
Tensor statistic_global(StatOp op, const MapCollection& x);

// Statistics across the sample axis; result has the member shape except for
// count, which is the scalar N.
Tensor statistic_sample(StatOp op, const MapCollection& x);

// |a| x |b| Gaussian kernel matrix K[i][j] = exp(-|ai-bj|^2 / (2 sigma^2)).
Tensor rbf_kernel(const MapCollection& a, const MapCollection& b, const KernelConfig& cfg = {});

// Geometric median of the c_out flattened filter blocks of a rank-4 tensor,
// by Weiszfeld iteration; returns a c_in x h x w tensor.
Tensor geometric_median(const Tensor& w, const KernelConfig& cfg = {});

Tensor slice_flat(const Tensor& t, std::size_t index);

// Views used when collections and filter stacks enter matrix operations.
Tensor collection_matrix(const MapCollection& c);  // N x (member entries)
Tensor filter_matrix(const Tensor& w);             // c_out x (c_in*h*w)

}  // namespace prunevolve
