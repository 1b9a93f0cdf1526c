#include "prunevolve/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace prunevolve {

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_volume(shape_))
    throw std::invalid_argument("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape_to_string(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  std::size_t n = shape_volume(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::filled(Shape shape, double v) {
  std::size_t n = shape_volume(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("rows() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::logic_error("cols() on rank-" + std::to_string(rank()) + " tensor");
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

double Tensor::single() const {
  if (size() != 1) throw std::logic_error("single() on tensor with " + std::to_string(size()) + " entries");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_volume(shape) != size())
    throw std::invalid_argument("reshape to " + shape_to_string(shape) + " changes entry count");
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::flattened() const { return reshaped({size()}); }

const Shape& MapCollection::member_shape() const {
  if (maps.empty()) throw std::logic_error("member_shape() of empty collection");
  return maps.front().shape();
}

std::size_t MapCollection::member_size() const { return maps.empty() ? 0 : maps.front().size(); }

std::size_t MapCollection::total_entries() const { return count() * member_size(); }

bool MapCollection::uniform() const {
  for (const Tensor& m : maps)
    if (m.shape() != maps.front().shape()) return false;
  return true;
}

namespace {

void ensure_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw EvalFailure(std::string(op) + " produced a non-finite value");
}

void ensure_capacity(std::size_t entries, const KernelConfig& cfg, const char* op) {
  if (entries > cfg.max_result_entries)
    throw EvalFailure(std::string(op) + " result of " + std::to_string(entries) + " entries exceeds the kernel limit");
}

double apply_binary(BinaryOp op, double x, double y) {
  switch (op) {
    case BinaryOp::add: return x + y;
    case BinaryOp::sub: return x - y;
    case BinaryOp::mul: return x * y;
    case BinaryOp::div: return x / y;
  }
  return 0.0;
}

const char* binary_name(BinaryOp op) {
  switch (op) {
    case BinaryOp::add: return "add";
    case BinaryOp::sub: return "sub";
    case BinaryOp::mul: return "mul";
    case BinaryOp::div: return "div";
  }
  return "?";
}

// Validates squareness for ridge/inverse/trace; one-element tensors count as 1x1.
void ensure_square(const Tensor& s, const char* op) {
  if (s.size() == 1) return;
  if (s.rank() != 2 || s.rows() != s.cols())
    throw EvalFailure(std::string(op) + " needs a square matrix, got " + shape_to_string(s.shape()));
}

double ridge_rho(const Tensor& s, const KernelConfig& cfg) {
  double diag_sum = 0.0;
  std::size_t n;
  if (s.size() == 1) {
    diag_sum = s[0];
    n = 1;
  } else {
    n = s.rows();
    for (std::size_t i = 0; i < n; ++i) diag_sum += s.at(i, i);
  }
  double rho = cfg.ridge_rel * (diag_sum / static_cast<double>(n));
  if (!(rho > 0.0)) rho = cfg.ridge_abs;
  return rho;
}

}  // namespace

Tensor unary_elementwise(UnaryOp op, const Tensor& a) {
  Tensor out = a;
  switch (op) {
    case UnaryOp::abs:
      for (double& v : out.data()) v = std::fabs(v);
      break;
    case UnaryOp::sq:
      for (double& v : out.data()) v = v * v;
      break;
    case UnaryOp::sqrt:
      for (double& v : out.data()) {
        if (v < 0.0) throw EvalFailure("sqrt of a negative entry");
        v = std::sqrt(v);
      }
      break;
  }
  ensure_finite(out, "unary op");
  return out;
}

MapCollection unary_elementwise(UnaryOp op, const MapCollection& a) {
  MapCollection out;
  out.maps.reserve(a.count());
  for (const Tensor& m : a.maps) out.maps.push_back(unary_elementwise(op, m));
  return out;
}

Tensor binary_elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
  Tensor out;
  if (a.shape() == b.shape()) {
    out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_binary(op, a[i], b[i]);
  } else if (a.is_scalar()) {
    out = b;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_binary(op, a[0], b[i]);
  } else if (b.is_scalar()) {
    out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_binary(op, a[i], b[0]);
  } else {
    // Pad the flattened smaller operand at the tail with the neutral element;
    // the result takes the larger operand's shape (ties go to the left).
    const double neutral = (op == BinaryOp::add || op == BinaryOp::sub) ? 0.0 : 1.0;
    const bool left_big = a.size() >= b.size();
    const Tensor& big = left_big ? a : b;
    const Tensor& small = left_big ? b : a;
    out = Tensor::zeros(big.shape());
    for (std::size_t i = 0; i < big.size(); ++i) {
      double s = i < small.size() ? small[i] : neutral;
      out[i] = left_big ? apply_binary(op, big[i], s) : apply_binary(op, s, big[i]);
    }
  }
  ensure_finite(out, binary_name(op));
  return out;
}

MapCollection binary_elementwise(BinaryOp op, const MapCollection& a, const Tensor& b) {
  MapCollection out;
  out.maps.reserve(a.count());
  for (const Tensor& m : a.maps) out.maps.push_back(binary_elementwise(op, m, b));
  return out;
}

MapCollection binary_elementwise(BinaryOp op, const Tensor& a, const MapCollection& b) {
  MapCollection out;
  out.maps.reserve(b.count());
  for (const Tensor& m : b.maps) out.maps.push_back(binary_elementwise(op, a, m));
  return out;
}

MapCollection binary_elementwise(BinaryOp op, const MapCollection& a, const MapCollection& b) {
  if (a.count() != b.count())
    throw EvalFailure(std::string(binary_name(op)) + " on collections of different size (" +
                      std::to_string(a.count()) + " vs " + std::to_string(b.count()) + ")");
  MapCollection out;
  out.maps.reserve(a.count());
  for (std::size_t i = 0; i < a.count(); ++i)
    out.maps.push_back(binary_elementwise(op, a.maps[i], b.maps[i]));
  return out;
}

Tensor ridge(const Tensor& s, const KernelConfig& cfg) {
  ensure_square(s, "ridge");
  double rho = ridge_rho(s, cfg);
  Tensor out = s;
  if (s.size() == 1) {
    out[0] += rho;
  } else {
    for (std::size_t i = 0; i < out.rows(); ++i) out.at(i, i) += rho;
  }
  ensure_finite(out, "ridge");
  return out;
}

Tensor trace_of(const Tensor& m) {
  ensure_square(m, "tr");
  if (m.size() == 1) return Tensor::scalar(m[0]);
  double t = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) t += m.at(i, i);
  Tensor out = Tensor::scalar(t);
  ensure_finite(out, "tr");
  return out;
}

MapCollection trace_of(const MapCollection& c) {
  MapCollection out;
  out.maps.reserve(c.count());
  for (const Tensor& m : c.maps) out.maps.push_back(trace_of(m).reshaped({1, 1}));
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, const KernelConfig& cfg) {
  if (a.rank() > 2 || b.rank() > 2 || a.rank() == 0 || b.rank() == 0)
    throw EvalFailure("matmul needs rank-1 or rank-2 operands, got " + shape_to_string(a.shape()) +
                      " and " + shape_to_string(b.shape()));
  const bool a_vec = a.rank() == 1;
  const bool b_vec = b.rank() == 1;
  const std::size_t m = a_vec ? 1 : a.shape()[0];
  const std::size_t k = a_vec ? a.shape()[0] : a.shape()[1];
  const std::size_t k2 = b_vec ? b.shape()[0] : b.shape()[0];
  const std::size_t n = b_vec ? 1 : b.shape()[1];
  if (k != k2)
    throw EvalFailure("matmul inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                      shape_to_string(b.shape()));
  ensure_capacity(m * n, cfg, "matmul");

  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      out.at(i, j) = acc;
    }
  ensure_finite(out, "matmul");

  if (a_vec && b_vec) return Tensor::scalar(out[0]);
  if (a_vec) return out.reshaped({n});
  if (b_vec) return out.reshaped({m});
  return out;
}

Tensor inverse(const Tensor& s, const KernelConfig& cfg) {
  Tensor a = ridge(s, cfg);
  if (a.size() == 1) {
    double v = 1.0 / a[0];
    if (!std::isfinite(v)) throw EvalFailure("inv of a zero 1x1 matrix");
    Tensor out = a;
    out[0] = v;
    return out;
  }
  const std::size_t n = a.rows();
  Tensor inv = Tensor::identity(n);
  // Gauss-Jordan with partial pivoting.
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a.at(r, col)) > std::fabs(a.at(pivot, col))) pivot = r;
    if (std::fabs(a.at(pivot, col)) < 1e-300) throw EvalFailure("inv of a numerically singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) {
        std::swap(a.at(pivot, c), a.at(col, c));
        std::swap(inv.at(pivot, c), inv.at(col, c));
      }
    }
    const double p = a.at(col, col);
    for (std::size_t c = 0; c < n; ++c) {
      a.at(col, c) /= p;
      inv.at(col, c) /= p;
    }
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      const double f = a.at(r, col);
      if (f == 0.0) continue;
      for (std::size_t c = 0; c < n; ++c) {
        a.at(r, c) -= f * a.at(col, c);
        inv.at(r, c) -= f * inv.at(col, c);
      }
    }
  }
  ensure_finite(inv, "inv");
  return inv;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size())
    throw EvalFailure("dot on tensors with " + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + " entries");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  Tensor out = Tensor::scalar(acc);
  ensure_finite(out, "dot");
  return out;
}

Tensor outer_product(const Tensor& a, const Tensor& b, const KernelConfig& cfg) {
  ensure_capacity(a.size() * b.size(), cfg, "outprod");
  Tensor out = Tensor::zeros({a.size(), b.size()});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out.at(i, j) = a[i] * b[j];
  ensure_finite(out, "outprod");
  return out;
}

Tensor transpose(const Tensor& m) {
  if (m.rank() <= 1) return m;
  if (m.rank() != 2) throw EvalFailure("tran on rank-" + std::to_string(m.rank()) + " tensor");
  Tensor out = Tensor::zeros({m.cols(), m.rows()});
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out.at(c, r) = m.at(r, c);
  return out;
}

namespace {

// Shared accumulation over a flat view of entries; `get(i)` for i in [0, n).
template <typename Get>
Tensor global_stat(StatOp op, std::size_t n, Get get) {
  if (op == StatOp::count) return Tensor::scalar(static_cast<double>(n));
  if (n == 0) {
    if (op == StatOp::sum) return Tensor::scalar(0.0);
    if (op == StatOp::prod) return Tensor::scalar(1.0);
    throw EvalFailure("statistic of an empty tensor");
  }
  switch (op) {
    case StatOp::sum: {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += get(i);
      Tensor out = Tensor::scalar(s);
      ensure_finite(out, "sum");
      return out;
    }
    case StatOp::prod: {
      // Log-magnitude accumulation with sign tracking to dodge intermediate
      // overflow; a zero entry makes the product exactly zero.
      double log_mag = 0.0;
      int sign = 1;
      for (std::size_t i = 0; i < n; ++i) {
        double v = get(i);
        if (v == 0.0) return Tensor::scalar(0.0);
        if (v < 0.0) sign = -sign;
        log_mag += std::log(std::fabs(v));
      }
      double mag = std::exp(log_mag);
      Tensor out = Tensor::scalar(sign * mag);
      ensure_finite(out, "prod");
      return out;
    }
    case StatOp::mean:
    case StatOp::var:
    case StatOp::stddev: {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += get(i);
      double mean = s / static_cast<double>(n);
      if (op == StatOp::mean) {
        Tensor out = Tensor::scalar(mean);
        ensure_finite(out, "mean");
        return out;
      }
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double d = get(i) - mean;
        ss += d * d;
      }
      double var = ss / static_cast<double>(n);
      Tensor out = Tensor::scalar(op == StatOp::var ? var : std::sqrt(var));
      ensure_finite(out, op == StatOp::var ? "var" : "std");
      return out;
    }
    case StatOp::count: break;
  }
  return Tensor::scalar(0.0);
}

}  // namespace

Tensor statistic_global(StatOp op, const Tensor& x) {
  return global_stat(op, x.size(), [&](std::size_t i) { return x[i]; });
}

Tensor statistic_global(StatOp op, const MapCollection& x) {
  const std::size_t per = x.member_size();
  return global_stat(op, x.total_entries(),
                     [&](std::size_t i) { return x.maps[i / per][i % per]; });
}

Tensor statistic_sample(StatOp op, const MapCollection& x) {
  const std::size_t n = x.count();
  if (n == 0) throw EvalFailure("sample statistic of an empty collection");
  if (!x.uniform()) throw EvalFailure("sample statistic over non-uniform maps");
  if (op == StatOp::count) return Tensor::scalar(static_cast<double>(n));

  Tensor out = Tensor::zeros(x.member_shape());
  const std::size_t per = x.member_size();
  for (std::size_t j = 0; j < per; ++j) {
    double r = 0.0;
    switch (op) {
      case StatOp::sum:
        for (std::size_t i = 0; i < n; ++i) r += x.maps[i][j];
        break;
      case StatOp::prod:
        r = 1.0;
        for (std::size_t i = 0; i < n; ++i) r *= x.maps[i][j];
        break;
      case StatOp::mean:
      case StatOp::var:
      case StatOp::stddev: {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x.maps[i][j];
        double mean = s / static_cast<double>(n);
        if (op == StatOp::mean) {
          r = mean;
        } else {
          double ss = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            double d = x.maps[i][j] - mean;
            ss += d * d;
          }
          double var = ss / static_cast<double>(n);
          r = op == StatOp::var ? var : std::sqrt(var);
        }
        break;
      }
      case StatOp::count: break;
    }
    out[j] = r;
  }
  ensure_finite(out, "sample statistic");
  return out;
}

Tensor rbf_kernel(const MapCollection& a, const MapCollection& b, const KernelConfig& cfg) {
  if (a.count() == 0 || b.count() == 0) throw EvalFailure("rbf of an empty collection");
  if (!a.uniform() || !b.uniform() || a.member_shape() != b.member_shape())
    throw EvalFailure("rbf needs uniformly shaped maps on both sides");
  const std::size_t na = a.count(), nb = b.count();
  ensure_capacity(na * nb, cfg, "rbf");

  std::vector<double> d2(na * nb);
  const std::size_t per = a.member_size();
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double s = 0.0;
      for (std::size_t t = 0; t < per; ++t) {
        double d = a.maps[i][t] - b.maps[j][t];
        s += d * d;
      }
      d2[i * nb + j] = s;
    }

  double sigma;
  if (cfg.rbf_bandwidth == KernelConfig::Bandwidth::fixed) {
    sigma = cfg.rbf_sigma;
  } else {
    // Median pairwise distance over all cross pairs of this call.
    std::vector<double> dist(d2.size());
    for (std::size_t i = 0; i < d2.size(); ++i) dist[i] = std::sqrt(d2[i]);
    std::sort(dist.begin(), dist.end());
    const std::size_t mid = dist.size() / 2;
    sigma = dist.size() % 2 ? dist[mid] : 0.5 * (dist[mid - 1] + dist[mid]);
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) sigma = 1.0;

  Tensor out = Tensor::zeros({na, nb});
  const double denom = 2.0 * sigma * sigma;
  for (std::size_t i = 0; i < d2.size(); ++i) out[i] = std::exp(-d2[i] / denom);
  ensure_finite(out, "rbf");
  return out;
}

Tensor geometric_median(const Tensor& w, const KernelConfig& cfg) {
  if (w.rank() != 4) throw EvalFailure("geo needs a rank-4 filter stack, got " + shape_to_string(w.shape()));
  const std::size_t c_out = w.shape()[0];
  const std::size_t d = w.size() / std::max<std::size_t>(c_out, 1);
  if (c_out == 0 || d == 0) throw EvalFailure("geo of an empty filter stack");

  double scale = 0.0;
  for (double v : w.data()) scale = std::max(scale, std::fabs(v));
  const double coincident = 1e-12 * std::max(1.0, scale);

  // Start from the centroid.
  std::vector<double> y(d, 0.0);
  for (std::size_t i = 0; i < c_out; ++i)
    for (std::size_t j = 0; j < d; ++j) y[j] += w[i * d + j];
  for (double& v : y) v /= static_cast<double>(c_out);

  std::vector<double> next(d);
  for (int iter = 0; iter < cfg.weiszfeld_max_iter; ++iter) {
    std::fill(next.begin(), next.end(), 0.0);
    double weight_sum = 0.0;
    for (std::size_t i = 0; i < c_out; ++i) {
      double dist2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        double diff = y[j] - w[i * d + j];
        dist2 += diff * diff;
      }
      double dist = std::sqrt(dist2);
      if (dist <= coincident) continue;  // iterate sits on this point; drop its weight
      double inv = 1.0 / dist;
      weight_sum += inv;
      for (std::size_t j = 0; j < d; ++j) next[j] += w[i * d + j] * inv;
    }
    if (weight_sum == 0.0) break;  // coincides with every remaining point
    double step2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      next[j] /= weight_sum;
      double diff = next[j] - y[j];
      step2 += diff * diff;
    }
    y.swap(next);
    if (std::sqrt(step2) <= cfg.weiszfeld_tol) break;
  }

  Shape member(w.shape().begin() + 1, w.shape().end());
  Tensor out(std::move(member), std::move(y));
  ensure_finite(out, "geo");
  return out;
}

Tensor slice_flat(const Tensor& t, std::size_t index) {
  if (index >= t.size())
    throw EvalFailure("slice index " + std::to_string(index) + " out of range for " +
                      std::to_string(t.size()) + " entries");
  return Tensor::scalar(t[index]);
}

Tensor collection_matrix(const MapCollection& c) {
  if (c.count() == 0) throw EvalFailure("matrix view of an empty collection");
  if (!c.uniform()) throw EvalFailure("matrix view of non-uniform maps");
  const std::size_t n = c.count(), d = c.member_size();
  Tensor out = Tensor::zeros({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out.at(i, j) = c.maps[i][j];
  return out;
}

Tensor filter_matrix(const Tensor& w) {
  if (w.rank() != 4) throw EvalFailure("filter view needs a rank-4 tensor, got " + shape_to_string(w.shape()));
  const std::size_t c_out = w.shape()[0];
  const std::size_t d = w.size() / std::max<std::size_t>(c_out, 1);
  return w.reshaped({c_out, d});
}

}  // namespace prunevolve
