#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <stdexcept>

namespace oracle {
namespace {

using prunevolve::Shape;
using prunevolve::Tensor;

using Maps = std::vector<const Tensor*>;

std::size_t total_entries(const Maps& ms) {
  std::size_t n = 0;
  for (const Tensor* m : ms) n += m->size();
  return n;
}

double entries_mean(const Maps& ms) {
  double s = 0.0;
  for (const Tensor* m : ms)
    for (double v : m->data()) s += v;
  return s / static_cast<double>(total_entries(ms));
}

// Population variance over every entry of every map.
double entries_var(const Maps& ms) {
  const double mu = entries_mean(ms);
  double ss = 0.0;
  for (const Tensor* m : ms)
    for (double v : m->data()) {
      const double d = v - mu;
      ss += d * d;
    }
  return ss / static_cast<double>(total_entries(ms));
}

double entries_std(const Maps& ms) { return std::sqrt(entries_var(ms)); }

double vec_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double vec_var(const std::vector<double>& v) {
  const double mu = vec_mean(v);
  double ss = 0.0;
  for (double x : v) {
    const double d = x - mu;
    ss += d * d;
  }
  return ss / static_cast<double>(v.size());
}

double vec_std(const std::vector<double>& v) { return std::sqrt(vec_var(v)); }

// Per-position mean across maps, as one flat vector.
std::vector<double> position_mean(const Maps& ms) {
  const std::size_t d = ms.front()->size();
  std::vector<double> out(d, 0.0);
  for (const Tensor* m : ms)
    for (std::size_t j = 0; j < d; ++j) out[j] += m->data()[j];
  for (double& v : out) v /= static_cast<double>(ms.size());
  return out;
}

// Mean of f over the per-class branches (class k against the rest).
template <typename F>
double branch_mean(const ChannelContext& ctx, F f) {
  if (ctx.class_count < 2) throw std::runtime_error("oracle: needs at least two classes");
  if (ctx.labels.size() != ctx.maps.count()) throw std::runtime_error("oracle: labels do not match maps");
  double total = 0.0;
  for (int k = 1; k <= ctx.class_count; ++k) {
    Maps pos, neg;
    for (std::size_t i = 0; i < ctx.maps.count(); ++i)
      (ctx.labels[i] == k ? pos : neg).push_back(&ctx.maps.maps[i]);
    if (pos.empty() || neg.empty()) throw std::runtime_error("oracle: empty class branch");
    total += f(pos, neg);
  }
  return total / static_cast<double>(ctx.class_count);
}

// Rows of a rank-4 stack as points of dimension c_in*h*w.
std::vector<std::vector<double>> stack_points(const Tensor& w) {
  if (w.rank() != 4) throw std::runtime_error("oracle: filter stack must have rank 4");
  const std::size_t c_out = w.shape()[0];
  const std::size_t d = w.size() / c_out;
  std::vector<std::vector<double>> pts(c_out, std::vector<double>(d));
  for (std::size_t i = 0; i < c_out; ++i)
    for (std::size_t j = 0; j < d; ++j) pts[i][j] = w.data()[i * d + j];
  return pts;
}

// Weiszfeld fixed point written from the update formula: start at the
// centroid, weight each point by 1/distance, drop points the iterate sits on
// (within 1e-12 of the data scale), stop when the step is at most 1e-9.
std::vector<double> weiszfeld(const std::vector<std::vector<double>>& pts, double scale) {
  const std::size_t n = pts.size();
  const std::size_t d = pts.front().size();
  const double coincident = 1e-12 * std::max(1.0, scale);

  std::vector<double> y(d, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) y[j] += p[j];
  for (double& v : y) v /= static_cast<double>(n);

  for (int iter = 0; iter < 500; ++iter) {
    std::vector<double> num(d, 0.0);
    double wsum = 0.0;
    for (const auto& p : pts) {
      double dist2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = y[j] - p[j];
        dist2 += diff * diff;
      }
      const double dist = std::sqrt(dist2);
      if (dist <= coincident) continue;
      const double inv = 1.0 / dist;
      wsum += inv;
      for (std::size_t j = 0; j < d; ++j) num[j] += p[j] * inv;
    }
    if (wsum == 0.0) break;
    double step2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      num[j] /= wsum;
      const double diff = num[j] - y[j];
      step2 += diff * diff;
    }
    y = num;
    if (std::sqrt(step2) <= 1e-9) break;
  }
  return y;
}

// rho for S + rho*I: 1e-3 times the diagonal mean when positive, else 1e-8.
double ridge_rho(const std::vector<double>& a, std::size_t n) {
  double diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) diag += a[i * n + i];
  const double rho = 1e-3 * (diag / static_cast<double>(n));
  return rho > 0.0 ? rho : 1e-8;
}

// Inverse by LU decomposition with partial pivoting (Doolittle), solving
// against each unit vector. Deliberately a different elimination scheme from
// the engine's Gauss-Jordan.
std::vector<double> lu_inverse(std::vector<double> a, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
    if (std::fabs(a[pivot * n + col]) < 1e-300) throw std::runtime_error("oracle: singular matrix");
    if (pivot != col) {
      for (std::size_t c = 0; c < n; ++c) std::swap(a[pivot * n + c], a[col * n + c]);
      std::swap(perm[pivot], perm[col]);
    }
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      a[r * n + col] = f;
      for (std::size_t c = col + 1; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
    }
  }

  std::vector<double> inv(n * n, 0.0);
  std::vector<double> x(n);
  for (std::size_t e = 0; e < n; ++e) {
    for (std::size_t i = 0; i < n; ++i) x[i] = perm[i] == e ? 1.0 : 0.0;
    for (std::size_t i = 1; i < n; ++i)
      for (std::size_t j = 0; j < i; ++j) x[i] -= a[i * n + j] * x[j];
    for (std::size_t i = n; i-- > 0;) {
      for (std::size_t j = i + 1; j < n; ++j) x[i] -= a[i * n + j] * x[j];
      x[i] /= a[i * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + e] = x[i];
  }
  return inv;
}

// Mean RBF kernel value over all ordered pairs of a x b. The bandwidth is the
// median of those pairwise distances (mean of the middle two when the count
// is even; 1.0 when the median is not positive), and each call derives its
// own bandwidth.
double rbf_pair_mean(const Maps& a, const Maps& b) {
  const std::size_t na = a.size(), nb = b.size();
  std::vector<double> dist(na * nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < a[i]->size(); ++t) {
        const double diff = a[i]->data()[t] - b[j]->data()[t];
        d2 += diff * diff;
      }
      dist[i * nb + j] = std::sqrt(d2);
    }
  std::vector<double> sorted = dist;
  std::sort(sorted.begin(), sorted.end());
  double sigma;
  if (sorted.size() % 2 == 1) {
    sigma = sorted[sorted.size() / 2];
  } else {
    sigma = 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
  }
  if (!(sigma > 0.0)) sigma = 1.0;

  double sum = 0.0;
  for (double d : dist) sum += std::exp(-d * d / (2.0 * sigma * sigma));
  return sum / static_cast<double>(na * nb);
}

double trace_sum(const Tensor& m) {
  if (m.rank() != 2 || m.shape()[0] != m.shape()[1]) throw std::runtime_error("oracle: trace needs a square map");
  double t = 0.0;
  for (std::size_t i = 0; i < m.shape()[0]; ++i) t += m.at(i, i);
  return t;
}

// ---- per-function reference scorers ----

double filter_l1(const ChannelContext& ctx) {
  double s = 0.0;
  for (double v : ctx.incoming_filter.data()) s += std::fabs(v);
  return s;
}

double filter_l2(const ChannelContext& ctx) {
  double s = 0.0;
  for (double v : ctx.incoming_filter.data()) s += v * v;
  return std::sqrt(s);
}

double bn_scale(const ChannelContext& ctx) { return std::fabs(ctx.bn_params.data()[0]); }

double geo_median_score(const ChannelContext& ctx) {
  const auto pts = stack_points(ctx.layer_filter);
  double scale = 0.0;
  for (double v : ctx.layer_filter.data()) scale = std::max(scale, std::fabs(v));
  const auto y = weiszfeld(pts, scale);
  const auto& wi = ctx.incoming_filter.data();
  if (wi.size() != y.size()) throw std::runtime_error("oracle: incoming block does not match stack point size");
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double d = wi[j] - y[j];
    s += d * d;
  }
  return std::sqrt(s);
}

// n_pos * dm' * inv(ridge(ridge(S))) * dm with S the scatter of all maps
// around the global position mean and dm the class-vs-global mean gap. The
// ridge is applied twice because the expression composes inv with an explicit
// ridge, and inv ridges its argument again.
double discriminant_info(const ChannelContext& ctx) {
  return branch_mean(ctx, [&](const Maps& pos, const Maps& neg) {
    (void)neg;
    Maps all;
    for (const Tensor& m : ctx.maps.maps) all.push_back(&m);
    const std::size_t n = all.size();
    const std::size_t d = all.front()->size();

    const auto mu_all = position_mean(all);
    const auto mu_pos = position_mean(pos);

    std::vector<double> s(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < d; ++r) {
        const double xr = all[i]->data()[r] - mu_all[r];
        for (std::size_t c = 0; c < d; ++c) s[r * d + c] += xr * (all[i]->data()[c] - mu_all[c]);
      }

    const double rho1 = ridge_rho(s, d);
    for (std::size_t i = 0; i < d; ++i) s[i * d + i] += rho1;
    const double rho2 = ridge_rho(s, d);
    for (std::size_t i = 0; i < d; ++i) s[i * d + i] += rho2;

    const auto inv = lu_inverse(std::move(s), d);
    std::vector<double> dm(d);
    for (std::size_t j = 0; j < d; ++j) dm[j] = mu_pos[j] - mu_all[j];

    double quad = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
      double row = 0.0;
      for (std::size_t c = 0; c < d; ++c) row += inv[r * d + c] * dm[c];
      quad += dm[r] * row;
    }
    return static_cast<double>(pos.size()) * quad;
  });
}

double mmd(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps& neg) {
    const double pp = rbf_pair_mean(pos, pos);
    const double mm = rbf_pair_mean(neg, neg);
    const double pm = rbf_pair_mean(pos, neg);
    return ((pp + mm) - pm) - pm;
  });
}

double abs_snr(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps& neg) {
    return std::fabs(entries_mean(pos) - entries_mean(neg)) / (entries_std(pos) + entries_std(neg));
  });
}

double t_test(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps& neg) {
    const double gap = std::fabs(entries_mean(pos) - entries_mean(neg));
    return gap / std::sqrt(entries_var(pos) / static_cast<double>(pos.size()) +
                           entries_var(neg) / static_cast<double>(neg.size()));
  });
}

double fisher_ratio(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps& neg) {
    const double gap = entries_mean(pos) - entries_mean(neg);
    return gap * gap / (entries_var(pos) + entries_var(neg));
  });
}

double sym_divergence(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps& neg) {
    const double vp = entries_var(pos), vm = entries_var(neg);
    const double gap = entries_mean(pos) - entries_mean(neg);
    return (vp / vm + vm / vp) + gap * gap / (vp + vm);
  });
}

double evolved_main(const ChannelContext& ctx) {
  return branch_mean(ctx, [&](const Maps& pos, const Maps& neg) {
    Maps all;
    for (const Tensor& m : ctx.maps.maps) all.push_back(&m);
    const double vp = entries_var(pos), vm = entries_var(neg);
    const auto mbar = position_mean(all);
    const double s = vec_std(mbar) * vm;
    const double c = vp - entries_mean(neg);
    double dot = 0.0;
    for (double m : mbar) {
      const double u = s * m + c;
      dot += u * u;
    }
    return (vm / vp + vp / vm) + dot / (vp + vm);
  });
}

double evolved_trace(const ChannelContext& ctx) {
  return branch_mean(ctx, [&](const Maps& pos, const Maps& neg) {
    const double a = vec_var(position_mean(pos));
    std::vector<double> traces;
    traces.reserve(pos.size());
    for (const Tensor* m : pos) traces.push_back(trace_sum(*m));
    const double b = vec_std(traces) * entries_mean(neg);
    const double r = a / b;
    const double r2 = r * r;
    const double q = r2 * r2;

    std::vector<double> roots;
    roots.reserve(ctx.maps.total_entries());
    for (const Tensor& m : ctx.maps.maps)
      for (double v : m.data()) roots.push_back(std::sqrt(v));
    return q / vec_var(roots);
  });
}

double evolved_snr(const ChannelContext& ctx) {
  return branch_mean(ctx, [&](const Maps& pos, const Maps& neg) {
    Maps all;
    for (const Tensor& m : ctx.maps.maps) all.push_back(&m);
    const double vp = entries_var(pos), vm = entries_var(neg);
    const auto mbar = position_mean(all);
    double dot = 0.0;
    for (double m : mbar) {
      const double u = m - vm;
      dot += u * u;
    }
    return dot / (vp + vm) + vp;
  });
}

double evolved_partition_var(const ChannelContext& ctx) {
  return branch_mean(ctx, [](const Maps& pos, const Maps&) { return entries_var(pos); });
}

double evolved_filter_var(const ChannelContext& ctx) {
  std::vector<double> v = ctx.incoming_filter.data();
  return vec_var(v);
}

}  // namespace

double score(const std::string& name, const ChannelContext& ctx) {
  if (name == "filter_l1") return filter_l1(ctx);
  if (name == "filter_l2") return filter_l2(ctx);
  if (name == "bn_scale") return bn_scale(ctx);
  if (name == "geo_median") return geo_median_score(ctx);
  if (name == "discriminant_info") return discriminant_info(ctx);
  if (name == "mmd") return mmd(ctx);
  if (name == "abs_snr") return abs_snr(ctx);
  if (name == "t_test") return t_test(ctx);
  if (name == "fisher_ratio") return fisher_ratio(ctx);
  if (name == "sym_divergence") return sym_divergence(ctx);
  if (name == "evolved_main") return evolved_main(ctx);
  if (name == "evolved_trace") return evolved_trace(ctx);
  if (name == "evolved_snr") return evolved_snr(ctx);
  if (name == "evolved_partition_var") return evolved_partition_var(ctx);
  if (name == "evolved_filter_var") return evolved_filter_var(ctx);
  throw std::runtime_error("oracle: unknown function name " + name);
}

const std::vector<std::string>& names() {
  static const std::vector<std::string> all = {
      "filter_l1",    "filter_l2",      "bn_scale",       "geo_median",
      "discriminant_info", "mmd",       "abs_snr",        "t_test",
      "fisher_ratio", "sym_divergence", "evolved_main",   "evolved_trace",
      "evolved_snr",  "evolved_partition_var", "evolved_filter_var",
  };
  return all;
}

ChannelContext random_context(std::uint64_t seed, int classes, std::size_t n_maps, std::size_t h,
                              std::size_t w) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  ChannelContext ctx;

  std::vector<double> stack(24);
  for (double& v : stack) v = gauss(rng);
  ctx.layer_filter = Tensor({3, 2, 2, 2}, std::move(stack));

  std::vector<double> block(8);
  for (double& v : block) v = gauss(rng);
  ctx.incoming_filter = Tensor({2, 2, 2}, std::move(block));

  ctx.bn_params = Tensor({4}, {1.0 + 0.1 * gauss(rng), 0.1 * gauss(rng), 0.1 * gauss(rng),
                               1.0 + 0.1 * std::fabs(gauss(rng))});

  for (std::size_t i = 0; i < n_maps; ++i) {
    const int k = 1 + static_cast<int>(i % static_cast<std::size_t>(classes));
    std::vector<double> entries(h * w);
    for (double& v : entries) v = std::max(0.0, static_cast<double>(k) + gauss(rng));
    ctx.maps.maps.emplace_back(Shape{h, w}, std::move(entries));
    ctx.labels.push_back(k);
  }
  ctx.class_count = classes;
  return ctx;
}

ChannelContext permute_labels(const ChannelContext& ctx, const std::vector<int>& perm) {
  if (perm.size() != static_cast<std::size_t>(ctx.class_count))
    throw std::runtime_error("oracle: permutation size does not match class count");
  ChannelContext out = ctx;
  for (int& l : out.labels) l = perm[static_cast<std::size_t>(l - 1)];
  return out;
}

double central_difference(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

std::vector<double> grid_geometric_median(const std::vector<std::vector<double>>& pts) {
  const std::size_t d = pts.front().size();
  auto objective = [&](const std::vector<double>& y) {
    double total = 0.0;
    for (const auto& p : pts) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = y[j] - p[j];
        d2 += diff * diff;
      }
      total += std::sqrt(d2);
    }
    return total;
  };

  std::vector<double> best(d, 0.0);
  for (const auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) best[j] += p[j];
  for (double& v : best) v /= static_cast<double>(pts.size());
  double fbest = objective(best);

  double span = 1.0;
  for (const auto& p : pts)
    for (std::size_t j = 0; j < d; ++j) span = std::max(span, std::fabs(p[j] - best[j]));

  // Shrinking 3^d lattice around the running best point: move while any
  // neighbour improves, halve the spacing when none does.
  std::vector<int> digit(d, -1);
  std::vector<double> cand(d);
  for (int sweeps = 0; span > 1e-9 && sweeps < 20000; ++sweeps) {
    std::vector<double> arg = best;
    double fmin = fbest;
    std::fill(digit.begin(), digit.end(), -1);
    while (true) {
      bool all_zero = true;
      for (std::size_t j = 0; j < d; ++j) {
        cand[j] = best[j] + span * digit[j];
        if (digit[j] != 0) all_zero = false;
      }
      if (!all_zero) {
        const double f = objective(cand);
        if (f < fmin) {
          fmin = f;
          arg = cand;
        }
      }
      std::size_t j = 0;
      while (j < d && digit[j] == 1) digit[j++] = -1;
      if (j == d) break;
      ++digit[j];
    }
    if (fmin < fbest) {
      fbest = fmin;
      best = arg;
    } else {
      span *= 0.5;
    }
  }
  return best;
}

double min_eigenvalue_symmetric(std::vector<double> s, std::size_t n) {
  if (n == 0) throw std::runtime_error("oracle: empty matrix");
  double scale = 0.0;
  for (double v : s) scale = std::max(scale, std::fabs(v));
  if (scale == 0.0) return 0.0;

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += s[i * n + j] * s[i * n + j];
    if (off < 1e-28 * scale * scale) break;

    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = s[p * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (s[q * n + q] - s[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = s[k * n + p], akq = s[k * n + q];
          s[k * n + p] = c * akp - sn * akq;
          s[k * n + q] = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = s[p * n + k], aqk = s[q * n + k];
          s[p * n + k] = c * apk - sn * aqk;
          s[q * n + k] = sn * apk + c * aqk;
        }
      }
  }

  double mn = s[0];
  for (std::size_t i = 1; i < n; ++i) mn = std::min(mn, s[i * n + i]);
  return mn;
}

}  // namespace oracle
