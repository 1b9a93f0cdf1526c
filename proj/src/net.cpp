#include "prunevolve/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>

namespace prunevolve {

namespace {

[[noreturn]] void bad(const std::string& m) { throw std::invalid_argument(m); }

bool parameterized(Layer::Kind k) {
  return k == Layer::Kind::conv2d || k == Layer::Kind::dense;
}

// ---- single-sample layer forwards (eval mode) -------------------------------

Tensor conv_forward(const Layer& l, const Tensor& in) {
  if (in.rank() != 3) bad("conv2d input must be rank 3 (c,h,w)");
  const Shape& ws = l.weight.shape();
  const std::size_t co = ws[0], ci = ws[1], kh = ws[2], kw = ws[3];
  const std::size_t ih = in.shape()[1], iw = in.shape()[2];
  if (in.shape()[0] != ci) bad("conv2d input channel mismatch");
  if (ih < kh || iw < kw) bad("conv2d input smaller than kernel");
  const auto st = static_cast<std::size_t>(l.stride);
  const std::size_t oh = (ih - kh) / st + 1, ow = (iw - kw) / st + 1;
  Tensor out = Tensor::zeros({co, oh, ow});
  for (std::size_t oc = 0; oc < co; ++oc)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = l.bias[oc];
        for (std::size_t ic = 0; ic < ci; ++ic)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              s += l.weight[((oc * ci + ic) * kh + ky) * kw + kx] *
                   in[(ic * ih + oy * st + ky) * iw + ox * st + kx];
        out[(oc * oh + oy) * ow + ox] = s;
      }
  return out;
}

Tensor dense_forward(const Layer& l, const Tensor& in) {
  const std::size_t units = l.weight.shape()[0], d = l.weight.shape()[1];
  if (in.size() != d) bad("dense input size mismatch");
  Tensor out = Tensor::zeros({units});
  for (std::size_t j = 0; j < units; ++j) {
    double s = l.bias[j];
    for (std::size_t i = 0; i < d; ++i) s += l.weight[j * d + i] * in[i];
    out[j] = s;
  }
  return out;
}

Tensor relu_forward(const Tensor& in) {
  Tensor out = in;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, out[i]);
  return out;
}

Tensor maxpool_forward(const Tensor& in, std::vector<std::size_t>* argmax) {
  if (in.rank() != 3) bad("maxpool input must be rank 3 (c,h,w)");
  const std::size_t c = in.shape()[0], h = in.shape()[1], w = in.shape()[2];
  if (h < 2 || w < 2) bad("maxpool input smaller than window");
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  if (argmax) argmax->assign(c * oh * ow, 0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + oy * 2) * w + ox * 2;
        double bv = in[best];
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + oy * 2 + dy) * w + ox * 2 + dx;
            if (in[idx] > bv) {
              bv = in[idx];
              best = idx;
            }
          }
        out[(ch * oh + oy) * ow + ox] = bv;
        if (argmax) (*argmax)[(ch * oh + oy) * ow + ox] = best;
      }
  return out;
}

Tensor batchnorm_eval(const Layer& l, const Tensor& in) {
  const std::size_t C = l.gamma.size();
  if (in.rank() < 1 || in.shape()[0] != C)
    bad("batchnorm channel mismatch");
  const std::size_t spatial = in.size() / C;
  Tensor out = in;
  for (std::size_t c = 0; c < C; ++c) {
    const double istd = 1.0 / std::sqrt(l.running_var[c] + l.bn_eps);
    for (std::size_t s = 0; s < spatial; ++s) {
      const std::size_t i = c * spatial + s;
      out[i] = l.gamma[c] * (in[i] - l.running_mean[c]) * istd + l.beta[c];
    }
  }
  return out;
}

Tensor layer_forward_eval(const Layer& l, const Tensor& in) {
  switch (l.kind) {
    case Layer::Kind::conv2d: return conv_forward(l, in);
    case Layer::Kind::dense: return dense_forward(l, in);
    case Layer::Kind::relu: return relu_forward(in);
    case Layer::Kind::maxpool2: return maxpool_forward(in, nullptr);
    case Layer::Kind::batchnorm: return batchnorm_eval(l, in);
    case Layer::Kind::flatten: return in.flattened();
    case Layer::Kind::softmax_xent: return in;  // loss head; logits pass through
  }
  bad("unknown layer kind");
}

// ---- batched forward with cache ---------------------------------------------

Batch run_forward(const Network& net, Network* mut, const Batch& batch, bool training,
                  bool update_running, ForwardCache* cache) {
  if (batch.empty()) bad("empty batch");
  for (const Tensor& t : batch)
    if (t.shape() != batch.front().shape()) bad("batch samples must share one shape");

  const std::size_t L = net.layers.size();
  if (cache) {
    cache->acts.assign(L + 1, {});
    cache->pool_from.assign(L, {});
    cache->bn_xhat.assign(L, {});
    cache->bn_inv_std.assign(L, Tensor());
    cache->bn_mean.assign(L, Tensor());
    cache->bn_var.assign(L, Tensor());
  }

  Batch cur = batch;
  if (cache) cache->acts[0] = cur;
  for (std::size_t li = 0; li < L; ++li) {
    const Layer& l = net.layers[li];
    Batch nxt(cur.size());
    if (l.kind == Layer::Kind::batchnorm && training) {
      const std::size_t C = l.gamma.size();
      if (cur.front().rank() < 1 || cur.front().shape()[0] != C) bad("batchnorm channel mismatch");
      const std::size_t spatial = cur.front().size() / C;
      const double m = static_cast<double>(cur.size() * spatial);
      Tensor mean = Tensor::zeros({C}), var = Tensor::zeros({C}), istd = Tensor::zeros({C});
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (const Tensor& t : cur)
          for (std::size_t sp = 0; sp < spatial; ++sp) s += t[c * spatial + sp];
        mean[c] = s / m;
        double v = 0.0;
        for (const Tensor& t : cur)
          for (std::size_t sp = 0; sp < spatial; ++sp) {
            const double d = t[c * spatial + sp] - mean[c];
            v += d * d;
          }
        var[c] = v / m;
        istd[c] = 1.0 / std::sqrt(var[c] + l.bn_eps);
      }
      Batch xhat(cur.size());
      for (std::size_t n = 0; n < cur.size(); ++n) {
        Tensor xh = cur[n];
        Tensor y = cur[n];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t sp = 0; sp < spatial; ++sp) {
            const std::size_t i = c * spatial + sp;
            xh[i] = (cur[n][i] - mean[c]) * istd[c];
            y[i] = l.gamma[c] * xh[i] + l.beta[c];
          }
        xhat[n] = std::move(xh);
        nxt[n] = std::move(y);
      }
      if (update_running && mut) {
        Layer& ml = mut->layers[li];
        const double mom = l.bn_momentum;
        const double corr = m > 1.0 ? m / (m - 1.0) : 1.0;  // running var is unbiased
        for (std::size_t c = 0; c < C; ++c) {
          ml.running_mean[c] = (1.0 - mom) * ml.running_mean[c] + mom * mean[c];
          ml.running_var[c] = (1.0 - mom) * ml.running_var[c] + mom * var[c] * corr;
        }
      }
      if (cache) {
        cache->bn_xhat[li] = std::move(xhat);
        cache->bn_inv_std[li] = std::move(istd);
        cache->bn_mean[li] = std::move(mean);
        cache->bn_var[li] = std::move(var);
      }
    } else if (l.kind == Layer::Kind::maxpool2 && cache) {
      cache->pool_from[li].resize(cur.size());
      for (std::size_t n = 0; n < cur.size(); ++n)
        nxt[n] = maxpool_forward(cur[n], &cache->pool_from[li][n]);
    } else {
      for (std::size_t n = 0; n < cur.size(); ++n) nxt[n] = layer_forward_eval(l, cur[n]);
    }
    cur = std::move(nxt);
    if (cache) cache->acts[li + 1] = cur;
  }
  return cur;
}

}  // namespace

Layer Layer::conv2d(Tensor weight, Tensor bias, int stride) {
  if (weight.rank() != 4) bad("conv2d weight must be rank 4 (c_out,c_in,kh,kw)");
  if (bias.size() != weight.shape()[0]) bad("conv2d bias size mismatch");
  if (stride < 1) bad("conv2d stride must be positive");
  Layer l;
  l.kind = Kind::conv2d;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  l.stride = stride;
  return l;
}

Layer Layer::dense(Tensor weight, Tensor bias) {
  if (weight.rank() != 2) bad("dense weight must be rank 2 (units,in)");
  if (bias.size() != weight.shape()[0]) bad("dense bias size mismatch");
  Layer l;
  l.kind = Kind::dense;
  l.weight = std::move(weight);
  l.bias = std::move(bias);
  return l;
}

Layer Layer::relu() {
  Layer l;
  l.kind = Kind::relu;
  return l;
}

Layer Layer::maxpool2() {
  Layer l;
  l.kind = Kind::maxpool2;
  return l;
}

Layer Layer::batchnorm(Tensor gamma, Tensor beta, Tensor mean, Tensor var) {
  const std::size_t c = gamma.size();
  if (beta.size() != c || mean.size() != c || var.size() != c)
    bad("batchnorm parameter sizes must agree");
  Layer l;
  l.kind = Kind::batchnorm;
  l.gamma = std::move(gamma);
  l.beta = std::move(beta);
  l.running_mean = std::move(mean);
  l.running_var = std::move(var);
  return l;
}

Layer Layer::flatten() {
  Layer l;
  l.kind = Kind::flatten;
  return l;
}

Layer Layer::softmax_xent() {
  Layer l;
  l.kind = Kind::softmax_xent;
  return l;
}

std::size_t param_count(const Network& net) {
  std::size_t n = 0;
  for (const Layer& l : net.layers) {
    if (parameterized(l.kind)) n += l.weight.size() + l.bias.size();
    if (l.kind == Layer::Kind::batchnorm) n += l.gamma.size() + l.beta.size();
  }
  return n;
}

Batch forward_batch(const Network& net, const Batch& batch, bool training, ForwardCache* cache) {
  return run_forward(net, nullptr, batch, training, false, cache);
}

Batch forward_batch(Network& net, const Batch& batch, bool training, bool update_running,
                    ForwardCache* cache) {
  return run_forward(net, update_running ? &net : nullptr, batch, training, update_running, cache);
}

Tensor forward(const Network& net, const Tensor& sample) {
  Tensor a = sample;
  for (const Layer& l : net.layers) a = layer_forward_eval(l, a);
  return a;
}

NetGrads zero_grads(const Network& net) {
  NetGrads g(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer& l = net.layers[i];
    if (parameterized(l.kind)) {
      g[i].weight = Tensor::zeros(l.weight.shape());
      g[i].bias = Tensor::zeros(l.bias.shape());
    } else if (l.kind == Layer::Kind::batchnorm) {
      g[i].gamma = Tensor::zeros(l.gamma.shape());
      g[i].beta = Tensor::zeros(l.beta.shape());
    }
  }
  return g;
}

double loss_and_gradients(Network& net, const Batch& batch, const std::vector<int>& labels,
                          NetGrads* grads, bool update_running) {
  if (labels.size() != batch.size()) bad("labels must match batch size");
  ForwardCache cache;
  const Batch logits =
      run_forward(net, update_running ? &net : nullptr, batch, true, update_running, &cache);
  const std::size_t N = batch.size();
  const std::size_t L = net.layers.size();

  double loss = 0.0;
  Batch g(N);  // gradient w.r.t. the network output
  for (std::size_t n = 0; n < N; ++n) {
    const Tensor& lg = logits[n];
    if (labels[n] < 1 || static_cast<std::size_t>(labels[n]) > lg.size())
      bad("label out of range");
    const std::size_t y = static_cast<std::size_t>(labels[n] - 1);
    double mx = lg[0];
    for (std::size_t k = 1; k < lg.size(); ++k) mx = std::max(mx, lg[k]);
    double se = 0.0;
    for (std::size_t k = 0; k < lg.size(); ++k) se += std::exp(lg[k] - mx);
    const double lse = mx + std::log(se);
    loss += lse - lg[y];
    Tensor gn = Tensor::zeros(lg.shape());
    for (std::size_t k = 0; k < lg.size(); ++k)
      gn[k] = std::exp(lg[k] - lse) / static_cast<double>(N);
    gn[y] -= 1.0 / static_cast<double>(N);
    g[n] = std::move(gn);
  }
  loss /= static_cast<double>(N);
  if (!grads) return loss;

  *grads = zero_grads(net);
  for (std::size_t li = L; li-- > 0;) {
    const Layer& l = net.layers[li];
    const Batch& in = cache.acts[li];
    Batch gin(N);
    switch (l.kind) {
      case Layer::Kind::softmax_xent:
        gin = std::move(g);
        break;
      case Layer::Kind::relu:
        for (std::size_t n = 0; n < N; ++n) {
          Tensor d = Tensor::zeros(in[n].shape());
          for (std::size_t i = 0; i < d.size(); ++i) d[i] = in[n][i] > 0.0 ? g[n][i] : 0.0;
          gin[n] = std::move(d);
        }
        break;
      case Layer::Kind::flatten:
        for (std::size_t n = 0; n < N; ++n) gin[n] = g[n].reshaped(in[n].shape());
        break;
      case Layer::Kind::maxpool2:
        for (std::size_t n = 0; n < N; ++n) {
          Tensor d = Tensor::zeros(in[n].shape());
          const auto& from = cache.pool_from[li][n];
          for (std::size_t o = 0; o < from.size(); ++o) d[from[o]] += g[n][o];
          gin[n] = std::move(d);
        }
        break;
      case Layer::Kind::dense: {
        const std::size_t units = l.weight.shape()[0], d = l.weight.shape()[1];
        Tensor& dw = (*grads)[li].weight;
        Tensor& db = (*grads)[li].bias;
        for (std::size_t n = 0; n < N; ++n) {
          Tensor di = Tensor::zeros(in[n].shape());
          for (std::size_t j = 0; j < units; ++j) {
            const double gj = g[n][j];
            db[j] += gj;
            for (std::size_t i = 0; i < d; ++i) {
              dw[j * d + i] += gj * in[n][i];
              di[i] += gj * l.weight[j * d + i];
            }
          }
          gin[n] = std::move(di);
        }
        break;
      }
      case Layer::Kind::conv2d: {
        const Shape& ws = l.weight.shape();
        const std::size_t co = ws[0], ci = ws[1], kh = ws[2], kw = ws[3];
        const std::size_t ih = in.front().shape()[1], iw = in.front().shape()[2];
        const auto st = static_cast<std::size_t>(l.stride);
        const std::size_t oh = (ih - kh) / st + 1, ow = (iw - kw) / st + 1;
        Tensor& dw = (*grads)[li].weight;
        Tensor& db = (*grads)[li].bias;
        for (std::size_t n = 0; n < N; ++n) {
          Tensor di = Tensor::zeros(in[n].shape());
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const double go = g[n][(oc * oh + oy) * ow + ox];
                db[oc] += go;
                for (std::size_t ic = 0; ic < ci; ++ic)
                  for (std::size_t ky = 0; ky < kh; ++ky)
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                      const std::size_t ii = (ic * ih + oy * st + ky) * iw + ox * st + kx;
                      dw[((oc * ci + ic) * kh + ky) * kw + kx] += go * in[n][ii];
                      di[ii] += go * l.weight[((oc * ci + ic) * kh + ky) * kw + kx];
                    }
              }
          gin[n] = std::move(di);
        }
        break;
      }
      case Layer::Kind::batchnorm: {
        const std::size_t C = l.gamma.size();
        const std::size_t spatial = in.front().size() / C;
        const double m = static_cast<double>(N * spatial);
        const Batch& xhat = cache.bn_xhat[li];
        const Tensor& istd = cache.bn_inv_std[li];
        Tensor& dgamma = (*grads)[li].gamma;
        Tensor& dbeta = (*grads)[li].beta;
        std::vector<double> sum_dxh(C, 0.0), sum_dxh_xh(C, 0.0);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t sp = 0; sp < spatial; ++sp) {
              const std::size_t i = c * spatial + sp;
              dgamma[c] += g[n][i] * xhat[n][i];
              dbeta[c] += g[n][i];
              const double dxh = g[n][i] * l.gamma[c];
              sum_dxh[c] += dxh;
              sum_dxh_xh[c] += dxh * xhat[n][i];
            }
        for (std::size_t n = 0; n < N; ++n) {
          Tensor di = Tensor::zeros(in[n].shape());
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t sp = 0; sp < spatial; ++sp) {
              const std::size_t i = c * spatial + sp;
              const double dxh = g[n][i] * l.gamma[c];
              di[i] = istd[c] / m * (m * dxh - sum_dxh[c] - xhat[n][i] * sum_dxh_xh[c]);
            }
          gin[n] = std::move(di);
        }
        break;
      }
    }
    g = std::move(gin);
  }
  return loss;
}

double accuracy(const Network& net, const Dataset& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t n = 0; n < data.size(); ++n) {
    const Tensor out = forward(net, data.samples[n]);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < out.size(); ++k)
      if (out[k] > out[arg]) arg = k;
    if (static_cast<int>(arg) + 1 == data.labels[n]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg) {
  if (cfg.epochs < 1) bad("epochs must be at least 1");
  if (cfg.batch_size < 1) bad("batch_size must be at least 1");
  if (!(cfg.learning_rate >= 0.0)) bad("learning rate must be non-negative");
  for (double f : cfg.drop_fractions)
    if (!(f > 0.0 && f < 1.0)) bad("drop fractions must be in (0,1)");
  if (train_set.size() == 0) bad("empty training set");
  if (train_set.labels.size() != train_set.size()) bad("training labels missing");

  NetGrads velocity = zero_grads(net);
  NetGrads grads;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  const Dataset& eval_set = val_set.size() > 0 ? val_set : train_set;
  TrainResult res;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double lr = cfg.learning_rate;
    for (double f : cfg.drop_fractions)
      if (epoch >= static_cast<int>(f * cfg.epochs)) lr *= cfg.drop_factor;

    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      Batch batch;
      std::vector<int> labels;
      batch.reserve(end - start);
      labels.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(train_set.samples[order[i]]);
        labels.push_back(train_set.labels[order[i]]);
      }
      const double loss = loss_and_gradients(net, batch, labels, &grads, true);
      if (!std::isfinite(loss)) throw TrainingDiverged("non-finite loss at epoch " +
                                                       std::to_string(epoch));
      for (std::size_t li = 0; li < net.layers.size(); ++li) {
        Layer& l = net.layers[li];
        auto step = [&](Tensor& w, const Tensor& gr, Tensor& v, bool decay) {
          for (std::size_t i = 0; i < w.size(); ++i) {
            const double d = gr[i] + (decay ? cfg.weight_decay * w[i] : 0.0);
            v[i] = cfg.momentum * v[i] + d;
            w[i] -= lr * (cfg.nesterov ? d + cfg.momentum * v[i] : v[i]);
          }
        };
        if (parameterized(l.kind)) {
          step(l.weight, grads[li].weight, velocity[li].weight, true);
          step(l.bias, grads[li].bias, velocity[li].bias, false);
        } else if (l.kind == Layer::Kind::batchnorm) {
          step(l.gamma, grads[li].gamma, velocity[li].gamma, false);
          step(l.beta, grads[li].beta, velocity[li].beta, false);
        }
      }
    }
    res.val_accuracy.push_back(accuracy(net, eval_set));
  }
  res.best_accuracy = *std::max_element(res.val_accuracy.begin(), res.val_accuracy.end());
  return res;
}

Network build_network(const std::string& arch, const Shape& input_shape, int class_count,
                      std::uint64_t seed) {
  if (class_count < 2) bad("need at least two classes");
  std::mt19937_64 rng(seed);
  auto gauss = [&rng](double sd) {
    return std::normal_distribution<double>(0.0, sd)(rng);
  };
  auto make_dense = [&](std::size_t units, std::size_t in) {
    Tensor w = Tensor::zeros({units, in});
    const double sd = std::sqrt(2.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = gauss(sd);
    return Layer::dense(std::move(w), Tensor::zeros({units}));
  };
  auto make_conv = [&](std::size_t co, std::size_t ci, std::size_t k) {
    Tensor w = Tensor::zeros({co, ci, k, k});
    const double sd = std::sqrt(2.0 / static_cast<double>(ci * k * k));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = gauss(sd);
    return Layer::conv2d(std::move(w), Tensor::zeros({co}), 1);
  };
  auto make_bn = [](std::size_t c) {
    return Layer::batchnorm(Tensor::filled({c}, 1.0), Tensor::zeros({c}), Tensor::zeros({c}),
                            Tensor::filled({c}, 1.0));
  };

  Network net;
  net.input_shape = input_shape;
  const std::size_t vol = shape_volume(input_shape);
  if (arch == "tiny_mlp" || arch == "tiny_mlp_bn") {
    net.layers.push_back(Layer::flatten());
    net.layers.push_back(make_dense(32, vol));
    if (arch == "tiny_mlp_bn") net.layers.push_back(make_bn(32));
    net.layers.push_back(Layer::relu());
    net.layers.push_back(make_dense(static_cast<std::size_t>(class_count), 32));
    net.layers.push_back(Layer::softmax_xent());
  } else if (arch == "tiny_cnn" || arch == "tiny_cnn_bn") {
    if (input_shape.size() != 3) bad("tiny_cnn needs a (c,h,w) input shape");
    const std::size_t ci = input_shape[0], h = input_shape[1], w = input_shape[2];
    if (h < 4 || w < 4) bad("tiny_cnn input too small");
    net.layers.push_back(make_conv(8, ci, 3));
    if (arch == "tiny_cnn_bn") net.layers.push_back(make_bn(8));
    net.layers.push_back(Layer::relu());
    net.layers.push_back(Layer::maxpool2());
    net.layers.push_back(Layer::flatten());
    const std::size_t flat = 8 * ((h - 2) / 2) * ((w - 2) / 2);
    net.layers.push_back(make_dense(static_cast<std::size_t>(class_count), flat));
    net.layers.push_back(Layer::softmax_xent());
  } else {
    bad("unknown architecture: " + arch);
  }
  return net;
}

namespace {

// End of the batchnorm/relu chain following a parameterized layer: the index
// of the first layer that consumes the (post-activation) channel maps.
std::size_t chain_end(const Network& net, std::size_t li) {
  std::size_t j = li + 1;
  while (j < net.layers.size() && (net.layers[j].kind == Layer::Kind::batchnorm ||
                                   net.layers[j].kind == Layer::Kind::relu))
    ++j;
  return j;
}

int chain_bn(const Network& net, std::size_t li) {
  for (std::size_t j = li + 1; j < chain_end(net, li); ++j)
    if (net.layers[j].kind == Layer::Kind::batchnorm) return static_cast<int>(j);
  return -1;
}

std::vector<std::size_t> sample_indices(std::size_t n, std::size_t limit, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (limit >= n) return idx;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < limit; ++i) {
    const std::size_t j =
        i + std::uniform_int_distribution<std::size_t>(0, n - 1 - i)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(limit);
  return idx;
}

Tensor row_block(const Tensor& t, std::size_t row) {
  const std::size_t rows = t.shape()[0];
  const std::size_t block = t.size() / rows;
  std::vector<double> data(t.data().begin() + static_cast<std::ptrdiff_t>(row * block),
                           t.data().begin() + static_cast<std::ptrdiff_t>((row + 1) * block));
  Shape s(t.shape().begin() + 1, t.shape().end());
  if (s.empty()) s = {1};
  return Tensor(std::move(s), std::move(data));
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t block = t.size() / t.shape()[0];
  std::vector<double> data;
  data.reserve(rows.size() * block);
  for (std::size_t r : rows)
    data.insert(data.end(), t.data().begin() + static_cast<std::ptrdiff_t>(r * block),
                t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * block));
  Shape s = t.shape();
  s[0] = rows.size();
  return Tensor(std::move(s), std::move(data));
}

void zero_channels(Tensor& a, const std::vector<bool>& keep) {
  const std::size_t C = keep.size();
  if (a.rank() < 1 || a.shape()[0] != C) bad("mask does not match activation channels");
  const std::size_t spatial = a.size() / C;
  for (std::size_t c = 0; c < C; ++c)
    if (!keep[c])
      for (std::size_t sp = 0; sp < spatial; ++sp) a[c * spatial + sp] = 0.0;
}

}  // namespace

std::vector<ChannelContext> extract_channel_context(const Network& net, std::size_t layer_index,
                                                    const Dataset& data,
                                                    std::size_t sample_limit, std::uint64_t seed) {
  if (layer_index >= net.layers.size()) bad("layer index out of range");
  const Layer& l = net.layers[layer_index];
  if (!parameterized(l.kind)) bad("channel extraction needs a conv2d or dense layer");
  if (data.size() == 0 || data.labels.size() != data.size()) bad("dataset must be labeled");

  const std::vector<std::size_t> idx = sample_indices(data.size(), sample_limit, seed);
  Batch batch;
  std::vector<int> labels;
  batch.reserve(idx.size());
  labels.reserve(idx.size());
  for (std::size_t i : idx) {
    batch.push_back(data.samples[i]);
    labels.push_back(data.labels[i]);
  }

  ForwardCache cache;
  forward_batch(net, batch, false, &cache);
  const std::size_t j = chain_end(net, layer_index);
  const Batch& acts = cache.acts[j];

  const std::size_t channels = l.weight.shape()[0];
  if (acts.front().rank() < 1 || acts.front().shape()[0] != channels)
    bad("activation does not expose the layer's channels");
  const bool spatial_maps = acts.front().rank() == 3;

  Tensor W = l.weight;
  if (l.kind == Layer::Kind::dense)
    W = W.reshaped({W.shape()[0], W.shape()[1], 1, 1});

  const int bi = chain_bn(net, layer_index);
  std::vector<ChannelContext> out;
  out.reserve(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    ChannelContext ctx;
    ctx.layer_filter = W;
    ctx.incoming_filter = row_block(W, c);
    if (bi >= 0) {
      const Layer& bn = net.layers[static_cast<std::size_t>(bi)];
      ctx.bn_params =
          Tensor({4}, {bn.gamma[c], bn.beta[c], bn.running_mean[c], bn.running_var[c]});
    } else {
      ctx.bn_params = Tensor({4}, {1.0, 0.0, 0.0, 1.0});
    }
    std::vector<Tensor> maps;
    maps.reserve(acts.size());
    for (const Tensor& a : acts) {
      if (spatial_maps) {
        const std::size_t h = a.shape()[1], w = a.shape()[2];
        std::vector<double> m(a.data().begin() + static_cast<std::ptrdiff_t>(c * h * w),
                              a.data().begin() + static_cast<std::ptrdiff_t>((c + 1) * h * w));
        maps.emplace_back(Shape{h, w}, std::move(m));
      } else {
        maps.emplace_back(Shape{1, 1}, std::vector<double>{a[c]});
      }
    }
    ctx.maps = MapCollection(std::move(maps));
    ctx.labels = labels;
    ctx.class_count = data.class_count;
    out.push_back(std::move(ctx));
  }
  return out;
}

Network prune_channels(const Network& net, std::size_t layer_index,
                       const std::vector<bool>& keep_mask) {
  if (layer_index >= net.layers.size()) bad("layer index out of range");
  const Layer& l = net.layers[layer_index];
  if (!parameterized(l.kind)) bad("pruning needs a conv2d or dense layer");
  const std::size_t co = l.weight.shape()[0];
  if (keep_mask.size() != co) bad("mask length must equal channel count");
  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < co; ++c)
    if (keep_mask[c]) kept.push_back(c);
  if (kept.empty()) bad("at least one channel must be kept");

  Network out = net;
  Layer& pl = out.layers[layer_index];
  pl.weight = take_rows(l.weight, kept);
  {
    std::vector<double> b;
    b.reserve(kept.size());
    for (std::size_t c : kept) b.push_back(l.bias[c]);
    pl.bias = Tensor({kept.size()}, std::move(b));
  }

  if (const int bi = chain_bn(net, layer_index); bi >= 0) {
    Layer& bn = out.layers[static_cast<std::size_t>(bi)];
    auto take = [&kept](const Tensor& t) {
      std::vector<double> v;
      v.reserve(kept.size());
      for (std::size_t c : kept) v.push_back(t[c]);
      return Tensor({kept.size()}, std::move(v));
    };
    bn.gamma = take(bn.gamma);
    bn.beta = take(bn.beta);
    bn.running_mean = take(bn.running_mean);
    bn.running_var = take(bn.running_var);
  }

  std::size_t j = layer_index + 1;
  while (j < net.layers.size() && !parameterized(net.layers[j].kind)) ++j;
  if (j < net.layers.size()) {
    Layer& nx = out.layers[j];
    if (nx.kind == Layer::Kind::conv2d) {
      const Shape& ws = nx.weight.shape();
      if (ws[1] != co) bad("next conv input channels do not match pruned layer");
      const std::size_t co2 = ws[0], kh = ws[2], kw = ws[3];
      Tensor w = Tensor::zeros({co2, kept.size(), kh, kw});
      for (std::size_t oc = 0; oc < co2; ++oc)
        for (std::size_t k = 0; k < kept.size(); ++k)
          for (std::size_t p = 0; p < kh * kw; ++p)
            w[(oc * kept.size() + k) * kh * kw + p] =
                nx.weight[(oc * co + kept[k]) * kh * kw + p];
      nx.weight = std::move(w);
    } else {
      // Dense after (possibly) pool + flatten: columns group into co blocks
      // of the per-channel flattened spatial size.
      const std::size_t units = nx.weight.shape()[0], in = nx.weight.shape()[1];
      if (in % co != 0) bad("next dense input does not group into channels");
      const std::size_t s = in / co;
      Tensor w = Tensor::zeros({units, kept.size() * s});
      for (std::size_t u = 0; u < units; ++u)
        for (std::size_t k = 0; k < kept.size(); ++k)
          for (std::size_t p = 0; p < s; ++p)
            w[u * kept.size() * s + k * s + p] = nx.weight[u * in + kept[k] * s + p];
      nx.weight = std::move(w);
    }
  }
  return out;
}

Tensor forward_masked(const Network& net, const Tensor& sample, std::size_t layer_index,
                      const std::vector<bool>& keep_mask) {
  if (layer_index >= net.layers.size()) bad("layer index out of range");
  if (!parameterized(net.layers[layer_index].kind))
    bad("masking needs a conv2d or dense layer");
  const std::size_t j = chain_end(net, layer_index);
  Tensor a = sample;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (i == j) zero_channels(a, keep_mask);
    a = layer_forward_eval(net.layers[i], a);
  }
  if (j == net.layers.size()) zero_channels(a, keep_mask);
  return a;
}

// ---- checkpoints -------------------------------------------------------------

namespace {

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 8);
}

void put_f64(std::ostream& os, double d) {
  std::uint64_t u;
  std::memcpy(&u, &d, 8);
  put_u64(os, u);
}

void put_tensor(std::ostream& os, const Tensor& t) {
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(os, d);
  for (double v : t.data()) put_f64(os, v);
}

void get_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw CheckpointError("truncated checkpoint");
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  get_bytes(is, b, 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  get_bytes(is, b, 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double get_f64(std::istream& is) {
  const std::uint64_t u = get_u64(is);
  double d;
  std::memcpy(&d, &u, 8);
  return d;
}

Tensor get_tensor(std::istream& is) {
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw CheckpointError("implausible tensor rank");
  Shape s(rank);
  std::size_t vol = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    s[i] = static_cast<std::size_t>(get_u64(is));
    if (s[i] == 0 || s[i] > (std::size_t{1} << 32) || vol > (std::size_t{1} << 32))
      throw CheckpointError("implausible tensor shape");
    vol *= s[i];
  }
  std::vector<double> data(vol);
  for (std::size_t i = 0; i < vol; ++i) data[i] = get_f64(is);
  return Tensor(std::move(s), std::move(data));
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write("PNET1", 5);
  put_u32(os, static_cast<std::uint32_t>(net.input_shape.size()));
  for (std::size_t d : net.input_shape) put_u64(os, d);
  put_u32(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const Layer& l : net.layers) {
    unsigned char kind = static_cast<unsigned char>(l.kind);
    put_bytes(os, &kind, 1);
    switch (l.kind) {
      case Layer::Kind::conv2d:
        put_u32(os, static_cast<std::uint32_t>(l.stride));
        put_tensor(os, l.weight);
        put_tensor(os, l.bias);
        break;
      case Layer::Kind::dense:
        put_tensor(os, l.weight);
        put_tensor(os, l.bias);
        break;
      case Layer::Kind::batchnorm:
        put_f64(os, l.bn_eps);
        put_f64(os, l.bn_momentum);
        put_tensor(os, l.gamma);
        put_tensor(os, l.beta);
        put_tensor(os, l.running_mean);
        put_tensor(os, l.running_var);
        break;
      default:
        break;
    }
  }
  os.flush();
  if (!os) throw CheckpointError("checkpoint write failed: " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[5];
  get_bytes(is, magic, 5);
  if (std::memcmp(magic, "PNET1", 5) != 0) throw CheckpointError("bad checkpoint magic");
  Network net;
  const std::uint32_t rank = get_u32(is);
  if (rank > 8) throw CheckpointError("implausible input rank");
  net.input_shape.resize(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    net.input_shape[i] = static_cast<std::size_t>(get_u64(is));
  const std::uint32_t layer_count = get_u32(is);
  if (layer_count > 1024) throw CheckpointError("implausible layer count");
  for (std::uint32_t i = 0; i < layer_count; ++i) {
    unsigned char kind;
    get_bytes(is, &kind, 1);
    if (kind > static_cast<unsigned char>(Layer::Kind::softmax_xent))
      throw CheckpointError("unknown layer kind");
    switch (static_cast<Layer::Kind>(kind)) {
      case Layer::Kind::conv2d: {
        const auto stride = static_cast<int>(get_u32(is));
        Tensor w = get_tensor(is);
        Tensor b = get_tensor(is);
        net.layers.push_back(Layer::conv2d(std::move(w), std::move(b), stride));
        break;
      }
      case Layer::Kind::dense: {
        Tensor w = get_tensor(is);
        Tensor b = get_tensor(is);
        net.layers.push_back(Layer::dense(std::move(w), std::move(b)));
        break;
      }
      case Layer::Kind::batchnorm: {
        const double eps = get_f64(is);
        const double mom = get_f64(is);
        Tensor g = get_tensor(is);
        Tensor be = get_tensor(is);
        Tensor rm = get_tensor(is);
        Tensor rv = get_tensor(is);
        Layer l = Layer::batchnorm(std::move(g), std::move(be), std::move(rm), std::move(rv));
        l.bn_eps = eps;
        l.bn_momentum = mom;
        net.layers.push_back(std::move(l));
        break;
      }
      case Layer::Kind::relu:
        net.layers.push_back(Layer::relu());
        break;
      case Layer::Kind::maxpool2:
        net.layers.push_back(Layer::maxpool2());
        break;
      case Layer::Kind::flatten:
        net.layers.push_back(Layer::flatten());
        break;
      case Layer::Kind::softmax_xent:
        net.layers.push_back(Layer::softmax_xent());
        break;
    }
  }
  return net;
}

std::uint64_t weight_hash(const Network& net) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix_byte = [&h](unsigned char b) {
    h ^= b;
    h *= 1099511628211ull;
  };
  auto mix_u64 = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(v >> (8 * i)));
  };
  auto mix_tensor = [&](const Tensor& t) {
    mix_u64(t.rank());
    for (std::size_t d : t.shape()) mix_u64(d);
    for (double v : t.data()) {
      std::uint64_t u;
      std::memcpy(&u, &v, 8);
      mix_u64(u);
    }
  };
  for (const Layer& l : net.layers) {
    mix_byte(static_cast<unsigned char>(l.kind));
    if (parameterized(l.kind)) {
      mix_tensor(l.weight);
      mix_tensor(l.bias);
    } else if (l.kind == Layer::Kind::batchnorm) {
      mix_tensor(l.gamma);
      mix_tensor(l.beta);
      mix_tensor(l.running_mean);
      mix_tensor(l.running_var);
    }
  }
  return h;
}

}  // namespace prunevolve
