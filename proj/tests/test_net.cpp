#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "prunevolve/net.hpp"
#include "prunevolve/tasks.hpp"

using namespace prunevolve;

namespace {

Tensor randn(const Shape& s, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Tensor t = Tensor::zeros(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = g(rng);
  return t;
}

Dataset random_dataset(const Shape& shape, int n, int classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.class_count = classes;
  for (int i = 0; i < n; ++i) {
    d.samples.push_back(randn(shape, rng));
    d.labels.push_back(1 + i % classes);
  }
  return d;
}

// Worst relative error between analytic gradients and central differences
// over every parameter of every layer.
double fd_worst(Network net, const Batch& batch, const std::vector<int>& labels) {
  NetGrads grads;
  loss_and_gradients(net, batch, labels, &grads, false);
  const double eps = 1e-4;
  double worst = 0.0;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    auto check_tensor = [&](Tensor& w, const Tensor& g) {
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double keep = w[i];
        w[i] = keep + eps;
        const double lp = loss_and_gradients(net, batch, labels, nullptr, false);
        w[i] = keep - eps;
        const double lm = loss_and_gradients(net, batch, labels, nullptr, false);
        w[i] = keep;
        const double fd = (lp - lm) / (2 * eps);
        const double denom = std::max({std::fabs(fd), std::fabs(g[i]), 1e-8});
        worst = std::max(worst, std::fabs(fd - g[i]) / denom);
      }
    };
    Layer& l = net.layers[li];
    if (l.kind == Layer::Kind::conv2d || l.kind == Layer::Kind::dense) {
      check_tensor(l.weight, grads[li].weight);
      check_tensor(l.bias, grads[li].bias);
    } else if (l.kind == Layer::Kind::batchnorm) {
      check_tensor(l.gamma, grads[li].gamma);
      check_tensor(l.beta, grads[li].beta);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("architectures build with the documented layout") {
  const Shape in{1, 6, 6};

  Network mlp = build_network("tiny_mlp", in, 3, 1);
  REQUIRE(mlp.layers.size() == 5);
  CHECK(mlp.layers[0].kind == Layer::Kind::flatten);
  CHECK(mlp.layers[1].kind == Layer::Kind::dense);
  CHECK(mlp.layers[2].kind == Layer::Kind::relu);
  CHECK(mlp.layers[3].kind == Layer::Kind::dense);
  CHECK(mlp.layers[4].kind == Layer::Kind::softmax_xent);
  CHECK(mlp.layers[1].weight.shape() == Shape{32, 36});
  CHECK(mlp.layers[3].weight.shape() == Shape{3, 32});
  CHECK(param_count(mlp) == 32 * 36 + 32 + 3 * 32 + 3);

  Network mlp_bn = build_network("tiny_mlp_bn", in, 3, 1);
  REQUIRE(mlp_bn.layers.size() == 6);
  CHECK(mlp_bn.layers[2].kind == Layer::Kind::batchnorm);
  CHECK(param_count(mlp_bn) == param_count(mlp) + 64);

  Network cnn = build_network("tiny_cnn", in, 3, 1);
  REQUIRE(cnn.layers.size() == 6);
  CHECK(cnn.layers[0].kind == Layer::Kind::conv2d);
  CHECK(cnn.layers[0].weight.shape() == Shape{8, 1, 3, 3});
  CHECK(cnn.layers[4].kind == Layer::Kind::dense);
  CHECK(cnn.layers[4].weight.shape() == Shape{3, 32});  // 8 channels x 2x2 pooled
  CHECK(param_count(cnn) == 8 * 9 + 8 + 3 * 32 + 3);

  Network cnn_bn = build_network("tiny_cnn_bn", in, 3, 1);
  REQUIRE(cnn_bn.layers.size() == 7);
  CHECK(cnn_bn.layers[1].kind == Layer::Kind::batchnorm);
  CHECK(param_count(cnn_bn) == param_count(cnn) + 16);

  // Biases start at zero, batchnorm at identity.
  for (std::size_t i = 0; i < cnn_bn.layers[0].bias.size(); ++i)
    CHECK(cnn_bn.layers[0].bias[i] == 0.0);
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(cnn_bn.layers[1].gamma[c] == 1.0);
    CHECK(cnn_bn.layers[1].beta[c] == 0.0);
    CHECK(cnn_bn.layers[1].running_mean[c] == 0.0);
    CHECK(cnn_bn.layers[1].running_var[c] == 1.0);
  }

  // Same seed, same weights; different seed, different weights.
  CHECK(weight_hash(build_network("tiny_cnn", in, 3, 7)) ==
        weight_hash(build_network("tiny_cnn", in, 3, 7)));
  CHECK(weight_hash(build_network("tiny_cnn", in, 3, 7)) !=
        weight_hash(build_network("tiny_cnn", in, 3, 8)));

  CHECK_THROWS_AS(build_network("resnet50", in, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_network("tiny_mlp", in, 1, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_network("tiny_cnn", Shape{36}, 3, 1), std::invalid_argument);
  CHECK_THROWS_AS(build_network("tiny_cnn", Shape{1, 3, 3}, 3, 1), std::invalid_argument);
}

TEST_CASE("layer forward passes match hand-computed values") {
  // Cross-correlation conv, stride 1, with bias.
  {
    Network net;
    net.input_shape = {1, 3, 3};
    net.layers.push_back(
        Layer::conv2d(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}), Tensor({1}, {10.0}), 1));
    Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor y = forward(net, x);
    REQUIRE(y.shape() == Shape{1, 2, 2});
    CHECK(y[0] == 47.0);
    CHECK(y[1] == 57.0);
    CHECK(y[2] == 77.0);
    CHECK(y[3] == 87.0);
  }
  // Stride 2.
  {
    Network net;
    net.input_shape = {1, 4, 4};
    net.layers.push_back(
        Layer::conv2d(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}), Tensor({1}, {0.0}), 2));
    Tensor x({1, 4, 4},
             {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    Tensor y = forward(net, x);
    REQUIRE(y.shape() == Shape{1, 2, 2});
    CHECK(y[0] == 14.0);
    CHECK(y[1] == 22.0);
    CHECK(y[2] == 46.0);
    CHECK(y[3] == 54.0);
  }
  // Dense, relu, maxpool, flatten.
  {
    Network net;
    net.input_shape = {3};
    net.layers.push_back(Layer::dense(Tensor({2, 3}, {1, 0, -1, 2, 1, 0}),
                                      Tensor({2}, {0.5, -0.5})));
    Tensor y = forward(net, Tensor({3}, {1, 2, 3}));
    REQUIRE(y.shape() == Shape{2});
    CHECK(y[0] == -1.5);
    CHECK(y[1] == 3.5);

    net.layers.push_back(Layer::relu());
    Tensor z = forward(net, Tensor({3}, {1, 2, 3}));
    CHECK(z[0] == 0.0);
    CHECK(z[1] == 3.5);
  }
  {
    Network net;
    net.input_shape = {1, 4, 4};
    net.layers.push_back(Layer::maxpool2());
    Tensor x({1, 4, 4},
             {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
    Tensor y = forward(net, x);
    REQUIRE(y.shape() == Shape{1, 2, 2});
    CHECK(y[0] == 5.0);
    CHECK(y[1] == 7.0);
    CHECK(y[2] == 13.0);
    CHECK(y[3] == 15.0);
  }
  {
    Network net;
    net.input_shape = {2, 2, 2};
    net.layers.push_back(Layer::flatten());
    Tensor x({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor y = forward(net, x);
    REQUIRE(y.shape() == Shape{8});
    CHECK(y[5] == 6.0);
  }
}

TEST_CASE("batchnorm normalizes with running stats in eval and batch stats in training") {
  Network net;
  net.input_shape = {2};
  net.layers.push_back(Layer::batchnorm(Tensor({2}, {2.0, 1.0}), Tensor({2}, {1.0, 0.0}),
                                        Tensor({2}, {3.0, 0.0}), Tensor({2}, {4.0, 1.0})));

  // Eval mode: gamma * (x - running_mean) / sqrt(running_var + eps) + beta.
  Tensor y = forward(net, Tensor({2}, {5.0, 7.0}));
  CHECK(y[0] == doctest::Approx(2.0 * 2.0 / std::sqrt(4.0 + 1e-5) + 1.0).epsilon(1e-12));
  CHECK(y[1] == doctest::Approx(7.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));

  // Training mode uses biased batch statistics.
  Network bn1;
  bn1.input_shape = {1};
  bn1.layers.push_back(Layer::batchnorm(Tensor({1}, {1.0}), Tensor({1}, {0.0}),
                                        Tensor({1}, {0.0}), Tensor({1}, {1.0})));
  Batch batch{Tensor({1}, {4.0}), Tensor({1}, {6.0})};
  Batch out = forward_batch(bn1, batch, true);
  const double istd = 1.0 / std::sqrt(1.0 + 1e-5);  // batch mean 5, biased var 1
  CHECK(out[0][0] == doctest::Approx(-istd).epsilon(1e-12));
  CHECK(out[1][0] == doctest::Approx(istd).epsilon(1e-12));

  // Running estimates fold in the batch with momentum; the variance estimate
  // is the unbiased one.
  forward_batch(bn1, batch, true, true);
  CHECK(bn1.layers[0].running_mean[0] == doctest::Approx(0.9 * 0.0 + 0.1 * 5.0).epsilon(1e-12));
  CHECK(bn1.layers[0].running_var[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 1.0 * 2.0).epsilon(1e-12));
}

TEST_CASE("analytic gradients match central differences on every architecture") {
  std::mt19937_64 rng(1007);
  Batch batch;
  std::vector<int> labels;
  for (int n = 0; n < 6; ++n) {
    batch.push_back(randn({1, 6, 6}, rng));
    labels.push_back(1 + n % 3);
  }
  for (const char* arch : {"tiny_mlp", "tiny_mlp_bn", "tiny_cnn", "tiny_cnn_bn"}) {
    CAPTURE(arch);
    Network net = build_network(arch, {1, 6, 6}, 3, 1);
    const double worst = fd_worst(net, batch, labels);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gradients vanish behind a dead relu") {
  Network net;
  net.input_shape = {2};
  net.layers.push_back(Layer::dense(Tensor({1, 2}, {1.0, 1.0}), Tensor({1}, {-100.0})));
  net.layers.push_back(Layer::relu());
  net.layers.push_back(Layer::dense(Tensor({2, 1}, {1.0, -1.0}), Tensor({2}, {0.0, 0.0})));
  net.layers.push_back(Layer::softmax_xent());

  Batch batch{Tensor({2}, {1.0, 2.0}), Tensor({2}, {0.5, 0.25})};
  std::vector<int> labels{1, 1};
  NetGrads grads;
  const double loss = loss_and_gradients(net, batch, labels, &grads, false);
  CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // The hidden activation is exactly zero, so nothing reaches layer 0 and the
  // second dense sees a zero input.
  for (std::size_t i = 0; i < grads[0].weight.size(); ++i) CHECK(grads[0].weight[i] == 0.0);
  CHECK(grads[0].bias[0] == 0.0);
  CHECK(grads[2].weight[0] == 0.0);
  CHECK(grads[2].weight[1] == 0.0);
  CHECK(grads[2].bias[0] == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(grads[2].bias[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("channel contexts expose the filter, incoming block, bn row, and maps") {
  Network net = build_network("tiny_cnn_bn", {1, 6, 6}, 3, 2);
  Dataset data = random_dataset({1, 6, 6}, 10, 3, 31);

  std::vector<ChannelContext> ctxs = extract_channel_context(net, 0, data, 4, 77);
  REQUIRE(ctxs.size() == 8);
  for (std::size_t c = 0; c < ctxs.size(); ++c) {
    const ChannelContext& ctx = ctxs[c];
    CHECK(ctx.layer_filter.shape() == Shape{8, 1, 3, 3});
    CHECK(ctx.layer_filter.data() == net.layers[0].weight.data());
    REQUIRE(ctx.incoming_filter.shape() == Shape{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i)
      CHECK(ctx.incoming_filter[i] == net.layers[0].weight[c * 9 + i]);
    REQUIRE(ctx.bn_params.shape() == Shape{4});
    CHECK(ctx.bn_params[0] == 1.0);  // untrained bn row is the identity
    CHECK(ctx.bn_params[1] == 0.0);
    CHECK(ctx.bn_params[2] == 0.0);
    CHECK(ctx.bn_params[3] == 1.0);
    REQUIRE(ctx.maps.maps.size() == 4);  // sample_limit
    for (const Tensor& m : ctx.maps.maps) {
      CHECK(m.shape() == Shape{4, 4});  // post-relu conv maps, before pooling
      for (std::size_t i = 0; i < m.size(); ++i) CHECK(m[i] >= 0.0);
    }
    REQUIRE(ctx.labels.size() == 4);
    for (int l : ctx.labels) CHECK((l >= 1 && l <= 3));
    CHECK(ctx.class_count == 3);
  }

  // A perturbed bn layer shows up in the per-channel row.
  net.layers[1].gamma[2] = 2.5;
  net.layers[1].running_var[2] = 0.7;
  std::vector<ChannelContext> again = extract_channel_context(net, 0, data, 4, 77);
  CHECK(again[2].bn_params[0] == 2.5);
  CHECK(again[2].bn_params[3] == 0.7);
  CHECK(again[3].bn_params[0] == 1.0);

  // Same seed picks the same sample subset.
  CHECK(again[0].labels == ctxs[0].labels);

  // Dense layers are channels with 1x1 maps and a reshaped kernel.
  Network mlp = build_network("tiny_mlp", {1, 6, 6}, 3, 2);
  std::vector<ChannelContext> units = extract_channel_context(mlp, 1, data, 20, 5);
  REQUIRE(units.size() == 32);
  CHECK(units[0].layer_filter.shape() == Shape{32, 36, 1, 1});
  CHECK(units[0].incoming_filter.shape() == Shape{36, 1, 1});
  REQUIRE(units[0].maps.maps.size() == 10);  // limit above the dataset size
  CHECK(units[0].maps.maps[0].shape() == Shape{1, 1});
  for (const Tensor& m : units[7].maps.maps) CHECK(m[0] >= 0.0);  // post-relu

  // The final classifier layer works too; its maps sit before the softmax.
  std::vector<ChannelContext> logits = extract_channel_context(mlp, 3, data, 10, 5);
  REQUIRE(logits.size() == 3);
  CHECK(logits[0].incoming_filter.shape() == Shape{32, 1, 1});

  CHECK_THROWS_AS(extract_channel_context(mlp, 0, data, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(extract_channel_context(mlp, 99, data, 4, 1), std::invalid_argument);
  Dataset empty;
  CHECK_THROWS_AS(extract_channel_context(mlp, 1, empty, 4, 1), std::invalid_argument);
}

TEST_CASE("pruning a layer matches masking its channels") {
  std::mt19937_64 rng(404);

  // Conv layer of a bn cnn, irregular mask.
  Network cnn = build_network("tiny_cnn_bn", {1, 6, 6}, 3, 5);
  const std::vector<bool> mask{true, false, true, false, true, true, false, true};
  Network pruned = prune_channels(cnn, 0, mask);
  CHECK(pruned.layers[0].weight.shape() == Shape{5, 1, 3, 3});
  CHECK(pruned.layers[0].bias.shape() == Shape{5});
  CHECK(pruned.layers[1].gamma.size() == 5);
  CHECK(pruned.layers[5].weight.shape() == Shape{3, 20});  // 5 channels x 2x2 pooled
  CHECK(param_count(pruned) < param_count(cnn));

  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    Tensor x = randn({1, 6, 6}, rng);
    Tensor a = forward_masked(cnn, x, 0, mask);
    Tensor b = forward(pruned, x);
    REQUIRE(a.size() == b.size());
    for (std::size_t j = 0; j < a.size(); ++j)
      worst = std::max(worst, std::fabs(a[j] - b[j]));
  }
  CHECK(worst <= 1e-10);

  // Keeping everything changes nothing at all.
  Network same = prune_channels(cnn, 0, std::vector<bool>(8, true));
  CHECK(weight_hash(same) == weight_hash(cnn));
  for (int i = 0; i < 10; ++i) {
    Tensor x = randn({1, 6, 6}, rng);
    Tensor a = forward(cnn, x);
    Tensor b = forward(same, x);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  // Hidden dense layer of the mlp.
  Network mlp = build_network("tiny_mlp", {1, 6, 6}, 3, 5);
  std::vector<bool> half(32, false);
  for (std::size_t i = 0; i < 16; ++i) half[2 * i] = true;
  Network small = prune_channels(mlp, 1, half);
  CHECK(small.layers[1].weight.shape() == Shape{16, 36});
  CHECK(small.layers[3].weight.shape() == Shape{3, 16});
  for (int i = 0; i < 20; ++i) {
    Tensor x = randn({1, 6, 6}, rng);
    Tensor a = forward_masked(mlp, x, 1, half);
    Tensor b = forward(small, x);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(std::fabs(a[j] - b[j]) <= 1e-10);
  }

  CHECK_THROWS_AS(prune_channels(cnn, 0, std::vector<bool>(7, true)), std::invalid_argument);
  CHECK_THROWS_AS(prune_channels(cnn, 0, std::vector<bool>(8, false)), std::invalid_argument);
  CHECK_THROWS_AS(prune_channels(cnn, 2, mask), std::invalid_argument);
  CHECK_THROWS_AS(prune_channels(cnn, 99, mask), std::invalid_argument);
}

TEST_CASE("checkpoints round trip bit-for-bit and reject damage") {
  const std::string path = "ckpt_roundtrip.bin";
  Network net = build_network("tiny_cnn_bn", {1, 6, 6}, 4, 9);
  net.layers[1].running_mean[3] = 0.25;  // non-default running stats survive too
  save_checkpoint(net, path);

  Network back = load_checkpoint(path);
  CHECK(back.input_shape == net.input_shape);
  REQUIRE(back.layers.size() == net.layers.size());
  CHECK(weight_hash(back) == weight_hash(net));
  CHECK(param_count(back) == param_count(net));
  CHECK(back.layers[1].running_mean[3] == 0.25);

  std::mt19937_64 rng(2);
  for (int i = 0; i < 5; ++i) {
    Tensor x = randn({1, 6, 6}, rng);
    Tensor a = forward(net, x);
    Tensor b = forward(back, x);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }

  // The hash notices a single flipped weight.
  back.layers[0].weight[0] += 1.0;
  CHECK(weight_hash(back) != weight_hash(net));

  // Damage detection.
  {
    std::ofstream bad("ckpt_bad_magic.bin", std::ios::binary);
    bad << "NOPE1 this is not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_bad_magic.bin"), CheckpointError);

  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    REQUIRE(bytes.size() > 100);
    std::ofstream cut("ckpt_truncated.bin", std::ios::binary);
    cut.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint("ckpt_truncated.bin"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint("ckpt_does_not_exist.bin"), CheckpointError);

  std::remove(path.c_str());
  std::remove("ckpt_bad_magic.bin");
  std::remove("ckpt_truncated.bin");
}

TEST_CASE("training is deterministic, improves the net, and flags divergence") {
  ImageSpec spec;
  spec.classes = 3;
  spec.height = 6;
  spec.width = 6;
  spec.per_class = 12;
  Dataset train_set = make_synthetic_images(spec, 11, 0);
  Dataset val_set = make_synthetic_images(spec, 11, 1);
  REQUIRE(train_set.size() == 36);
  REQUIRE(val_set.size() == 36);

  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 12;
  cfg.learning_rate = 0.05;
  cfg.seed = 7;

  Network n1 = build_network("tiny_mlp", {1, 6, 6}, 3, 3);
  Network n2 = build_network("tiny_mlp", {1, 6, 6}, 3, 3);
  const double before = accuracy(n1, val_set);
  TrainResult r1 = train(n1, train_set, val_set, cfg);
  TrainResult r2 = train(n2, train_set, val_set, cfg);

  REQUIRE(r1.val_accuracy.size() == 4);
  CHECK(r1.val_accuracy == r2.val_accuracy);
  CHECK(weight_hash(n1) == weight_hash(n2));
  CHECK(r1.best_accuracy ==
        *std::max_element(r1.val_accuracy.begin(), r1.val_accuracy.end()));
  CHECK(accuracy(n1, val_set) == r1.val_accuracy.back());
  CHECK(r1.best_accuracy >= before);
  CHECK(r1.best_accuracy > 0.6);

  // A different training seed shuffles batches differently.
  Network n3 = build_network("tiny_mlp", {1, 6, 6}, 3, 3);
  TrainConfig other = cfg;
  other.seed = 8;
  TrainResult r3 = train(n3, train_set, val_set, other);
  CHECK(weight_hash(n3) != weight_hash(n1));

  // An absurd learning rate blows the loss up.
  Network n4 = build_network("tiny_mlp", {1, 6, 6}, 3, 3);
  TrainConfig wild = cfg;
  wild.learning_rate = 1e100;
  wild.epochs = 3;
  CHECK_THROWS_AS(train(n4, train_set, val_set, wild), TrainingDiverged);
}
