#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prunevolve/eval.hpp"
#include "prunevolve/tensor.hpp"

namespace prunevolve {

struct TrainingDiverged : std::runtime_error {
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

struct Dataset {
  std::vector<Tensor> samples;  // every sample has the network input shape
  std::vector<int> labels;      // 1..class_count
  int class_count = 0;

  std::size_t size() const { return samples.size(); }
};

struct Layer {
  enum class Kind { conv2d, dense, relu, maxpool2, batchnorm, flatten, softmax_xent };

  Kind kind = Kind::relu;
  Tensor weight;  // conv2d: c_out x c_in x kh x kw; dense: units x in
  Tensor bias;
  int stride = 1;
  Tensor gamma, beta, running_mean, running_var;  // batchnorm, one entry per channel
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;

  static Layer conv2d(Tensor weight, Tensor bias, int stride = 1);
  static Layer dense(Tensor weight, Tensor bias);
  static Layer relu();
  static Layer maxpool2();
  static Layer batchnorm(Tensor gamma, Tensor beta, Tensor mean, Tensor var);
  static Layer flatten();
  static Layer softmax_xent();
};

struct Network {
  std::vector<Layer> layers;
  Shape input_shape;
};

using Batch = std::vector<Tensor>;

struct ForwardCache {
  std::vector<Batch> acts;  // acts[i] = input of layer i; acts[L] = final output
  std::vector<std::vector<std::vector<std::size_t>>> pool_from;  // [layer][sample][out] = in index
  std::vector<Batch> bn_xhat;                                    // [layer][sample]
  std::vector<Tensor> bn_inv_std, bn_mean, bn_var;               // [layer], per channel
};

std::size_t param_count(const Network& net);

// Deterministic layer-by-layer evaluation. Training mode normalizes with
// batch statistics (and, when update_running is set, folds them into the
// running estimates); eval mode uses the running estimates.
Batch forward_batch(const Network& net, const Batch& batch, bool training,
                    ForwardCache* cache = nullptr);
Batch forward_batch(Network& net, const Batch& batch, bool training, bool update_running,
                    ForwardCache* cache = nullptr);
Tensor forward(const Network& net, const Tensor& sample);  // eval-mode logits

struct LayerGrads {
  Tensor weight, bias, gamma, beta;  // shapes mirror the layer's parameters
};
using NetGrads = std::vector<LayerGrads>;

NetGrads zero_grads(const Network& net);

// Mean softmax cross-entropy over the batch in training mode; when grads is
// given it receives d(loss)/d(parameter) for every parameter.
double loss_and_gradients(Network& net, const Batch& batch, const std::vector<int>& labels,
                          NetGrads* grads, bool update_running = false);

struct TrainConfig {
  int epochs = 30;
  int batch_size = 32;
  double learning_rate = 0.05;
  std::vector<double> drop_fractions = {0.4, 0.8};  // epoch fractions where the rate drops
  double drop_factor = 0.14;
  double momentum = 0.9;
  double weight_decay = 1e-4;  // applied to conv/dense weights only
  bool nesterov = true;
  std::uint64_t seed = 1;
};

struct TrainResult {
  std::vector<double> val_accuracy;  // one entry per epoch
  double best_accuracy = 0.0;
};

double accuracy(const Network& net, const Dataset& data);

// SGD with Nesterov momentum, weight decay, and multiplicative learning-rate
// drops at the configured epoch fractions. Deterministic under cfg.seed.
// Throws TrainingDiverged when the loss stops being finite.
TrainResult train(Network& net, const Dataset& train_set, const Dataset& val_set,
                  const TrainConfig& cfg);

// Architectures: tiny_mlp (dense 32 -> relu -> dense C), tiny_cnn
// (conv 8,k3 -> relu -> maxpool -> flatten -> dense C), plus _bn variants
// with a batchnorm after the first parameterized layer.
Network build_network(const std::string& arch, const Shape& input_shape, int class_count,
                      std::uint64_t seed);

// One context per output channel of a conv2d/dense layer: W is the full
// kernel, W_I the channel's incoming block, B its batchnorm row or (1,0,0,1),
// F the post-activation maps (after the layer's batchnorm/relu chain) of
// min(sample_limit, |data|) seeded samples. Dense units are channels with
// 1x1 maps.
std::vector<ChannelContext> extract_channel_context(const Network& net, std::size_t layer_index,
                                                    const Dataset& data,
                                                    std::size_t sample_limit, std::uint64_t seed);

// Structurally smaller network: masked-out output channels are removed
// together with their batchnorm entries and the matching input slices of the
// next parameterized layer.
Network prune_channels(const Network& net, std::size_t layer_index,
                       const std::vector<bool>& keep_mask);

// Test hook: eval-mode logits with the masked channels' activations forced
// to zero where the next layer would consume them.
Tensor forward_masked(const Network& net, const Tensor& sample, std::size_t layer_index,
                      const std::vector<bool>& keep_mask);

// Binary checkpoint: magic "PNET1", input shape, then per-layer headers and
// little-endian float64 parameter blobs (layout documented in the README).
void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

std::uint64_t weight_hash(const Network& net);

}  // namespace prunevolve
