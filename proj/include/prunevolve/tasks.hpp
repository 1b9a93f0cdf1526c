#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "prunevolve/eval.hpp"
#include "prunevolve/net.hpp"

namespace prunevolve {

// ---- synthetic channel-ranking task -----------------------------------------

// distinct_maps: informative channels carry class-conditional structure while
// noise channels are pure noise. label_shuffle: every channel draws from the
// same per-group mixture, but noise channels pair maps with a shuffled copy
// of the label vector, so marginals are identical and only the label
// alignment differs.
enum class ChannelMode { distinct_maps, label_shuffle };

struct SyntheticSpec {
  int classes = 3;
  int channels = 20;
  int informative = 10;
  std::size_t map_h = 4, map_w = 4;
  int samples_per_class = 8;
  double separation = 2.0;
  double noise = 1.0;
  ChannelMode mode = ChannelMode::distinct_maps;
};

// One context per channel plus a flag marking the informative ones. Maps are
// ReLU-clipped (post-activation convention). Deterministic under seed.
std::pair<std::vector<ChannelContext>, std::vector<bool>> synth_channels(const SyntheticSpec& spec,
                                                                         std::uint64_t seed);

// Area under the ROC curve of scores against binary flags, ties counted half.
double auc(const std::vector<double>& scores, const std::vector<bool>& positive);

// Mean AUC of the tree's channel scores over `repeats` seeded draws;
// any EvalFailure makes the whole task score 0.
double run_ranking_task(const ExprTree& tree, const SyntheticSpec& spec, std::uint64_t seed,
                        int repeats = 1, const KernelConfig& cfg = {});

// ---- synthetic image dataset -------------------------------------------------

struct ImageSpec {
  int classes = 4;
  std::size_t height = 8, width = 8;
  int per_class = 128;
  double noise = 0.35;
};

// Samples of shape (1,h,w): a fixed low-frequency class template plus pixel
// noise. Templates depend only on (spec, seed); the salt varies the sample
// noise, so train/val splits share templates but not samples.
Dataset make_synthetic_images(const ImageSpec& spec, std::uint64_t seed,
                              std::uint64_t sample_salt = 0);

// ---- one-shot prune-and-retrain task ----------------------------------------

struct PruningTask {
  std::string id;  // baseline cache key; settings must be fixed per id
  std::string arch = "tiny_cnn";
  ImageSpec data;
  int val_per_class = 64;
  std::uint64_t data_seed = 1;
  std::uint64_t net_seed = 1;
  TrainConfig baseline_cfg;
  TrainConfig retrain_cfg;
  double ratio = 0.5;  // fraction of channels pruned per target layer
  std::vector<std::size_t> target_layers = {0};
  std::size_t sample_limit = 2000;
};

// The memoized trained baseline for a task (trains it on first use).
const Network& baseline_network(const PruningTask& task);
std::uint64_t baseline_weight_hash(const PruningTask& task);
void clear_baseline_cache();

// Channels of every target layer are scored on the baseline with the tree,
// the top ceil((1-ratio)*n) per layer are kept (ties to the lower index),
// the pruned net is retrained, and the best validation accuracy comes back.
// EvalFailure or divergence scores 0. `injected_masks`, when given, bypasses
// scoring entirely (one keep mask per target layer).
double run_pruning_task(const ExprTree& tree, const PruningTask& task, std::uint64_t seed,
                        const KernelConfig& cfg = {},
                        const std::vector<std::vector<bool>>* injected_masks = nullptr);

// The task's datasets and the keep count for a layer of n channels.
std::pair<Dataset, Dataset> pruning_task_data(const PruningTask& task);
std::size_t keep_count(std::size_t channels, double ratio);

// ---- feature selection --------------------------------------------------------

struct FeatureSelectionTask {
  std::string id;
  int classes = 3;
  std::size_t features = 50;
  std::size_t informative = 5;  // always the leading feature indices
  int per_class_train = 40;
  int per_class_val = 20;
  double separation = 2.0;
  double noise = 1.0;
  std::size_t keep_k = 5;
  TrainConfig downstream;       // tiny_mlp on the kept features
  std::string score_csv;        // written when non-empty: "index,score" rows
  std::string score_pgm;        // written when non-empty and feature count is square
};

// Flat feature vectors; informative features get per-class means separated
// by `separation`, the rest are pure noise.
std::pair<Dataset, Dataset> make_feature_dataset(const FeatureSelectionTask& task,
                                                 std::uint64_t seed);

struct FeatureSelectionResult {
  std::vector<std::size_t> selected;  // ascending indices of the kept features
  std::vector<double> scores;         // one per feature
  double accuracy = 0.0;              // downstream validation accuracy
};

// Every feature becomes a channel context with 1x1 maps; the tree scores
// them, the top-k survive, and the downstream classifier trains on the
// reduced vectors. EvalFailure or divergence gives accuracy 0.
FeatureSelectionResult run_feature_selection(const ExprTree& tree,
                                             const FeatureSelectionTask& task, std::uint64_t seed,
                                             const KernelConfig& cfg = {});

// ---- IDX ingestion -------------------------------------------------------------

struct IdxError : std::runtime_error {
  explicit IdxError(const std::string& what) : std::runtime_error(what) {}
};
struct BadMagic : IdxError {
  explicit BadMagic(const std::string& what) : IdxError(what) {}
};
struct Truncated : IdxError {
  explicit Truncated(const std::string& what) : IdxError(what) {}
};
struct CountMismatch : IdxError {
  explicit CountMismatch(const std::string& what) : IdxError(what) {}
};

// IDX image/label file pair (big-endian magics 0x803/0x801). Pixels scale to
// [0,1], samples get shape (1,h,w), labels shift to 1..C.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

}  // namespace prunevolve
