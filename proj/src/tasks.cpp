#include "prunevolve/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>

#include "prunevolve/evolution.hpp"

namespace prunevolve {

namespace {

[[noreturn]] void bad(const std::string& m) { throw std::invalid_argument(m); }

double gauss(std::mt19937_64& rng) {
  return std::normal_distribution<double>(0.0, 1.0)(rng);
}

}  // namespace

std::pair<std::vector<ChannelContext>, std::vector<bool>> synth_channels(const SyntheticSpec& spec,
                                                                         std::uint64_t seed) {
  if (spec.classes < 2) bad("synthetic spec needs at least two classes");
  if (spec.informative < 0 || spec.informative > spec.channels)
    bad("informative count must be within the channel count");
  if (spec.samples_per_class < 1) bad("need at least one sample per class");
  if (spec.map_h < 1 || spec.map_w < 1) bad("map shape must be non-empty");
  if (!(spec.separation >= 0.0) || !(spec.noise >= 0.0))
    bad("separation and noise must be non-negative");

  std::mt19937_64 rng(derive_seed(seed, 0x53594e4348ull));
  const std::size_t N = static_cast<std::size_t>(spec.classes) *
                        static_cast<std::size_t>(spec.samples_per_class);
  std::vector<int> labels(N);
  for (std::size_t i = 0; i < N; ++i) labels[i] = 1 + static_cast<int>(i) % spec.classes;

  // one fixed spatial pattern per class, shared by all channels
  const std::size_t msize = spec.map_h * spec.map_w;
  std::vector<std::vector<double>> patterns(static_cast<std::size_t>(spec.classes));
  for (auto& p : patterns) {
    p.resize(msize);
    for (double& v : p) v = gauss(rng);
  }

  const Tensor W = Tensor::filled({static_cast<std::size_t>(spec.channels), 1, 2, 2}, 1.0);
  const Tensor WI = Tensor::filled({1, 2, 2}, 1.0);
  const Tensor B({4}, {1.0, 0.0, 0.0, 1.0});

  std::vector<ChannelContext> out;
  std::vector<bool> flags;
  out.reserve(static_cast<std::size_t>(spec.channels));
  flags.reserve(static_cast<std::size_t>(spec.channels));
  for (int c = 0; c < spec.channels; ++c) {
    const bool informative = c < spec.informative;
    std::vector<int> group = labels;
    if (!informative && spec.mode == ChannelMode::label_shuffle)
      std::shuffle(group.begin(), group.end(), rng);
    const bool structured = informative || spec.mode == ChannelMode::label_shuffle;

    std::vector<Tensor> maps;
    maps.reserve(N);
    for (std::size_t i = 0; i < N; ++i) {
      Tensor m = Tensor::zeros({spec.map_h, spec.map_w});
      for (std::size_t e = 0; e < msize; ++e) {
        double v = spec.noise * gauss(rng);
        if (structured) {
          const int k = group[i];
          v += spec.separation * k +
               spec.separation * patterns[static_cast<std::size_t>(k - 1)][e];
        }
        m[e] = std::max(0.0, v);
      }
      maps.push_back(std::move(m));
    }

    ChannelContext ctx;
    ctx.layer_filter = W;
    ctx.incoming_filter = WI;
    ctx.bn_params = B;
    ctx.maps = MapCollection(std::move(maps));
    ctx.labels = labels;
    ctx.class_count = spec.classes;
    out.push_back(std::move(ctx));
    flags.push_back(informative);
  }
  return {std::move(out), std::move(flags)};
}

double auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) bad("scores and flags must align");
  std::size_t npos = 0;
  for (bool p : positive) npos += p ? 1 : 0;
  const std::size_t nneg = positive.size() - npos;
  if (npos == 0 || nneg == 0) bad("AUC needs both positive and negative items");
  double s = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      if (scores[i] > scores[j])
        s += 1.0;
      else if (scores[i] == scores[j])
        s += 0.5;
    }
  }
  return s / (static_cast<double>(npos) * static_cast<double>(nneg));
}

double run_ranking_task(const ExprTree& tree, const SyntheticSpec& spec, std::uint64_t seed,
                        int repeats, const KernelConfig& cfg) {
  if (repeats < 1) bad("repeats must be at least 1");
  double sum = 0.0;
  for (int r = 0; r < repeats; ++r) {
    auto [ctxs, flags] = synth_channels(spec, derive_seed(seed, 0x52414e4bull, r));
    std::vector<double> scores;
    scores.reserve(ctxs.size());
    for (const ChannelContext& ctx : ctxs) {
      try {
        scores.push_back(evaluate(tree, ctx, cfg));
      } catch (const EvalFailure&) {
        return 0.0;
      }
    }
    sum += auc(scores, flags);
  }
  return sum / repeats;
}

Dataset make_synthetic_images(const ImageSpec& spec, std::uint64_t seed,
                              std::uint64_t sample_salt) {
  if (spec.classes < 2) bad("image spec needs at least two classes");
  if (spec.height < 4 || spec.width < 4) bad("image spec too small");
  if (spec.per_class < 1) bad("need at least one sample per class");

  // low-frequency class templates: coarse 4x4 grids, bilinear-upsampled,
  // normalized to unit RMS, drawn from the seed alone
  std::mt19937_64 trng(derive_seed(seed, 0x544d504cull));
  const std::size_t h = spec.height, w = spec.width;
  std::vector<Tensor> templates;
  for (int k = 0; k < spec.classes; ++k) {
    double coarse[4][4];
    for (auto& row : coarse)
      for (double& v : row) v = gauss(trng);
    Tensor t = Tensor::zeros({h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = static_cast<double>(y) * 3.0 / static_cast<double>(h - 1);
        const double v = static_cast<double>(x) * 3.0 / static_cast<double>(w - 1);
        const std::size_t i0 = std::min<std::size_t>(2, static_cast<std::size_t>(u));
        const std::size_t j0 = std::min<std::size_t>(2, static_cast<std::size_t>(v));
        const double fu = u - static_cast<double>(i0), fv = v - static_cast<double>(j0);
        t[y * w + x] = coarse[i0][j0] * (1 - fu) * (1 - fv) +
                       coarse[i0 + 1][j0] * fu * (1 - fv) +
                       coarse[i0][j0 + 1] * (1 - fu) * fv + coarse[i0 + 1][j0 + 1] * fu * fv;
      }
    double rms = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i) rms += t[i] * t[i];
    rms = std::sqrt(rms / static_cast<double>(t.size()));
    if (rms > 0)
      for (std::size_t i = 0; i < t.size(); ++i) t[i] /= rms;
    templates.push_back(std::move(t));
  }

  std::mt19937_64 srng(derive_seed(seed, 0x53414d50ull, sample_salt));
  Dataset ds;
  ds.class_count = spec.classes;
  for (int k = 0; k < spec.classes; ++k)
    for (int n = 0; n < spec.per_class; ++n) {
      Tensor img = Tensor::zeros({1, h, w});
      for (std::size_t i = 0; i < h * w; ++i)
        img[i] = templates[static_cast<std::size_t>(k)][i] + spec.noise * gauss(srng);
      ds.samples.push_back(std::move(img));
      ds.labels.push_back(k + 1);
    }
  return ds;
}

std::pair<Dataset, Dataset> pruning_task_data(const PruningTask& task) {
  ImageSpec val_spec = task.data;
  val_spec.per_class = task.val_per_class;
  return {make_synthetic_images(task.data, task.data_seed, 1),
          make_synthetic_images(val_spec, task.data_seed, 2)};
}

std::size_t keep_count(std::size_t channels, double ratio) {
  const auto k = static_cast<std::size_t>(std::ceil((1.0 - ratio) * static_cast<double>(channels)));
  return std::max<std::size_t>(1, std::min(channels, k));
}

namespace {

struct BaselineEntry {
  Network net;
  std::uint64_t hash = 0;
};

std::mutex g_baseline_mutex;

std::map<std::string, BaselineEntry>& baseline_map() {
  static std::map<std::string, BaselineEntry> m;
  return m;
}

const BaselineEntry& baseline_entry(const PruningTask& task) {
  std::lock_guard<std::mutex> lock(g_baseline_mutex);
  auto& m = baseline_map();
  auto it = m.find(task.id);
  if (it == m.end()) {
    auto [tr, va] = pruning_task_data(task);
    Network net =
        build_network(task.arch, tr.samples.front().shape(), tr.class_count, task.net_seed);
    train(net, tr, va, task.baseline_cfg);
    BaselineEntry e;
    e.hash = weight_hash(net);
    e.net = std::move(net);
    it = m.emplace(task.id, std::move(e)).first;
  }
  return it->second;
}

}  // namespace

const Network& baseline_network(const PruningTask& task) { return baseline_entry(task).net; }

std::uint64_t baseline_weight_hash(const PruningTask& task) { return baseline_entry(task).hash; }

void clear_baseline_cache() {
  std::lock_guard<std::mutex> lock(g_baseline_mutex);
  baseline_map().clear();
}

double run_pruning_task(const ExprTree& tree, const PruningTask& task, std::uint64_t seed,
                        const KernelConfig& cfg,
                        const std::vector<std::vector<bool>>* injected_masks) {
  if (!(task.ratio >= 0.0 && task.ratio < 1.0)) bad("prune ratio must be in [0, 1)");
  if (task.target_layers.empty()) bad("pruning task needs target layers");

  const Network& base = baseline_network(task);
  auto [tr, va] = pruning_task_data(task);

  std::vector<std::vector<bool>> masks;
  if (injected_masks) {
    if (injected_masks->size() != task.target_layers.size())
      bad("injected masks must cover every target layer");
    masks = *injected_masks;
  } else {
    // one-shot scheme: every target layer is scored on the converged baseline
    for (std::size_t t = 0; t < task.target_layers.size(); ++t) {
      const std::size_t li = task.target_layers[t];
      const std::vector<ChannelContext> ctxs = extract_channel_context(
          base, li, tr, task.sample_limit, derive_seed(seed, 0x45585452ull, li));
      std::vector<double> scores;
      scores.reserve(ctxs.size());
      for (const ChannelContext& ctx : ctxs) {
        try {
          scores.push_back(evaluate(tree, ctx, cfg));
        } catch (const EvalFailure&) {
          return 0.0;
        }
      }
      std::vector<std::size_t> order(scores.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&scores](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
      const std::size_t k = keep_count(scores.size(), task.ratio);
      std::vector<bool> mask(scores.size(), false);
      for (std::size_t i = 0; i < k; ++i) mask[order[i]] = true;
      masks.push_back(std::move(mask));
    }
  }

  Network pruned = base;
  for (std::size_t t = 0; t < task.target_layers.size(); ++t)
    pruned = prune_channels(pruned, task.target_layers[t], masks[t]);

  TrainConfig rc = task.retrain_cfg;
  rc.seed = derive_seed(seed, 0x5245545241494eull);
  try {
    return train(pruned, tr, va, rc).best_accuracy;
  } catch (const TrainingDiverged&) {
    return 0.0;
  }
}

std::pair<Dataset, Dataset> make_feature_dataset(const FeatureSelectionTask& task,
                                                 std::uint64_t seed) {
  if (task.classes < 2) bad("feature task needs at least two classes");
  if (task.informative > task.features) bad("informative count exceeds feature count");
  if (task.keep_k < 1 || task.keep_k > task.features) bad("keep_k must be in [1, features]");
  if (task.per_class_train < 1 || task.per_class_val < 1) bad("need samples in both splits");

  // fixed per-class centers for the informative (leading) features
  std::mt19937_64 crng(derive_seed(seed, 0x43454e54ull));
  std::vector<std::vector<double>> centers(static_cast<std::size_t>(task.classes));
  for (auto& row : centers) {
    row.resize(task.informative);
    for (double& v : row) v = task.separation * gauss(crng);
  }

  auto make_split = [&](int per_class, std::uint64_t salt) {
    std::mt19937_64 rng(derive_seed(seed, 0x46534554ull, salt));
    Dataset ds;
    ds.class_count = task.classes;
    for (int k = 0; k < task.classes; ++k)
      for (int n = 0; n < per_class; ++n) {
        Tensor x = Tensor::zeros({task.features});
        for (std::size_t f = 0; f < task.features; ++f) {
          double v = task.noise * gauss(rng);
          if (f < task.informative) v += centers[static_cast<std::size_t>(k)][f];
          x[f] = v;
        }
        ds.samples.push_back(std::move(x));
        ds.labels.push_back(k + 1);
      }
    return ds;
  };
  return {make_split(task.per_class_train, 1), make_split(task.per_class_val, 2)};
}

namespace {

void write_score_files(const FeatureSelectionTask& task, const std::vector<double>& scores) {
  if (!task.score_csv.empty()) {
    std::ofstream os(task.score_csv);
    if (!os) bad("cannot write score map: " + task.score_csv);
    for (std::size_t f = 0; f < scores.size(); ++f) os << f << ',' << scores[f] << '\n';
  }
  if (task.score_pgm.empty()) return;
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(double(scores.size()))));
  if (side * side != scores.size()) return;  // PGM rendering needs a square grid
  double lo = scores[0], hi = scores[0];
  for (double s : scores) {
    lo = std::min(lo, s);
    hi = std::max(hi, s);
  }
  std::ofstream os(task.score_pgm);
  if (!os) bad("cannot write score map: " + task.score_pgm);
  os << "P2\n" << side << ' ' << side << "\n255\n";
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double s = scores[y * side + x];
      const int v = hi > lo ? static_cast<int>(std::lround((s - lo) / (hi - lo) * 255.0)) : 0;
      os << v << (x + 1 == side ? '\n' : ' ');
    }
  }
}

}  // namespace

FeatureSelectionResult run_feature_selection(const ExprTree& tree,
                                             const FeatureSelectionTask& task, std::uint64_t seed,
                                             const KernelConfig& cfg) {
  auto [tr, va] = make_feature_dataset(task, seed);
  const std::size_t d = task.features;

  const Tensor W = Tensor::filled({d, 1, 1, 1}, 1.0);
  const Tensor WI = Tensor::filled({1, 1, 1}, 1.0);
  const Tensor B({4}, {1.0, 0.0, 0.0, 1.0});

  FeatureSelectionResult res;
  for (std::size_t f = 0; f < d; ++f) {
    ChannelContext ctx;
    ctx.layer_filter = W;
    ctx.incoming_filter = WI;
    ctx.bn_params = B;
    std::vector<Tensor> maps;
    maps.reserve(tr.size());
    for (const Tensor& x : tr.samples) maps.push_back(Tensor({1, 1}, {x[f]}));
    ctx.maps = MapCollection(std::move(maps));
    ctx.labels = tr.labels;
    ctx.class_count = tr.class_count;
    try {
      res.scores.push_back(evaluate(tree, ctx, cfg));
    } catch (const EvalFailure&) {
      res.scores.clear();
      return res;  // accuracy 0, nothing selected
    }
  }

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&res](std::size_t a, std::size_t b) {
    return res.scores[a] > res.scores[b];
  });
  res.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(task.keep_k));
  std::sort(res.selected.begin(), res.selected.end());

  auto reduce = [&](const Dataset& ds) {
    Dataset out;
    out.class_count = ds.class_count;
    out.labels = ds.labels;
    for (const Tensor& x : ds.samples) {
      Tensor r = Tensor::zeros({task.keep_k});
      for (std::size_t i = 0; i < task.keep_k; ++i) r[i] = x[res.selected[i]];
      out.samples.push_back(std::move(r));
    }
    return out;
  };
  const Dataset rtr = reduce(tr), rva = reduce(va);

  Network net = build_network("tiny_mlp", {task.keep_k}, task.classes,
                              derive_seed(seed, 0x4e4554ull));
  TrainConfig dc = task.downstream;
  dc.seed = derive_seed(seed, 0x444f574eull);
  try {
    res.accuracy = train(net, rtr, rva, dc).best_accuracy;
  } catch (const TrainingDiverged&) {
    res.accuracy = 0.0;
  }
  write_score_files(task, res.scores);
  return res;
}

namespace {

std::uint32_t read_be32(std::istream& is, const std::string& what) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (is.gcount() != 4) throw Truncated("truncated " + what);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IdxError("cannot open " + images_path);
  const std::uint32_t imagic = read_be32(imgs, "image header");
  if (imagic != 0x00000803u) throw BadMagic("bad image magic in " + images_path);
  const std::uint32_t n = read_be32(imgs, "image header");
  const std::uint32_t h = read_be32(imgs, "image header");
  const std::uint32_t w = read_be32(imgs, "image header");
  if (std::uint64_t(n) * h * w > (std::uint64_t(1) << 31))
    throw IdxError("implausible image dimensions");
  std::vector<unsigned char> pixels(std::size_t(n) * h * w);
  imgs.read(reinterpret_cast<char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  if (static_cast<std::size_t>(imgs.gcount()) != pixels.size())
    throw Truncated("truncated image payload in " + images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) throw IdxError("cannot open " + labels_path);
  const std::uint32_t lmagic = read_be32(labs, "label header");
  if (lmagic != 0x00000801u) throw BadMagic("bad label magic in " + labels_path);
  const std::uint32_t m = read_be32(labs, "label header");
  std::vector<unsigned char> raw(m);
  labs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(labs.gcount()) != raw.size())
    throw Truncated("truncated label payload in " + labels_path);

  if (n != m)
    throw CountMismatch(std::to_string(n) + " images vs " + std::to_string(m) + " labels");

  Dataset ds;
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::vector<double> v(std::size_t(h) * w);
    for (std::size_t p = 0; p < v.size(); ++p)
      v[p] = pixels[std::size_t(i) * h * w + p] / 255.0;
    ds.samples.emplace_back(Shape{1, h, w}, std::move(v));
    ds.labels.push_back(raw[i] + 1);
    max_label = std::max(max_label, int(raw[i]));
  }
  ds.class_count = n > 0 ? max_label + 1 : 0;
  return ds;
}

}  // namespace prunevolve
