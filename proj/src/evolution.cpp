#include "prunevolve/evolution.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <thread>

namespace prunevolve {

namespace {

constexpr std::uint64_t kInitTag = 0x696e69742d706f70ull;
constexpr std::uint64_t kReproTag = 0x7265702d67656e00ull;

struct NodePos {
  std::vector<int> path;  // child indices from the root
  int depth = 1;          // depth of the node itself, root = 1
};

// Slice index literals are part of the operator, not genetic material.
bool is_slice_index(const ExprNode& parent, std::size_t child) {
  return parent.is_op(Op::slice) && child == 1;
}

void collect_positions(const ExprNode& n, std::vector<int>& path, int d,
                       std::vector<NodePos>& out) {
  out.push_back({path, d});
  for (std::size_t i = 0; i < n.children.size(); ++i) {
    if (is_slice_index(n, i)) continue;
    path.push_back(static_cast<int>(i));
    collect_positions(n.children[i], path, d + 1, out);
    path.pop_back();
  }
}

std::vector<NodePos> positions(const ExprNode& root) {
  std::vector<NodePos> out;
  std::vector<int> path;
  collect_positions(root, path, 1, out);
  return out;
}

const ExprNode& node_at(const ExprNode& root, const std::vector<int>& path) {
  const ExprNode* n = &root;
  for (int i : path) n = &n->children[static_cast<std::size_t>(i)];
  return *n;
}

ExprNode replaced(const ExprNode& root, const std::vector<int>& path, std::size_t at,
                  ExprNode sub) {
  if (at == path.size()) return sub;
  ExprNode copy = root;
  const auto idx = static_cast<std::size_t>(path[at]);
  copy.children[idx] = replaced(root.children[idx], path, at + 1, std::move(sub));
  return copy;
}

double uniform01(std::mt19937_64& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::size_t best_index(const Population& pop) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < pop.size(); ++i)
    if (*pop[i].fitness > *pop[best].fitness) best = i;
  return best;
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> counter{0};
  const std::size_t nthreads = std::min(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> threads;
  threads.reserve(nthreads);
  for (std::size_t t = 0; t < nthreads; ++t)
    threads.emplace_back([&] {
      for (std::size_t i = counter.fetch_add(1); i < n; i = counter.fetch_add(1)) fn(i);
    });
  for (auto& th : threads) th.join();
}

}  // namespace

double combine_fitness(double a, double b, double alpha, Scheme scheme) {
  if (alpha == 1.0) return a;
  if (alpha == 0.0) return b;
  if (scheme == Scheme::arithmetic) return alpha * a + (1.0 - alpha) * b;
  return std::pow(a, alpha) * std::pow(b, 1.0 - alpha);
}

void EvolutionConfig::validate() const {
  auto fail = [](const char* m) { throw std::invalid_argument(m); };
  if (population_size < 2) fail("population_size must be at least 2");
  if (generations < 1) fail("generations must be at least 1");
  if (num_selected < 1 || num_reproduced < 0 || num_fresh < 0)
    fail("slot counts must be non-negative and at least one parent selected");
  if (num_selected + num_reproduced + num_fresh != population_size)
    fail("num_selected + num_reproduced + num_fresh must equal population_size");
  if (init_soap_count < 0 || init_random_count < 0 ||
      init_soap_count + init_random_count != population_size)
    fail("init_soap_count + init_random_count must equal population_size");
  if (tournament_size < 1) fail("tournament_size must be at least 1");
  if (tournament_size * num_selected > population_size)
    fail("tournament brackets must fit in the population");
  if (!(p_mutation >= 0.0 && p_mutation <= 1.0)) fail("p_mutation must be in [0, 1]");
  if (!(p_crossover >= 0.0 && p_crossover <= 1.0)) fail("p_crossover must be in [0, 1]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) fail("alpha must be in [0, 1]");
  if (max_repair_retries < 1) fail("max_repair_retries must be at least 1");
  if (workers < 1) fail("workers must be at least 1");
  if (depth_cap < 1 || depth_cap > kMaxTreeDepth) fail("depth_cap must be in [1, 10]");
  if (grow.max_depth < 1 || grow.max_depth > depth_cap)
    fail("grow.max_depth must be in [1, depth_cap]");
}

ExprTree mutate(const ExprTree& t, std::mt19937_64& rng, const GrowParams& grow, int depth_cap) {
  const std::vector<NodePos> pos = positions(t.root);
  constexpr int kAttempts = 64;
  for (int attempt = 0; attempt < kAttempts; ++attempt) {
    const NodePos& p = pos[uniform_index(rng, pos.size())];
    const SemanticKind kind = infer_kind(node_at(t.root, p.path));
    const int budget = std::min(grow.max_depth, depth_cap - (p.depth - 1));
    if (budget < 1) continue;
    try {
      ExprNode sub = grow_subtree(rng, kind, budget, grow.p_leaf, grow.allow_label_operands);
      return ExprTree{replaced(t.root, p.path, 0, std::move(sub))};
    } catch (const GenerationExhausted&) {
      // kind not producible within this node's headroom; pick another node
    }
  }
  throw GenerationExhausted("mutation found no replaceable node");
}

namespace {

struct CommonPoint {
  std::vector<int> path;
};

// Common region of two trees: matching positions, descending only through
// parents of equal arity. A point is eligible when the subtree kinds agree
// and swapping keeps both offspring within the depth cap.
void collect_common(const ExprNode& a, const ExprNode& b, std::vector<int>& path, int d,
                    int depth_cap, std::vector<CommonPoint>& out) {
  const SemanticKind ka = infer_kind(a);
  if (ka == infer_kind(b) && ka != SemanticKind::invalid) {
    if (d - 1 + depth(a) <= depth_cap && d - 1 + depth(b) <= depth_cap) out.push_back({path});
  }
  if (a.children.size() != b.children.size()) return;
  for (std::size_t i = 0; i < a.children.size(); ++i) {
    if (is_slice_index(a, i) || is_slice_index(b, i)) continue;
    path.push_back(static_cast<int>(i));
    collect_common(a.children[i], b.children[i], path, d + 1, depth_cap, out);
    path.pop_back();
  }
}

}  // namespace

std::pair<ExprTree, ExprTree> crossover(const ExprTree& a, const ExprTree& b,
                                        std::mt19937_64& rng, int depth_cap) {
  std::vector<CommonPoint> pts;
  std::vector<int> path;
  collect_common(a.root, b.root, path, 1, depth_cap, pts);
  if (pts.empty()) return {a, b};
  const CommonPoint& p = pts[uniform_index(rng, pts.size())];
  ExprNode sub_a = node_at(a.root, p.path);
  ExprNode sub_b = node_at(b.root, p.path);
  ExprTree child_a{replaced(a.root, p.path, 0, std::move(sub_b))};
  ExprTree child_b{replaced(b.root, p.path, 0, std::move(sub_a))};
  return {std::move(child_a), std::move(child_b)};
}

std::vector<std::size_t> tournament_select_indices(const Population& pop, int tournament_size,
                                                   int num_selected, std::mt19937_64& rng) {
  if (tournament_size < 1 || num_selected < 1 ||
      static_cast<std::size_t>(tournament_size) * static_cast<std::size_t>(num_selected) >
          pop.size())
    throw std::invalid_argument("tournament brackets must fit in the population");
  for (const Individual& ind : pop)
    if (!ind.fitness) throw std::invalid_argument("selection requires an evaluated population");

  std::vector<std::size_t> order(pop.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::size_t> winners;
  winners.reserve(static_cast<std::size_t>(num_selected));
  for (int b = 0; b < num_selected; ++b) {
    std::size_t best = order[static_cast<std::size_t>(b * tournament_size)];
    for (int j = 1; j < tournament_size; ++j) {
      const std::size_t cand = order[static_cast<std::size_t>(b * tournament_size + j)];
      const double cf = *pop[cand].fitness;
      const double bf = *pop[best].fitness;
      if (cf > bf || (cf == bf && cand < best)) best = cand;
    }
    winners.push_back(best);
  }
  return winners;
}

std::vector<Individual> tournament_select(const Population& pop, int tournament_size,
                                          int num_selected, std::mt19937_64& rng) {
  std::vector<Individual> out;
  out.reserve(static_cast<std::size_t>(num_selected));
  for (std::size_t i : tournament_select_indices(pop, tournament_size, num_selected, rng))
    out.push_back(pop[i]);
  return out;
}

Population reproduce_generation(const Population& pop, const EvolutionConfig& cfg,
                                std::mt19937_64& rng, const std::vector<NamedFunction>& seeds,
                                const ChannelContext& probe, const KernelConfig& kcfg,
                                long* repair_count) {
  cfg.validate();
  if (pop.size() != static_cast<std::size_t>(cfg.population_size))
    throw std::invalid_argument("population does not match configured size");
  if (cfg.num_fresh > 0 && seeds.empty())
    throw std::invalid_argument("fresh slots need a non-empty seed library");

  long repairs = 0;
  const std::vector<std::size_t> winners =
      tournament_select_indices(pop, cfg.tournament_size, cfg.num_selected, rng);

  Population next;
  next.reserve(pop.size());
  for (std::size_t w : winners) {
    Individual kept = pop[w];  // evaluation carries over with the tree
    kept.origin = Origin::carryover;
    next.push_back(std::move(kept));
  }

  for (int slot = 0; slot < cfg.num_reproduced; ++slot) {
    bool filled = false;
    for (int attempt = 0; attempt < cfg.max_repair_retries && !filled; ++attempt) {
      try {
        ExprTree child = pop[winners[uniform_index(rng, winners.size())]].tree;
        if (uniform01(rng) < cfg.p_crossover) {
          const ExprTree& partner = pop[winners[uniform_index(rng, winners.size())]].tree;
          child = crossover(child, partner, rng, cfg.depth_cap).first;
        }
        if (uniform01(rng) < cfg.p_mutation) child = mutate(child, rng, cfg.grow, cfg.depth_cap);
        if (!validity_test(child, probe, kcfg, cfg.depth_cap)) {
          ++repairs;
          continue;
        }
        Individual ind;
        ind.tree = std::move(child);
        ind.origin = Origin::reproduced;
        next.push_back(std::move(ind));
        filled = true;
      } catch (const GenerationExhausted&) {
        ++repairs;
      }
    }
    if (!filled)
      throw RepairExhausted("no valid child after " + std::to_string(cfg.max_repair_retries) +
                            " attempts");
  }

  for (int slot = 0; slot < cfg.num_fresh; ++slot) {
    Individual ind;
    if (uniform01(rng) < 0.5) {
      ind.tree = seeds[uniform_index(rng, seeds.size())].tree;
      ind.origin = Origin::fresh_soap;
    } else {
      GrowParams gp = cfg.grow;
      gp.max_tree_retries = cfg.max_repair_retries;
      long attempts = 0;
      ind.tree = random_tree(rng, gp, probe, kcfg, &attempts);
      repairs += attempts;
      ind.origin = Origin::fresh_random;
    }
    next.push_back(std::move(ind));
  }

  if (repair_count) *repair_count += repairs;
  return next;
}

namespace {

Population initial_population(const EvolutionConfig& cfg, const std::vector<NamedFunction>& seeds,
                              const ChannelContext& probe, long* repairs) {
  if (cfg.init_soap_count > 0 && seeds.empty())
    throw std::invalid_argument("seeded init needs a non-empty seed library");
  Population pop;
  pop.reserve(static_cast<std::size_t>(cfg.population_size));
  std::mt19937_64 rng(derive_seed(cfg.seed, kInitTag));
  for (int i = 0; i < cfg.init_soap_count; ++i) {
    Individual ind;
    ind.tree = seeds[static_cast<std::size_t>(i) % seeds.size()].tree;
    ind.origin = Origin::init_soap;
    pop.push_back(std::move(ind));
  }
  for (int i = 0; i < cfg.init_random_count; ++i) {
    GrowParams gp = cfg.grow;
    gp.max_tree_retries = cfg.max_repair_retries;
    long attempts = 0;
    Individual ind;
    ind.tree = random_tree(rng, gp, probe, {}, &attempts);
    *repairs += attempts;
    ind.origin = Origin::init_random;
    pop.push_back(std::move(ind));
  }
  return pop;
}

void evaluate_individual(Individual& ind, const TaskSet& tasks, const EvolutionConfig& cfg,
                         int gen, std::size_t slot) {
  auto run_task = [&](std::size_t ti) {
    const std::uint64_t s =
        derive_seed(cfg.seed, static_cast<std::uint64_t>(gen), slot, ti);
    double acc = 0.0;
    try {
      acc = tasks[ti].run(ind.tree, s);
    } catch (const std::exception&) {
      acc = 0.0;  // a tree that fails on the task is simply worst
    }
    if (!std::isfinite(acc)) acc = 0.0;
    acc = std::clamp(acc, 0.0, 1.0);
    ind.accuracies[tasks[ti].id] = acc;
    return acc;
  };

  if (tasks.size() == 1) {
    ind.fitness = run_task(0);
    return;
  }
  // Degenerate weights skip the ignored task entirely.
  double a = 0.0;
  double b = 0.0;
  if (cfg.alpha != 0.0) a = run_task(0);
  if (cfg.alpha != 1.0) b = run_task(1);
  ind.fitness = combine_fitness(a, b, cfg.alpha, cfg.scheme);
}

GenerationLog make_log(int gen, const Population& pop, long repairs) {
  std::vector<double> fs;
  fs.reserve(pop.size());
  for (const Individual& ind : pop) fs.push_back(*ind.fitness);

  std::vector<double> sorted = fs;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());

  GenerationLog log;
  log.generation = gen;
  const std::size_t best = best_index(pop);
  log.best_fitness = fs[best];
  log.q25_fitness = sorted[(sorted.size() - 1) / 4];
  log.mean_fitness = std::accumulate(fs.begin(), fs.end(), 0.0) / static_cast<double>(fs.size());
  log.repair_count = repairs;
  log.best_text = format_tree(pop[best].tree);
  return log;
}

}  // namespace

EvolutionResult run_evolution(const EvolutionConfig& cfg, const TaskSet& tasks,
                              const EvolutionObserver& observer, const ResumeState* resume) {
  cfg.validate();
  if (tasks.empty() || tasks.size() > 2)
    throw std::invalid_argument("task set must contain one or two tasks");

  const ChannelContext probe = make_probe_context();
  const std::vector<NamedFunction> seeds = soap_functions();

  Population pop;
  int start_gen = 0;
  if (resume) {
    if (resume->population.size() != static_cast<std::size_t>(cfg.population_size))
      throw std::invalid_argument("resume population does not match configured size");
    for (const Individual& ind : resume->population)
      if (!ind.fitness) throw std::invalid_argument("resume population must be evaluated");
    if (resume->next_generation < 1 || resume->next_generation > cfg.generations)
      throw std::invalid_argument("resume generation out of range");
    pop = resume->population;
    start_gen = resume->next_generation;
  }

  EvolutionResult result;
  for (int gen = start_gen; gen < cfg.generations; ++gen) {
    long repairs = 0;
    if (gen == 0) {
      pop = initial_population(cfg, seeds, probe, &repairs);
    } else {
      std::mt19937_64 rng(derive_seed(cfg.seed, kReproTag, static_cast<std::uint64_t>(gen)));
      pop = reproduce_generation(pop, cfg, rng, seeds, probe, {}, &repairs);
    }

    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < pop.size(); ++i)
      if (!pop[i].fitness) todo.push_back(i);
    // Indexed writes into disjoint slots keep any worker count bit-identical.
    parallel_for(todo.size(), cfg.workers,
                 [&](std::size_t j) { evaluate_individual(pop[todo[j]], tasks, cfg, gen, todo[j]); });

    const GenerationLog log = make_log(gen, pop, repairs);
    result.log.push_back(log);
    if (observer.on_generation) observer.on_generation(gen, pop, log);
  }

  result.best = pop[best_index(pop)];
  result.final_population = std::move(pop);
  return result;
}

}  // namespace prunevolve
