#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prunevolve/expr_random.hpp"
#include "prunevolve/soap.hpp"

namespace prunevolve {

struct RepairExhausted : std::runtime_error {
  explicit RepairExhausted(const std::string& what) : std::runtime_error(what) {}
};

// splitmix64 finalizer; the basis of all derived seeding.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t h = mix64(seed);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

enum class Scheme { arithmetic, geometric };

// Two-task fitness combination. alpha = 1 is exactly task a, alpha = 0
// exactly task b; otherwise the weighted arithmetic mean or the weighted
// geometric mean a^alpha * b^(1-alpha).
double combine_fitness(double a, double b, double alpha, Scheme scheme);

enum class Origin { init_soap, init_random, carryover, reproduced, fresh_soap, fresh_random };

struct Individual {
  ExprTree tree;
  std::map<std::string, double> accuracies;  // task id -> accuracy
  std::optional<double> fitness;
  Origin origin = Origin::init_random;
};

using Population = std::vector<Individual>;

struct GenerationLog {
  int generation = 0;
  double best_fitness = 0.0;
  double q25_fitness = 0.0;   // fitness at the top-quartile boundary
  double mean_fitness = 0.0;
  long repair_count = 0;      // discarded candidates while building this generation
  std::string best_text;
};

struct FitnessTask {
  std::string id;
  // Accuracy in [0,1] of a tree on this task; all randomness must derive
  // from the passed seed.
  std::function<double(const ExprTree&, std::uint64_t seed)> run;
};

using TaskSet = std::vector<FitnessTask>;

struct EvolutionConfig {
  int population_size = 40;
  int generations = 25;
  int tournament_size = 4;
  int num_selected = 10;
  int num_reproduced = 24;
  int num_fresh = 6;
  double p_mutation = 0.75;
  double p_crossover = 0.75;
  double alpha = 0.5;
  Scheme scheme = Scheme::geometric;
  std::uint64_t seed = 1;
  int init_soap_count = 20;
  int init_random_count = 20;
  int max_repair_retries = 200;
  int workers = 1;
  int depth_cap = kMaxTreeDepth;
  GrowParams grow;

  void validate() const;  // throws std::invalid_argument
};

// Replace one uniformly chosen node (slice index literals excluded) with a
// fresh kind-compatible subtree grown within the depth headroom.
ExprTree mutate(const ExprTree& t, std::mt19937_64& rng, const GrowParams& grow,
                int depth_cap = kMaxTreeDepth);

// One-point crossover over the common region of the two trees: a single
// position valid in both parents is chosen among kind-compatible,
// depth-feasible points and the subtrees there are exchanged. Without any
// eligible point the parents come back unchanged.
std::pair<ExprTree, ExprTree> crossover(const ExprTree& a, const ExprTree& b, std::mt19937_64& rng,
                                        int depth_cap = kMaxTreeDepth);

// Winners of num_selected disjoint brackets of tournament_size drawn from a
// single shuffle. When num_selected * tournament_size equals the population
// size the brackets partition it, so the best individual always survives.
// Ties inside a bracket go to the lower population index.
std::vector<std::size_t> tournament_select_indices(const Population& pop, int tournament_size,
                                                   int num_selected, std::mt19937_64& rng);
std::vector<Individual> tournament_select(const Population& pop, int tournament_size,
                                          int num_selected, std::mt19937_64& rng);

// Next generation: selected parents carried over unchanged (keeping their
// evaluations), num_reproduced children built by clone -> crossover(p_cx) ->
// mutation(p_mut) with invalid candidates discarded and retried, and
// num_fresh immigrants (even odds of a library seed clone or a random tree).
Population reproduce_generation(const Population& pop, const EvolutionConfig& cfg,
                                std::mt19937_64& rng, const std::vector<NamedFunction>& seeds,
                                const ChannelContext& probe, const KernelConfig& kcfg = {},
                                long* repair_count = nullptr);

struct EvolutionObserver {
  std::function<void(int generation, const Population& pop, const GenerationLog& log)> on_generation;
};

struct ResumeState {
  Population population;    // fully evaluated population of some generation g
  int next_generation = 0;  // g + 1
};

struct EvolutionResult {
  Individual best;
  std::vector<GenerationLog> log;
  Population final_population;
};

// Full run: generation 0 is the seeded initial population, each later
// generation is reproduced from the previous one. Per-individual evaluation
// randomness derives from (seed, generation, slot, task) and reproduction
// randomness from (seed, generation), so results are identical for any
// worker count and a resumed run continues bit-for-bit.
EvolutionResult run_evolution(const EvolutionConfig& cfg, const TaskSet& tasks,
                              const EvolutionObserver& observer = {},
                              const ResumeState* resume = nullptr);

}  // namespace prunevolve
