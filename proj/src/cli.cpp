#include "prunevolve/cli.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "prunevolve/config.hpp"
#include "prunevolve/eval.hpp"
#include "prunevolve/evolution.hpp"
#include "prunevolve/tasks.hpp"

namespace prunevolve {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr int kOk = 0;
constexpr int kExitConfig = 2;    // bad config / usage
constexpr int kExitFunction = 3;  // unparseable or invalid function
constexpr int kExitTask = 4;      // task resolution failure
constexpr int kExitRuntime = 5;   // IO or unexpected runtime failure
constexpr const char* kVersion = "1.0.0";

// Shortest round-trip decimal form; locale-independent, so CSV logs are
// byte-stable across runs and machines.
std::string d2s(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("PRUNEVOLVE_SEED");
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v, &end, 10);
  if (end == v || *end != '\0')
    throw ConfigError(std::string("PRUNEVOLVE_SEED must be an unsigned integer, got '") + v +
                      "'");
  return n;
}

// ---- config -> engine types ---------------------------------------------------

EvolutionConfig evolution_from(const ConfigSection& s) {
  EvolutionConfig c;
  c.population_size = static_cast<int>(s.get_int("population_size", c.population_size));
  c.generations = static_cast<int>(s.get_int("generations", c.generations));
  c.tournament_size = static_cast<int>(s.get_int("tournament_size", c.tournament_size));
  c.num_selected = static_cast<int>(s.get_int("num_selected", c.num_selected));
  c.num_reproduced = static_cast<int>(s.get_int("num_reproduced", c.num_reproduced));
  c.num_fresh = static_cast<int>(s.get_int("num_fresh", c.num_fresh));
  c.p_mutation = s.get_real("p_mutation", c.p_mutation);
  c.p_crossover = s.get_real("p_crossover", c.p_crossover);
  c.alpha = s.get_real("alpha", c.alpha);
  const std::string scheme = s.get_string("scheme", "geometric");
  if (scheme == "arithmetic")
    c.scheme = Scheme::arithmetic;
  else if (scheme == "geometric")
    c.scheme = Scheme::geometric;
  else
    throw ConfigError(s.label() + ": scheme must be arithmetic or geometric, got '" + scheme +
                      "'");
  c.seed = static_cast<std::uint64_t>(s.get_int("seed", static_cast<long long>(c.seed)));
  c.init_soap_count = static_cast<int>(s.get_int("init_soap_count", c.init_soap_count));
  c.init_random_count = static_cast<int>(s.get_int("init_random_count", c.init_random_count));
  c.max_repair_retries = static_cast<int>(s.get_int("max_repair_retries", c.max_repair_retries));
  c.workers = static_cast<int>(s.get_int("workers", c.workers));
  c.depth_cap = static_cast<int>(s.get_int("depth_cap", c.depth_cap));
  c.grow.max_depth = static_cast<int>(s.get_int("grow_max_depth", c.grow.max_depth));
  c.grow.p_leaf = s.get_real("grow_p_leaf", c.grow.p_leaf);
  return c;
}

struct RankingSetup {
  SyntheticSpec spec;
  int repeats = 1;
};

RankingSetup ranking_from(const ConfigSection& s) {
  RankingSetup r;
  SyntheticSpec& sp = r.spec;
  sp.classes = static_cast<int>(s.get_int("classes", sp.classes));
  sp.channels = static_cast<int>(s.get_int("channels", sp.channels));
  sp.informative = static_cast<int>(s.get_int("informative", sp.informative));
  sp.map_h = static_cast<std::size_t>(s.get_int("map_h", static_cast<long long>(sp.map_h)));
  sp.map_w = static_cast<std::size_t>(s.get_int("map_w", static_cast<long long>(sp.map_w)));
  sp.samples_per_class = static_cast<int>(s.get_int("samples_per_class", sp.samples_per_class));
  sp.separation = s.get_real("separation", sp.separation);
  sp.noise = s.get_real("noise", sp.noise);
  const std::string mode = s.get_string("mode", "distinct_maps");
  if (mode == "distinct_maps")
    sp.mode = ChannelMode::distinct_maps;
  else if (mode == "label_shuffle")
    sp.mode = ChannelMode::label_shuffle;
  else
    throw ConfigError(s.label() + ": mode must be distinct_maps or label_shuffle, got '" + mode +
                      "'");
  r.repeats = static_cast<int>(s.get_int("repeats", r.repeats));
  if (r.repeats < 1) throw ConfigError(s.label() + ": repeats must be at least 1");
  return r;
}

PruningTask pruning_from(const ConfigSection& s) {
  PruningTask t;
  t.id = s.id;
  t.arch = s.get_string("arch", t.arch);
  t.data.classes = static_cast<int>(s.get_int("classes", t.data.classes));
  t.data.height =
      static_cast<std::size_t>(s.get_int("height", static_cast<long long>(t.data.height)));
  t.data.width =
      static_cast<std::size_t>(s.get_int("width", static_cast<long long>(t.data.width)));
  t.data.per_class = static_cast<int>(s.get_int("per_class", t.data.per_class));
  t.data.noise = s.get_real("noise", t.data.noise);
  t.val_per_class = static_cast<int>(s.get_int("val_per_class", t.val_per_class));
  t.data_seed = static_cast<std::uint64_t>(s.get_int("data_seed", static_cast<long long>(t.data_seed)));
  t.net_seed = static_cast<std::uint64_t>(s.get_int("net_seed", static_cast<long long>(t.net_seed)));
  t.baseline_cfg.epochs = static_cast<int>(s.get_int("baseline_epochs", t.baseline_cfg.epochs));
  t.baseline_cfg.batch_size =
      static_cast<int>(s.get_int("baseline_batch", t.baseline_cfg.batch_size));
  t.baseline_cfg.learning_rate = s.get_real("baseline_lr", t.baseline_cfg.learning_rate);
  t.baseline_cfg.seed = static_cast<std::uint64_t>(
      s.get_int("baseline_seed", static_cast<long long>(t.baseline_cfg.seed)));
  t.retrain_cfg = t.baseline_cfg;
  t.retrain_cfg.epochs = static_cast<int>(s.get_int("retrain_epochs", t.retrain_cfg.epochs));
  t.retrain_cfg.batch_size =
      static_cast<int>(s.get_int("retrain_batch", t.retrain_cfg.batch_size));
  t.retrain_cfg.learning_rate = s.get_real("retrain_lr", t.retrain_cfg.learning_rate);
  t.ratio = s.get_real("ratio", t.ratio);
  if (!(t.ratio >= 0.0 && t.ratio < 1.0))
    throw ConfigError(s.label() + ": ratio must be in [0, 1)");
  t.target_layers.clear();
  for (const long long v : s.get_int_list("target_layers", {0})) {
    if (v < 0) throw ConfigError(s.label() + ": target_layers must be non-negative");
    t.target_layers.push_back(static_cast<std::size_t>(v));
  }
  t.sample_limit = static_cast<std::size_t>(
      s.get_int("sample_limit", static_cast<long long>(t.sample_limit)));
  return t;
}

FitnessTask fitness_task_from(const ConfigSection& s) {
  if (s.id.empty()) throw ConfigError(s.label() + ": task sections need an id: [task <id>]");
  const std::string type = s.get_string("type");
  if (type == "ranking") {
    const RankingSetup r = ranking_from(s);
    return {s.id, [r](const ExprTree& t, std::uint64_t seed) {
              return run_ranking_task(t, r.spec, seed, r.repeats);
            }};
  }
  if (type == "pruning") {
    const PruningTask t = pruning_from(s);
    return {s.id, [t](const ExprTree& tree, std::uint64_t seed) {
              return run_pruning_task(tree, t, seed);
            }};
  }
  throw ConfigError(s.label() + ": unknown task type '" + type +
                    "' (expected ranking or pruning)");
}

// First expression in a .fn file; '#' comments and blank lines are skipped.
ExprTree load_function_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot read function file: " + path, 0);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::vector<ExprTree> trees = parse_function_lines(buf.str());
  if (trees.empty()) throw ParseError("no function expression in " + path, 0);
  return trees.front();
}

// ---- run manifest ---------------------------------------------------------------

void write_manifest(const fs::path& dir, json m, const std::string& started,
                    const std::vector<std::string>& outputs) {
  m["artifact_version"] = kVersion;
  m["started_utc"] = started;
  m["finished_utc"] = utc_now();
  m["outputs"] = outputs;
  const fs::path path = dir / "manifest.json";
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << m.dump(2) << '\n';
  f.flush();
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

// ---- population checkpoints -------------------------------------------------------

constexpr std::pair<Origin, const char*> kOriginNames[] = {
    {Origin::init_soap, "init_soap"},   {Origin::init_random, "init_random"},
    {Origin::carryover, "carryover"},   {Origin::reproduced, "reproduced"},
    {Origin::fresh_soap, "fresh_soap"}, {Origin::fresh_random, "fresh_random"}};

const char* origin_name(Origin o) {
  for (const auto& [origin, name] : kOriginNames)
    if (origin == o) return name;
  return "reproduced";
}

Origin origin_from(const std::string& s) {
  for (const auto& [origin, name] : kOriginNames)
    if (s == name) return origin;
  throw std::runtime_error("unknown origin '" + s + "' in population checkpoint");
}

std::string checkpoint_name(int gen) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pop_gen%04d.json", gen);
  return buf;
}

// The checkpoint carries the full CSV history so a resumed run can rebuild
// log.csv byte-identically without trusting any partially written file.
void write_checkpoint(const fs::path& path, int gen, const Population& pop,
                      const std::vector<std::string>& log_rows) {
  json individuals = json::array();
  for (const Individual& ind : pop) {
    json ji;
    ji["fn"] = format_tree(ind.tree);
    ji["origin"] = origin_name(ind.origin);
    if (ind.fitness) ji["fitness"] = *ind.fitness;
    json acc = json::object();
    for (const auto& [task, value] : ind.accuracies) acc[task] = value;
    ji["accuracies"] = acc;
    individuals.push_back(std::move(ji));
  }
  json j;
  j["generation"] = gen;
  j["log"] = log_rows;
  j["individuals"] = std::move(individuals);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << j.dump(2) << '\n';
  f.flush();
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

struct Checkpoint {
  ResumeState state;
  std::vector<std::string> log_rows;
  int generation = 0;
};

Checkpoint read_checkpoint(const fs::path& path) {
  const json j = json::parse(read_file(path.string()));
  Checkpoint c;
  c.generation = j.at("generation").get<int>();
  c.state.next_generation = c.generation + 1;
  for (const json& row : j.at("log")) c.log_rows.push_back(row.get<std::string>());
  for (const json& ji : j.at("individuals")) {
    Individual ind;
    ind.tree = parse_tree(ji.at("fn").get<std::string>());
    ind.origin = origin_from(ji.at("origin").get<std::string>());
    if (ji.contains("fitness")) ind.fitness = ji.at("fitness").get<double>();
    for (const auto& [task, value] : ji.at("accuracies").items())
      ind.accuracies[task] = value.get<double>();
    c.state.population.push_back(std::move(ind));
  }
  return c;
}

std::optional<fs::path> latest_checkpoint(const fs::path& dir) {
  std::optional<fs::path> best;
  int best_gen = -1;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    constexpr std::string_view prefix = "pop_gen", suffix = ".json";
    if (name.size() <= prefix.size() + suffix.size()) continue;
    if (name.rfind(prefix, 0) != 0 || name.find(suffix, name.size() - suffix.size()) == std::string::npos)
      continue;
    const std::string digits = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
    int gen = 0;
    const auto res = std::from_chars(digits.data(), digits.data() + digits.size(), gen);
    if (res.ec != std::errc() || res.ptr != digits.data() + digits.size()) continue;
    if (gen > best_gen) {
      best_gen = gen;
      best = entry.path();
    }
  }
  return best;
}

// ---- commands -------------------------------------------------------------------

std::string log_row(const GenerationLog& gl) {
  return std::to_string(gl.generation) + "," + d2s(gl.best_fitness) + "," +
         d2s(gl.q25_fitness) + "," + d2s(gl.mean_fitness) + "," +
         std::to_string(gl.repair_count) + "," + gl.best_text;
}

int cmd_evolve(const std::string& config_path, const std::string& out_dir, bool resume,
               int workers_flag, std::ostream& out, std::ostream& err) {
  const std::string started = utc_now();
  std::string config_text;
  try {
    config_text = read_file(config_path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  const ConfigFile cf = parse_config(config_text, config_path);
  EvolutionConfig cfg = evolution_from(cf.require("evolution"));
  if (const auto seed = env_seed()) cfg.seed = *seed;
  if (workers_flag > 0) cfg.workers = workers_flag;

  TaskSet tasks;
  for (const ConfigSection* s : cf.all("task")) tasks.push_back(fitness_task_from(*s));
  if (tasks.empty() || tasks.size() > 2)
    throw ConfigError(config_path + ": evolve needs one or two [task <id>] sections, found " +
                      std::to_string(tasks.size()));

  const fs::path dir(out_dir);
  fs::create_directories(dir);

  Checkpoint carried;
  const ResumeState* resume_state = nullptr;
  if (resume) {
    const auto latest = latest_checkpoint(dir);
    if (!latest) {
      err << "no population checkpoint to resume from in " << out_dir << "\n";
      return kExitRuntime;
    }
    carried = read_checkpoint(*latest);
    resume_state = &carried.state;
    out << "resuming after generation " << carried.generation << "\n";
  }

  std::ofstream log(dir / "log.csv", std::ios::binary | std::ios::trunc);
  if (!log) {
    err << "cannot write " << (dir / "log.csv").string() << "\n";
    return kExitRuntime;
  }
  log << "gen,best,q25,mean,repairs,best_fn\n";
  for (const std::string& row : carried.log_rows) log << row << "\n";
  log.flush();

  std::vector<std::string> rows = carried.log_rows;
  EvolutionObserver observer;
  observer.on_generation = [&](int gen, const Population& pop, const GenerationLog& gl) {
    const std::string row = log_row(gl);
    log << row << "\n";
    log.flush();
    rows.push_back(row);
    write_checkpoint(dir / checkpoint_name(gen), gen, pop, rows);
    out << "generation " << gen << " best " << d2s(gl.best_fitness) << " mean "
        << d2s(gl.mean_fitness) << "\n";
  };

  const EvolutionResult res = run_evolution(cfg, tasks, observer, resume_state);

  {
    std::ofstream best(dir / "best.fn", std::ios::binary | std::ios::trunc);
    best << format_tree(res.best.tree) << "\n";
    best.flush();
    if (!best) {
      err << "cannot write " << (dir / "best.fn").string() << "\n";
      return kExitRuntime;
    }
  }

  std::vector<std::string> outputs = {"log.csv", "best.fn"};
  for (int g = 0; g < cfg.generations; ++g) outputs.push_back(checkpoint_name(g));
  json m;
  m["command"] = "evolve";
  m["config_path"] = config_path;
  m["config"] = config_text;
  m["seed"] = cfg.seed;
  m["workers"] = cfg.workers;
  m["resumed"] = resume;
  write_manifest(dir, std::move(m), started, outputs);

  out << "best " << d2s(res.best.fitness.value_or(0.0)) << " " << format_tree(res.best.tree)
      << "\n";
  return kOk;
}

int cmd_eval_fn(const std::string& fn_path, const std::string& task_config, std::uint64_t seed,
                std::ostream& out, std::ostream& err) {
  ExprTree tree;
  try {
    tree = load_function_file(fn_path);
  } catch (const ParseError& e) {
    err << "invalid function: " << e.what() << "\n";
    return kExitFunction;
  }
  if (!validity_test(tree, make_probe_context())) {
    err << "invalid function: fails the validity probe: " << format_tree(tree) << "\n";
    return kExitFunction;
  }

  const ConfigFile cf = load_config(task_config);
  std::vector<FitnessTask> tasks;
  for (const ConfigSection* s : cf.all("task")) tasks.push_back(fitness_task_from(*s));
  if (tasks.empty())
    throw ConfigError(task_config + ": no [task <id>] sections to evaluate on");
  for (const FitnessTask& task : tasks) out << task.id << " " << d2s(task.run(tree, seed)) << "\n";
  return kOk;
}

int cmd_prune(const std::string& fn_path, const std::string& task_config,
              const std::string& task_id, std::uint64_t seed, std::ostream& out,
              std::ostream& err) {
  ExprTree tree;
  try {
    tree = load_function_file(fn_path);
  } catch (const ParseError& e) {
    err << "invalid function: " << e.what() << "\n";
    return kExitFunction;
  }
  if (!validity_test(tree, make_probe_context())) {
    err << "invalid function: fails the validity probe: " << format_tree(tree) << "\n";
    return kExitFunction;
  }

  const ConfigFile cf = load_config(task_config);
  const ConfigSection* chosen = nullptr;
  for (const ConfigSection* s : cf.all("task")) {
    if (s->get_string("type", "") != "pruning") continue;
    if (!task_id.empty() && s->id != task_id) continue;
    chosen = s;
    break;
  }
  if (!chosen) {
    err << "no " << (task_id.empty() ? std::string("pruning task") : "pruning task '" + task_id + "'")
        << " in " << task_config << "\n";
    return kExitTask;
  }

  const PruningTask task = pruning_from(*chosen);
  const auto [train_set, val_set] = pruning_task_data(task);
  const double baseline = accuracy(baseline_network(task), val_set);
  const double pruned = run_pruning_task(tree, task, seed);
  out << "task " << task.id << "\n";
  out << "baseline " << d2s(baseline) << "\n";
  out << "pruned " << d2s(pruned) << "\n";
  return kOk;
}

int cmd_soap_list(std::ostream& out) {
  for (const NamedFunction& fn : function_library()) out << fn.name << "\n";
  return kOk;
}

int cmd_soap_export(const std::string& out_dir, std::ostream& out, std::ostream& err) {
  const std::string started = utc_now();
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    err << "cannot create " << out_dir << ": " << ec.message() << "\n";
    return kExitRuntime;
  }
  std::vector<std::string> outputs;
  for (const NamedFunction& fn : function_library()) {
    const fs::path path = dir / (fn.name + ".fn");
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    file << format_tree(fn.tree) << "\n";
    file.flush();
    if (!file) {
      err << "cannot write " << path.string() << "\n";
      return kExitRuntime;
    }
    outputs.push_back(fn.name + ".fn");
  }
  json m;
  m["command"] = "soap export";
  write_manifest(dir, std::move(m), started, outputs);
  out << outputs.size() << " functions exported to " << out_dir << "\n";
  return kOk;
}

int cmd_alpha_grid(const std::string& config_path, const std::string& out_dir, int workers_flag,
                   std::ostream& out, std::ostream& err) {
  const std::string started = utc_now();
  std::string config_text;
  try {
    config_text = read_file(config_path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  const ConfigFile cf = parse_config(config_text, config_path);
  EvolutionConfig base = evolution_from(cf.require("evolution"));
  if (const auto seed = env_seed()) base.seed = *seed;
  if (workers_flag > 0) base.workers = workers_flag;

  const ConfigSection& grid = cf.require("grid");
  const std::string heldout_id = grid.get_string("heldout");
  const std::uint64_t eval_seed = static_cast<std::uint64_t>(grid.get_int("eval_seed", 99));
  const int eval_repeats = static_cast<int>(grid.get_int("eval_repeats", 5));
  const ConfigSection* heldout_section = cf.find("task", heldout_id);
  if (!heldout_section)
    throw ConfigError(config_path + ": [grid] heldout names unknown task '" + heldout_id + "'");
  if (heldout_section->get_string("type", "") != "ranking")
    throw ConfigError(config_path + ": held-out task '" + heldout_id +
                      "' must have type ranking");
  const RankingSetup heldout = ranking_from(*heldout_section);

  TaskSet tasks;
  for (const ConfigSection* s : cf.all("task"))
    if (s->id != heldout_id) tasks.push_back(fitness_task_from(*s));
  if (tasks.size() != 2)
    throw ConfigError(config_path +
                      ": alpha-grid needs exactly two fitness tasks plus the held-out one");

  const fs::path dir(out_dir);
  fs::create_directories(dir);
  std::ofstream csv(dir / "grid.csv", std::ios::binary | std::ios::trunc);
  if (!csv) {
    err << "cannot write " << (dir / "grid.csv").string() << "\n";
    return kExitRuntime;
  }
  csv << "alpha,scheme,best_fitness,task_a,task_b,heldout,best_fn\n";

  const double alphas[] = {0.0, 0.3, 0.5, 0.7, 1.0};
  const Scheme schemes[] = {Scheme::arithmetic, Scheme::geometric};
  for (const double alpha : alphas)
    for (const Scheme scheme : schemes) {
      EvolutionConfig cfg = base;
      cfg.alpha = alpha;
      cfg.scheme = scheme;
      const EvolutionResult res = run_evolution(cfg, tasks);
      const double transfer = run_ranking_task(res.best.tree, heldout.spec, eval_seed, eval_repeats);
      const char* scheme_name = scheme == Scheme::arithmetic ? "arithmetic" : "geometric";
      // Degenerate alphas never evaluate the ignored task, so its accuracy
      // column stays empty.
      const auto acc = [&](const std::string& id) {
        const auto it = res.best.accuracies.find(id);
        return it == res.best.accuracies.end() ? std::string() : d2s(it->second);
      };
      csv << d2s(alpha) << "," << scheme_name << "," << d2s(res.best.fitness.value_or(0.0))
          << "," << acc(tasks[0].id) << "," << acc(tasks[1].id) << "," << d2s(transfer) << ","
          << format_tree(res.best.tree) << "\n";
      csv.flush();
      out << "alpha " << d2s(alpha) << " " << scheme_name << " best "
          << d2s(res.best.fitness.value_or(0.0)) << " heldout " << d2s(transfer) << "\n";
    }

  json m;
  m["command"] = "alpha-grid";
  m["config_path"] = config_path;
  m["config"] = config_text;
  m["seed"] = base.seed;
  m["workers"] = base.workers;
  write_manifest(dir, std::move(m), started, {"grid.csv"});
  return kOk;
}

int cmd_selftest(std::ostream& out, std::ostream& err) {
  int checks = 0, failures = 0;
  const auto check = [&](bool cond, const std::string& what) {
    ++checks;
    if (cond)
      out << "ok " << what << "\n";
    else {
      err << "FAIL " << what << "\n";
      ++failures;
    }
  };

  const ChannelContext probe = make_probe_context();
  for (const NamedFunction& fn : function_library()) {
    check(validity_test(fn.tree, probe), fn.name + " passes the validity probe");
    bool round_trip = false;
    try {
      round_trip = format_tree(parse_tree(format_tree(fn.tree))) == format_tree(fn.tree);
    } catch (const ParseError&) {
    }
    check(round_trip, fn.name + " parse/format round-trip");
  }
  check(std::fabs(combine_fitness(0.99, 0.94, 0.3, Scheme::arithmetic) - 0.955) <= 1e-15,
        "arithmetic fitness pin");
  check(std::fabs(combine_fitness(0.99, 0.94, 0.5, Scheme::geometric) - 0.964676) <= 1e-6,
        "geometric fitness pin");
  check(combine_fitness(0.37, 0.91, 1.0, Scheme::geometric) == 0.37, "alpha=1 takes task A exactly");
  check(combine_fitness(0.37, 0.91, 0.0, Scheme::arithmetic) == 0.91, "alpha=0 takes task B exactly");
  check(derive_seed(1, 2, 3) != derive_seed(1, 2, 4), "seed derivation separates streams");
  check(derive_seed(1, 2, 3) == derive_seed(1, 2, 3), "seed derivation is stable");

  if (failures) {
    err << failures << " of " << checks << " checks failed\n";
    return kExitRuntime;
  }
  out << "selftest passed (" << checks << " checks)\n";
  return kOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"evolves, inspects, and applies channel scoring functions"};
  app.name("prunevolve");
  app.require_subcommand(1);

  std::string ev_config, ev_out;
  bool ev_resume = false;
  int ev_workers = 0;
  CLI::App* evolve = app.add_subcommand("evolve", "run an evolution from a config file");
  evolve->add_option("config", ev_config, "run configuration file")->required();
  evolve->add_option("-o,--out", ev_out, "output directory")->required();
  evolve->add_flag("--resume", ev_resume,
                   "continue from the latest population checkpoint in the output directory");
  evolve->add_option("--workers", ev_workers, "parallel evaluation workers (overrides config)");

  std::string ef_fn, ef_tasks;
  std::uint64_t ef_seed = 1;
  CLI::App* eval_fn = app.add_subcommand("eval-fn", "evaluate a .fn file on configured tasks");
  eval_fn->add_option("function", ef_fn, "function (.fn) file")->required();
  eval_fn->add_option("tasks", ef_tasks, "task configuration file")->required();
  eval_fn->add_option("--seed", ef_seed, "evaluation seed");

  std::string pr_fn, pr_tasks, pr_task;
  std::uint64_t pr_seed = 1;
  CLI::App* prune = app.add_subcommand("prune", "prune and retrain one configured task");
  prune->add_option("function", pr_fn, "function (.fn) file")->required();
  prune->add_option("tasks", pr_tasks, "task configuration file")->required();
  prune->add_option("--task", pr_task, "pruning task id (default: the first pruning task)");
  prune->add_option("--seed", pr_seed, "evaluation seed");

  CLI::App* soap = app.add_subcommand("soap", "inspect or export the built-in function library");
  soap->require_subcommand(1);
  CLI::App* soap_list = soap->add_subcommand("list", "print the library function names");
  std::string soap_out;
  CLI::App* soap_export =
      soap->add_subcommand("export", "write every library function as a .fn file");
  soap_export->add_option("-o,--out", soap_out, "output directory")->required();

  std::string ag_config, ag_out;
  int ag_workers = 0;
  CLI::App* alpha_grid =
      app.add_subcommand("alpha-grid", "run the 10-cell preliminary evolution grid");
  alpha_grid->add_option("config", ag_config, "grid configuration file")->required();
  alpha_grid->add_option("-o,--out", ag_out, "output directory")->required();
  alpha_grid->add_option("--workers", ag_workers,
                         "parallel evaluation workers (overrides config)");

  CLI::App* selftest = app.add_subcommand("selftest", "run fast internal consistency checks");

  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("prunevolve");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kExitConfig;
  }

  try {
    if (evolve->parsed()) return cmd_evolve(ev_config, ev_out, ev_resume, ev_workers, out, err);
    if (eval_fn->parsed()) return cmd_eval_fn(ef_fn, ef_tasks, ef_seed, out, err);
    if (prune->parsed()) return cmd_prune(pr_fn, pr_tasks, pr_task, pr_seed, out, err);
    if (soap->parsed())
      return soap_list->parsed() ? cmd_soap_list(out) : cmd_soap_export(soap_out, out, err);
    if (alpha_grid->parsed()) return cmd_alpha_grid(ag_config, ag_out, ag_workers, out, err);
    if (selftest->parsed()) return cmd_selftest(out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IdxError& e) {
    err << "task error: " << e.what() << "\n";
    return kExitTask;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kOk;
}

}  // namespace prunevolve
