#include "i2cl/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <future>
#include <map>
#include <sstream>

#include "i2cl/csv.hpp"

namespace i2cl {

namespace {

const std::map<std::string, Method>& method_names() {
  static const std::map<std::string, Method> names{
      {"zero_shot", Method::kZeroShot},          {"icl", Method::kIcl},
      {"i2cl", Method::kI2cl},                   {"icl_plus_i2cl", Method::kIclPlusI2cl},
      {"noise_vector", Method::kNoiseVector},    {"task_vector", Method::kTaskVector},
  };
  return names;
}

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

std::string join(const std::vector<std::string>& xs, const std::string& sep) {
  std::string s;
  for (const std::string& x : xs) {
    s += (s.empty() ? "" : sep) + x;
  }
  return s;
}

std::string number(double x) {
  std::ostringstream out;
  out.precision(17);
  out << x;
  return out.str();
}

// Runs fn(0..n-1) on up to `jobs` threads; results come back in index order.
template <typename T>
std::vector<T> parallel_map(std::size_t n, int jobs, const std::function<T(std::size_t)>& fn) {
  std::vector<T> out(n);
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = fn(i);
    }
    return out;
  }
  std::size_t next = 0;
  std::vector<std::future<void>> running;
  while (next < n || !running.empty()) {
    while (next < n && running.size() < static_cast<std::size_t>(jobs)) {
      const std::size_t i = next++;
      running.push_back(std::async(std::launch::async, [&out, &fn, i] { out[i] = fn(i); }));
    }
    running.front().get();
    running.erase(running.begin());
  }
  return out;
}

Weights load_model(const std::filesystem::path& path) {
  if (path.empty()) {
    throw ConfigError("no model file given");
  }
  if (!std::filesystem::exists(path)) {
    throw ConfigError("model file '" + path.string() + "' does not exist");
  }
  return load_weights(path);
}

std::string file_stem(const std::string& method, const std::string& task, std::uint64_t seed) {
  std::string s = method + "_" + task + "_seed" + std::to_string(seed);
  for (char& c : s) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.') {
      c = '_';
    }
  }
  return s;
}

struct TimedResult {
  MethodResult result;
  double seconds = 0.0;
};

void append_timings(const std::vector<ResultRow>& rows, const std::vector<double>& seconds,
                    const std::vector<std::size_t>& queries, const std::filesystem::path& path,
                    const std::vector<std::string>& metadata) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out;
  if (fresh) {
    out = open_csv(path, metadata);
    out << "method,task,seed,seconds,seconds_per_query\n";
  } else {
    out.open(path, std::ios::app);
    out.precision(17);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << rows[i].method << "," << rows[i].task << "," << rows[i].seed << "," << seconds[i] << ","
        << seconds[i] / static_cast<double>(std::max<std::size_t>(1, queries[i])) << "\n";
  }
  finish_csv(out, path);
}

}  // namespace

Method parse_method(const std::string& s) {
  std::string key = s;
  std::transform(key.begin(), key.end(), key.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  const auto it = method_names().find(key);
  if (it == method_names().end()) {
    throw ConfigError("unknown method '" + s +
                      "' (expected zero_shot, icl, i2cl, icl_plus_i2cl, noise_vector, task_vector)");
  }
  return it->second;
}

std::string method_label(Method m) {
  for (const auto& [name, value] : method_names()) {
    if (value == m) {
      return upper(name);
    }
  }
  return "?";
}

std::set<Module> parse_modules(const std::string& s) {
  std::set<Module> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, s.find('+') != std::string::npos ? '+' : ',')) {
    const std::string u = upper(item);
    if (u == "MHA") {
      out.insert(Module::kMha);
    } else if (u == "MLP") {
      out.insert(Module::kMlp);
    } else if (u == "HIDDEN") {
      out.insert(Module::kHidden);
    } else {
      throw ConfigError("unknown module '" + item + "' (expected MHA, MLP or HIDDEN)");
    }
  }
  if (out.empty()) {
    throw ConfigError("no target modules given");
  }
  return out;
}

std::set<int> resolve_layers(const std::string& s, int n_layers) {
  const std::string u = upper(s);
  std::set<int> out;
  const std::map<std::string, int> thirds{{"EARLY", 0}, {"MIDDLE", 1}, {"LATE", 2}};
  if (u == "ALL") {
    for (int l = 1; l <= n_layers; ++l) {
      out.insert(l);
    }
  } else if (thirds.count(u)) {
    for (int l = 1; l <= n_layers; ++l) {
      if (3 * (l - 1) / n_layers == thirds.at(u)) {
        out.insert(l);
      }
    }
    if (out.empty()) {
      throw ConfigError("layer preset " + u + " is empty for a " + std::to_string(n_layers) +
                        "-layer model");
    }
  } else {
    for (const std::string& item : KeyValueConfig::split_list(s)) {
      int l = 0;
      try {
        std::size_t used = 0;
        l = std::stoi(item, &used);
        if (used != item.size()) {
          throw std::invalid_argument(item);
        }
      } catch (const std::logic_error&) {
        throw ConfigError("bad layer '" + item + "' (expected EARLY, MIDDLE, LATE, ALL or indices)");
      }
      if (l < 1 || l > n_layers) {
        throw ConfigError("layer " + item + " is outside 1.." + std::to_string(n_layers));
      }
      out.insert(l);
    }
    if (out.empty()) {
      throw ConfigError("no target layers given");
    }
  }
  return out;
}

void ExperimentConfig::validate() const {
  if (methods.empty()) {
    throw ConfigError("no methods given");
  }
  for (const std::string& m : methods) {
    parse_method(m);
  }
  if (seeds.empty()) {
    throw ConfigError("no seeds given");
  }
  if (demos_per_class < 1 || shots < 0 || eval_size < 1 || holdout_size < 1 || jobs < 1) {
    throw ConfigError(
        "need demos_per_class >= 1, shots >= 0, eval_size >= 1, holdout_size >= 1, jobs >= 1");
  }
  parse_modules(modules);
  parse_position_mode(positions);
  parse_formula(formula);
  for (const std::string& c : {corrupt_vectorize, corrupt_calibrate}) {
    if (upper(c) != "NONE") {
      parse_corruption(c);
    }
  }
  calibration.validate();
}

KeyValueConfig ExperimentConfig::resolved() const {
  KeyValueConfig kv;
  kv.set("model", model_path.string());
  kv.set("task", task_path.string());
  kv.set("out", output_dir.string());
  kv.set("methods", join(methods, ","));
  std::vector<std::string> s;
  for (auto x : seeds) {
    s.push_back(std::to_string(x));
  }
  kv.set("seeds", join(s, ","));
  kv.set("demos_per_class", std::to_string(demos_per_class));
  kv.set("shots", std::to_string(shots));
  kv.set("eval_size", std::to_string(eval_size));
  kv.set("holdout_size", std::to_string(holdout_size));
  kv.set("modules", modules);
  kv.set("layers", layers);
  kv.set("positions", positions);
  kv.set("formula", formula);
  kv.set("corrupt_vectorize", corrupt_vectorize);
  kv.set("corrupt_calibrate", corrupt_calibrate);
  kv.set("epochs", std::to_string(calibration.epochs));
  kv.set("lr_start", number(calibration.lr_start));
  kv.set("lr_end", number(calibration.lr_end));
  kv.set("gamma", number(calibration.gamma));
  kv.set("init_lambda", number(calibration.init_lambda));
  kv.set("init_beta", number(calibration.init_beta));
  kv.set("weight_decay", number(calibration.weight_decay));
  kv.set("adam_betas", number(calibration.adam_beta1) + " " + number(calibration.adam_beta2));
  kv.set("jobs", std::to_string(jobs));
  return kv;
}

SyntheticTaskSpec load_task_or_default(const std::filesystem::path& path) {
  if (path.empty()) {
    return SyntheticTaskSpec{};
  }
  if (!std::filesystem::exists(path)) {
    throw ConfigError("task spec '" + path.string() + "' does not exist");
  }
  return load_task_spec(path);
}

SeedSetup prepare_seed(const SyntheticTaskSpec& task, const ExperimentConfig& config,
                       std::uint64_t seed) {
  SeedSetup s;
  s.task = task;
  s.task.seed = Pcg64::named(task.seed, "experiment-seed", seed)();
  const int per_class_pool = 2 * config.demos_per_class;
  const int n_classes = static_cast<int>(task.classes.size());
  s.data = generate_task(s.task, per_class_pool * n_classes, config.eval_size, config.holdout_size);
  s.demos = {sample_demos(s.data, config.demos_per_class, seed), s.task.format};
  const auto shots = std::min<std::size_t>(static_cast<std::size_t>(config.shots),
                                           s.demos.demos.size());
  s.icl_demos = {{s.demos.demos.begin(), s.demos.demos.begin() + static_cast<long>(shots)},
                 s.task.format};
  auto corrupted = [&](const std::string& mode, std::uint64_t stream) {
    if (upper(mode) == "NONE") {
      return s.demos;
    }
    return corrupt(s.demos.demos, s.task, parse_corruption(mode),
                   Pcg64::named(seed, "experiment-corruption", stream)());
  };
  s.vectorize = corrupted(config.corrupt_vectorize, 0);
  s.calibrate = corrupted(config.corrupt_calibrate, 1);
  return s;
}

I2clOptions i2cl_options(const ExperimentConfig& config, std::uint64_t seed, int n_layers) {
  I2clOptions o;
  o.sites.modules = parse_modules(config.modules);
  o.sites.layers = resolve_layers(config.layers, n_layers);
  o.sites.positions = parse_position_mode(config.positions);
  o.sites.formula = parse_formula(config.formula);
  o.calibration = config.calibration;
  o.calibration.seed = seed;
  return o;
}

MethodResult run_method(const Weights& weights, const SeedSetup& setup,
                        const ExperimentConfig& config, Method method, std::uint64_t seed) {
  const I2clOptions options = i2cl_options(config, seed, weights.config.n_layers);
  const auto& eval = setup.data.eval;
  switch (method) {
    case Method::kZeroShot:
      return run_zero_shot(weights, setup.task, eval);
    case Method::kIcl:
      return run_icl(weights, setup.task, setup.icl_demos, eval);
    case Method::kI2cl:
      return run_i2cl(weights, setup.task, setup.vectorize, setup.calibrate, eval, options);
    case Method::kIclPlusI2cl:
      return run_icl_plus_i2cl(weights, setup.task, setup.icl_demos, eval, options);
    case Method::kNoiseVector:
      return run_noise_vector(weights, setup.task, setup.calibrate, eval, seed, options);
    case Method::kTaskVector:
      return run_task_vector(weights, setup.task, setup.icl_demos, setup.data.holdout, eval, seed);
  }
  throw ConfigError("unknown method");
}

std::vector<std::string> artifact_metadata(const ExperimentConfig& config, const Weights& weights) {
  std::vector<std::string> m;
  const KeyValueConfig resolved = config.resolved();
  for (const auto& [k, v] : resolved.entries()) {
    m.push_back("config." + k + " = " + KeyValueConfig::quote(v));
  }
  const ModelConfig& c = weights.config;
  m.push_back("weights_hash = " + weights.hash());
  m.push_back("model_shape = L=" + std::to_string(c.n_layers) + " D=" + std::to_string(c.d_model) +
              " H=" + std::to_string(c.n_heads) + " d_mlp=" + std::to_string(c.d_mlp) +
              " V=" + std::to_string(c.vocab_size) + " T_max=" + std::to_string(c.max_seq));
  return m;
}

std::filesystem::path output_path(const std::filesystem::path& p) {
  if (p.is_absolute()) {
    return p;
  }
  if (const char* root = std::getenv("I2CL_OUTPUT_ROOT"); root != nullptr && *root != '\0') {
    return std::filesystem::path(root) / p;
  }
  return p;
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::vector<SummaryRow> out;
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  std::vector<std::pair<std::string, std::string>> order;
  for (const ResultRow& r : rows) {
    auto key = std::make_pair(r.method, r.task);
    if (!groups.count(key)) {
      order.push_back(key);
    }
    groups[key].push_back(r.accuracy);
  }
  for (const auto& key : order) {
    const std::vector<double>& xs = groups[key];
    SummaryRow s{key.first, key.second, xs.size(), 0.0, 0.0};
    for (double x : xs) {
      s.mean += x;
    }
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
      double ss = 0.0;
      for (double x : xs) {
        ss += (x - s.mean) * (x - s.mean);
      }
      s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    out.push_back(s);
  }
  return out;
}

void write_summary(const std::vector<SummaryRow>& rows, const std::filesystem::path& path,
                   const std::vector<std::string>& metadata) {
  std::ofstream out = open_csv(path, metadata);
  out << "method,task,n,mean_accuracy,std_accuracy\n";
  for (const SummaryRow& r : rows) {
    out << r.method << "," << r.task << "," << r.n << "," << r.mean << "," << r.std << "\n";
  }
  finish_csv(out, path);
}

namespace {

// Shared by eval and sweep: every (grid point, seed, method) of `configs`,
// with per-query and loss artifacts, appended results and a fresh summary.
std::vector<ResultRow> run_grid(const Weights& weights, const std::vector<ExperimentConfig>& configs,
                                const std::vector<std::string>& tags,
                                const ExperimentConfig& base) {
  const SyntheticTaskSpec task = load_task_or_default(base.task_path);
  task.validate();
  struct Cell {
    std::size_t config;
    std::uint64_t seed;
    Method method;
  };
  std::vector<Cell> cells;
  for (std::size_t c = 0; c < configs.size(); ++c) {
    configs[c].validate();
    i2cl_options(configs[c], 0, weights.config.n_layers);  // fail fast on bad layers
    for (std::uint64_t seed : configs[c].seeds) {
      for (const std::string& m : configs[c].methods) {
        cells.push_back({c, seed, parse_method(m)});
      }
    }
  }

  const std::function<TimedResult(std::size_t)> run = [&](std::size_t i) {
    const Cell& cell = cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    const SeedSetup setup = prepare_seed(task, configs[cell.config], cell.seed);
    TimedResult t{run_method(weights, setup, configs[cell.config], cell.method, cell.seed), 0.0};
    t.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return t;
  };
  const std::vector<TimedResult> results = parallel_map(cells.size(), base.jobs, run);

  const std::filesystem::path out = output_path(base.output_dir);
  std::filesystem::create_directories(out / "queries");
  std::filesystem::create_directories(out / "losses");
  const std::vector<std::string> meta = artifact_metadata(base, weights);
  std::vector<ResultRow> rows;
  std::vector<double> seconds;
  std::vector<std::size_t> queries;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const MethodResult& r = results[i].result;
    ResultRow row = result_row(r, task.name, cells[i].seed);
    if (!tags[cells[i].config].empty()) {
      row.method += "[" + tags[cells[i].config] + "]";
    }
    std::vector<std::string> cell_meta = artifact_metadata(configs[cells[i].config], weights);
    const std::string stem = file_stem(row.method, task.name, cells[i].seed);
    write_query_csv(r.eval, task.classes, out / "queries" / (stem + ".csv"), cell_meta);
    if (r.calibration) {
      write_loss_csv(r.calibration->history, out / "losses" / (stem + ".csv"), cell_meta);
    }
    rows.push_back(row);
    seconds.push_back(results[i].seconds);
    queries.push_back(r.eval.records.size());
  }
  append_results(rows, out / "results.csv", meta);
  append_timings(rows, seconds, queries, out / "timings.csv", meta);
  write_summary(summarize(read_results(out / "results.csv")), out / "summary.csv", meta);
  return rows;
}

}  // namespace

std::vector<ResultRow> cmd_eval(const ExperimentConfig& config) {
  config.validate();
  const Weights weights = load_model(config.model_path);
  return run_grid(weights, {config}, {""}, config);
}

std::string sweep_tag(const std::string& axis, const std::string& value) {
  const std::string u = upper(value);
  if (axis == "modules") {
    const std::set<Module> m = parse_modules(value);
    if (m == std::set<Module>{Module::kMha}) {
      return "MHA";
    }
    if (m == std::set<Module>{Module::kMlp}) {
      return "MLP";
    }
    if (m == std::set<Module>{Module::kMha, Module::kMlp}) {
      return "MHA+MLP";
    }
    if (m == std::set<Module>{Module::kHidden}) {
      return "Hidden state";
    }
    throw ConfigError("module set '" + value + "' is not a sweep row");
  }
  if (axis == "layers" || axis == "positions") {
    if (u == "EARLY" || u == "MIDDLE" || u == "LATE" || u == "ALL" || u == "FIRST" ||
        u == "LAST" || u == "RANDOM") {
      std::string s = u;
      std::transform(s.begin() + 1, s.end(), s.begin() + 1,
                     [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      return s;
    }
    if (axis == "positions") {
      throw ConfigError("unknown position mode '" + value + "'");
    }
    std::string s = value;
    std::replace(s.begin(), s.end(), ',', '+');
    return "layers=" + s;
  }
  if (axis == "formula") {
    switch (parse_formula(value)) {
      case Formula::kLinearCombo:
        return "lambda*v+beta*a";
      case Formula::kAddOnly:
        return "lambda*v+a";
      case Formula::kConvexScaled:
        return "(lambda*v+(1-lambda)*a)*beta";
    }
  }
  if (axis == "gamma") {
    return "gamma=" + value;
  }
  if (axis == "demos") {
    return "demos=" + value;
  }
  throw ConfigError("unknown sweep axis '" + axis +
                    "' (expected demos, gamma, modules, layers, positions, formula)");
}

std::vector<ResultRow> cmd_sweep(const ExperimentConfig& config, const SweepSpec& sweep) {
  config.validate();
  if (sweep.values.empty()) {
    throw ConfigError("sweep needs at least one value");
  }
  std::vector<ExperimentConfig> configs;
  std::vector<std::string> tags;
  for (const std::string& v : sweep.values) {
    ExperimentConfig c = config;
    try {
      if (sweep.axis == "demos") {
        c.demos_per_class = std::stoi(v);
      } else if (sweep.axis == "gamma") {
        c.calibration.gamma = std::stod(v);
      } else if (sweep.axis == "modules") {
        c.modules = v;
      } else if (sweep.axis == "layers") {
        c.layers = v;
      } else if (sweep.axis == "positions") {
        c.positions = v;
      } else if (sweep.axis == "formula") {
        c.formula = v;
      }
    } catch (const std::logic_error&) {
      throw ConfigError("bad " + sweep.axis + " value '" + v + "'");
    }
    tags.push_back(sweep_tag(sweep.axis, v));
    configs.push_back(c);
  }
  const Weights weights = load_model(config.model_path);
  return run_grid(weights, configs, tags, config);
}

std::vector<Anchor> cmd_calibrate(const ExperimentConfig& config,
                                  const std::filesystem::path& registry,
                                  const std::string& anchor_name) {
  config.validate();
  const Weights weights = load_model(config.model_path);
  const SyntheticTaskSpec task = load_task_or_default(config.task_path);
  const std::string base = anchor_name.empty() ? task.name : anchor_name;
  const std::filesystem::path out = output_path(config.output_dir);
  std::filesystem::create_directories(out / "losses");
  std::vector<Anchor> anchors;
  for (std::uint64_t seed : config.seeds) {
    const SeedSetup setup = prepare_seed(task, config, seed);
    const I2clOptions o = i2cl_options(config, seed, weights.config.n_layers);
    Anchor a;
    a.task_name = base + "_seed" + std::to_string(seed);
    a.context = build_context(weights, setup.vectorize);
    const CalibrationResult cal =
        calibrate(weights, calibration_prompts(setup.calibrate),
                  o.sites.plan(a.context, default_init(static_cast<std::size_t>(weights.config.n_layers),
                                                       o.calibration)),
                  o.calibration);
    a.coefficients = cal.coefficients;
    save_anchor(a, output_path(registry), seed, weights.hash());
    write_loss_csv(cal.history, out / "losses" / ("calibrate_" + a.task_name + ".csv"),
                   artifact_metadata(config, weights));
    anchors.push_back(std::move(a));
  }
  return anchors;
}

std::vector<ResultRow> cmd_transfer(const ExperimentConfig& config,
                                    const std::filesystem::path& registry,
                                    const TransferOptions& options) {
  config.validate();
  const Weights weights = load_model(config.model_path);
  const SyntheticTaskSpec task = load_task_or_default(config.task_path);
  const std::vector<Anchor> anchors = load_registry(output_path(registry), weights.hash());
  const std::filesystem::path out = output_path(config.output_dir);
  std::filesystem::create_directories(out);
  const std::vector<std::string> meta = artifact_metadata(config, weights);

  std::ofstream log = open_csv(out / "transfer.csv", meta);
  log << "seed,anchor,similarity,retained,probability\n";
  std::vector<ResultRow> rows;
  for (std::uint64_t seed : config.seeds) {
    const SeedSetup setup = prepare_seed(task, config, seed);
    const I2clOptions o = i2cl_options(config, seed, weights.config.n_layers);
    TransferOptions t = options;
    t.sites = o.sites;
    t.calibration = o.calibration;
    const TransferResult r = transfer_learn(weights, anchors, setup.demos, t);
    for (std::size_t i = 0; i < anchors.size(); ++i) {
      const auto it = std::find(r.plan.retained.begin(), r.plan.retained.end(), i);
      const bool kept = it != r.plan.retained.end();
      log << seed << "," << anchors[i].task_name << "," << r.plan.similarities[i] << ","
          << (kept ? 1 : 0) << ","
          << (kept ? r.plan.probabilities[static_cast<std::size_t>(it - r.plan.retained.begin())]
                   : 0.0)
          << "\n";
    }
    const InjectionPlan plain = o.sites.plan(r.stage_one_context, r.stage_one.coefficients);
    const InjectionPlan moved = o.sites.plan(r.context, r.coefficients);
    const auto L = static_cast<std::size_t>(weights.config.n_layers);
    const auto D = static_cast<std::size_t>(weights.config.d_model);
    for (const auto& [name, plan] : {std::pair{"I2CL", &plain}, std::pair{"I2CL_TRANSFER", &moved}}) {
      const Evaluation ev =
          evaluate(weights, setup.data.eval, task.classes, task.format, "", plan);
      rows.push_back({name, task.name, seed, ev.accuracy, ev.mean_prompt_tokens,
                      i2cl_cost(0, D, L).cached_scalars});
    }
  }
  finish_csv(log, out / "transfer.csv");
  append_results(rows, out / "results.csv", meta);
  write_summary(summarize(read_results(out / "results.csv")), out / "summary.csv", meta);
  return rows;
}

void cmd_export(const std::filesystem::path& registry, const std::filesystem::path& out_dir) {
  const std::vector<Anchor> anchors = load_registry(output_path(registry));
  if (anchors.empty()) {
    throw ConfigError("anchor registry '" + registry.string() + "' is empty");
  }
  const std::filesystem::path out = output_path(out_dir);
  std::filesystem::create_directories(out);
  const std::vector<std::string> meta{"registry = " + KeyValueConfig::quote(registry.string())};
  const std::size_t L = anchors.front().context.n_layers();
  const std::size_t D = anchors.front().context.d_model();

  std::ofstream ctx = open_csv(out / "contexts.csv", meta);
  ctx << "task,module,layer";
  for (std::size_t d = 0; d < D; ++d) {
    ctx << ",v" << d;
  }
  ctx << "\n";
  for (const Anchor& a : anchors) {
    for (Module m : {Module::kMha, Module::kMlp, Module::kHidden}) {
      for (std::size_t l = 1; l <= L; ++l) {
        ctx << a.task_name << "," << to_string(m) << "," << l;
        const auto row = a.context.component(m, static_cast<int>(l));
        for (Eigen::Index d = 0; d < row.size(); ++d) {
          ctx << "," << row(d);
        }
        ctx << "\n";
      }
    }
  }
  finish_csv(ctx, out / "contexts.csv");

  std::ofstream coef = open_csv(out / "coefficients.csv", meta);
  coef << "task";
  for (std::size_t l = 1; l <= L; ++l) {
    for (const char* n : {"lambda_a", "beta_a", "lambda_m", "beta_m"}) {
      coef << "," << n << "_" << l;
    }
  }
  coef << "\n";
  for (const Anchor& a : anchors) {
    coef << a.task_name;
    for (double x : flatten(a.coefficients)) {
      coef << "," << x;
    }
    coef << "\n";
  }
  finish_csv(coef, out / "coefficients.csv");

  std::ofstream cos = open_csv(out / "cosine.csv", meta);
  cos << "task";
  for (const Anchor& a : anchors) {
    cos << "," << a.task_name;
  }
  cos << "\n";
  for (const Anchor& a : anchors) {
    cos << a.task_name;
    for (const Anchor& b : anchors) {
      cos << "," << cosine(flatten(a.coefficients), flatten(b.coefficients));
    }
    cos << "\n";
  }
  finish_csv(cos, out / "cosine.csv");
}

PretrainResult cmd_pretrain(const PretrainJob& job,
                            const std::function<void(const PretrainStep&)>& on_step) {
  if (job.out_path.empty()) {
    throw ConfigError("pretrain needs an output path");
  }
  const std::filesystem::path out = output_path(job.out_path);
  if (out.has_parent_path()) {
    std::filesystem::create_directories(out.parent_path());
  }
  const TaskFamily family{load_task_or_default(job.task_path)};
  PretrainResult r = meta_pretrain(job.model, family, job.family_seed, job.training, out, on_step);
  const ModelConfig& m = job.model;
  const PretrainConfig& t = job.training;
  const std::vector<std::string> meta{
      "weights_hash = " + r.weights.hash(),
      "model = L=" + std::to_string(m.n_layers) + " D=" + std::to_string(m.d_model) +
          " H=" + std::to_string(m.n_heads) + " d_mlp=" + std::to_string(m.d_mlp) +
          " V=" + std::to_string(m.vocab_size) + " T_max=" + std::to_string(m.max_seq) +
          " seed=" + std::to_string(m.seed),
      "training = steps=" + std::to_string(t.steps) + " batch=" + std::to_string(t.batch_size) +
          " seq_len=" + std::to_string(t.seq_len) + " lr=" + number(t.lr_start) + "->" +
          number(t.lr_end) + " warmup=" + std::to_string(t.warmup_steps) +
          " weight_decay=" + number(t.weight_decay) + " grad_clip=" + number(t.grad_clip) +
          " repeat_prob=" + number(t.repeat_prob),
      "family_seed = " + std::to_string(job.family_seed),
      "task = " + KeyValueConfig::quote(job.task_path.string()),
  };
  write_pretrain_log(r.history, out.string() + ".loss.csv", meta);
  return r;
}

}  // namespace i2cl
