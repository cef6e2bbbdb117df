#include "i2cl/baselines.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "i2cl/csv.hpp"
#include "i2cl/random.hpp"

namespace i2cl {

std::string to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::kZeroShot:
      return "ZERO_SHOT";
    case BaselineKind::kIcl:
      return "ICL";
    case BaselineKind::kIclPlusI2cl:
      return "ICL_PLUS_I2CL";
    case BaselineKind::kNoiseVector:
      return "NOISE_VECTOR";
    case BaselineKind::kTaskVector:
      return "TASK_VECTOR";
  }
  return "?";
}

BaselineKind parse_baseline_kind(const std::string& s) {
  for (BaselineKind k : {BaselineKind::kZeroShot, BaselineKind::kIcl, BaselineKind::kIclPlusI2cl,
                         BaselineKind::kNoiseVector, BaselineKind::kTaskVector}) {
    if (to_string(k) == s) {
      return k;
    }
  }
  throw ConfigError("unknown baseline '" + s + "'");
}

void BaselineSpec::validate() const {
  const bool wants_holdout = kind == BaselineKind::kTaskVector;
  const bool wants_seed = kind == BaselineKind::kNoiseVector;
  if (holdout_size.has_value() != wants_holdout) {
    throw ConfigError(to_string(kind) + (wants_holdout ? " needs" : " takes no") + " holdout_size");
  }
  if (noise_seed.has_value() != wants_seed) {
    throw ConfigError(to_string(kind) + (wants_seed ? " needs" : " takes no") + " noise seed");
  }
  if (holdout_size && *holdout_size < 1) {
    throw ConfigError("holdout_size must be >= 1");
  }
}

namespace {

std::string matrix_hash(const Matrix& m) {
  const std::string_view bytes(reinterpret_cast<const char*>(m.data()),
                               static_cast<std::size_t>(m.size()) * sizeof(double));
  std::ostringstream out;
  out << std::hex << fnv1a(bytes);
  return out.str();
}

std::string context_hash(const ContextVector& v) {
  return matrix_hash(v.attn) + matrix_hash(v.mlp) + matrix_hash(v.hidden);
}

std::string join_ints(const std::set<int>& xs) {
  std::string s;
  for (int x : xs) {
    s += (s.empty() ? "" : " ") + std::to_string(x);
  }
  return s.empty() ? "all" : s;
}

std::string join_modules(const std::set<Module>& ms) {
  std::string s;
  for (Module m : ms) {
    s += (s.empty() ? "" : " ") + to_string(m);
  }
  return s;
}

std::string number(double x) {
  std::ostringstream out;
  out.precision(17);
  out << x;
  return out.str();
}

std::size_t token_count(const std::string& s) { return Tokenizer::encode(s).size(); }

// The shared tail of I2CL, ICL+I2CL and the noise vector: calibrate the
// coefficients for `context` (unless given) and evaluate with the injection.
MethodResult injection_pipeline(const Weights& weights, const SyntheticTaskSpec& task,
                                const std::string& method, const std::string& vector_source,
                                const ContextVector& context, const DemoSet& calibrate_set,
                                const std::string& prefix,
                                const std::vector<Demonstration>& eval_set,
                                const I2clOptions& options,
                                const std::optional<CoefficientSet>& fixed) {
  const std::size_t L = static_cast<std::size_t>(weights.config.n_layers);
  const std::size_t D = static_cast<std::size_t>(weights.config.d_model);
  MethodResult r;
  r.method = method;
  r.context = context;

  InjectionPlan plan = options.sites.plan(context, default_init(L, options.calibration));
  if (fixed) {
    plan.coefficients = *fixed;
  } else {
    CalibrationResult cal = calibrate(weights, calibration_prompts(calibrate_set, prefix), plan,
                                      options.calibration);
    plan.coefficients = cal.coefficients;
    r.calibration = std::move(cal);
  }
  r.eval = evaluate(weights, eval_set, task.classes, task.format, prefix, &plan);
  r.tokens_per_query = r.eval.mean_prompt_tokens;
  const std::size_t M = token_count(prefix);
  r.cached_scalars = i2cl_cost(0, D, L).cached_scalars + icl_cost(M, 0, D, L).cached_scalars;

  const CalibrationConfig& c = options.calibration;
  r.audit = {
      {"method", method},
      {"vector_source", vector_source},
      {"context_hash", context_hash(context)},
      {"modules", join_modules(plan.target_modules)},
      {"layers", join_ints(options.sites.layers)},
      {"positions", to_string(plan.target_positions)},
      {"formula", to_string(plan.formula)},
      {"calibration", fixed ? "fixed" : "calibrated"},
      {"calibration_demos", std::to_string(calibrate_set.demos.size())},
      {"epochs", std::to_string(c.epochs)},
      {"lr", number(c.lr_start) + " " + number(c.lr_end)},
      {"gamma", number(c.gamma)},
      {"init", number(c.init_lambda) + " " + number(c.init_beta)},
      {"weight_decay", number(c.weight_decay)},
      {"calibration_seed", std::to_string(c.seed)},
      {"prefix_tokens", std::to_string(M)},
      {"eval_queries", std::to_string(eval_set.size())},
      {"coefficients_hash", matrix_hash(plan.coefficients.values)},
  };
  return r;
}

}  // namespace

std::string icl_prefix(const DemoSet& demos) {
  std::string s;
  for (const Demonstration& d : demos.demos) {
    s += demos.format.render(d.x, d.y) + "\n";
  }
  return s;
}

MethodResult run_zero_shot(const Weights& weights, const SyntheticTaskSpec& task,
                           const std::vector<Demonstration>& eval_set) {
  MethodResult r;
  r.method = "ZERO_SHOT";
  r.eval = evaluate(weights, eval_set, task.classes, task.format);
  r.tokens_per_query = r.eval.mean_prompt_tokens;
  r.audit = {{"method", r.method}, {"eval_queries", std::to_string(eval_set.size())}};
  return r;
}

MethodResult run_icl(const Weights& weights, const SyntheticTaskSpec& task, const DemoSet& demos,
                     const std::vector<Demonstration>& eval_set) {
  const std::string prefix = icl_prefix(demos);
  MethodResult r;
  r.method = "ICL";
  r.eval = evaluate(weights, eval_set, task.classes, task.format, prefix);
  r.tokens_per_query = r.eval.mean_prompt_tokens;
  const std::size_t M = token_count(prefix);
  r.cached_scalars = icl_cost(M, 0, static_cast<std::size_t>(weights.config.d_model),
                              static_cast<std::size_t>(weights.config.n_layers))
                         .cached_scalars;
  r.audit = {{"method", r.method},
             {"prefix_tokens", std::to_string(M)},
             {"eval_queries", std::to_string(eval_set.size())}};
  return r;
}

MethodResult run_i2cl(const Weights& weights, const SyntheticTaskSpec& task,
                      const DemoSet& vectorize_set, const DemoSet& calibrate_set,
                      const std::vector<Demonstration>& eval_set, const I2clOptions& options) {
  return injection_pipeline(weights, task, "I2CL", "demonstrations",
                            build_context(weights, vectorize_set), calibrate_set, "", eval_set,
                            options, std::nullopt);
}

MethodResult run_icl_plus_i2cl(const Weights& weights, const SyntheticTaskSpec& task,
                               const DemoSet& demos, const std::vector<Demonstration>& eval_set,
                               const I2clOptions& options,
                               const std::optional<CoefficientSet>& coefficients) {
  return injection_pipeline(weights, task, "ICL_PLUS_I2CL", "demonstrations",
                            build_context(weights, demos), demos, icl_prefix(demos), eval_set,
                            options, coefficients);
}

MethodResult run_noise_vector(const Weights& weights, const SyntheticTaskSpec& task,
                              const DemoSet& demos, const std::vector<Demonstration>& eval_set,
                              std::uint64_t noise_seed, const I2clOptions& options) {
  const auto L = static_cast<Eigen::Index>(weights.config.n_layers);
  const auto D = static_cast<Eigen::Index>(weights.config.d_model);
  Pcg64 rng = Pcg64::named(noise_seed, "noise-vector");
  auto draw = [&] {
    Matrix m(L, D);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = rng.normal();
    }
    return m;
  };
  ContextVector noise;
  noise.attn = draw();
  noise.mlp = draw();
  noise.hidden = draw();
  noise.source_count = 1;
  return injection_pipeline(weights, task, "NOISE_VECTOR", "noise:" + std::to_string(noise_seed),
                            noise, demos, "", eval_set, options, std::nullopt);
}

MethodResult run_task_vector(const Weights& weights, const SyntheticTaskSpec& task,
                             const DemoSet& demos, const std::vector<Demonstration>& holdout,
                             const std::vector<Demonstration>& eval_set,
                             std::uint64_t dummy_seed) {
  if (holdout.empty()) {
    throw ConfigError("task vector: empty holdout set");
  }
  std::set<std::string> taken;
  for (const Demonstration& d : eval_set) {
    taken.insert(d.x);
  }
  for (const Demonstration& d : demos.demos) {
    taken.insert(d.x);
  }
  for (const Demonstration& d : holdout) {
    if (taken.count(d.x)) {
      throw ConfigError("task vector: holdout overlaps the demonstrations or eval set at '" + d.x +
                        "'");
    }
  }

  const int L = weights.config.n_layers;
  const std::string prefix = icl_prefix(demos);
  Pcg64 rng = Pcg64::named(dummy_seed, "task-vector-dummy");
  const int cls = static_cast<int>(rng.below(task.classes.size()));
  const std::string dummy = prefix + task.format.render_query(sample_input(task, cls, rng));
  const ForwardResult f =
      forward(weights, Tokenizer::encode(dummy), nullptr, TraceRequest::end_hidden(L));

  ContextVector v;
  v.attn = Matrix::Zero(L, weights.config.d_model);
  v.mlp = v.attn;
  v.hidden = v.attn;
  for (int l = 1; l <= L; ++l) {
    v.hidden.row(l - 1) = f.trace.at({l, Module::kHidden, kEndPosition});
  }
  v.source_count = std::max<std::size_t>(1, demos.demos.size());

  // HIDDEN replacement uses the attention slots: lambda 1, beta 0.
  CoefficientSet replace = CoefficientSet::uniform(static_cast<std::size_t>(L), 0.0, 1.0);
  replace.values.col(CoefficientSet::kLambdaAttn).setOnes();
  replace.values.col(CoefficientSet::kBetaAttn).setZero();
  auto plan_for = [&](int layer) {
    InjectionPlan p = InjectionPlan::standard(v, replace);
    p.target_modules = {Module::kHidden};
    p.target_layers = {layer};
    p.target_positions = PositionMode::kLast;
    return p;
  };

  int best = 1;
  double best_acc = -1.0;
  std::string scores;
  for (int l = 1; l <= L; ++l) {
    const InjectionPlan p = plan_for(l);
    const double acc = evaluate(weights, holdout, task.classes, task.format, "", &p).accuracy;
    scores += (scores.empty() ? "" : " ") + number(acc);
    if (acc > best_acc) {
      best_acc = acc;
      best = l;
    }
  }

  const InjectionPlan p = plan_for(best);
  MethodResult r;
  r.method = "TASK_VECTOR";
  r.context = v;
  r.chosen_layer = best;
  r.eval = evaluate(weights, eval_set, task.classes, task.format, "", &p);
  r.tokens_per_query = r.eval.mean_prompt_tokens;
  r.cached_scalars = static_cast<std::size_t>(weights.config.d_model);
  r.audit = {{"method", r.method},
             {"dummy_query", dummy.substr(prefix.size())},
             {"holdout_accuracy", scores},
             {"chosen_layer", std::to_string(best)},
             {"eval_queries", std::to_string(eval_set.size())}};
  return r;
}

MethodResult run_baseline(const BaselineSpec& spec, const Weights& weights,
                          const SyntheticTaskSpec& task, const DemoSet& demos,
                          const std::vector<Demonstration>& holdout,
                          const std::vector<Demonstration>& eval_set, const I2clOptions& options,
                          std::uint64_t seed) {
  spec.validate();
  switch (spec.kind) {
    case BaselineKind::kZeroShot:
      return run_zero_shot(weights, task, eval_set);
    case BaselineKind::kIcl:
      return run_icl(weights, task, demos, eval_set);
    case BaselineKind::kIclPlusI2cl:
      return run_icl_plus_i2cl(weights, task, demos, eval_set, options);
    case BaselineKind::kNoiseVector:
      return run_noise_vector(weights, task, demos, eval_set, *spec.noise_seed, options);
    case BaselineKind::kTaskVector: {
      if (static_cast<int>(holdout.size()) < *spec.holdout_size) {
        throw ConfigError("task vector: holdout has " + std::to_string(holdout.size()) +
                          " examples, " + std::to_string(*spec.holdout_size) + " requested");
      }
      const std::vector<Demonstration> h(holdout.begin(), holdout.begin() + *spec.holdout_size);
      return run_task_vector(weights, task, demos, h, eval_set, seed);
    }
  }
  throw ConfigError("unknown baseline kind");
}

ResultRow result_row(const MethodResult& r, const std::string& task, std::uint64_t seed) {
  return {r.method, task, seed, r.eval.accuracy, r.tokens_per_query, r.cached_scalars};
}

void append_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path,
                    const std::vector<std::string>& metadata) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out;
  if (fresh) {
    out = open_csv(path, metadata);
    out << "method,task,seed,accuracy,tokens_per_query,cached_scalars\n";
  } else {
    out.open(path, std::ios::app);
    if (!out) {
      throw Error("cannot append to '" + path.string() + "'");
    }
    out.precision(17);
  }
  for (const ResultRow& r : rows) {
    out << r.method << "," << r.task << "," << r.seed << "," << r.accuracy << ","
        << r.tokens_per_query << "," << r.cached_scalars << "\n";
  }
  finish_csv(out, path);
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read '" + path.string() + "'");
  }
  std::vector<ResultRow> rows;
  std::string line;
  bool header = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') {
      continue;
    }
    if (!header) {
      if (line != "method,task,seed,accuracy,tokens_per_query,cached_scalars") {
        throw FormatError(path.string() + ":" + std::to_string(line_no) + ": unexpected header");
      }
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::vector<std::string> f;
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      f.push_back(cell);
    }
    if (f.size() != 6) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected 6 fields");
    }
    try {
      rows.push_back({f[0], f[1], std::stoull(f[2]), std::stod(f[3]), std::stod(f[4]),
                      static_cast<std::size_t>(std::stoull(f[5]))});
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
  }
  return rows;
}

}  // namespace i2cl
