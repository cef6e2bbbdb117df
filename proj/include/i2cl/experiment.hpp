#pragma once

// Experiment plumbing behind the command-line tool: resolved configs, one
// method run per (method, seed), result tables, sweeps, anchors and exports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "i2cl/baselines.hpp"
#include "i2cl/kv_config.hpp"
#include "i2cl/pretrain.hpp"
#include "i2cl/transfer.hpp"

namespace i2cl {

/// Method names accepted on the command line, e.g. "zero_shot" or "i2cl".
enum class Method { kZeroShot, kIcl, kI2cl, kIclPlusI2cl, kNoiseVector, kTaskVector };

Method parse_method(const std::string& s);
/// Upper-case name used in result tables.
std::string method_label(Method m);

/// "MHA", "MLP", "MHA+MLP" (or "MHA,MLP"), "HIDDEN".
std::set<Module> parse_modules(const std::string& s);
/// EARLY / MIDDLE / LATE / ALL or an explicit 1-based list such as "1,3".
/// Layer l belongs to third floor(3(l-1)/L); an empty preset is an error.
std::set<int> resolve_layers(const std::string& s, int n_layers);

struct ExperimentConfig {
  std::filesystem::path model_path;
  std::filesystem::path task_path;  // empty: the default synthetic task
  std::filesystem::path output_dir = "runs";
  std::vector<std::string> methods{"zero_shot", "icl", "i2cl"};
  std::vector<std::uint64_t> seeds{1};
  int demos_per_class = 5;  // vectorize + calibrate set
  int shots = 5;            // ICL prompt: the first `shots` of that set
  int eval_size = 200;
  int holdout_size = 32;
  std::string modules = "MHA+MLP";
  std::string layers = "ALL";
  std::string positions = "ALL";
  std::string formula = "LINEAR_COMBO";
  std::string corrupt_vectorize = "NONE";
  std::string corrupt_calibrate = "NONE";
  CalibrationConfig calibration;
  int jobs = 1;

  void validate() const;
  /// Every field as key/value text, for artifact metadata.
  KeyValueConfig resolved() const;
};

/// Data for one seed: the task instance and its demonstration sets.
struct SeedSetup {
  SyntheticTaskSpec task;
  Dataset data;
  DemoSet demos;      // demos_per_class per class
  DemoSet icl_demos;  // first `shots` of `demos`
  DemoSet vectorize;  // demos after the vectorize corruption
  DemoSet calibrate;  // demos after the calibrate corruption
};

SyntheticTaskSpec load_task_or_default(const std::filesystem::path& path);
SeedSetup prepare_seed(const SyntheticTaskSpec& task, const ExperimentConfig& config,
                       std::uint64_t seed);
I2clOptions i2cl_options(const ExperimentConfig& config, std::uint64_t seed, int n_layers);

MethodResult run_method(const Weights& weights, const SeedSetup& setup,
                        const ExperimentConfig& config, Method method, std::uint64_t seed);

/// Metadata lines embedded in every artifact: resolved config + weights hash.
std::vector<std::string> artifact_metadata(const ExperimentConfig& config, const Weights& weights);

/// Relative paths resolve under $I2CL_OUTPUT_ROOT when it is set.
std::filesystem::path output_path(const std::filesystem::path& p);

struct SummaryRow {
  std::string method;
  std::string task;
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for n = 1
};

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);
void write_summary(const std::vector<SummaryRow>& rows, const std::filesystem::path& path,
                   const std::vector<std::string>& metadata = {});

// Commands ----------------------------------------------------------------------

/// Runs every method for every seed. Appends to results.csv, rewrites
/// summary.csv from the whole results file, writes per-query and loss CSVs
/// and wall-clock timings. Returns the rows of this invocation.
std::vector<ResultRow> cmd_eval(const ExperimentConfig& config);

struct SweepSpec {
  std::string axis;  // demos, gamma, modules, layers, positions, formula
  std::vector<std::string> values;
};

/// Row tag for a sweep value: the ablation row names (e.g. "MHA+MLP",
/// "Hidden state", "Early", "Last", "gamma=0.001").
std::string sweep_tag(const std::string& axis, const std::string& value);

/// One eval per (value, seed) for each configured method; rows are tagged
/// "METHOD[tag]" and written in grid order.
std::vector<ResultRow> cmd_sweep(const ExperimentConfig& config, const SweepSpec& sweep);

/// Calibrates one anchor per seed and stores it under `registry`.
std::vector<Anchor> cmd_calibrate(const ExperimentConfig& config,
                                  const std::filesystem::path& registry,
                                  const std::string& anchor_name);

/// Transfer onto the configured task from the registry, per seed; writes
/// transfer.csv and result rows for plain and transferred I2CL.
std::vector<ResultRow> cmd_transfer(const ExperimentConfig& config,
                                    const std::filesystem::path& registry,
                                    const TransferOptions& options);

/// contexts.csv, coefficients.csv and the pairwise cosine matrix cosine.csv.
void cmd_export(const std::filesystem::path& registry, const std::filesystem::path& out_dir);

struct PretrainJob {
  ModelConfig model;
  PretrainConfig training;
  std::uint64_t family_seed = 1;
  std::filesystem::path task_path;  // base task of the family; empty = default
  std::filesystem::path out_path;
};

PretrainResult cmd_pretrain(const PretrainJob& job,
                            const std::function<void(const PretrainStep&)>& on_step = {});

}  // namespace i2cl
