#pragma once

// Reference methods on the shared evaluation harness. Every method returns the
// same record shape so sweeps can write one results table.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "i2cl/core.hpp"

namespace i2cl {

enum class BaselineKind { kZeroShot, kIcl, kIclPlusI2cl, kNoiseVector, kTaskVector };

std::string to_string(BaselineKind k);
BaselineKind parse_baseline_kind(const std::string& s);

struct BaselineSpec {
  BaselineKind kind = BaselineKind::kZeroShot;
  std::optional<int> holdout_size;           // TASK_VECTOR only
  std::optional<std::uint64_t> noise_seed;   // NOISE_VECTOR only

  static BaselineSpec zero_shot() { return {BaselineKind::kZeroShot, {}, {}}; }
  static BaselineSpec icl() { return {BaselineKind::kIcl, {}, {}}; }
  static BaselineSpec icl_plus_i2cl() { return {BaselineKind::kIclPlusI2cl, {}, {}}; }
  static BaselineSpec noise_vector(std::uint64_t seed) {
    return {BaselineKind::kNoiseVector, {}, seed};
  }
  static BaselineSpec task_vector(int holdout = 32) {
    return {BaselineKind::kTaskVector, holdout, {}};
  }

  /// Parameters are present exactly when the kind needs them.
  void validate() const;
};

/// Ordered key/value record of what a run actually executed.
using AuditLog = std::map<std::string, std::string>;

struct MethodResult {
  std::string method;
  Evaluation eval;
  double tokens_per_query = 0.0;  // mean prompt tokens per query
  std::size_t cached_scalars = 0;
  std::optional<ContextVector> context;
  std::optional<CalibrationResult> calibration;
  std::optional<int> chosen_layer;  // task vector
  AuditLog audit;
};

struct I2clOptions {
  InjectionSites sites;
  CalibrationConfig calibration;
};

/// Demonstrations rendered with their format, newline-joined, plus a trailing
/// newline so the query starts on its own line. Empty for no demos.
std::string icl_prefix(const DemoSet& demos);

MethodResult run_zero_shot(const Weights& weights, const SyntheticTaskSpec& task,
                           const std::vector<Demonstration>& eval_set);

MethodResult run_icl(const Weights& weights, const SyntheticTaskSpec& task, const DemoSet& demos,
                     const std::vector<Demonstration>& eval_set);

/// Vectorizes `vectorize_set`, calibrates on `calibrate_set`, evaluates.
MethodResult run_i2cl(const Weights& weights, const SyntheticTaskSpec& task,
                      const DemoSet& vectorize_set, const DemoSet& calibrate_set,
                      const std::vector<Demonstration>& eval_set, const I2clOptions& options);

inline MethodResult run_i2cl(const Weights& weights, const SyntheticTaskSpec& task,
                             const DemoSet& demos, const std::vector<Demonstration>& eval_set,
                             const I2clOptions& options) {
  return run_i2cl(weights, task, demos, demos, eval_set, options);
}

/// Demonstrations stay in the prompt during calibration and inference.
/// `coefficients` given: skip calibration and use them as-is.
MethodResult run_icl_plus_i2cl(const Weights& weights, const SyntheticTaskSpec& task,
                               const DemoSet& demos, const std::vector<Demonstration>& eval_set,
                               const I2clOptions& options,
                               const std::optional<CoefficientSet>& coefficients = std::nullopt);

/// The I2CL pipeline with a standard-normal context vector in place of the
/// vectorized demonstrations.
MethodResult run_noise_vector(const Weights& weights, const SyntheticTaskSpec& task,
                              const DemoSet& demos, const std::vector<Demonstration>& eval_set,
                              std::uint64_t noise_seed, const I2clOptions& options);

/// Hidden state of a dummy query behind the concatenated demonstrations,
/// patched into the zero-shot query at the last position of one layer. The
/// layer is picked by holdout accuracy, ties to the lowest layer.
/// `dummy_seed` draws the dummy query from the task's input distribution.
MethodResult run_task_vector(const Weights& weights, const SyntheticTaskSpec& task,
                             const DemoSet& demos, const std::vector<Demonstration>& holdout,
                             const std::vector<Demonstration>& eval_set, std::uint64_t dummy_seed);

/// Dispatch on a BaselineSpec. `holdout` is only read by TASK_VECTOR.
MethodResult run_baseline(const BaselineSpec& spec, const Weights& weights,
                          const SyntheticTaskSpec& task, const DemoSet& demos,
                          const std::vector<Demonstration>& holdout,
                          const std::vector<Demonstration>& eval_set, const I2clOptions& options,
                          std::uint64_t seed);

struct ResultRow {
  std::string method;
  std::string task;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double tokens_per_query = 0.0;
  std::size_t cached_scalars = 0;
};

ResultRow result_row(const MethodResult& r, const std::string& task, std::uint64_t seed);

/// `method,task,seed,accuracy,tokens_per_query,cached_scalars`; rows are
/// appended and the header (after any metadata) is written only for a new file.
void append_results(const std::vector<ResultRow>& rows, const std::filesystem::path& path,
                    const std::vector<std::string>& metadata = {});

std::vector<ResultRow> read_results(const std::filesystem::path& path);

}  // namespace i2cl
