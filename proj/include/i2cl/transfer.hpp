#pragma once

// Coefficients as task identifiers, and warm-starting a new task from the
// calibrated anchors it most resembles.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "i2cl/core.hpp"

namespace i2cl {

struct Anchor {
  std::string task_name;
  ContextVector context;
  CoefficientSet coefficients;
};

/// (lambda_a, beta_a, lambda_m, beta_m) per layer, ascending layer.
std::vector<double> flatten(const CoefficientSet& c);

/// Throws ConfigError on a zero-norm input or a length mismatch.
double cosine(const std::vector<double>& u, const std::vector<double>& v);

/// Softmax of similarities / tau. Throws ConfigError when empty or tau <= 0.
std::vector<double> transfer_weights(const std::vector<double>& similarities, double tau);

struct TransferOptions {
  double threshold = 0.8;
  double tau = 0.5;
  InjectionSites sites;
  CalibrationConfig calibration;
};

/// The retrieval half of transfer: similarities to every anchor, the retained
/// set, its weights and the weighted context and coefficients.
struct TransferPlan {
  std::vector<double> similarities;  // one per anchor
  std::vector<std::size_t> retained;
  std::vector<double> probabilities;  // aligned with `retained`
  ContextVector context;               // valid when retained is non-empty
  CoefficientSet coefficients;
};

TransferPlan plan_transfer(const CoefficientSet& calibrated, const std::vector<Anchor>& anchors,
                           double threshold, double tau);

struct TransferResult {
  CoefficientSet coefficients;
  ContextVector context;
  bool transferred = false;
  TransferPlan plan;
  CalibrationResult stage_one;
  ContextVector stage_one_context;
  std::optional<CalibrationResult> stage_two;
};

/// Vectorize and calibrate on the new demonstrations; when some anchors are
/// similar enough, recalibrate from their weighted average.
TransferResult transfer_learn(const Weights& weights, const std::vector<Anchor>& anchors,
                              const DemoSet& new_demos, const TransferOptions& options);

// Registry ----------------------------------------------------------------------
//
// One subdirectory per task holding context.bin, coefficients.bin and a
// manifest.txt (task_name, n_layers, d_model, seed, weights_hash).

void save_anchor(const Anchor& anchor, const std::filesystem::path& registry, std::uint64_t seed,
                 const std::string& weights_hash);

/// Anchors sorted by task name. With `weights_hash` set, anchors made from
/// another checkpoint are rejected; mixed shapes are always rejected.
std::vector<Anchor> load_registry(const std::filesystem::path& registry,
                                  const std::string& weights_hash = "");

}  // namespace i2cl
