#pragma once

// The implicit in-context learning pipeline: vectorize each demonstration
// independently, average into a context vector, calibrate the 4L injection
// coefficients under stream noise, then score labels with the injection
// active.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "i2cl/instrumentation.hpp"
#include "i2cl/model.hpp"
#include "i2cl/taskgen.hpp"
#include "i2cl/vectors.hpp"

namespace i2cl {

struct CalibrationConfig {
  int epochs = 100;
  double lr_start = 1e-2;
  double lr_end = 1e-5;
  double gamma = 1e-3;
  double init_lambda = 0.1;
  double init_beta = 1.0;
  double weight_decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  /// epochs >= 0, lr_start >= lr_end > 0, gamma >= 0.
  void validate() const;
};

/// Where and how an injection is applied; everything of an InjectionPlan
/// except the vector, the coefficients and the noise.
struct InjectionSites {
  std::set<Module> modules{Module::kMha, Module::kMlp};
  std::set<int> layers;  // empty means every layer
  PositionMode positions = PositionMode::kAll;
  Formula formula = Formula::kLinearCombo;

  InjectionPlan plan(const ContextVector& v, const CoefficientSet& c) const;
};

/// A scoring context and the label continuation whose log-probability is
/// summed.
struct LabeledPrompt {
  std::string prompt;
  std::string label;
};

/// One clean forward over the rendered demonstration, keeping the end-token
/// MHA and MLP outputs (and the post-block hidden state) of every layer.
DemonstrationVector vectorize_demo(const Weights& weights, const std::string& rendered);

/// Element-wise mean. Vectors are summed in ascending order of a content
/// hash, so every permutation of the input gives bit-identical output.
ContextVector aggregate(const std::vector<DemonstrationVector>& vectors);

/// vectorize_demo over every demonstration of `set`, then aggregate.
ContextVector build_context(const Weights& weights, const DemoSet& set);

/// Sum over the label's tokens of the teacher-forced log-probability,
/// conditioned on `prompt` and the injection when `plan` is given.
double label_logprob(const Weights& weights, const std::string& prompt, const std::string& label,
                     const InjectionPlan* plan = nullptr);

/// label_logprob for every label, sharing forward passes where possible.
std::vector<double> label_logprobs(const Weights& weights, const std::string& prompt,
                                   const std::vector<std::string>& labels,
                                   const InjectionPlan* plan = nullptr);

/// Index of the most probable label; ties go to the lowest index.
std::size_t argmax_label(const std::vector<double>& logprobs);

std::string predict(const Weights& weights, const std::string& prompt,
                    const std::vector<std::string>& labels, const InjectionPlan* plan = nullptr);

/// Loss -(1/N) sum_i log P(label_i | prompt_i) under `plan` and its gradient
/// with respect to the plan's coefficients (L x 4). With plan.noise_gamma > 0
/// the forwards of prompt i draw noise from a stream keyed by
/// (plan.noise_seed, i), so equal seeds see equal perturbations.
struct LossAndGradient {
  double loss = 0.0;
  Matrix gradient;
};

LossAndGradient calibration_loss(const Weights& weights, const std::vector<LabeledPrompt>& prompts,
                                 const InjectionPlan& plan);

struct CalibrationEpoch {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct CalibrationResult {
  CoefficientSet coefficients;
  std::vector<CalibrationEpoch> history;
  /// Coefficients after every epoch.
  std::vector<CoefficientSet> trajectory;
};

/// Full-batch AdamW over the coefficients of `plan` (its context stays
/// frozen and the weights are only read). The plan's coefficients are the
/// starting point. ADD_ONLY lambdas and CONVEX_SCALED betas are optimised
/// through a softplus so they stay positive. Noise is redrawn every epoch.
CalibrationResult calibrate(const Weights& weights, const std::vector<LabeledPrompt>& prompts,
                            const InjectionPlan& plan, const CalibrationConfig& config);

/// Demonstrations as calibration targets: the query rendering of x with y as
/// the label, optionally behind a fixed prefix.
std::vector<LabeledPrompt> calibration_prompts(const DemoSet& set, const std::string& prefix = "");

/// Coefficients every calibration starts from by default.
CoefficientSet default_init(std::size_t n_layers, const CalibrationConfig& config);

// Evaluation ----------------------------------------------------------------

struct QueryRecord {
  int query_id = 0;
  std::string gold;
  std::string pred;
  std::vector<double> logprobs;  // in label order
  int prompt_tokens = 0;
};

struct Evaluation {
  double accuracy = 0.0;
  std::vector<QueryRecord> records;
  double mean_prompt_tokens = 0.0;
};

/// Scores every query (rendered with `format`, behind `prefix`) against all
/// labels. The token counter is the number of prompt tokens processed.
Evaluation evaluate(const Weights& weights, const std::vector<Demonstration>& queries,
                    const std::vector<std::string>& labels, const Template& format,
                    const std::string& prefix = "", const InjectionPlan* plan = nullptr);

/// `query_id,gold,pred,logprob_<label>...` with optional leading '#' metadata lines.
void write_query_csv(const Evaluation& eval, const std::vector<std::string>& labels,
                     const std::filesystem::path& path,
                     const std::vector<std::string>& metadata = {});

/// `epoch,lr,loss`.
void write_loss_csv(const std::vector<CalibrationEpoch>& history,
                    const std::filesystem::path& path,
                    const std::vector<std::string>& metadata = {});

// Cost accounting -------------------------------------------------------------

struct CostCounters {
  std::size_t tokens_per_query = 0;
  std::size_t cached_scalars = 0;
};

/// Injection state kept between queries: 2 context vectors per layer plus 4L
/// coefficients.
CostCounters i2cl_cost(std::size_t query_tokens, std::size_t d_model, std::size_t n_layers);
/// Key and value vectors of the M demonstration tokens at every layer.
CostCounters icl_cost(std::size_t demo_tokens, std::size_t query_tokens, std::size_t d_model,
                      std::size_t n_layers);

}  // namespace i2cl
