#pragma once

// Meta-pretraining: next-token prediction over packed sequences of templated
// demonstrations, each sequence drawn from a fresh task of the family, so the
// only way to predict a label is to read the mapping off earlier pairs.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "i2cl/model.hpp"
#include "i2cl/taskgen.hpp"

namespace i2cl {

struct PretrainConfig {
  int steps = 8000;
  int batch_size = 16;
  int seq_len = 160;
  double lr_start = 2e-3;
  double lr_end = 2e-5;
  int warmup_steps = 100;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  // Chance that a demonstration repeats an earlier input of the same
  // sequence. Exact repeats are solvable by copying, which gets induction
  // going long before class-level matching would on its own.
  double repeat_prob = 0.5;

  void validate() const;
};

struct PretrainStep {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct PretrainResult {
  Weights weights;
  std::vector<PretrainStep> history;
};

/// seq_len + 1 tokens of newline-joined demonstrations from one sampled task.
std::vector<TokenId> pretraining_sequence(const TaskFamily& family, int seq_len,
                                          double repeat_prob, Pcg64& rng);

/// Trains from init_weights(model) with AdamW under linear warmup then cosine
/// decay. Writes the checkpoint to out_path when it is non-empty. Aborts with
/// NumericError on a non-finite loss.
PretrainResult meta_pretrain(const ModelConfig& model, const TaskFamily& family,
                             std::uint64_t task_family_seed, const PretrainConfig& config,
                             const std::filesystem::path& out_path = {},
                             const std::function<void(const PretrainStep&)>& on_step = {});

/// `step,lr,loss`.
void write_pretrain_log(const std::vector<PretrainStep>& history, const std::filesystem::path& path,
                        const std::vector<std::string>& metadata = {});

}  // namespace i2cl
