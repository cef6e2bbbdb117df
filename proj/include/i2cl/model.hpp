#pragma once

// Pre-norm decoder-only transformer with an explicit residual stream:
//   o_l = r_{l-1} + a_l,   a_l = MHA(LN1(r_{l-1}))
//   r_l = o_l + m_l,       m_l = MLP(LN2(o_l))
// Every addition can be replaced by the injection rule of an InjectionPlan.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "i2cl/autodiff.hpp"
#include "i2cl/instrumentation.hpp"
#include "i2cl/tensor.hpp"

namespace i2cl {

using TokenId = int;

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 97;
  int max_seq = 512;
  std::uint64_t seed = 0;

  void validate() const;
  /// Closed-form parameter count of the layout in Weights.
  std::size_t parameter_count() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix ln1_gain, ln1_bias;
  Matrix w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
  Matrix ln2_gain, ln2_bias;
  Matrix w_up, b_up, w_down, b_down;
};

/// All trainable arrays. Bias and gain vectors are stored as 1 x n matrices.
struct Weights {
  ModelConfig config;
  Matrix token_embedding;     // V x D
  Matrix position_embedding;  // T_max x D
  std::vector<LayerWeights> layers;
  Matrix final_gain, final_bias;
  Matrix unembedding;  // D x V

  /// Visits every array in file order with its canonical name.
  void for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const;
  void for_each(const std::function<void(const std::string&, Matrix&)>& fn);

  std::size_t parameter_count() const;
  /// FNV-1a over the raw bytes of every array, as 16 hex digits.
  std::string hash() const;
  void validate() const;
  bool operator==(const Weights& other) const;
};

/// Names and shapes of all arrays for `config`, in file order.
std::vector<std::pair<std::string, std::pair<int, int>>> weight_layout(const ModelConfig& config);

/// Deterministic init: N(0, 0.02) projections/embeddings, zero biases, unit gains.
Weights init_weights(const ModelConfig& config);

/// Little-endian "I2CLW1" container.
void save_weights(const Weights& weights, const std::filesystem::path& path);
/// Loads a weight file; when `expected` is given, every array is checked
/// against its layout and the first mismatch is reported by name.
Weights load_weights(const std::filesystem::path& path,
                     const std::optional<ModelConfig>& expected = std::nullopt);

/// Character tokenizer over printable ASCII plus newline; id 0 is padding
/// (decoded as '\0').
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kNewline = 1;
  static constexpr int kVocabSize = 97;

  static std::vector<TokenId> encode(std::string_view text);
  static std::string decode(const std::vector<TokenId>& ids);
  static TokenId id(char c);
  static bool representable(std::string_view text);
};

/// Tape leaves for the weights, either frozen or trainable.
struct WeightVars {
  struct Layer {
    Var ln1_gain, ln1_bias, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    Var ln2_gain, ln2_bias, w_up, b_up, w_down, b_down;
  };
  Var token_embedding, position_embedding;
  std::vector<Layer> layers;
  Var final_gain, final_bias, unembedding;

  /// All leaves in Weights::for_each order.
  std::vector<Var> all() const;
};

/// Binds without copying; `weights` must outlive the tape.
WeightVars bind_weights(Tape<double>& tape, const Weights& weights, bool trainable);

/// Per-layer coefficient leaves (lambda_a, beta_a, lambda_m, beta_m).
struct CoefficientVars {
  std::vector<std::array<Var, 4>> layers;
};

CoefficientVars bind_coefficients(Tape<double>& tape, const CoefficientSet& c, bool trainable);

struct TapedForward {
  Var logits;
  ActivationTrace trace;
  std::vector<bool> injected_rows;
};

/// Builds the forward graph on `tape`. When `plan` is set its additions
/// replace plain residual additions; `coefficients` overrides the plan's
/// scalars with taped leaves (calibration). Noise, when the plan carries a
/// positive gamma, is drawn from the plan's seeded stream.
TapedForward forward_on_tape(Tape<double>& tape, const Weights& weights, const WeightVars& vars,
                             const std::vector<TokenId>& tokens, const InjectionPlan* plan,
                             const CoefficientVars* coefficients, const TraceRequest& trace);

struct ForwardResult {
  Matrix logits;  // T x V
  ActivationTrace trace;
  std::vector<bool> injected_rows;
};

/// Inference forward pass (no gradients recorded).
ForwardResult forward(const Weights& weights, const std::vector<TokenId>& tokens,
                      const InjectionPlan* plan = nullptr, const TraceRequest& trace = {});

}  // namespace i2cl
