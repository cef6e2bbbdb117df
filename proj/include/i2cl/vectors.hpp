#pragma once

// Per-layer activation summaries and injection coefficients.
//
// All per-layer quantities are stored as L x D matrices whose row l holds the
// vector for layer l+1, so whole-set arithmetic stays a single Eigen
// expression.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "i2cl/error.hpp"
#include "i2cl/tensor.hpp"

namespace i2cl {

/// Residual-stream writers that can be captured or injected.
enum class Module { kMha, kMlp, kHidden };

std::string to_string(Module m);
Module parse_module(const std::string& s);

/// End-token activations of one demonstration: per layer MHA output, MLP
/// output, and post-block hidden state.
struct DemonstrationVector {
  Matrix attn;
  Matrix mlp;
  Matrix hidden;

  std::size_t n_layers() const { return static_cast<std::size_t>(attn.rows()); }
  std::size_t d_model() const { return static_cast<std::size_t>(attn.cols()); }
};

/// Element-wise mean of demonstration vectors.
struct ContextVector {
  Matrix attn;
  Matrix mlp;
  Matrix hidden;
  std::size_t source_count = 0;

  std::size_t n_layers() const { return static_cast<std::size_t>(attn.rows()); }
  std::size_t d_model() const { return static_cast<std::size_t>(attn.cols()); }

  /// Row for `module` at 1-based `layer`.
  auto component(Module module, int layer) const {
    const Matrix& m = module == Module::kMha ? attn : module == Module::kMlp ? mlp : hidden;
    return m.row(layer - 1);
  }

  void validate() const;
  bool operator==(const ContextVector& other) const;
};

/// The 4L injection scalars; row l is (lambda_attn, beta_attn, lambda_mlp,
/// beta_mlp) for layer l+1.
struct CoefficientSet {
  Matrix values;

  static constexpr int kLambdaAttn = 0;
  static constexpr int kBetaAttn = 1;
  static constexpr int kLambdaMlp = 2;
  static constexpr int kBetaMlp = 3;

  static CoefficientSet uniform(std::size_t n_layers, double lambda, double beta);

  std::size_t n_layers() const { return static_cast<std::size_t>(values.rows()); }
  double lambda(Module m, int layer) const;
  double beta(Module m, int layer) const;

  void validate() const;
  bool operator==(const CoefficientSet& other) const;
};

// Files: "I2CLV1" / "I2CLC1" containers with a (L, D) u32 header followed by
// little-endian f64 arrays. Context files hold attn, mlp, hidden (each L x D)
// and then the source count as one f64; coefficient files hold the 4L values
// in flatten order.

void save_context(const ContextVector& v, const std::filesystem::path& path);
ContextVector load_context(const std::filesystem::path& path);
void save_coefficients(const CoefficientSet& c, std::size_t d_model,
                       const std::filesystem::path& path);
/// `d_model` receives the header's D when non-null.
CoefficientSet load_coefficients(const std::filesystem::path& path,
                                 std::size_t* d_model = nullptr);

}  // namespace i2cl
