#pragma once

// Residual-stream read/write: trace capture points, the linear injection
// rule, and norm-scaled Gaussian perturbation used during calibration.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "i2cl/autodiff.hpp"
#include "i2cl/random.hpp"
#include "i2cl/vectors.hpp"

namespace i2cl {

/// Symbolic position: the final token of the sequence.
inline constexpr int kEndPosition = -1;
/// Symbolic position: every token of the sequence (requests only).
inline constexpr int kAllPositions = -2;

struct TracePoint {
  int layer = 1;  // 1-based
  Module module = Module::kMha;
  int position = kEndPosition;

  auto operator<=>(const TracePoint&) const = default;
};

/// Which activations a forward pass should record.
struct TraceRequest {
  std::vector<TracePoint> points;

  bool empty() const { return points.empty(); }

  /// MHA and MLP outputs at END for every layer.
  static TraceRequest end_token(int n_layers);
  /// MHA and MLP outputs at every position for every layer.
  static TraceRequest full(int n_layers);
  /// Post-block hidden state at END for every layer.
  static TraceRequest end_hidden(int n_layers);
};

/// Captured vectors keyed by concrete (resolved) position.
class ActivationTrace {
 public:
  ActivationTrace() = default;
  explicit ActivationTrace(int sequence_length) : sequence_length_(sequence_length) {}

  int sequence_length() const { return sequence_length_; }
  std::size_t size() const { return vectors_.size(); }
  bool contains(TracePoint p) const { return vectors_.count(resolve(p)) != 0; }

  void store(TracePoint p, RowVector v);
  /// Looks up a point; END resolves to the last position. Throws if absent.
  const RowVector& at(TracePoint p) const;

  const std::map<TracePoint, RowVector>& entries() const { return vectors_; }
  bool operator==(const ActivationTrace& other) const;

 private:
  TracePoint resolve(TracePoint p) const;

  int sequence_length_ = 0;
  std::map<TracePoint, RowVector> vectors_;
};

enum class Formula { kLinearCombo, kAddOnly, kConvexScaled };
enum class PositionMode { kAll, kFirst, kLast, kRandom };

std::string to_string(Formula f);
std::string to_string(PositionMode p);
Formula parse_formula(const std::string& s);
PositionMode parse_position_mode(const std::string& s);

/// What gets injected where. Immutable once handed to a forward pass.
struct InjectionPlan {
  ContextVector context;
  CoefficientSet coefficients;
  std::set<Module> target_modules{Module::kMha, Module::kMlp};
  std::set<int> target_layers;  // 1-based; empty is invalid
  PositionMode target_positions = PositionMode::kAll;
  Formula formula = Formula::kLinearCombo;
  double noise_gamma = 0.0;
  std::uint64_t noise_seed = 0;

  /// Plan targeting all modules/layers/positions of an L-layer model.
  static InjectionPlan standard(ContextVector context, CoefficientSet coefficients);

  bool targets(Module m, int layer) const {
    return target_modules.count(m) != 0 && target_layers.count(layer) != 0;
  }

  /// Checks set non-emptiness, layer range, and shapes against `n_layers`, `d_model`.
  void validate(int n_layers, int d_model) const;
};

/// Selected injection positions for a sequence of length `length`.
std::vector<bool> injection_rows(const InjectionPlan& plan, int length);

/// The injection rule for one vector:
/// LINEAR_COMBO: lambda*v + beta*a; ADD_ONLY: lambda*v + a (lambda > 0);
/// CONVEX_SCALED: (lambda*v + (1-lambda)*a)*beta (beta > 0).
RowVector apply_injection(const RowVector& activation, const RowVector& context, double lambda,
                          double beta, Formula formula);

/// x + gamma*||x||_2*eta with eta ~ N(0, I) drawn from `rng`. gamma == 0
/// returns x untouched and consumes nothing.
RowVector apply_noise(const RowVector& x, double gamma, Pcg64& rng);

/// Taped injection over rows of `activation` (T x D): rows where `rows[t]`
/// is set get the injection rule, others pass through unchanged.
Var inject_rows(Tape<double>& tape, Var activation, const RowVector& context, Var lambda,
                Var beta, const std::vector<bool>& rows, Formula formula);

/// Taped perturbation x_t + gamma*||x_t||*eta_t for every row t; `eta` is T x D.
Var perturb_rows(Tape<double>& tape, Var x, double gamma, Matrix eta);

}  // namespace i2cl
