#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "i2cl/error.hpp"
#include "i2cl/tensor.hpp"

namespace i2cl {

/// Cosine annealing from `start` to `end` over `total` steps.
inline double cosine_lr(double start, double end, std::size_t step, std::size_t total) {
  if (total <= 1) {
    return start;
  }
  const double progress = static_cast<double>(step) / static_cast<double>(total - 1);
  return end + 0.5 * (start - end) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay over a fixed list of dense parameters.
template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes,
                 AdamWOptions options = {})
      : options_(options) {
    for (auto [r, c] : shapes) {
      m_.push_back(MatrixX<Scalar>::Zero(r, c));
      v_.push_back(MatrixX<Scalar>::Zero(r, c));
    }
  }

  const AdamWOptions& options() const { return options_; }
  std::size_t steps_taken() const { return t_; }

  /// One update; params[i] and grads[i] must match the registered shapes.
  void step(std::vector<MatrixX<Scalar>*> params, const std::vector<MatrixX<Scalar>>& grads,
            Scalar lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw ShapeError("AdamW::step: parameter count mismatch");
    }
    ++t_;
    const Scalar b1 = Scalar(options_.beta1);
    const Scalar b2 = Scalar(options_.beta2);
    const Scalar c1 = Scalar(1) - std::pow(b1, Scalar(t_));
    const Scalar c2 = Scalar(1) - std::pow(b2, Scalar(t_));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      MatrixX<Scalar>& p = *params[i];
      const MatrixX<Scalar>& g = grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols() || g.rows() != m_[i].rows() ||
          g.cols() != m_[i].cols()) {
        throw ShapeError("AdamW::step: gradient shape mismatch");
      }
      if (!g.allFinite()) {
        throw NumericError("AdamW::step: non-finite gradient");
      }
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      p *= Scalar(1) - lr * Scalar(options_.weight_decay);
      p.array() -= lr * (m_[i].array() / c1) /
                   ((v_[i].array() / c2).sqrt() + Scalar(options_.eps));
    }
  }

 private:
  AdamWOptions options_;
  std::vector<MatrixX<Scalar>> m_;
  std::vector<MatrixX<Scalar>> v_;
  std::size_t t_ = 0;
};

}  // namespace i2cl
