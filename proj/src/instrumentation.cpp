#include "i2cl/instrumentation.hpp"

#include <string>

namespace i2cl {

TraceRequest TraceRequest::end_token(int n_layers) {
  TraceRequest r;
  for (int l = 1; l <= n_layers; ++l) {
    r.points.push_back({l, Module::kMha, kEndPosition});
    r.points.push_back({l, Module::kMlp, kEndPosition});
  }
  return r;
}

TraceRequest TraceRequest::full(int n_layers) {
  TraceRequest r;
  for (int l = 1; l <= n_layers; ++l) {
    r.points.push_back({l, Module::kMha, kAllPositions});
    r.points.push_back({l, Module::kMlp, kAllPositions});
  }
  return r;
}

TraceRequest TraceRequest::end_hidden(int n_layers) {
  TraceRequest r;
  for (int l = 1; l <= n_layers; ++l) {
    r.points.push_back({l, Module::kHidden, kEndPosition});
  }
  return r;
}

TracePoint ActivationTrace::resolve(TracePoint p) const {
  if (p.position == kEndPosition) {
    p.position = sequence_length_ - 1;
  }
  return p;
}

void ActivationTrace::store(TracePoint p, RowVector v) {
  require_finite(v, "activation trace");
  p = resolve(p);
  if (p.position < 0 || p.position >= sequence_length_) {
    throw ShapeError("trace position " + std::to_string(p.position) + " outside sequence");
  }
  vectors_[p] = std::move(v);
}

const RowVector& ActivationTrace::at(TracePoint p) const {
  const auto it = vectors_.find(resolve(p));
  if (it == vectors_.end()) {
    throw Error("missing trace capture at layer " + std::to_string(p.layer) + " " +
                to_string(p.module) + " position " + std::to_string(p.position));
  }
  return it->second;
}

bool ActivationTrace::operator==(const ActivationTrace& other) const {
  if (sequence_length_ != other.sequence_length_ || vectors_.size() != other.vectors_.size()) {
    return false;
  }
  auto it = other.vectors_.begin();
  for (const auto& [key, vec] : vectors_) {
    if (!(key == it->first) || vec.size() != it->second.size() || vec != it->second) {
      return false;
    }
    ++it;
  }
  return true;
}

std::string to_string(Formula f) {
  switch (f) {
    case Formula::kLinearCombo:
      return "LINEAR_COMBO";
    case Formula::kAddOnly:
      return "ADD_ONLY";
    case Formula::kConvexScaled:
      return "CONVEX_SCALED";
  }
  return "?";
}

std::string to_string(PositionMode p) {
  switch (p) {
    case PositionMode::kAll:
      return "ALL";
    case PositionMode::kFirst:
      return "FIRST";
    case PositionMode::kLast:
      return "LAST";
    case PositionMode::kRandom:
      return "RANDOM";
  }
  return "?";
}

Formula parse_formula(const std::string& s) {
  if (s == "LINEAR_COMBO" || s == "linear_combo") {
    return Formula::kLinearCombo;
  }
  if (s == "ADD_ONLY" || s == "add_only") {
    return Formula::kAddOnly;
  }
  if (s == "CONVEX_SCALED" || s == "convex_scaled") {
    return Formula::kConvexScaled;
  }
  throw ConfigError("unknown injection formula '" + s + "'");
}

PositionMode parse_position_mode(const std::string& s) {
  if (s == "ALL" || s == "all") {
    return PositionMode::kAll;
  }
  if (s == "FIRST" || s == "first") {
    return PositionMode::kFirst;
  }
  if (s == "LAST" || s == "last") {
    return PositionMode::kLast;
  }
  if (s == "RANDOM" || s == "random") {
    return PositionMode::kRandom;
  }
  throw ConfigError("unknown target position '" + s + "'");
}

InjectionPlan InjectionPlan::standard(ContextVector context, CoefficientSet coefficients) {
  InjectionPlan plan;
  const auto n_layers = static_cast<int>(coefficients.n_layers());
  plan.context = std::move(context);
  plan.coefficients = std::move(coefficients);
  for (int l = 1; l <= n_layers; ++l) {
    plan.target_layers.insert(l);
  }
  return plan;
}

void InjectionPlan::validate(int n_layers, int d_model) const {
  if (target_modules.empty() || target_layers.empty()) {
    throw ConfigError("injection plan: target modules and layers must be non-empty");
  }
  if (target_modules.count(Module::kHidden) != 0 && target_modules.size() != 1) {
    throw ConfigError("injection plan: HIDDEN cannot be combined with MHA/MLP targets");
  }
  for (int l : target_layers) {
    if (l < 1 || l > n_layers) {
      throw ConfigError("injection plan: layer " + std::to_string(l) + " outside 1.." +
                        std::to_string(n_layers));
    }
  }
  if (!(noise_gamma >= 0.0)) {
    throw ConfigError("injection plan: noise gamma must be non-negative");
  }
  context.validate();
  coefficients.validate();
  if (static_cast<int>(context.n_layers()) != n_layers ||
      static_cast<int>(context.d_model()) != d_model ||
      static_cast<int>(coefficients.n_layers()) != n_layers) {
    throw ShapeError("injection plan: context/coefficients do not match model (L=" +
                     std::to_string(n_layers) + ", D=" + std::to_string(d_model) + ")");
  }
}

std::vector<bool> injection_rows(const InjectionPlan& plan, int length) {
  std::vector<bool> rows(static_cast<std::size_t>(length), false);
  if (length <= 0) {
    return rows;
  }
  switch (plan.target_positions) {
    case PositionMode::kAll:
      rows.assign(rows.size(), true);
      break;
    case PositionMode::kFirst:
      rows.front() = true;
      break;
    case PositionMode::kLast:
      rows.back() = true;
      break;
    case PositionMode::kRandom: {
      Pcg64 rng = Pcg64::named(plan.noise_seed, "injection-position");
      rows[rng.below(static_cast<std::uint64_t>(length))] = true;
      break;
    }
  }
  return rows;
}

namespace {

void check_constraints(double lambda, double beta, Formula formula) {
  if (formula == Formula::kAddOnly && !(lambda > 0.0)) {
    throw ConfigError("ADD_ONLY injection requires lambda > 0");
  }
  if (formula == Formula::kConvexScaled && !(beta > 0.0)) {
    throw ConfigError("CONVEX_SCALED injection requires beta > 0");
  }
}

}  // namespace

RowVector apply_injection(const RowVector& activation, const RowVector& context, double lambda,
                          double beta, Formula formula) {
  if (activation.size() != context.size()) {
    throw ShapeError("apply_injection: activation and context lengths differ");
  }
  check_constraints(lambda, beta, formula);
  switch (formula) {
    case Formula::kLinearCombo:
      return lambda * context + beta * activation;
    case Formula::kAddOnly:
      return lambda * context + activation;
    case Formula::kConvexScaled:
      return (lambda * context + (1.0 - lambda) * activation) * beta;
  }
  return activation;
}

RowVector apply_noise(const RowVector& x, double gamma, Pcg64& rng) {
  if (gamma < 0.0) {
    throw ConfigError("apply_noise: gamma must be non-negative");
  }
  if (gamma == 0.0) {
    return x;
  }
  RowVector eta(x.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    eta(i) = rng.normal();
  }
  return x + (gamma * x.norm()) * eta;
}

Var inject_rows(Tape<double>& tape, Var activation, const RowVector& context, Var lambda,
                Var beta, const std::vector<bool>& rows, Formula formula) {
  const Matrix& a = tape.value(activation);
  if (a.cols() != context.size() || static_cast<std::size_t>(a.rows()) != rows.size()) {
    throw ShapeError("inject_rows: activation shape does not match context/row mask");
  }
  const double lam = tape.item(lambda);
  const double bet = tape.item(beta);
  check_constraints(lam, bet, formula);
  Matrix out = a;
  for (Eigen::Index t = 0; t < a.rows(); ++t) {
    if (rows[static_cast<std::size_t>(t)]) {
      out.row(t) = apply_injection(a.row(t), context, lam, bet, formula);
    }
  }
  return tape.record(
      std::move(out), {activation, lambda, beta},
      [activation, lambda, beta, context, rows, formula, lam, bet](Tape<double>& tp,
                                                                   const Matrix& g) {
        const Matrix& av = tp.value(activation);
        Matrix da = g;
        double dlam = 0.0;
        double dbeta = 0.0;
        for (Eigen::Index t = 0; t < av.rows(); ++t) {
          if (!rows[static_cast<std::size_t>(t)]) {
            continue;
          }
          const auto gt = g.row(t);
          switch (formula) {
            case Formula::kLinearCombo:
              dlam += gt.dot(context);
              dbeta += gt.dot(av.row(t));
              da.row(t) = bet * gt;
              break;
            case Formula::kAddOnly:
              dlam += gt.dot(context);
              break;
            case Formula::kConvexScaled:
              dlam += bet * gt.dot(context - av.row(t));
              dbeta += gt.dot(lam * context + (1.0 - lam) * av.row(t));
              da.row(t) = bet * (1.0 - lam) * gt;
              break;
          }
        }
        tp.accumulate(activation, da);
        tp.accumulate(lambda, Matrix::Constant(1, 1, dlam));
        tp.accumulate(beta, Matrix::Constant(1, 1, dbeta));
      },
      "inject_rows");
}

Var perturb_rows(Tape<double>& tape, Var x, double gamma, Matrix eta) {
  const Matrix& xv = tape.value(x);
  if (eta.rows() != xv.rows() || eta.cols() != xv.cols()) {
    throw ShapeError("perturb_rows: noise shape mismatch");
  }
  const Eigen::VectorXd norms = xv.rowwise().norm();
  Matrix out = xv + gamma * (eta.array().colwise() * norms.array()).matrix();
  return tape.record(std::move(out), {x},
                     [x, gamma, eta = std::move(eta), norms](Tape<double>& tp, const Matrix& g) {
                       const Matrix& xv2 = tp.value(x);
                       Matrix dx = g;
                       for (Eigen::Index t = 0; t < xv2.rows(); ++t) {
                         if (norms(t) > 0.0) {
                           dx.row(t) += (gamma * g.row(t).dot(eta.row(t)) / norms(t)) * xv2.row(t);
                         }
                       }
                       tp.accumulate(x, dx);
                     },
                     "perturb_rows");
}

}  // namespace i2cl
