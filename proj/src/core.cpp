#include "i2cl/core.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

#include "i2cl/csv.hpp"
#include "i2cl/optim.hpp"
#include "i2cl/random.hpp"

namespace i2cl {

void CalibrationConfig::validate() const {
  if (epochs < 0) {
    throw ConfigError("calibration epochs must be >= 0");
  }
  if (!(lr_end > 0.0) || !(lr_start >= lr_end)) {
    throw ConfigError("calibration needs lr_start >= lr_end > 0");
  }
  if (!(gamma >= 0.0)) {
    throw ConfigError("calibration noise gamma must be >= 0");
  }
  if (!(weight_decay >= 0.0) || !(adam_eps > 0.0) || !(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
      !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("invalid optimizer settings");
  }
}

InjectionPlan InjectionSites::plan(const ContextVector& v, const CoefficientSet& c) const {
  InjectionPlan p = InjectionPlan::standard(v, c);
  p.target_modules = modules;
  if (!layers.empty()) {
    p.target_layers = layers;
  }
  p.target_positions = positions;
  p.formula = formula;
  return p;
}

// Vectorization ----------------------------------------------------------------

DemonstrationVector vectorize_demo(const Weights& weights, const std::string& rendered) {
  const int L = weights.config.n_layers;
  TraceRequest request = TraceRequest::end_token(L);
  const TraceRequest hidden = TraceRequest::end_hidden(L);
  request.points.insert(request.points.end(), hidden.points.begin(), hidden.points.end());

  const ForwardResult f = forward(weights, Tokenizer::encode(rendered), nullptr, request);
  DemonstrationVector d;
  const Eigen::Index D = weights.config.d_model;
  d.attn.resize(L, D);
  d.mlp.resize(L, D);
  d.hidden.resize(L, D);
  for (int l = 1; l <= L; ++l) {
    d.attn.row(l - 1) = f.trace.at({l, Module::kMha, kEndPosition});
    d.mlp.row(l - 1) = f.trace.at({l, Module::kMlp, kEndPosition});
    d.hidden.row(l - 1) = f.trace.at({l, Module::kHidden, kEndPosition});
  }
  return d;
}

namespace {

std::uint64_t content_hash(const DemonstrationVector& d) {
  std::uint64_t h = 1469598103934665603ull;
  for (const Matrix* m : {&d.attn, &d.mlp, &d.hidden}) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m->size()) * sizeof(double); ++i) {
      h = (h ^ bytes[i]) * 1099511628211ull;
    }
  }
  return h;
}

// Total order on raw contents, used to break hash collisions.
bool bytes_less(const DemonstrationVector& a, const DemonstrationVector& b) {
  for (auto [x, y] : {std::pair{&a.attn, &b.attn}, {&a.mlp, &b.mlp}, {&a.hidden, &b.hidden}}) {
    const int c = std::memcmp(x->data(), y->data(),
                              static_cast<std::size_t>(x->size()) * sizeof(double));
    if (c != 0) {
      return c < 0;
    }
  }
  return false;
}

}  // namespace

ContextVector aggregate(const std::vector<DemonstrationVector>& vectors) {
  if (vectors.empty()) {
    throw ConfigError("aggregate: no demonstration vectors");
  }
  const Eigen::Index L = vectors[0].attn.rows();
  const Eigen::Index D = vectors[0].attn.cols();
  for (const auto& v : vectors) {
    for (const Matrix* m : {&v.attn, &v.mlp, &v.hidden}) {
      if (m->rows() != L || m->cols() != D) {
        throw ShapeError("aggregate: demonstration vectors disagree on (L, D)");
      }
    }
  }
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    order.emplace_back(content_hash(vectors[i]), i);
  }
  std::sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) {
      return a.first < b.first;
    }
    return bytes_less(vectors[a.second], vectors[b.second]);
  });

  ContextVector out;
  out.attn = Matrix::Zero(L, D);
  out.mlp = Matrix::Zero(L, D);
  out.hidden = Matrix::Zero(L, D);
  for (const auto& [hash, i] : order) {
    out.attn += vectors[i].attn;
    out.mlp += vectors[i].mlp;
    out.hidden += vectors[i].hidden;
  }
  const double n = static_cast<double>(vectors.size());
  out.attn /= n;
  out.mlp /= n;
  out.hidden /= n;
  out.source_count = vectors.size();
  out.validate();
  return out;
}

ContextVector build_context(const Weights& weights, const DemoSet& set) {
  std::vector<DemonstrationVector> vectors;
  for (const Demonstration& d : set.demos) {
    vectors.push_back(vectorize_demo(weights, set.format.render(d.x, d.y)));
  }
  return aggregate(vectors);
}

// Label scoring ----------------------------------------------------------------
//
// A label of k tokens is scored teacher-forced. Without a plan, or when the
// plan injects at every position, one pass over prompt + label[0..k-2] gives
// every term. Position-selective plans depend on the sequence length, so each
// label token then gets its own pass over the prefix that precedes it, the
// way the tokens would be produced one at a time.

namespace {

bool single_pass(const InjectionPlan* plan) {
  return plan == nullptr || plan->target_positions == PositionMode::kAll;
}

std::vector<TokenId> encode_label(const std::string& label) {
  if (label.empty()) {
    throw ConfigError("label must not be empty");
  }
  return Tokenizer::encode(label);
}

double row_logprob(const Matrix& logits, Eigen::Index row, TokenId target) {
  const auto r = logits.row(row);
  const double mx = r.maxCoeff();
  return r(target) - mx - std::log((r.array() - mx).exp().sum());
}

}  // namespace

std::vector<double> label_logprobs(const Weights& weights, const std::string& prompt,
                                   const std::vector<std::string>& labels,
                                   const InjectionPlan* plan) {
  const std::vector<TokenId> base = Tokenizer::encode(prompt);
  if (base.empty()) {
    throw ConfigError("label scoring needs a non-empty prompt");
  }
  std::optional<Matrix> prompt_logits;
  auto last_row_of_prompt = [&]() -> const Matrix& {
    if (!prompt_logits) {
      prompt_logits = forward(weights, base, plan).logits;
    }
    return *prompt_logits;
  };

  std::vector<double> out;
  for (const std::string& label : labels) {
    const std::vector<TokenId> ids = encode_label(label);
    const auto T = static_cast<Eigen::Index>(base.size());
    double total = 0.0;
    if (ids.size() == 1) {
      total = row_logprob(last_row_of_prompt(), T - 1, ids[0]);
    } else if (single_pass(plan)) {
      std::vector<TokenId> seq = base;
      seq.insert(seq.end(), ids.begin(), ids.end() - 1);
      const Matrix logits = forward(weights, seq, plan).logits;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        total += row_logprob(logits, T - 1 + static_cast<Eigen::Index>(k), ids[k]);
      }
    } else {
      total = row_logprob(last_row_of_prompt(), T - 1, ids[0]);
      std::vector<TokenId> seq = base;
      for (std::size_t k = 1; k < ids.size(); ++k) {
        seq.push_back(ids[k - 1]);
        const Matrix logits = forward(weights, seq, plan).logits;
        total += row_logprob(logits, logits.rows() - 1, ids[k]);
      }
    }
    out.push_back(total);
  }
  return out;
}

double label_logprob(const Weights& weights, const std::string& prompt, const std::string& label,
                     const InjectionPlan* plan) {
  return label_logprobs(weights, prompt, {label}, plan)[0];
}

std::size_t argmax_label(const std::vector<double>& logprobs) {
  if (logprobs.empty()) {
    throw ConfigError("empty label space");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < logprobs.size(); ++i) {
    if (logprobs[i] > logprobs[best]) {
      best = i;
    }
  }
  return best;
}

std::string predict(const Weights& weights, const std::string& prompt,
                    const std::vector<std::string>& labels, const InjectionPlan* plan) {
  if (labels.empty()) {
    throw ConfigError("predict: empty label space");
  }
  if (labels.size() == 1) {
    return labels[0];
  }
  return labels[argmax_label(label_logprobs(weights, prompt, labels, plan))];
}

// Calibration ------------------------------------------------------------------

namespace {

// Taped summed log-probability of `label` after `prompt`; appends its terms
// to `terms`.
void taped_label_terms(Tape<double>& tape, const Weights& weights, const WeightVars& wv,
                       const CoefficientVars& cv, const std::vector<TokenId>& prompt,
                       const std::vector<TokenId>& label, const InjectionPlan& plan,
                       std::vector<Var>& terms) {
  const auto T = static_cast<Eigen::Index>(prompt.size());
  if (single_pass(&plan)) {
    std::vector<TokenId> seq = prompt;
    seq.insert(seq.end(), label.begin(), label.end() - 1);
    const TapedForward f = forward_on_tape(tape, weights, wv, seq, &plan, &cv, {});
    const Var rows = slice_rows(tape, f.logits, T - 1, static_cast<Eigen::Index>(label.size()));
    const Var logp = log_softmax_rows(tape, rows);
    for (std::size_t k = 0; k < label.size(); ++k) {
      terms.push_back(pick(tape, logp, static_cast<Eigen::Index>(k), label[k]));
    }
    return;
  }
  std::vector<TokenId> seq = prompt;
  for (std::size_t k = 0; k < label.size(); ++k) {
    if (k > 0) {
      seq.push_back(label[k - 1]);
    }
    const TapedForward f = forward_on_tape(tape, weights, wv, seq, &plan, &cv, {});
    const auto last = static_cast<Eigen::Index>(seq.size()) - 1;
    const Var logp = log_softmax_rows(tape, slice_rows(tape, f.logits, last, 1));
    terms.push_back(pick(tape, logp, 0, label[k]));
  }
}

struct EncodedPrompt {
  std::vector<TokenId> prompt;
  std::vector<TokenId> label;
};

std::vector<EncodedPrompt> encode_prompts(const std::vector<LabeledPrompt>& prompts) {
  if (prompts.empty()) {
    throw ConfigError("calibration needs at least one demonstration");
  }
  std::vector<EncodedPrompt> out;
  for (const LabeledPrompt& p : prompts) {
    out.push_back({Tokenizer::encode(p.prompt), encode_label(p.label)});
    if (out.back().prompt.empty()) {
      throw ConfigError("calibration prompt is empty");
    }
  }
  return out;
}

LossAndGradient loss_and_gradient(const Weights& weights, const std::vector<EncodedPrompt>& prompts,
                                  const InjectionPlan& plan) {
  const auto L = static_cast<Eigen::Index>(weights.config.n_layers);
  LossAndGradient out;
  out.gradient = Matrix::Zero(L, 4);
  const double weight = 1.0 / static_cast<double>(prompts.size());
  // One tape per prompt keeps peak memory at a single forward; the sum over
  // prompts is accumulated in index order.
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    InjectionPlan p = plan;
    p.noise_seed = Pcg64::named(plan.noise_seed, "calibration-prompt", i)();
    Tape<double> tape;
    const WeightVars wv = bind_weights(tape, weights, false);
    const CoefficientVars cv = bind_coefficients(tape, plan.coefficients, true);
    std::vector<Var> terms;
    taped_label_terms(tape, weights, wv, cv, prompts[i].prompt, prompts[i].label, p, terms);
    const Var loss = scale(tape, add_n(tape, std::span<const Var>(terms)), -weight);
    tape.backward(loss);
    out.loss += tape.item(loss);
    for (Eigen::Index l = 0; l < L; ++l) {
      for (int k = 0; k < 4; ++k) {
        out.gradient(l, k) += tape.grad(cv.layers[static_cast<std::size_t>(l)][static_cast<std::size_t>(k)])(0, 0);
      }
    }
  }
  return out;
}

// Columns kept positive through softplus under each formula.
std::vector<int> constrained_columns(Formula f) {
  switch (f) {
    case Formula::kAddOnly:
      return {CoefficientSet::kLambdaAttn, CoefficientSet::kLambdaMlp};
    case Formula::kConvexScaled:
      return {CoefficientSet::kBetaAttn, CoefficientSet::kBetaMlp};
    case Formula::kLinearCombo:
      break;
  }
  return {};
}

}  // namespace

LossAndGradient calibration_loss(const Weights& weights, const std::vector<LabeledPrompt>& prompts,
                                 const InjectionPlan& plan) {
  return loss_and_gradient(weights, encode_prompts(prompts), plan);
}

CalibrationResult calibrate(const Weights& weights, const std::vector<LabeledPrompt>& prompts,
                            const InjectionPlan& plan, const CalibrationConfig& config) {
  config.validate();
  plan.validate(weights.config.n_layers, weights.config.d_model);
  const std::vector<EncodedPrompt> encoded = encode_prompts(prompts);
  const std::vector<int> positive = constrained_columns(plan.formula);

  // Unconstrained parameters: identity except softplus-mapped columns.
  Matrix raw = plan.coefficients.values;
  for (int c : positive) {
    for (Eigen::Index l = 0; l < raw.rows(); ++l) {
      if (!(raw(l, c) > 0.0)) {
        throw ConfigError("calibration init violates the " + to_string(plan.formula) +
                          " positivity constraint");
      }
      raw(l, c) = inverse_softplus(raw(l, c));
    }
  }
  auto effective = [&](const Matrix& r) {
    Matrix e = r;
    for (int c : positive) {
      e.col(c) = r.col(c).unaryExpr([](double x) { return softplus(x); });
    }
    return e;
  };

  CalibrationResult result;
  result.coefficients = plan.coefficients;
  AdamW<double> opt({{raw.rows(), raw.cols()}},
                    {config.adam_beta1, config.adam_beta2, config.adam_eps, config.weight_decay});
  InjectionPlan p = plan;
  p.noise_gamma = config.gamma;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    p.coefficients.values = effective(raw);
    p.noise_seed = Pcg64::named(config.seed, "calibration-epoch", static_cast<std::uint64_t>(epoch))();
    LossAndGradient lg = loss_and_gradient(weights, encoded, p);
    if (!std::isfinite(lg.loss)) {
      throw NumericError("calibration loss is not finite at epoch " + std::to_string(epoch));
    }
    for (int c : positive) {
      for (Eigen::Index l = 0; l < raw.rows(); ++l) {
        lg.gradient(l, c) *= sigmoid(raw(l, c));
      }
    }
    const double lr = cosine_lr(config.lr_start, config.lr_end, static_cast<std::size_t>(epoch),
                                static_cast<std::size_t>(config.epochs));
    opt.step({&raw}, {lg.gradient}, lr);
    result.history.push_back({epoch, lr, lg.loss});
    result.coefficients.values = effective(raw);
    result.trajectory.push_back(result.coefficients);
  }
  if (config.epochs > 0) {
    result.coefficients.validate();
  }
  return result;
}

std::vector<LabeledPrompt> calibration_prompts(const DemoSet& set, const std::string& prefix) {
  std::vector<LabeledPrompt> out;
  for (const Demonstration& d : set.demos) {
    out.push_back({prefix + set.format.render_query(d.x), d.y});
  }
  return out;
}

CoefficientSet default_init(std::size_t n_layers, const CalibrationConfig& config) {
  return CoefficientSet::uniform(n_layers, config.init_lambda, config.init_beta);
}

// Evaluation -------------------------------------------------------------------

Evaluation evaluate(const Weights& weights, const std::vector<Demonstration>& queries,
                    const std::vector<std::string>& labels, const Template& format,
                    const std::string& prefix, const InjectionPlan* plan) {
  if (queries.empty()) {
    throw ConfigError("evaluate: empty query set");
  }
  Evaluation ev;
  std::size_t correct = 0;
  double tokens = 0.0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const std::string prompt = prefix + format.render_query(queries[i].x);
    QueryRecord r;
    r.query_id = static_cast<int>(i);
    r.gold = queries[i].y;
    r.logprobs = label_logprobs(weights, prompt, labels, plan);
    r.pred = labels[argmax_label(r.logprobs)];
    r.prompt_tokens = static_cast<int>(Tokenizer::encode(prompt).size());
    correct += r.pred == r.gold ? 1 : 0;
    tokens += r.prompt_tokens;
    ev.records.push_back(std::move(r));
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(queries.size());
  ev.mean_prompt_tokens = tokens / static_cast<double>(queries.size());
  return ev;
}

void write_query_csv(const Evaluation& eval, const std::vector<std::string>& labels,
                     const std::filesystem::path& path, const std::vector<std::string>& metadata) {
  std::ofstream out = open_csv(path, metadata);
  out << "query_id,gold,pred";
  for (const std::string& l : labels) {
    out << ",logprob_" << l;
  }
  out << "\n";
  for (const QueryRecord& r : eval.records) {
    out << r.query_id << "," << r.gold << "," << r.pred;
    for (double lp : r.logprobs) {
      out << "," << lp;
    }
    out << "\n";
  }
  if (!out) {
    throw Error("write failed for '" + path.string() + "'");
  }
}

void write_loss_csv(const std::vector<CalibrationEpoch>& history,
                    const std::filesystem::path& path, const std::vector<std::string>& metadata) {
  std::ofstream out = open_csv(path, metadata);
  out << "epoch,lr,loss\n";
  for (const CalibrationEpoch& e : history) {
    out << e.epoch << "," << e.lr << "," << e.loss << "\n";
  }
  if (!out) {
    throw Error("write failed for '" + path.string() + "'");
  }
}

CostCounters i2cl_cost(std::size_t query_tokens, std::size_t d_model, std::size_t n_layers) {
  return {query_tokens, 2 * d_model * n_layers + 4 * n_layers};
}

CostCounters icl_cost(std::size_t demo_tokens, std::size_t query_tokens, std::size_t d_model,
                      std::size_t n_layers) {
  return {demo_tokens + query_tokens, 2 * demo_tokens * d_model * n_layers};
}

}  // namespace i2cl
