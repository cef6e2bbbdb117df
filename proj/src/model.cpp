#include "i2cl/model.hpp"

#include <cstdio>

#include "i2cl/binary_io.hpp"
#include "i2cl/random.hpp"

namespace i2cl {

namespace {

constexpr std::string_view kWeightMagic = "I2CLW1";
constexpr double kInitStd = 0.02;

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 || vocab_size < 1 || max_seq < 1) {
    throw ConfigError("model config: all dimensions must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                      ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
  }
}

std::size_t ModelConfig::parameter_count() const {
  const std::size_t D = static_cast<std::size_t>(d_model);
  const std::size_t F = static_cast<std::size_t>(d_mlp);
  const std::size_t V = static_cast<std::size_t>(vocab_size);
  const std::size_t T = static_cast<std::size_t>(max_seq);
  const std::size_t per_layer = 2 * D + 4 * (D * D + D) + 2 * D + (D * F + F) + (F * D + D);
  return V * D + T * D + static_cast<std::size_t>(n_layers) * per_layer + 2 * D + D * V;
}

std::vector<std::pair<std::string, std::pair<int, int>>> weight_layout(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::pair<int, int>>> out;
  const int D = c.d_model;
  out.push_back({"token_embedding", {c.vocab_size, D}});
  out.push_back({"position_embedding", {c.max_seq, D}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l + 1) + ".";
    out.push_back({p + "ln1_gain", {1, D}});
    out.push_back({p + "ln1_bias", {1, D}});
    out.push_back({p + "w_q", {D, D}});
    out.push_back({p + "b_q", {1, D}});
    out.push_back({p + "w_k", {D, D}});
    out.push_back({p + "b_k", {1, D}});
    out.push_back({p + "w_v", {D, D}});
    out.push_back({p + "b_v", {1, D}});
    out.push_back({p + "w_o", {D, D}});
    out.push_back({p + "b_o", {1, D}});
    out.push_back({p + "ln2_gain", {1, D}});
    out.push_back({p + "ln2_bias", {1, D}});
    out.push_back({p + "w_up", {D, c.d_mlp}});
    out.push_back({p + "b_up", {1, c.d_mlp}});
    out.push_back({p + "w_down", {c.d_mlp, D}});
    out.push_back({p + "b_down", {1, D}});
  }
  out.push_back({"final_gain", {1, D}});
  out.push_back({"final_bias", {1, D}});
  out.push_back({"unembedding", {D, c.vocab_size}});
  return out;
}

namespace {

template <typename W, typename Fn>
void visit_arrays(W& w, Fn&& fn) {
  fn(std::string("token_embedding"), w.token_embedding);
  fn(std::string("position_embedding"), w.position_embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l + 1) + ".";
    fn(p + "ln1_gain", L.ln1_gain);
    fn(p + "ln1_bias", L.ln1_bias);
    fn(p + "w_q", L.w_q);
    fn(p + "b_q", L.b_q);
    fn(p + "w_k", L.w_k);
    fn(p + "b_k", L.b_k);
    fn(p + "w_v", L.w_v);
    fn(p + "b_v", L.b_v);
    fn(p + "w_o", L.w_o);
    fn(p + "b_o", L.b_o);
    fn(p + "ln2_gain", L.ln2_gain);
    fn(p + "ln2_bias", L.ln2_bias);
    fn(p + "w_up", L.w_up);
    fn(p + "b_up", L.b_up);
    fn(p + "w_down", L.w_down);
    fn(p + "b_down", L.b_down);
  }
  fn(std::string("final_gain"), w.final_gain);
  fn(std::string("final_bias"), w.final_bias);
  fn(std::string("unembedding"), w.unembedding);
}

}  // namespace

void Weights::for_each(const std::function<void(const std::string&, const Matrix&)>& fn) const {
  visit_arrays(*this, fn);
}

void Weights::for_each(const std::function<void(const std::string&, Matrix&)>& fn) {
  visit_arrays(*this, fn);
}

std::size_t Weights::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::string Weights::hash() const {
  std::uint64_t h = fnv1a("");
  for_each([&](const std::string&, const Matrix& m) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()),
                               static_cast<std::size_t>(m.size()) * sizeof(double)),
              h);
  });
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Weights::validate() const {
  config.validate();
  const auto layout = weight_layout(config);
  if (layers.size() != static_cast<std::size_t>(config.n_layers)) {
    throw ShapeError("weights: layer count does not match config");
  }
  std::size_t i = 0;
  for_each([&](const std::string& name, const Matrix& m) {
    const auto& [lname, shape] = layout[i++];
    if (m.rows() != shape.first || m.cols() != shape.second) {
      throw ShapeError("weights: array " + name + " has shape " + std::to_string(m.rows()) + "x" +
                       std::to_string(m.cols()) + ", expected " + std::to_string(shape.first) +
                       "x" + std::to_string(shape.second));
    }
    require_finite(m, "weights array " + name);
  });
}

bool Weights::operator==(const Weights& other) const {
  if (!(config == other.config) || layers.size() != other.layers.size()) {
    return false;
  }
  std::vector<const Matrix*> mine;
  for_each([&](const std::string&, const Matrix& m) { mine.push_back(&m); });
  std::size_t i = 0;
  bool equal = true;
  other.for_each([&](const std::string&, const Matrix& m) {
    const Matrix& a = *mine[i++];
    equal = equal && a.rows() == m.rows() && a.cols() == m.cols() && a == m;
  });
  return equal;
}

Weights init_weights(const ModelConfig& config) {
  config.validate();
  Weights w;
  w.config = config;
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  Pcg64 rng = Pcg64::named(config.seed, "weight-init");
  const auto layout = weight_layout(config);
  std::size_t i = 0;
  w.for_each([&](const std::string& name, Matrix& m) {
    const auto [rows, cols] = layout[i++].second;
    const bool is_gain = name.ends_with("gain");
    const bool is_bias = name.ends_with("bias") || name.find(".b_") != std::string::npos;
    if (is_gain) {
      m = Matrix::Ones(rows, cols);
    } else if (is_bias) {
      m = Matrix::Zero(rows, cols);
    } else {
      m.resize(rows, cols);
      for (Eigen::Index k = 0; k < m.size(); ++k) {
        m.data()[k] = kInitStd * rng.normal();
      }
    }
  });
  return w;
}

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  weights.validate();
  binary::Writer out(path);
  out.magic(kWeightMagic);
  const ModelConfig& c = weights.config;
  for (int v : {c.n_layers, c.d_model, c.n_heads, c.d_mlp, c.vocab_size, c.max_seq}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  weights.for_each([&](const std::string&, const Matrix& m) { out.array(m); });
  out.finish();
}

Weights load_weights(const std::filesystem::path& path,
                     const std::optional<ModelConfig>& expected) {
  binary::Reader in(path);
  in.expect_magic(kWeightMagic);
  ModelConfig c;
  c.n_layers = static_cast<int>(in.u32("header n_layers"));
  c.d_model = static_cast<int>(in.u32("header d_model"));
  c.n_heads = static_cast<int>(in.u32("header n_heads"));
  c.d_mlp = static_cast<int>(in.u32("header d_mlp"));
  c.vocab_size = static_cast<int>(in.u32("header vocab_size"));
  c.max_seq = static_cast<int>(in.u32("header max_seq"));
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError("'" + path.string() + "': invalid header: " + e.what());
  }
  const auto layout = weight_layout(c);
  if (expected) {
    const auto want = weight_layout(*expected);
    for (std::size_t i = 0; i < want.size(); ++i) {
      if (i >= layout.size() || layout[i] != want[i]) {
        const auto& [name, shape] = want[i];
        std::string found = "missing";
        if (i < layout.size()) {
          found = layout[i].first + " " + std::to_string(layout[i].second.first) + "x" +
                  std::to_string(layout[i].second.second);
        }
        throw ShapeError("'" + path.string() + "': shape mismatch at array " + name +
                         " (expected " + std::to_string(shape.first) + "x" +
                         std::to_string(shape.second) + ", file has " + found + ")");
      }
    }
    if (layout.size() != want.size()) {
      throw ShapeError("'" + path.string() + "': shape mismatch at array " +
                       layout[want.size()].first + " (not expected)");
    }
    c.seed = expected->seed;
  }
  Weights w;
  w.config = c;
  w.layers.resize(static_cast<std::size_t>(c.n_layers));
  std::size_t i = 0;
  w.for_each([&](const std::string& name, Matrix& m) {
    const auto [rows, cols] = layout[i++].second;
    m = in.array(rows, cols, name);
  });
  in.expect_end();
  w.validate();
  return w;
}

TokenId Tokenizer::id(char c) {
  if (c == '\0') {
    return kPad;
  }
  if (c == '\n') {
    return kNewline;
  }
  if (c >= ' ' && c <= '~') {
    return 2 + (c - ' ');
  }
  throw ConfigError(std::string("tokenizer: character code ") +
                    std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                    " outside alphabet");
}

bool Tokenizer::representable(std::string_view text) {
  for (char c : text) {
    if (!(c == '\n' || (c >= ' ' && c <= '~'))) {
      return false;
    }
  }
  return true;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) {
  std::vector<TokenId> ids;
  ids.reserve(text.size());
  for (char c : text) {
    ids.push_back(id(c));
  }
  return ids;
}

std::string Tokenizer::decode(const std::vector<TokenId>& ids) {
  std::string s;
  s.reserve(ids.size());
  for (TokenId t : ids) {
    if (t == kPad) {
      s.push_back('\0');
    } else if (t == kNewline) {
      s.push_back('\n');
    } else if (t >= 2 && t < kVocabSize) {
      s.push_back(static_cast<char>(' ' + (t - 2)));
    } else {
      throw ConfigError("tokenizer: id " + std::to_string(t) + " outside alphabet");
    }
  }
  return s;
}

std::vector<Var> WeightVars::all() const {
  std::vector<Var> v{token_embedding, position_embedding};
  for (const Layer& L : layers) {
    v.insert(v.end(), {L.ln1_gain, L.ln1_bias, L.w_q, L.b_q, L.w_k, L.b_k, L.w_v, L.b_v, L.w_o,
                       L.b_o, L.ln2_gain, L.ln2_bias, L.w_up, L.b_up, L.w_down, L.b_down});
  }
  v.insert(v.end(), {final_gain, final_bias, unembedding});
  return v;
}

WeightVars bind_weights(Tape<double>& tape, const Weights& w, bool trainable) {
  auto leaf = [&](const Matrix& m) {
    return trainable ? tape.parameter_ref(m) : tape.constant_ref(m);
  };
  WeightVars v;
  v.token_embedding = leaf(w.token_embedding);
  v.position_embedding = leaf(w.position_embedding);
  for (const LayerWeights& L : w.layers) {
    v.layers.push_back({leaf(L.ln1_gain), leaf(L.ln1_bias), leaf(L.w_q), leaf(L.b_q),
                        leaf(L.w_k), leaf(L.b_k), leaf(L.w_v), leaf(L.b_v), leaf(L.w_o),
                        leaf(L.b_o), leaf(L.ln2_gain), leaf(L.ln2_bias), leaf(L.w_up),
                        leaf(L.b_up), leaf(L.w_down), leaf(L.b_down)});
  }
  v.final_gain = leaf(w.final_gain);
  v.final_bias = leaf(w.final_bias);
  v.unembedding = leaf(w.unembedding);
  return v;
}

CoefficientVars bind_coefficients(Tape<double>& tape, const CoefficientSet& c, bool trainable) {
  CoefficientVars v;
  for (Eigen::Index l = 0; l < c.values.rows(); ++l) {
    std::array<Var, 4> row{};
    for (int k = 0; k < 4; ++k) {
      row[static_cast<std::size_t>(k)] =
          trainable ? tape.scalar_parameter(c.values(l, k)) : tape.scalar(c.values(l, k));
    }
    v.layers.push_back(row);
  }
  return v;
}

namespace {

Var linear(Tape<double>& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

void capture(const Tape<double>& tape, Var source, int layer, Module module,
             const TraceRequest& request, ActivationTrace& trace) {
  const Matrix& v = tape.value(source);
  for (const TracePoint& p : request.points) {
    if (p.layer != layer || p.module != module) {
      continue;
    }
    if (p.position == kAllPositions) {
      for (Eigen::Index t = 0; t < v.rows(); ++t) {
        trace.store({layer, module, static_cast<int>(t)}, v.row(t));
      }
    } else {
      const int pos = p.position == kEndPosition ? static_cast<int>(v.rows()) - 1 : p.position;
      if (pos < 0 || pos >= v.rows()) {
        throw ShapeError("trace request position " + std::to_string(p.position) +
                         " outside sequence of length " + std::to_string(v.rows()));
      }
      trace.store({layer, module, pos}, v.row(pos));
    }
  }
}

Matrix draw_noise(Pcg64& rng, Eigen::Index rows, Eigen::Index cols) {
  Matrix eta(rows, cols);
  for (Eigen::Index k = 0; k < eta.size(); ++k) {
    eta.data()[k] = rng.normal();
  }
  return eta;
}

}  // namespace

TapedForward forward_on_tape(Tape<double>& tape, const Weights& weights, const WeightVars& vars,
                             const std::vector<TokenId>& tokens, const InjectionPlan* plan,
                             const CoefficientVars* coefficients, const TraceRequest& request) {
  const ModelConfig& cfg = weights.config;
  const int T = static_cast<int>(tokens.size());
  if (T < 1) {
    throw ConfigError("forward: empty token sequence");
  }
  if (T > cfg.max_seq) {
    throw ConfigError("forward: sequence length " + std::to_string(T) + " exceeds max_seq " +
                      std::to_string(cfg.max_seq));
  }
  for (TokenId id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw ConfigError("forward: unknown token id " + std::to_string(id));
    }
  }
  for (const TracePoint& p : request.points) {
    if (p.layer < 1 || p.layer > cfg.n_layers) {
      throw ConfigError("trace request layer " + std::to_string(p.layer) + " out of range");
    }
  }

  TapedForward out;
  out.trace = ActivationTrace(T);
  CoefficientVars plan_coeffs;
  const CoefficientVars* coeffs = coefficients;
  std::optional<Pcg64> noise;
  if (plan != nullptr) {
    plan->validate(cfg.n_layers, cfg.d_model);
    out.injected_rows = injection_rows(*plan, T);
    if (coeffs == nullptr) {
      plan_coeffs = bind_coefficients(tape, plan->coefficients, false);
      coeffs = &plan_coeffs;
    } else if (coeffs->layers.size() != static_cast<std::size_t>(cfg.n_layers)) {
      throw ShapeError("forward: coefficient leaves do not cover every layer");
    }
    if (plan->noise_gamma > 0.0) {
      noise = Pcg64::named(plan->noise_seed, "calibration-noise");
    }
  }

  auto combine = [&](Var stream, Var module_out, Module module, int layer) {
    if (plan == nullptr || !plan->targets(module, layer)) {
      return add(tape, stream, module_out);
    }
    const auto& c = coeffs->layers[static_cast<std::size_t>(layer - 1)];
    const bool mlp = module == Module::kMlp;
    const Var lambda = c[mlp ? CoefficientSet::kLambdaMlp : CoefficientSet::kLambdaAttn];
    const Var beta = c[mlp ? CoefficientSet::kBetaMlp : CoefficientSet::kBetaAttn];
    const RowVector ctx = plan->context.component(module, layer);
    return add(tape, stream,
               inject_rows(tape, module_out, ctx, lambda, beta, out.injected_rows, plan->formula));
  };
  auto perturb = [&](Var x) {
    if (!noise) {
      return x;
    }
    const Matrix& xv = tape.value(x);
    return perturb_rows(tape, x, plan->noise_gamma, draw_noise(*noise, xv.rows(), xv.cols()));
  };

  Var r = add(tape, gather_rows(tape, vars.token_embedding, tokens),
              slice_rows(tape, vars.position_embedding, 0, T));
  for (int l = 1; l <= cfg.n_layers; ++l) {
    const WeightVars::Layer& W = vars.layers[static_cast<std::size_t>(l - 1)];
    const Var h = layer_norm(tape, r, W.ln1_gain, W.ln1_bias);
    const Var q = linear(tape, h, W.w_q, W.b_q);
    const Var k = linear(tape, h, W.w_k, W.b_k);
    const Var v = linear(tape, h, W.w_v, W.b_v);
    const Var a = linear(tape, causal_attention(tape, q, k, v, cfg.n_heads), W.w_o, W.b_o);
    capture(tape, a, l, Module::kMha, request, out.trace);
    const Var o = perturb(combine(r, a, Module::kMha, l));

    const Var h2 = layer_norm(tape, o, W.ln2_gain, W.ln2_bias);
    const Var m = linear(tape, gelu(tape, linear(tape, h2, W.w_up, W.b_up)), W.w_down, W.b_down);
    capture(tape, m, l, Module::kMlp, request, out.trace);
    r = perturb(combine(o, m, Module::kMlp, l));

    capture(tape, r, l, Module::kHidden, request, out.trace);
    if (plan != nullptr && plan->targets(Module::kHidden, l)) {
      const auto& c = coeffs->layers[static_cast<std::size_t>(l - 1)];
      r = inject_rows(tape, r, plan->context.component(Module::kHidden, l),
                      c[CoefficientSet::kLambdaAttn], c[CoefficientSet::kBetaAttn],
                      out.injected_rows, plan->formula);
    }
  }
  const Var final_h = layer_norm(tape, r, vars.final_gain, vars.final_bias);
  out.logits = matmul(tape, final_h, vars.unembedding);
  return out;
}

ForwardResult forward(const Weights& weights, const std::vector<TokenId>& tokens,
                      const InjectionPlan* plan, const TraceRequest& trace) {
  Tape<double> tape(false);
  const WeightVars vars = bind_weights(tape, weights, false);
  TapedForward f = forward_on_tape(tape, weights, vars, tokens, plan, nullptr, trace);
  return {tape.value(f.logits), std::move(f.trace), std::move(f.injected_rows)};
}

}  // namespace i2cl
