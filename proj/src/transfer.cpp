#include "i2cl/transfer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "i2cl/kv_config.hpp"

namespace i2cl {

std::vector<double> flatten(const CoefficientSet& c) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(c.values.size()));
  for (Eigen::Index l = 0; l < c.values.rows(); ++l) {
    for (Eigen::Index k = 0; k < 4; ++k) {
      out.push_back(c.values(l, k));
    }
  }
  return out;
}

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) {
    throw ConfigError("cosine: length mismatch (" + std::to_string(u.size()) + " vs " +
                      std::to_string(v.size()) + ")");
  }
  double uv = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    uv += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) {
    throw ConfigError("cosine: zero-norm vector");
  }
  return std::clamp(uv / (std::sqrt(uu) * std::sqrt(vv)), -1.0, 1.0);
}

std::vector<double> transfer_weights(const std::vector<double>& similarities, double tau) {
  if (similarities.empty()) {
    throw ConfigError("transfer_weights: empty retained set");
  }
  if (!(tau > 0.0)) {
    throw ConfigError("transfer_weights: tau must be > 0");
  }
  // Shifting by the max leaves the softmax unchanged and keeps exp finite.
  const double top = *std::max_element(similarities.begin(), similarities.end());
  std::vector<double> p;
  double total = 0.0;
  for (double s : similarities) {
    p.push_back(std::exp((s - top) / tau));
    total += p.back();
  }
  for (double& x : p) {
    x /= total;
  }
  return p;
}

namespace {

void check_consistent(const std::vector<Anchor>& anchors) {
  for (const Anchor& a : anchors) {
    a.context.validate();
    a.coefficients.validate();
    if (a.context.n_layers() != anchors.front().context.n_layers() ||
        a.context.d_model() != anchors.front().context.d_model() ||
        a.coefficients.n_layers() != a.context.n_layers()) {
      throw ShapeError("anchor '" + a.task_name + "' does not match the registry's L and D");
    }
  }
}

}  // namespace

TransferPlan plan_transfer(const CoefficientSet& calibrated, const std::vector<Anchor>& anchors,
                           double threshold, double tau) {
  check_consistent(anchors);
  TransferPlan plan;
  const std::vector<double> c_new = flatten(calibrated);
  std::vector<double> kept;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    plan.similarities.push_back(cosine(c_new, flatten(anchors[i].coefficients)));
    if (plan.similarities.back() > threshold) {
      plan.retained.push_back(i);
      kept.push_back(plan.similarities.back());
    }
  }
  if (plan.retained.empty()) {
    return plan;
  }
  plan.probabilities = transfer_weights(kept, tau);
  const Anchor& first = anchors[plan.retained.front()];
  plan.context.attn = Matrix::Zero(first.context.attn.rows(), first.context.attn.cols());
  plan.context.mlp = plan.context.attn;
  plan.context.hidden = plan.context.attn;
  plan.coefficients.values = Matrix::Zero(first.coefficients.values.rows(), 4);
  std::size_t sources = 0;
  for (std::size_t k = 0; k < plan.retained.size(); ++k) {
    const Anchor& a = anchors[plan.retained[k]];
    const double p = plan.probabilities[k];
    plan.context.attn += p * a.context.attn;
    plan.context.mlp += p * a.context.mlp;
    plan.context.hidden += p * a.context.hidden;
    plan.coefficients.values += p * a.coefficients.values;
    sources += a.context.source_count;
  }
  plan.context.source_count = sources;
  return plan;
}

TransferResult transfer_learn(const Weights& weights, const std::vector<Anchor>& anchors,
                              const DemoSet& new_demos, const TransferOptions& options) {
  if (!anchors.empty() &&
      (anchors.front().context.n_layers() != static_cast<std::size_t>(weights.config.n_layers) ||
       anchors.front().context.d_model() != static_cast<std::size_t>(weights.config.d_model))) {
    throw ShapeError("anchors do not match the model's L and D");
  }
  const std::size_t L = static_cast<std::size_t>(weights.config.n_layers);
  const std::vector<LabeledPrompt> prompts = calibration_prompts(new_demos);

  TransferResult r;
  r.stage_one_context = build_context(weights, new_demos);
  r.stage_one = calibrate(weights, prompts,
                          options.sites.plan(r.stage_one_context,
                                             default_init(L, options.calibration)),
                          options.calibration);
  r.plan = plan_transfer(r.stage_one.coefficients, anchors, options.threshold, options.tau);
  if (r.plan.retained.empty()) {
    r.coefficients = r.stage_one.coefficients;
    r.context = r.stage_one_context;
    return r;
  }
  r.transferred = true;
  r.context = r.plan.context;
  r.stage_two = calibrate(weights, prompts, options.sites.plan(r.context, r.plan.coefficients),
                          options.calibration);
  r.coefficients = r.stage_two->coefficients;
  return r;
}

namespace {

bool safe_name(const std::string& s) {
  return !s.empty() && s != "." && s != ".." &&
         std::all_of(s.begin(), s.end(), [](char c) {
           return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
         });
}

}  // namespace

void save_anchor(const Anchor& anchor, const std::filesystem::path& registry, std::uint64_t seed,
                 const std::string& weights_hash) {
  if (!safe_name(anchor.task_name)) {
    throw ConfigError("anchor task name '" + anchor.task_name +
                      "' must be non-empty and use only letters, digits, '_', '-', '.'");
  }
  const auto dir = registry / anchor.task_name;
  std::filesystem::create_directories(dir);
  save_context(anchor.context, dir / "context.bin");
  save_coefficients(anchor.coefficients, anchor.context.d_model(), dir / "coefficients.bin");
  KeyValueConfig m;
  m.set("task_name", anchor.task_name);
  m.set("n_layers", std::to_string(anchor.context.n_layers()));
  m.set("d_model", std::to_string(anchor.context.d_model()));
  m.set("seed", std::to_string(seed));
  m.set("weights_hash", weights_hash);
  m.save(dir / "manifest.txt");
}

std::vector<Anchor> load_registry(const std::filesystem::path& registry,
                                  const std::string& weights_hash) {
  if (!std::filesystem::is_directory(registry)) {
    throw ConfigError("anchor registry '" + registry.string() + "' is not a directory");
  }
  std::vector<Anchor> anchors;
  for (const auto& entry : std::filesystem::directory_iterator(registry)) {
    if (!entry.is_directory()) {
      continue;
    }
    const auto dir = entry.path();
    const KeyValueConfig m = KeyValueConfig::load(dir / "manifest.txt");
    Anchor a;
    a.task_name = m.get("task_name");
    if (!weights_hash.empty() && m.get("weights_hash") != weights_hash) {
      throw ConfigError("anchor '" + a.task_name + "' was calibrated on checkpoint " +
                        m.get("weights_hash") + ", not " + weights_hash);
    }
    a.context = load_context(dir / "context.bin");
    std::size_t d_model = 0;
    a.coefficients = load_coefficients(dir / "coefficients.bin", &d_model);
    if (static_cast<long long>(a.context.n_layers()) != m.get_int("n_layers", -1) ||
        static_cast<long long>(a.context.d_model()) != m.get_int("d_model", -1) ||
        d_model != a.context.d_model() || a.coefficients.n_layers() != a.context.n_layers()) {
      throw FormatError("anchor '" + a.task_name + "': files disagree with the manifest");
    }
    anchors.push_back(std::move(a));
  }
  std::sort(anchors.begin(), anchors.end(),
            [](const Anchor& x, const Anchor& y) { return x.task_name < y.task_name; });
  check_consistent(anchors);
  return anchors;
}

}  // namespace i2cl
