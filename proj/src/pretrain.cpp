#include "i2cl/pretrain.hpp"

#include <cmath>

#include "i2cl/csv.hpp"
#include "i2cl/optim.hpp"

namespace i2cl {

void PretrainConfig::validate() const {
  if (steps < 0 || batch_size < 1 || seq_len < 2) {
    throw ConfigError("pretraining needs steps >= 0, batch_size >= 1, seq_len >= 2");
  }
  if (!(lr_end > 0.0) || !(lr_start >= lr_end) || warmup_steps < 0) {
    throw ConfigError("pretraining needs lr_start >= lr_end > 0 and warmup_steps >= 0");
  }
  if (!(weight_decay >= 0.0) || !(repeat_prob >= 0.0 && repeat_prob < 1.0)) {
    throw ConfigError("pretraining needs weight_decay >= 0 and repeat_prob in [0, 1)");
  }
}

std::vector<TokenId> pretraining_sequence(const TaskFamily& family, int seq_len,
                                          double repeat_prob, Pcg64& rng) {
  const SyntheticTaskSpec task = family.sample(rng);
  task.validate();
  const auto n_classes = static_cast<std::uint64_t>(task.classes.size());
  std::vector<Demonstration> seen;
  std::string text;
  const auto want = static_cast<std::size_t>(seq_len) + 1;
  while (text.size() < want) {
    Demonstration d;
    if (!seen.empty() && rng.uniform() < repeat_prob) {
      d = seen[rng.below(seen.size())];
    } else {
      d.class_index = static_cast<int>(rng.below(n_classes));
      d.x = sample_input(task, d.class_index, rng);
      d.y = task.classes[static_cast<std::size_t>(d.class_index)];
      seen.push_back(d);
    }
    if (!text.empty()) {
      text += "\n";
    }
    text += task.format.render(d.x, d.y);
  }
  text.resize(want);
  return Tokenizer::encode(text);
}

namespace {

double lr_at(const PretrainConfig& c, int step) {
  const double base = cosine_lr(c.lr_start, c.lr_end, static_cast<std::size_t>(step),
                                static_cast<std::size_t>(c.steps));
  if (step < c.warmup_steps) {
    return base * static_cast<double>(step + 1) / static_cast<double>(c.warmup_steps);
  }
  return base;
}

}  // namespace

PretrainResult meta_pretrain(const ModelConfig& model, const TaskFamily& family,
                             std::uint64_t task_family_seed, const PretrainConfig& config,
                             const std::filesystem::path& out_path,
                             const std::function<void(const PretrainStep&)>& on_step) {
  model.validate();
  config.validate();
  family.base.validate();
  if (config.seq_len > model.max_seq) {
    throw ConfigError("pretraining seq_len exceeds the model's max_seq");
  }

  PretrainResult result{init_weights(model), {}};
  Weights& w = result.weights;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes;
  std::vector<Matrix*> params;
  w.for_each([&](const std::string&, Matrix& m) {
    shapes.emplace_back(m.rows(), m.cols());
    params.push_back(&m);
  });
  AdamW<double> opt(shapes, {0.9, 0.999, 1e-8, config.weight_decay});
  Pcg64 data = Pcg64::named(task_family_seed, "meta-pretrain");
  const double inv_batch = 1.0 / static_cast<double>(config.batch_size);

  for (int step = 0; step < config.steps; ++step) {
    std::vector<Matrix> grads;
    for (Matrix* p : params) {
      grads.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
    double loss = 0.0;
    for (int b = 0; b < config.batch_size; ++b) {
      const std::vector<TokenId> seq =
          pretraining_sequence(family, config.seq_len, config.repeat_prob, data);
      const std::vector<TokenId> input(seq.begin(), seq.end() - 1);
      const std::vector<int> targets(seq.begin() + 1, seq.end());
      Tape<double> tape;
      const WeightVars vars = bind_weights(tape, w, true);
      const TapedForward f = forward_on_tape(tape, w, vars, input, nullptr, nullptr, {});
      const Var l =
          cross_entropy_rows(tape, f.logits, targets, std::vector<double>(targets.size(), 1.0));
      loss += tape.item(l) * inv_batch;
      tape.backward(l);
      const std::vector<Var> leaves = vars.all();
      for (std::size_t k = 0; k < leaves.size(); ++k) {
        grads[k] += tape.grad(leaves[k]) * inv_batch;
      }
    }
    if (!std::isfinite(loss)) {
      throw NumericError("meta-pretraining loss is not finite at step " + std::to_string(step) +
                         "; lower lr_start or enable grad_clip");
    }
    if (config.grad_clip > 0.0) {
      double sq = 0.0;
      for (const Matrix& g : grads) {
        sq += g.squaredNorm();
      }
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip) {
        for (Matrix& g : grads) {
          g *= config.grad_clip / norm;
        }
      }
    }
    const double lr = lr_at(config, step);
    opt.step(params, grads, lr);
    result.history.push_back({step, lr, loss});
    if (on_step) {
      on_step(result.history.back());
    }
  }
  if (!out_path.empty()) {
    save_weights(w, out_path);
  }
  return result;
}

void write_pretrain_log(const std::vector<PretrainStep>& history, const std::filesystem::path& path,
                        const std::vector<std::string>& metadata) {
  std::ofstream out = open_csv(path, metadata);
  out << "step,lr,loss\n";
  for (const PretrainStep& s : history) {
    out << s.step << "," << s.lr << "," << s.loss << "\n";
  }
  finish_csv(out, path);
}

}  // namespace i2cl
