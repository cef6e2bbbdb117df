// Command-line front end: pretrain, calibrate, eval, sweep, transfer, export.
//
// `--config FILE` reads flat `key = value` lines; each entry becomes a
// `--key value` argument placed before the ones typed on the command line,
// so explicit flags win. Exit codes: 0 success, 2 bad input, 3 numeric
// failure.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "i2cl/error.hpp"
#include "i2cl/experiment.hpp"

using namespace i2cl;

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitNumeric = 3;

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& item : KeyValueConfig::split_list(text)) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size() || item.front() == '-') {
        throw std::invalid_argument(item);
      }
      seeds.push_back(v);
    } catch (const std::logic_error&) {
      throw ConfigError("bad seed '" + item + "'");
    }
  }
  return seeds;
}

// Strings that are parsed after CLI11 is done with them.
struct RawExperiment {
  std::string methods = "zero_shot,icl,i2cl";
  std::string seeds = "1";
};

void add_experiment_options(CLI::App& app, ExperimentConfig& c, RawExperiment& raw) {
  app.add_option("--model", c.model_path, "Model weights file")->required();
  app.add_option("--task", c.task_path, "Task spec file (default: built-in task)");
  app.add_option("--out", c.output_dir, "Output directory")->capture_default_str();
  app.add_option("--methods", raw.methods,
                 "Comma list of zero_shot, icl, i2cl, icl_plus_i2cl, noise_vector, task_vector")
      ->capture_default_str();
  app.add_option("--seeds", raw.seeds, "Comma list of seeds")->capture_default_str();
  app.add_option("--demos-per-class", c.demos_per_class)->capture_default_str();
  app.add_option("--shots", c.shots, "ICL demonstrations in the prompt")->capture_default_str();
  app.add_option("--eval-size", c.eval_size)->capture_default_str();
  app.add_option("--holdout-size", c.holdout_size, "Task-vector layer selection queries")
      ->capture_default_str();
  app.add_option("--modules", c.modules, "MHA, MLP, MHA+MLP or HIDDEN")->capture_default_str();
  app.add_option("--layers", c.layers, "EARLY, MIDDLE, LATE, ALL or a list like 1,2")
      ->capture_default_str();
  app.add_option("--positions", c.positions, "ALL, FIRST, LAST or RANDOM")->capture_default_str();
  app.add_option("--formula", c.formula, "LINEAR_COMBO, ADD_ONLY or CONVEX_SCALED")
      ->capture_default_str();
  app.add_option("--corrupt-vectorize", c.corrupt_vectorize)->capture_default_str();
  app.add_option("--corrupt-calibrate", c.corrupt_calibrate)->capture_default_str();
  app.add_option("--epochs", c.calibration.epochs)->capture_default_str();
  app.add_option("--lr-start", c.calibration.lr_start)->capture_default_str();
  app.add_option("--lr-end", c.calibration.lr_end)->capture_default_str();
  app.add_option("--gamma", c.calibration.gamma, "Calibration noise scale")->capture_default_str();
  app.add_option("--init-lambda", c.calibration.init_lambda)->capture_default_str();
  app.add_option("--init-beta", c.calibration.init_beta)->capture_default_str();
  app.add_option("--weight-decay", c.calibration.weight_decay)->capture_default_str();
  app.add_option("--jobs", c.jobs, "Parallel runs")->capture_default_str();
}

void finish_experiment(ExperimentConfig& c, const RawExperiment& raw) {
  c.methods = KeyValueConfig::split_list(raw.methods);
  c.seeds = parse_seeds(raw.seeds);
  c.validate();
}

void print_rows(const std::vector<ResultRow>& rows) {
  std::printf("%-32s %-16s %8s %9s %10s %10s\n", "method", "task", "seed", "accuracy", "tokens/q",
              "cached");
  for (const ResultRow& r : rows) {
    std::printf("%-32s %-16s %8llu %9.4f %10.2f %10zu\n", r.method.c_str(), r.task.c_str(),
                static_cast<unsigned long long>(r.seed), r.accuracy, r.tokens_per_query,
                r.cached_scalars);
  }
}

// argv with config-file entries inserted right after the subcommand.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string config_path;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
    }
  }
  if (config_path.empty() || args.size() < 2) {
    return args;
  }
  if (!std::filesystem::exists(config_path)) {
    throw ConfigError("config file '" + config_path + "' does not exist");
  }
  std::vector<std::string> injected;
  const KeyValueConfig config = KeyValueConfig::load(config_path);
  for (const auto& [key, value] : config.entries()) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    injected.push_back("--" + flag);
    injected.push_back(value);
  }
  args.insert(args.begin() + 2, injected.begin(), injected.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context vector injection experiments on small causal transformers"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;
  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key = value file; command-line flags override it");
  };

  // pretrain
  PretrainJob job;
  job.model.max_seq = 160;
  job.model.seed = 1;
  CLI::App* pretrain = app.add_subcommand("pretrain", "Meta-pretrain a model on the task family");
  add_config(pretrain);
  pretrain->add_option("--out", job.out_path, "Weights file to write")->required();
  pretrain->add_option("--task", job.task_path, "Base task spec of the family");
  pretrain->add_option("--family-seed", job.family_seed)->capture_default_str();
  pretrain->add_option("--n-layers", job.model.n_layers)->capture_default_str();
  pretrain->add_option("--d-model", job.model.d_model)->capture_default_str();
  pretrain->add_option("--n-heads", job.model.n_heads)->capture_default_str();
  pretrain->add_option("--d-mlp", job.model.d_mlp)->capture_default_str();
  pretrain->add_option("--vocab-size", job.model.vocab_size)->capture_default_str();
  pretrain->add_option("--max-seq", job.model.max_seq)->capture_default_str();
  pretrain->add_option("--model-seed", job.model.seed)->capture_default_str();
  pretrain->add_option("--steps", job.training.steps)->capture_default_str();
  pretrain->add_option("--batch-size", job.training.batch_size)->capture_default_str();
  pretrain->add_option("--seq-len", job.training.seq_len)->capture_default_str();
  pretrain->add_option("--lr-start", job.training.lr_start)->capture_default_str();
  pretrain->add_option("--lr-end", job.training.lr_end)->capture_default_str();
  pretrain->add_option("--warmup-steps", job.training.warmup_steps)->capture_default_str();
  pretrain->add_option("--weight-decay", job.training.weight_decay)->capture_default_str();
  pretrain->add_option("--grad-clip", job.training.grad_clip)->capture_default_str();
  pretrain->add_option("--repeat-prob", job.training.repeat_prob)->capture_default_str();
  int log_every = 100;
  pretrain->add_option("--log-every", log_every, "Progress line interval (0: quiet)")
      ->capture_default_str();

  // eval
  ExperimentConfig eval_config;
  RawExperiment eval_raw;
  CLI::App* eval = app.add_subcommand("eval", "Evaluate methods over seeds");
  add_config(eval);
  add_experiment_options(*eval, eval_config, eval_raw);

  // sweep
  ExperimentConfig sweep_config;
  RawExperiment sweep_raw;
  sweep_raw.methods = "i2cl";
  SweepSpec sweep_spec;
  std::string sweep_values;
  CLI::App* sweep = app.add_subcommand("sweep", "Evaluate along one ablation axis");
  add_config(sweep);
  add_experiment_options(*sweep, sweep_config, sweep_raw);
  sweep->add_option("--axis", sweep_spec.axis, "demos, gamma, modules, layers, positions, formula")
      ->required();
  sweep->add_option("--values", sweep_values,
                    "Axis values split on ';' if present, else ','")
      ->required();

  // calibrate
  ExperimentConfig cal_config;
  RawExperiment cal_raw;
  std::filesystem::path cal_registry = "anchors";
  std::string anchor_name;
  CLI::App* cal = app.add_subcommand("calibrate", "Calibrate and store one anchor per seed");
  add_config(cal);
  add_experiment_options(*cal, cal_config, cal_raw);
  cal->add_option("--registry", cal_registry, "Anchor registry directory")->capture_default_str();
  cal->add_option("--name", anchor_name, "Anchor name prefix (default: task name)");

  // transfer
  ExperimentConfig tr_config;
  RawExperiment tr_raw;
  std::filesystem::path tr_registry = "anchors";
  TransferOptions tr_options;
  CLI::App* tr = app.add_subcommand("transfer", "Calibrate a new task starting from anchors");
  add_config(tr);
  add_experiment_options(*tr, tr_config, tr_raw);
  tr->add_option("--registry", tr_registry, "Anchor registry directory")->capture_default_str();
  tr->add_option("--threshold", tr_options.threshold, "Cosine threshold")->capture_default_str();
  tr->add_option("--tau", tr_options.tau, "Softmax temperature")->capture_default_str();

  // export
  std::filesystem::path ex_registry = "anchors";
  std::filesystem::path ex_out = "export";
  CLI::App* ex = app.add_subcommand("export", "Write anchor vectors, coefficients and cosines");
  add_config(ex);
  ex->add_option("--registry", ex_registry)->capture_default_str();
  ex->add_option("--out", ex_out)->capture_default_str();

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    args.pop_back();  // program name
    app.parse(args);

    if (*pretrain) {
      job.training.validate();
      job.model.validate();
      const PretrainResult r = cmd_pretrain(job, [&](const PretrainStep& s) {
        if (log_every > 0 && (s.step % log_every == 0 || s.step + 1 == job.training.steps)) {
          std::fprintf(stderr, "step %d lr %.3g loss %.4f\n", s.step, s.lr, s.loss);
        }
      });
      std::printf("wrote %s (weights_hash %s)\n", output_path(job.out_path).string().c_str(),
                  r.weights.hash().c_str());
    } else if (*eval) {
      finish_experiment(eval_config, eval_raw);
      print_rows(cmd_eval(eval_config));
    } else if (*sweep) {
      finish_experiment(sweep_config, sweep_raw);
      const char sep = sweep_values.find(';') != std::string::npos ? ';' : ',';
      std::string item;
      std::stringstream ss(sweep_values);
      while (std::getline(ss, item, sep)) {
        if (!item.empty()) {
          sweep_spec.values.push_back(item);
        }
      }
      print_rows(cmd_sweep(sweep_config, sweep_spec));
    } else if (*cal) {
      finish_experiment(cal_config, cal_raw);
      for (const Anchor& a : cmd_calibrate(cal_config, cal_registry, anchor_name)) {
        std::printf("anchor %s\n", a.task_name.c_str());
      }
    } else if (*tr) {
      finish_experiment(tr_config, tr_raw);
      print_rows(cmd_transfer(tr_config, tr_registry, tr_options));
    } else if (*ex) {
      cmd_export(ex_registry, ex_out);
      std::printf("wrote %s\n", output_path(ex_out).string().c_str());
    }
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitBadInput;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  return 0;
}
