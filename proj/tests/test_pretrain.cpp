#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "i2cl/error.hpp"
#include "i2cl/pretrain.hpp"

using namespace i2cl;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.n_layers = 1;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.max_seq = 64;
  c.seed = 4;
  return c;
}

PretrainConfig short_run(int steps) {
  PretrainConfig p;
  p.steps = steps;
  p.batch_size = 4;
  p.seq_len = 48;
  p.lr_start = 1e-2;
  p.lr_end = 1e-3;
  p.warmup_steps = 5;
  return p;
}

double mean_loss(const std::vector<PretrainStep>& h, std::size_t from, std::size_t to) {
  double s = 0.0;
  for (std::size_t i = from; i < to; ++i) {
    s += h[i].loss;
  }
  return s / static_cast<double>(to - from);
}

}  // namespace

TEST_CASE("pretraining sequences") {
  const TaskFamily family{SyntheticTaskSpec{}};
  Pcg64 a(3), b(3);
  const auto s1 = pretraining_sequence(family, 120, 0.5, a);
  CHECK(s1.size() == 121);
  CHECK(s1 == pretraining_sequence(family, 120, 0.5, b));

  // Whole lines follow the template and one task maps every class to one label.
  const std::string text = Tokenizer::decode(s1);
  std::vector<std::string> lines;
  std::stringstream ss(text);
  for (std::string line; std::getline(ss, line);) {
    lines.push_back(line);
  }
  REQUIRE(lines.size() >= 4);
  CHECK(lines[0].rfind("Input: ", 0) == 0);
  CHECK(lines[1].rfind("Label: ", 0) == 0);
  std::set<std::string> labels;
  for (std::size_t i = 0; i + 1 < lines.size(); i += 2) {
    CHECK(lines[i].rfind("Input: ", 0) == 0);
    CHECK(lines[i + 1].rfind("Label: ", 0) == 0);
    if (i + 2 < lines.size()) {
      labels.insert(lines[i + 1].substr(7));
    }
  }
  CHECK(labels.size() <= 3);

  // With a repeat probability close to one, inputs recur within the sequence.
  Pcg64 c(4);
  const std::string repeats = Tokenizer::decode(pretraining_sequence(family, 160, 0.95, c));
  std::map<std::string, int> count;
  std::stringstream rs(repeats);
  for (std::string line; std::getline(rs, line);) {
    if (line.rfind("Input: ", 0) == 0) {
      ++count[line];
    }
  }
  int most = 0;
  for (const auto& [line, n] : count) {
    most = std::max(most, n);
  }
  CHECK(most >= 3);
}

TEST_CASE("zero steps returns the initial weights") {
  const TaskFamily family{SyntheticTaskSpec{}};
  const PretrainResult r = meta_pretrain(tiny(), family, 1, short_run(0));
  CHECK(r.history.empty());
  CHECK(r.weights.hash() == init_weights(tiny()).hash());
}

TEST_CASE("short run lowers the loss and is reproducible") {
  const TaskFamily family{SyntheticTaskSpec{}};
  const auto path = std::filesystem::temp_directory_path() / "i2cl_test_pretrain.bin";
  std::filesystem::remove(path);
  const PretrainResult r = meta_pretrain(tiny(), family, 1, short_run(60), path);
  REQUIRE(r.history.size() == 60);
  CHECK(mean_loss(r.history, 50, 60) < mean_loss(r.history, 0, 10) - 0.5);
  CHECK(load_weights(path).hash() == r.weights.hash());

  // Warmup then cosine decay.
  CHECK(r.history[0].lr == doctest::Approx(1e-2 / 5.0).epsilon(0.01));
  CHECK(r.history[4].lr > r.history[3].lr);
  CHECK(r.history[59].lr < r.history[10].lr);
  CHECK(r.history[59].lr == doctest::Approx(1e-3));

  const PretrainResult again = meta_pretrain(tiny(), family, 1, short_run(60));
  CHECK(again.weights.hash() == r.weights.hash());
  const PretrainResult other = meta_pretrain(tiny(), family, 2, short_run(5));
  const PretrainResult same_seed = meta_pretrain(tiny(), family, 1, short_run(5));
  CHECK(other.weights.hash() != same_seed.weights.hash());

  const auto log = std::filesystem::temp_directory_path() / "i2cl_test_pretrain.loss.csv";
  write_pretrain_log(r.history, log, {"note = x"});
  std::ifstream in(log);
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  CHECK(first == "# note = x");
  CHECK(second == "step,lr,loss");
}

TEST_CASE("divergence and bad configs") {
  const TaskFamily family{SyntheticTaskSpec{}};
  PretrainConfig wild = short_run(50);
  wild.lr_start = 1e8;
  wild.lr_end = 1e7;
  wild.warmup_steps = 0;
  wild.grad_clip = 0.0;
  CHECK_THROWS_AS(meta_pretrain(tiny(), family, 1, wild), NumericError);

  PretrainConfig c = short_run(1);
  c.seq_len = 65;
  CHECK_THROWS_AS(meta_pretrain(tiny(), family, 1, c), ConfigError);
  c = short_run(1);
  c.lr_end = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = short_run(1);
  c.repeat_prob = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = short_run(-1);
  CHECK_THROWS_AS(c.validate(), ConfigError);
}
