#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "i2cl/baselines.hpp"
#include "i2cl/error.hpp"

using namespace i2cl;

namespace {

Weights model(int L = 2, std::uint64_t seed = 3) {
  ModelConfig c;
  c.n_layers = L;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_mlp = 32;
  c.max_seq = 192;
  c.seed = seed;
  Weights w = init_weights(c);
  w.for_each([](const std::string& name, Matrix& m) {
    if (name.find("gain") == std::string::npos) {
      m *= 8.0;
    }
  });
  return w;
}

struct Fixture {
  SyntheticTaskSpec task;
  Dataset data;
  DemoSet demos;
  I2clOptions options;

  Fixture() {
    task.seed = 17;
    data = generate_task(task, 30, 9, 6);
    demos = {sample_demos(data, 1, 2), task.format};
    options.calibration.epochs = 4;
    options.calibration.seed = 5;
  }
};

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "i2cl_test_baselines";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void same_records(const Evaluation& a, const Evaluation& b) {
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].logprobs == b.records[i].logprobs);
    CHECK(a.records[i].pred == b.records[i].pred);
  }
  CHECK(a.accuracy == b.accuracy);
}

}  // namespace

TEST_CASE("baseline spec parameters") {
  CHECK_NOTHROW(BaselineSpec::zero_shot().validate());
  CHECK_NOTHROW(BaselineSpec::task_vector().validate());
  CHECK(*BaselineSpec::task_vector().holdout_size == 32);
  CHECK_NOTHROW(BaselineSpec::noise_vector(3).validate());
  CHECK_THROWS_AS((BaselineSpec{BaselineKind::kNoiseVector, {}, {}}).validate(), ConfigError);
  CHECK_THROWS_AS((BaselineSpec{BaselineKind::kIcl, 32, {}}).validate(), ConfigError);
  CHECK_THROWS_AS((BaselineSpec{BaselineKind::kTaskVector, 0, {}}).validate(), ConfigError);
  for (auto k : {BaselineKind::kZeroShot, BaselineKind::kIcl, BaselineKind::kIclPlusI2cl,
                 BaselineKind::kNoiseVector, BaselineKind::kTaskVector}) {
    CHECK(parse_baseline_kind(to_string(k)) == k);
  }
  CHECK_THROWS_AS(parse_baseline_kind("FEW_SHOT"), ConfigError);
}

TEST_CASE("zero-shot and ICL") {
  const Weights w = model();
  const Fixture f;
  const MethodResult zs = run_zero_shot(w, f.task, f.data.eval);
  const InjectionPlan identity = InjectionPlan::standard(
      build_context(w, f.demos), CoefficientSet::uniform(2, 0.0, 1.0));
  same_records(zs.eval, evaluate(w, f.data.eval, f.task.classes, f.task.format, "", &identity));
  same_records(zs.eval, run_zero_shot(w, f.task, f.data.eval).eval);
  CHECK(zs.cached_scalars == 0);

  same_records(run_icl(w, f.task, {{}, f.task.format}, f.data.eval).eval, zs.eval);

  const MethodResult icl = run_icl(w, f.task, f.demos, f.data.eval);
  const std::string prefix = icl_prefix(f.demos);
  CHECK(prefix.back() == '\n');
  CHECK(prefix.find("\n\n") == std::string::npos);
  const auto M = Tokenizer::encode(prefix).size();
  CHECK(icl.tokens_per_query == doctest::Approx(zs.tokens_per_query + static_cast<double>(M)));
  CHECK(icl.cached_scalars == 2 * M * 16 * 2);

  DemoSet many{sample_demos(f.data, 10, 1), f.task.format};
  CHECK_THROWS_AS(run_icl(w, f.task, many, f.data.eval), ConfigError);
}

TEST_CASE("ICL plus I2CL") {
  const Weights w = model();
  const Fixture f;
  const MethodResult icl = run_icl(w, f.task, f.demos, f.data.eval);
  const MethodResult identity = run_icl_plus_i2cl(w, f.task, f.demos, f.data.eval, f.options,
                                                  CoefficientSet::uniform(2, 0.0, 1.0));
  same_records(identity.eval, icl.eval);
  CHECK(identity.tokens_per_query == icl.tokens_per_query);
  CHECK(identity.cached_scalars == icl.cached_scalars + 2 * 16 * 2 + 4 * 2);

  const MethodResult cal = run_icl_plus_i2cl(w, f.task, f.demos, f.data.eval, f.options);
  REQUIRE(cal.calibration);
  CHECK(cal.calibration->history.size() == 4);
  CHECK(cal.audit.at("prefix_tokens") == icl.audit.at("prefix_tokens"));
}

TEST_CASE("noise vector shares the I2CL pipeline") {
  const Weights w = model();
  const Fixture f;
  const MethodResult i2cl = run_i2cl(w, f.task, f.demos, f.data.eval, f.options);
  const MethodResult n1 = run_noise_vector(w, f.task, f.demos, f.data.eval, 1, f.options);
  const MethodResult n2 = run_noise_vector(w, f.task, f.demos, f.data.eval, 2, f.options);
  CHECK_FALSE(n1.context->attn == n2.context->attn);
  CHECK(n1.cached_scalars == i2cl.cached_scalars);

  // Only the declared deltas differ between the two audit logs.
  const std::set<std::string> allowed{"method", "vector_source", "context_hash",
                                      "coefficients_hash"};
  REQUIRE(n1.audit.size() == i2cl.audit.size());
  for (const auto& [key, value] : i2cl.audit) {
    INFO(key);
    REQUIRE(n1.audit.count(key));
    if (!allowed.count(key)) {
      CHECK(n1.audit.at(key) == value);
    }
  }
  CHECK(n1.audit.at("vector_source") != i2cl.audit.at("vector_source"));

  // Standard-normal components.
  const Matrix& a = n1.context->attn;
  CHECK(std::abs(a.mean()) < 0.5);
  CHECK(a.cwiseAbs().maxCoeff() < 6.0);
}

TEST_CASE("I2CL with split vectorize and calibrate sets") {
  const Weights w = model();
  const Fixture f;
  const DemoSet other{sample_demos(f.data, 1, 9), f.task.format};
  const MethodResult split = run_i2cl(w, f.task, f.demos, other, f.data.eval, f.options);
  const MethodResult same = run_i2cl(w, f.task, f.demos, f.data.eval, f.options);
  CHECK(*split.context == *same.context);
  CHECK(split.audit.at("context_hash") == same.audit.at("context_hash"));
  CHECK_FALSE(split.calibration->coefficients == same.calibration->coefficients);
  CHECK(same.tokens_per_query == run_zero_shot(w, f.task, f.data.eval).tokens_per_query);
  CHECK(same.cached_scalars == 2 * 16 * 2 + 4 * 2);
}

TEST_CASE("task vector") {
  const Fixture f;
  SUBCASE("one layer") {
    const Weights w = model(1);
    const MethodResult r = run_task_vector(w, f.task, f.demos, f.data.holdout, f.data.eval, 4);
    CHECK(*r.chosen_layer == 1);
  }
  SUBCASE("layer choice and dummy query") {
    const Weights w = model(3);
    const MethodResult r = run_task_vector(w, f.task, f.demos, f.data.holdout, f.data.eval, 4);
    REQUIRE(r.chosen_layer);
    CHECK(*r.chosen_layer >= 1);
    CHECK(*r.chosen_layer <= 3);
    // The dummy query ends where its label would start.
    const std::string dummy = r.audit.at("dummy_query");
    CHECK(dummy.substr(dummy.size() - f.task.format.label_prefix.size()) ==
          f.task.format.label_prefix);
    // Chosen layer is the first maximum of the recorded holdout scores.
    std::stringstream ss(r.audit.at("holdout_accuracy"));
    std::vector<double> scores;
    for (double x; ss >> x;) {
      scores.push_back(x);
    }
    REQUIRE(scores.size() == 3);
    CHECK(static_cast<int>(std::max_element(scores.begin(), scores.end()) - scores.begin()) + 1 ==
          *r.chosen_layer);
    CHECK(r.tokens_per_query == run_zero_shot(w, f.task, f.data.eval).tokens_per_query);
  }
  SUBCASE("degenerate holdout of identical queries") {
    const Weights w = model(3);
    const std::vector<Demonstration> copies(5, f.data.holdout.front());
    const MethodResult a = run_task_vector(w, f.task, f.demos, copies, f.data.eval, 4);
    const MethodResult b = run_task_vector(w, f.task, f.demos, copies, f.data.eval, 4);
    CHECK(*a.chosen_layer == *b.chosen_layer);
    // Identical copies make every layer score exactly 0 or 1.
    std::stringstream ss(a.audit.at("holdout_accuracy"));
    for (double x; ss >> x;) {
      CHECK((x == 0.0 || x == 1.0));
    }
  }
  SUBCASE("overlap is rejected") {
    const Weights w = model(2);
    std::vector<Demonstration> bad = f.data.holdout;
    bad.push_back(f.data.eval.front());
    CHECK_THROWS_AS(run_task_vector(w, f.task, f.demos, bad, f.data.eval, 4), ConfigError);
    bad = f.data.holdout;
    bad.push_back(f.demos.demos.front());
    CHECK_THROWS_AS(run_task_vector(w, f.task, f.demos, bad, f.data.eval, 4), ConfigError);
    CHECK_THROWS_AS(run_task_vector(w, f.task, f.demos, {}, f.data.eval, 4), ConfigError);
  }
  SUBCASE("dispatch truncates the holdout") {
    const Weights w = model(2);
    const MethodResult r = run_baseline(BaselineSpec::task_vector(4), w, f.task, f.demos,
                                        f.data.holdout, f.data.eval, f.options, 4);
    CHECK(r.method == "TASK_VECTOR");
    CHECK_THROWS_AS(run_baseline(BaselineSpec::task_vector(32), w, f.task, f.demos,
                                 f.data.holdout, f.data.eval, f.options, 4),
                    ConfigError);
  }
}

TEST_CASE("results CSV") {
  const auto path = temp_path("results.csv");
  std::filesystem::remove(path);
  append_results({{"ICL", "t1", 1, 0.5, 40.25, 100}}, path, {"weights_hash = abc"});
  append_results({{"I2CL", "t1", 1, 0.75, 20.0, 36}, {"ZERO_SHOT", "t1", 2, 1.0 / 3.0, 20.0, 0}},
                 path, {"ignored on append"});
  std::ifstream in(path);
  std::string first, second;
  std::getline(in, first);
  std::getline(in, second);
  CHECK(first == "# weights_hash = abc");
  CHECK(second == "method,task,seed,accuracy,tokens_per_query,cached_scalars");
  const auto rows = read_results(path);
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].method == "I2CL");
  CHECK(rows[2].accuracy == 1.0 / 3.0);
  CHECK(rows[0].tokens_per_query == 40.25);
  CHECK(rows[0].cached_scalars == 100);

  std::ofstream(temp_path("bad.csv")) << "method,task\n";
  CHECK_THROWS_AS(read_results(temp_path("bad.csv")), FormatError);
}
