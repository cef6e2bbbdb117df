// Drives the built command-line tool end to end.

#include <sys/wait.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "i2cl/error.hpp"
#include "i2cl/experiment.hpp"

using namespace i2cl;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "i2cl_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Exit status of the tool; stdout and stderr land in `log`.
int run(const std::string& args, const std::string& log = "last.log") {
  const std::string cmd = "cd '" + work_dir().string() + "' && '" + I2CL_CLI_PATH + "' " + args +
                          " > '" + log + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A tiny trained-for-a-few-steps model shared by every case.
const std::string& model() {
  static const std::string name = [] {
    const int rc = run(
        "pretrain --out tiny.bin --steps 4 --n-layers 2 --d-model 16 --n-heads 2 --d-mlp 32 "
        "--batch-size 2 --seq-len 64 --max-seq 256");
    REQUIRE(rc == 0);
    return std::string("tiny.bin");
  }();
  return name;
}

std::string fast() { return " --model " + model() + " --epochs 3 --eval-size 12"; }

}  // namespace

TEST_CASE("pretrain writes a model and a loss log") {
  model();
  CHECK(fs::exists(work_dir() / "tiny.bin"));
  const std::string log = slurp(work_dir() / "tiny.bin.loss.csv");
  CHECK(log.find("# weights_hash = ") == 0);
  CHECK(log.find("step,lr,loss\n") != std::string::npos);
  // Diverging run exits with the numeric code.
  CHECK(run("pretrain --out wild.bin --steps 40 --n-layers 1 --d-model 16 --n-heads 2 --d-mlp 32 "
            "--batch-size 2 --seq-len 48 --max-seq 64 --lr-start 1e8 --lr-end 1e7 "
            "--warmup-steps 0 --grad-clip 0") == 3);
  CHECK(slurp(work_dir() / "last.log").find("numeric error") != std::string::npos);
}

TEST_CASE("eval with one method and one seed") {
  CHECK(run("eval --methods zero_shot --seeds 1 --out one" + fast()) == 0);
  const auto rows = read_results(work_dir() / "one" / "results.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].method == "ZERO_SHOT");
  CHECK(fs::exists(work_dir() / "one" / "summary.csv"));
  CHECK(fs::exists(work_dir() / "one" / "queries" / "ZERO_SHOT_synthetic_seed1.csv"));
}

TEST_CASE("bad input exits with code 2 and says why") {
  CHECK(run("eval --model missing.bin --methods zero_shot") == 2);
  CHECK(slurp(work_dir() / "last.log").find("missing.bin") != std::string::npos);
  CHECK(run("eval --methods few_shot" + fast()) == 2);
  CHECK(run("eval --seeds x" + fast()) == 2);
  CHECK(run("eval --no-such-flag 1" + fast()) == 2);
  CHECK(run("sweep --axis layers --values LATE" + fast()) == 2);
  CHECK(slurp(work_dir() / "last.log").find("LATE") != std::string::npos);
  CHECK(run("eval --config nowhere.txt" + fast()) == 2);
  CHECK(run("frobnicate") == 2);
  CHECK(run("eval --help") == 0);
}

TEST_CASE("three methods over five seeds and the summary") {
  REQUIRE(run("eval --methods zero_shot,icl,i2cl --seeds 1,2,3,4,5 --out grid" + fast()) == 0);
  const auto rows = read_results(work_dir() / "grid" / "results.csv");
  REQUIRE(rows.size() == 15);

  // Recompute mean and sample std per method from the rows.
  const std::string summary = slurp(work_dir() / "grid" / "summary.csv");
  for (const std::string method : {"ZERO_SHOT", "ICL", "I2CL"}) {
    std::vector<double> xs;
    for (const ResultRow& r : rows) {
      if (r.method == method) {
        xs.push_back(r.accuracy);
      }
    }
    REQUIRE(xs.size() == 5);
    double mean = 0.0, ss = 0.0;
    for (double x : xs) {
      mean += x / 5.0;
    }
    for (double x : xs) {
      ss += (x - mean) * (x - mean);
    }
    const std::string key = "\n" + method + ",synthetic,5,";
    const auto at = summary.find(key);
    REQUIRE(at != std::string::npos);
    std::stringstream line(summary.substr(at + key.size()));
    double got_mean = 0.0, got_std = 0.0;
    char comma = 0;
    line >> got_mean >> comma >> got_std;
    CHECK(std::abs(got_mean - mean) < 1e-12);
    CHECK(std::abs(got_std - std::sqrt(ss / 4.0)) < 1e-12);
  }

  // A second invocation appends and the summary covers both.
  REQUIRE(run("eval --methods zero_shot --seeds 6 --out grid" + fast()) == 0);
  CHECK(read_results(work_dir() / "grid" / "results.csv").size() == 16);
  CHECK(slurp(work_dir() / "grid" / "summary.csv").find("\nZERO_SHOT,synthetic,6,") !=
        std::string::npos);
}

TEST_CASE("sweeps") {
  REQUIRE(run("sweep --axis demos --values 1,5,25 --seeds 1,2,3 --out demos" + fast()) == 0);
  const auto rows = read_results(work_dir() / "demos" / "results.csv");
  REQUIRE(rows.size() == 9);
  const std::vector<std::string> tags{"I2CL[demos=1]", "I2CL[demos=5]", "I2CL[demos=25]"};
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(rows[i].method == tags[i / 3]);
    CHECK(rows[i].seed == i % 3 + 1);
  }

  REQUIRE(run("sweep --axis modules --values 'MHA;MLP;MHA+MLP;HIDDEN' --out modules" + fast()) ==
          0);
  const auto m = read_results(work_dir() / "modules" / "results.csv");
  REQUIRE(m.size() == 4);
  CHECK(m[0].method == "I2CL[MHA]");
  CHECK(m[1].method == "I2CL[MLP]");
  CHECK(m[2].method == "I2CL[MHA+MLP]");
  CHECK(m[3].method == "I2CL[Hidden state]");

  REQUIRE(run("sweep --axis layers --values 'EARLY;MIDDLE;ALL;1,2' --out layers" + fast()) == 0);
  const auto l = read_results(work_dir() / "layers" / "results.csv");
  REQUIRE(l.size() == 4);
  CHECK(l[0].method == "I2CL[Early]");
  CHECK(l[3].method == "I2CL[layers=1+2]");
  // ALL and the explicit full list are the same injection.
  CHECK(l[2].accuracy == l[3].accuracy);

  REQUIRE(run("sweep --axis positions --values ALL,FIRST,LAST,RANDOM --out pos" + fast()) == 0);
  const auto p = read_results(work_dir() / "pos" / "results.csv");
  REQUIRE(p.size() == 4);
  CHECK(p[1].method == "I2CL[First]");

  // Parallel runs give the same rows in the same order.
  REQUIRE(run("sweep --axis demos --values 1,5,25 --seeds 1,2,3 --jobs 3 --out demos_par" +
              fast()) == 0);
  const auto par = read_results(work_dir() / "demos_par" / "results.csv");
  REQUIRE(par.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(par[i].method == rows[i].method);
    CHECK(par[i].accuracy == rows[i].accuracy);
  }
}

TEST_CASE("config file, overrides and output root") {
  std::ofstream(work_dir() / "run.cfg") << "# experiment\nmodel = " << model()
                                        << "\nmethods = zero_shot,i2cl\nepochs = 2\n"
                                           "eval_size = 10\nseeds = 1\nout = from_file\n";
  REQUIRE(run("eval --config run.cfg --eval-size 11") == 0);
  const std::string results = slurp(work_dir() / "from_file" / "results.csv");
  CHECK(results.find("# config.eval_size = 11\n") != std::string::npos);
  CHECK(results.find("# config.epochs = 2\n") != std::string::npos);
  CHECK(read_results(work_dir() / "from_file" / "results.csv").size() == 2);

  std::ofstream(work_dir() / "bad.cfg") << "no_such_key = 1\n";
  CHECK(run("eval --config bad.cfg" + fast()) == 2);

  REQUIRE(run("eval --methods zero_shot --seeds 1 --out rooted" + fast(), "rooted.log") == 0);
  const std::string cmd = "cd '" + work_dir().string() + "' && I2CL_OUTPUT_ROOT=root_dir '" +
                          I2CL_CLI_PATH + "' eval --methods zero_shot --seeds 1 --out rooted" +
                          fast() + " > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  CHECK(fs::exists(work_dir() / "root_dir" / "rooted" / "results.csv"));
}

TEST_CASE("calibrate, transfer and export") {
  REQUIRE(run("calibrate --seeds 1,2 --registry reg --name alpha --out cal" + fast()) == 0);
  CHECK(fs::exists(work_dir() / "reg" / "alpha_seed1" / "manifest.txt"));
  CHECK(fs::exists(work_dir() / "reg" / "alpha_seed2" / "coefficients.bin"));

  REQUIRE(run("transfer --seeds 3 --registry reg --out tr" + fast()) == 0);
  const auto rows = read_results(work_dir() / "tr" / "results.csv");
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == "I2CL");
  CHECK(rows[1].method == "I2CL_TRANSFER");
  const std::string plan = slurp(work_dir() / "tr" / "transfer.csv");
  CHECK(plan.find("seed,anchor,similarity,retained,probability\n") != std::string::npos);
  CHECK(plan.find("3,alpha_seed1,") != std::string::npos);

  REQUIRE(run("export --registry reg --out ex") == 0);
  const std::string coef = slurp(work_dir() / "ex" / "coefficients.csv");
  CHECK(coef.find("task,lambda_a_1,beta_a_1,lambda_m_1,beta_m_1,lambda_a_2") != std::string::npos);
  const std::string cosine = slurp(work_dir() / "ex" / "cosine.csv");
  CHECK(cosine.find("task,alpha_seed1,alpha_seed2\n") != std::string::npos);
  CHECK(fs::exists(work_dir() / "ex" / "contexts.csv"));
  CHECK(run("export --registry empty_reg --out ex2") == 2);
}

TEST_CASE("layer presets and sweep tags") {
  CHECK(resolve_layers("ALL", 3) == std::set<int>{1, 2, 3});
  CHECK(resolve_layers("early", 3) == std::set<int>{1});
  CHECK(resolve_layers("MIDDLE", 3) == std::set<int>{2});
  CHECK(resolve_layers("LATE", 3) == std::set<int>{3});
  CHECK(resolve_layers("LATE", 12) == std::set<int>{9, 10, 11, 12});
  CHECK(resolve_layers("EARLY", 12) == std::set<int>{1, 2, 3, 4});
  CHECK(resolve_layers("EARLY", 2) == std::set<int>{1});
  CHECK(resolve_layers("MIDDLE", 2) == std::set<int>{2});
  CHECK_THROWS_AS(resolve_layers("LATE", 2), ConfigError);
  CHECK(resolve_layers("3,1", 4) == std::set<int>{1, 3});
  CHECK_THROWS_AS(resolve_layers("0", 4), ConfigError);
  CHECK_THROWS_AS(resolve_layers("5", 4), ConfigError);
  CHECK_THROWS_AS(resolve_layers("2x", 4), ConfigError);

  CHECK(parse_modules("MHA+MLP") == std::set<Module>{Module::kMha, Module::kMlp});
  CHECK(parse_modules("mlp") == std::set<Module>{Module::kMlp});
  CHECK_THROWS_AS(parse_modules("FFN"), ConfigError);

  CHECK(sweep_tag("modules", "MHA,MLP") == "MHA+MLP");
  CHECK(sweep_tag("modules", "HIDDEN") == "Hidden state");
  CHECK(sweep_tag("layers", "late") == "Late");
  CHECK(sweep_tag("positions", "RANDOM") == "Random");
  CHECK(sweep_tag("formula", "ADD_ONLY") == "lambda*v+a");
  CHECK(sweep_tag("formula", "CONVEX_SCALED") == "(lambda*v+(1-lambda)*a)*beta");
  CHECK(sweep_tag("formula", "LINEAR_COMBO") == "lambda*v+beta*a");
  CHECK(sweep_tag("gamma", "0.01") == "gamma=0.01");
  CHECK_THROWS_AS(sweep_tag("heads", "1"), ConfigError);

  CHECK(parse_method("ICL_PLUS_I2CL") == Method::kIclPlusI2cl);
  CHECK(method_label(Method::kNoiseVector) == "NOISE_VECTOR");
}
