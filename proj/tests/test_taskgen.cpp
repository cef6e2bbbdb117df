#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "i2cl/error.hpp"
#include "i2cl/kv_config.hpp"
#include "i2cl/taskgen.hpp"

using namespace i2cl;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "i2cl_test_taskgen";
  std::filesystem::create_directories(dir);
  return dir / name;
}

SyntheticTaskSpec spec_with_seed(std::uint64_t seed) {
  SyntheticTaskSpec s;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("same spec twice gives identical datasets") {
  const auto a = generate_task(spec_with_seed(3), 60, 30, 12);
  const auto b = generate_task(spec_with_seed(3), 60, 30, 12);
  CHECK(a.train_pool == b.train_pool);
  CHECK(a.eval == b.eval);
  CHECK(a.holdout == b.holdout);
  const auto c = generate_task(spec_with_seed(4), 60, 30, 12);
  CHECK(a.eval != c.eval);
}

TEST_CASE("generator contract: each class draws from its own alphabet") {
  const auto d = generate_task(spec_with_seed(1), 90, 90, 0);
  for (const auto& ex : d.eval) {
    CHECK(ex.x.size() >= 3);
    CHECK(ex.x.size() <= 6);
    CHECK(ex.y == d.spec.classes[static_cast<std::size_t>(ex.class_index)]);
    if (ex.y == "C") {
      CHECK(std::all_of(ex.x.begin(), ex.x.end(), [](char c) { return c >= '0' && c <= '9'; }));
    } else if (ex.y == "A") {
      CHECK(std::all_of(ex.x.begin(), ex.x.end(), [](char c) { return c >= 'a' && c <= 'z'; }));
    } else {
      CHECK(ex.x.find_first_not_of("!#$%&*+-/<=>?@^~") == std::string::npos);
    }
  }
}

TEST_CASE("eval set is class balanced") {
  for (int n : {30, 31, 200, 7}) {
    const auto d = generate_task(spec_with_seed(9), 0, n, 0);
    std::map<int, int> counts;
    for (const auto& ex : d.eval) {
      ++counts[ex.class_index];
    }
    for (int c = 0; c < 3; ++c) {
      CHECK(counts[c] >= n / 3);
      CHECK(counts[c] <= (n + 2) / 3);
    }
  }
}

TEST_CASE("pools share no input string") {
  const auto d = generate_task(spec_with_seed(5), 150, 200, 32);
  std::set<std::string> seen;
  std::size_t total = 0;
  for (const auto* pool : {&d.train_pool, &d.eval, &d.holdout}) {
    for (const auto& ex : *pool) {
      seen.insert(ex.x);
      ++total;
    }
  }
  CHECK(seen.size() == total);
}

TEST_CASE("exhausted input space is reported") {
  SyntheticTaskSpec s;
  s.generators[2] = Generator::parse("ALPHABET:01");
  s.min_length = 1;
  s.max_length = 2;  // only 6 distinct strings for class C
  CHECK_THROWS_AS(generate_task(s, 30, 0, 0), ConfigError);
}

TEST_CASE("sample_demos draws exactly k per class") {
  const auto d = generate_task(spec_with_seed(2), 60, 0, 0);
  SUBCASE("k=1") {
    const auto demos = sample_demos(d, 1, 0);
    REQUIRE(demos.size() == 3);
    std::set<int> classes;
    for (const auto& x : demos) {
      classes.insert(x.class_index);
    }
    CHECK(classes.size() == 3);
  }
  SUBCASE("k=5") {
    const auto demos = sample_demos(d, 5, 0);
    REQUIRE(demos.size() == 15);
    std::map<int, int> counts;
    for (const auto& x : demos) {
      ++counts[x.class_index];
    }
    CHECK(counts == std::map<int, int>{{0, 5}, {1, 5}, {2, 5}});
    std::set<std::string> distinct;
    for (const auto& x : demos) {
      distinct.insert(x.x);
    }
    CHECK(distinct.size() == 15);
  }
  SUBCASE("seed controls order") {
    CHECK(sample_demos(d, 5, 0) == sample_demos(d, 5, 0));
    CHECK(sample_demos(d, 5, 0) != sample_demos(d, 5, 1));
  }
  SUBCASE("insufficient pool") {
    CHECK_THROWS_AS(sample_demos(d, 21, 0), ConfigError);
  }
}

TEST_CASE("templates render") {
  Template t;
  CHECK(t.render("abc", "A") == "Input: abc\nLabel: A");
  CHECK(t.render_query("abc") == "Input: abc\nLabel: ");
  CHECK(Template::no_format().render("abc", "A") == "abc\nA");
}

TEST_CASE("corruptions") {
  const SyntheticTaskSpec spec;
  const auto d = generate_task(spec, 60, 0, 0);
  const auto demos = sample_demos(d, 5, 11);

  SUBCASE("random label keeps inputs and draws labels from the classes") {
    const auto c = corrupt(demos, spec, Corruption::kRandomLabel, 1);
    REQUIRE(c.demos.size() == demos.size());
    bool changed = false;
    for (std::size_t i = 0; i < demos.size(); ++i) {
      CHECK(c.demos[i].x == demos[i].x);
      CHECK(c.demos[i].y == spec.classes[static_cast<std::size_t>(c.demos[i].class_index)]);
      changed |= c.demos[i].y != demos[i].y;
    }
    CHECK(changed);
    CHECK(c.format == spec.format);
  }
  SUBCASE("random label with one class is a no-op") {
    SyntheticTaskSpec one;
    one.classes = {"A"};
    one.generators = {Generator::letters()};
    std::vector<Demonstration> ds{{"abc", "A", 0}, {"xy", "A", 0}};
    CHECK(corrupt(ds, one, Corruption::kRandomLabel, 5).demos == ds);
  }
  SUBCASE("random token preserves the character multiset") {
    const auto c = corrupt(demos, spec, Corruption::kRandomToken, 2);
    for (std::size_t i = 0; i < demos.size(); ++i) {
      std::string a = demos[i].x;
      std::string b = c.demos[i].x;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);
      CHECK(c.demos[i].y == demos[i].y);
    }
  }
  SUBCASE("no format drops the prefixes") {
    const auto c = corrupt({{"abc", "A", 0}}, spec, Corruption::kNoFormat, 0);
    CHECK(c.format.render(c.demos[0].x, c.demos[0].y) == "abc\nA");
  }
  SUBCASE("empty input rejected") {
    CHECK_THROWS_AS(corrupt({}, spec, Corruption::kNoFormat, 0), ConfigError);
  }
  CHECK(parse_corruption("RANDOM_TOKEN") == Corruption::kRandomToken);
  CHECK_THROWS_AS(parse_corruption("bogus"), ConfigError);
}

TEST_CASE("spec validation") {
  SyntheticTaskSpec s;
  CHECK_NOTHROW(s.validate());
  s.classes = {"A"};
  s.generators = {Generator::letters()};
  CHECK_THROWS_AS(s.validate(), ConfigError);

  s = SyntheticTaskSpec{};
  s.generators[1] = Generator::parse("ALPHABET:xyz");  // overlaps letters
  CHECK_THROWS_AS(s.validate(), ConfigError);

  s = SyntheticTaskSpec{};
  s.min_length = 5;
  s.max_length = 4;
  CHECK_THROWS_AS(s.validate(), ConfigError);

  s = SyntheticTaskSpec{};
  s.classes = {"A", "A", "B"};
  CHECK_THROWS_AS(s.validate(), ConfigError);

  CHECK_THROWS_AS(Generator::parse("RANDOM_WORDS"), ConfigError);
}

TEST_CASE("task family permutes generators over labels") {
  TaskFamily family{SyntheticTaskSpec{}};
  Pcg64 rng(17);
  std::set<std::string> mappings;
  for (int i = 0; i < 60; ++i) {
    const auto s = family.sample(rng);
    CHECK_NOTHROW(s.validate());
    std::string key;
    for (const auto& g : s.generators) {
      key += g.name() + ";";
    }
    mappings.insert(key);
  }
  CHECK(mappings.size() == 6);
}

TEST_CASE("dataset files round trip") {
  const auto path = temp_path("demos.jsonl");
  std::vector<Demonstration> ds{{"a\"b\\c", "A", 0}, {"%%", "B", 1}, {"42", "C", 2}};
  save_demonstrations(ds, path);
  CHECK(load_demonstrations(path, {"A", "B", "C"}) == ds);
  CHECK_THROWS_AS(load_demonstrations(path, {"A", "B"}), FormatError);

  std::ofstream(path) << "{\"x\": \"abc\"}\n";
  CHECK_THROWS_AS(load_demonstrations(path, {"A"}), FormatError);
  std::ofstream(path) << "not json\n";
  CHECK_THROWS_AS(load_demonstrations(path, {"A"}), FormatError);
  CHECK_THROWS_AS(load_demonstrations(temp_path("missing.jsonl"), {"A"}), ConfigError);
}

TEST_CASE("task spec files round trip") {
  const auto path = temp_path("task.cfg");
  SyntheticTaskSpec s;
  s.name = "odd task";
  s.classes = {"yes", "no"};
  s.generators = {Generator::digits(), Generator::parse("ALPHABET:XYZ")};
  s.min_length = 2;
  s.max_length = 9;
  s.seed = 18446744073709551615ull;
  s.format.input_prefix = "Q = ";
  save_task_spec(s, path);
  const auto back = load_task_spec(path);
  CHECK(back.name == s.name);
  CHECK(back.classes == s.classes);
  CHECK(back.generators[1].alphabet() == "XYZ");
  CHECK(back.min_length == 2);
  CHECK(back.max_length == 9);
  CHECK(back.seed == s.seed);
  CHECK(back.format == s.format);
}

TEST_CASE("key value parsing") {
  const auto kv = KeyValueConfig::parse(
      "# comment\n"
      "  a = 1 \n"
      "b=\"  spaced \\n\"\n"
      "list = x, y,,z\n"
      "\n"
      "neg = -3\n");
  CHECK(kv.get("a") == "1");
  CHECK(kv.get("b") == "  spaced \n");
  CHECK(kv.get_list("list") == std::vector<std::string>{"x", "y", "z"});
  CHECK(kv.get_int("neg", 0) == -3);
  CHECK(kv.get_double("a", 0.0) == 1.0);
  CHECK(kv.get_int("missing", 7) == 7);
  CHECK_THROWS_AS(kv.get("missing"), ConfigError);
  CHECK_THROWS_AS(kv.get_u64("neg", 0), ConfigError);
  CHECK_THROWS_AS(kv.get_int("list", 0), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse("novalue\n"), FormatError);
  CHECK_THROWS_AS(KeyValueConfig::parse("k = \"bad\\q\"\n"), FormatError);

  KeyValueConfig w;
  w.set("s", "tab\there \"q\" \\");
  w.set("e", "");
  CHECK(KeyValueConfig::parse(w.to_string()).entries() == w.entries());
}
