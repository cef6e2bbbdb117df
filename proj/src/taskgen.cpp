#include "i2cl/taskgen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"

#include "i2cl/error.hpp"
#include "i2cl/kv_config.hpp"

namespace i2cl {

namespace {

const std::string kLetters = "abcdefghijklmnopqrstuvwxyz";
const std::string kSpecials = "!#$%&*+-/<=>?@^~";
const std::string kDigits = "0123456789";

std::string join(const std::vector<std::string>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    out += (i ? "," : "") + items[i];
  }
  return out;
}

}  // namespace

const std::string& Generator::alphabet() const {
  switch (kind) {
    case Kind::kRandomLetters:
      return kLetters;
    case Kind::kRandomSpecials:
      return kSpecials;
    case Kind::kRandomDigits:
      return kDigits;
    case Kind::kAlphabet:
      return custom;
  }
  return custom;
}

std::string Generator::name() const {
  switch (kind) {
    case Kind::kRandomLetters:
      return "RANDOM_LETTERS";
    case Kind::kRandomSpecials:
      return "RANDOM_SPECIALS";
    case Kind::kRandomDigits:
      return "RANDOM_DIGITS";
    case Kind::kAlphabet:
      return "ALPHABET:" + custom;
  }
  return "?";
}

Generator Generator::parse(const std::string& s) {
  if (s == "RANDOM_LETTERS" || s == "letters") {
    return letters();
  }
  if (s == "RANDOM_SPECIALS" || s == "specials") {
    return specials();
  }
  if (s == "RANDOM_DIGITS" || s == "digits") {
    return digits();
  }
  for (const std::string prefix : {"ALPHABET:", "alphabet:"}) {
    if (s.starts_with(prefix)) {
      return {Kind::kAlphabet, s.substr(prefix.size())};
    }
  }
  throw ConfigError("unknown generator '" + s + "'");
}

std::string Template::render(const std::string& x, const std::string& y) const {
  return input_prefix + x + separator + label_prefix + y;
}

std::string Template::render_query(const std::string& x) const {
  return input_prefix + x + separator + label_prefix;
}

void SyntheticTaskSpec::validate() const {
  if (classes.size() < 2) {
    throw ConfigError("task spec '" + name + "': at least two classes required");
  }
  if (generators.size() != classes.size()) {
    throw ConfigError("task spec '" + name + "': one generator per class required");
  }
  if (std::set<std::string>(classes.begin(), classes.end()).size() != classes.size()) {
    throw ConfigError("task spec '" + name + "': duplicate class label");
  }
  for (const std::string& c : classes) {
    if (c.empty()) {
      throw ConfigError("task spec '" + name + "': empty class label");
    }
  }
  if (min_length < 1 || max_length < min_length) {
    throw ConfigError("task spec '" + name + "': need 1 <= min_length <= max_length");
  }
  std::set<char> seen;
  for (const Generator& g : generators) {
    if (g.alphabet().empty()) {
      throw ConfigError("task spec '" + name + "': empty generator alphabet");
    }
    for (char c : std::set<char>(g.alphabet().begin(), g.alphabet().end())) {
      if (!seen.insert(c).second) {
        throw ConfigError("task spec '" + name + "': generator alphabets overlap on '" +
                          std::string(1, c) + "'");
      }
    }
  }
}

std::string sample_input(const SyntheticTaskSpec& spec, int class_index, Pcg64& rng) {
  const std::string& alpha = spec.generators.at(static_cast<std::size_t>(class_index)).alphabet();
  const auto span = static_cast<std::uint64_t>(spec.max_length - spec.min_length + 1);
  const int n = spec.min_length + static_cast<int>(rng.below(span));
  std::string x;
  for (int i = 0; i < n; ++i) {
    x.push_back(alpha[rng.below(alpha.size())]);
  }
  return x;
}

Dataset generate_task(const SyntheticTaskSpec& spec, int n_train_pool, int n_eval,
                      int n_holdout) {
  spec.validate();
  if (n_train_pool < 0 || n_eval < 0 || n_holdout < 0) {
    throw ConfigError("generate_task: pool sizes must be non-negative");
  }
  Pcg64 rng = Pcg64::named(spec.seed, "taskgen");
  const int n_classes = static_cast<int>(spec.classes.size());
  std::unordered_set<std::string> used;
  auto fresh = [&](int cls) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string x = sample_input(spec, cls, rng);
      if (used.insert(x).second) {
        return Demonstration{x, spec.classes[static_cast<std::size_t>(cls)], cls};
      }
    }
    throw ConfigError("generate_task: cannot draw enough distinct inputs for class " +
                      spec.classes[static_cast<std::size_t>(cls)] + "; widen the length range");
  };
  // Every pool is filled round-robin over classes, then shuffled.
  auto pool = [&](int n) {
    std::vector<Demonstration> out;
    for (int i = 0; i < n; ++i) {
      out.push_back(fresh(i % n_classes));
    }
    shuffle(out, rng);
    return out;
  };
  Dataset d;
  d.spec = spec;
  d.eval = pool(n_eval);
  d.holdout = pool(n_holdout);
  d.train_pool = pool(n_train_pool);
  return d;
}

std::vector<Demonstration> sample_demos(const Dataset& dataset, int k_per_class,
                                        std::uint64_t seed) {
  if (k_per_class < 0) {
    throw ConfigError("sample_demos: k must be non-negative");
  }
  Pcg64 rng = Pcg64::named(seed, "sample-demos");
  std::vector<Demonstration> out;
  const int n_classes = static_cast<int>(dataset.spec.classes.size());
  for (int c = 0; c < n_classes; ++c) {
    std::vector<const Demonstration*> members;
    for (const Demonstration& d : dataset.train_pool) {
      if (d.class_index == c) {
        members.push_back(&d);
      }
    }
    if (static_cast<int>(members.size()) < k_per_class) {
      throw ConfigError("sample_demos: class " + dataset.spec.classes[static_cast<std::size_t>(c)] +
                        " has " + std::to_string(members.size()) + " pool examples, need " +
                        std::to_string(k_per_class));
    }
    // partial Fisher-Yates: first k are a uniform sample without replacement
    for (int i = 0; i < k_per_class; ++i) {
      const auto j = static_cast<std::size_t>(i) + rng.below(members.size() - static_cast<std::size_t>(i));
      std::swap(members[static_cast<std::size_t>(i)], members[j]);
      out.push_back(*members[static_cast<std::size_t>(i)]);
    }
  }
  shuffle(out, rng);
  return out;
}

Corruption parse_corruption(const std::string& s) {
  if (s == "RANDOM_LABEL" || s == "random_label") {
    return Corruption::kRandomLabel;
  }
  if (s == "RANDOM_TOKEN" || s == "random_token") {
    return Corruption::kRandomToken;
  }
  if (s == "NO_FORMAT" || s == "no_format") {
    return Corruption::kNoFormat;
  }
  throw ConfigError("unknown corruption mode '" + s + "'");
}

DemoSet corrupt(const std::vector<Demonstration>& demos, const SyntheticTaskSpec& spec,
                       Corruption mode, std::uint64_t seed) {
  if (demos.empty()) {
    throw ConfigError("corrupt: no demonstrations");
  }
  DemoSet out{demos, spec.format};
  Pcg64 rng = Pcg64::named(seed, "corrupt");
  switch (mode) {
    case Corruption::kRandomLabel:
      for (Demonstration& d : out.demos) {
        const auto c = static_cast<int>(rng.below(spec.classes.size()));
        d.class_index = c;
        d.y = spec.classes[static_cast<std::size_t>(c)];
      }
      break;
    case Corruption::kRandomToken:
      for (Demonstration& d : out.demos) {
        std::vector<char> chars(d.x.begin(), d.x.end());
        shuffle(chars, rng);
        d.x.assign(chars.begin(), chars.end());
      }
      break;
    case Corruption::kNoFormat:
      out.format = Template::no_format();
      out.format.separator = spec.format.separator;
      break;
  }
  return out;
}

SyntheticTaskSpec TaskFamily::sample(Pcg64& rng) const {
  SyntheticTaskSpec s = base;
  shuffle(s.generators, rng);
  s.seed = rng();
  return s;
}

void save_demonstrations(const std::vector<Demonstration>& demos,
                         const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write '" + path.string() + "'");
  }
  for (const Demonstration& d : demos) {
    out << nlohmann::json{{"x", d.x}, {"y", d.y}}.dump() << "\n";
  }
  if (!out) {
    throw Error("write failed for '" + path.string() + "'");
  }
}

std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path,
                                               const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read dataset '" + path.string() + "'");
  }
  std::vector<Demonstration> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("x") || !j.contains("y") || !j["x"].is_string() ||
        !j["y"].is_string()) {
      throw FormatError(where + ": record needs string fields x and y");
    }
    Demonstration d{j["x"].get<std::string>(), j["y"].get<std::string>(), -1};
    const auto it = std::find(classes.begin(), classes.end(), d.y);
    if (it == classes.end()) {
      throw FormatError(where + ": label '" + d.y + "' not in class list");
    }
    d.class_index = static_cast<int>(it - classes.begin());
    out.push_back(std::move(d));
  }
  return out;
}

void save_task_spec(const SyntheticTaskSpec& spec, const std::filesystem::path& path) {
  KeyValueConfig kv;
  kv.set("name", spec.name);
  kv.set("classes", join(spec.classes));
  std::vector<std::string> gens;
  for (const Generator& g : spec.generators) {
    gens.push_back(g.name());
  }
  kv.set("generators", join(gens));
  kv.set("min_length", std::to_string(spec.min_length));
  kv.set("max_length", std::to_string(spec.max_length));
  kv.set("seed", std::to_string(spec.seed));
  kv.set("input_prefix", spec.format.input_prefix);
  kv.set("label_prefix", spec.format.label_prefix);
  kv.set("separator", spec.format.separator);
  kv.save(path);
}

SyntheticTaskSpec load_task_spec(const std::filesystem::path& path) {
  const KeyValueConfig kv = KeyValueConfig::load(path);
  SyntheticTaskSpec s;
  s.name = kv.get("name", s.name);
  if (kv.has("classes")) {
    s.classes = kv.get_list("classes");
  }
  if (kv.has("generators")) {
    s.generators.clear();
    for (const std::string& g : kv.get_list("generators")) {
      s.generators.push_back(Generator::parse(g));
    }
  }
  s.min_length = static_cast<int>(kv.get_int("min_length", s.min_length));
  s.max_length = static_cast<int>(kv.get_int("max_length", s.max_length));
  s.seed = kv.get_u64("seed", s.seed);
  s.format.input_prefix = kv.get("input_prefix", s.format.input_prefix);
  s.format.label_prefix = kv.get("label_prefix", s.format.label_prefix);
  s.format.separator = kv.get("separator", s.format.separator);
  s.validate();
  return s;
}

}  // namespace i2cl
