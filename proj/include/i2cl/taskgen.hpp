#pragma once

// Synthetic few-shot classification tasks without semantic priors: each
// class draws its inputs from its own character family.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "i2cl/random.hpp"

namespace i2cl {

/// Character family a class samples its input strings from.
struct Generator {
  enum class Kind { kRandomLetters, kRandomSpecials, kRandomDigits, kAlphabet };
  Kind kind = Kind::kRandomLetters;
  std::string custom;  // used by kAlphabet only

  const std::string& alphabet() const;
  std::string name() const;
  static Generator parse(const std::string& s);

  static Generator letters() { return {Kind::kRandomLetters, {}}; }
  static Generator specials() { return {Kind::kRandomSpecials, {}}; }
  static Generator digits() { return {Kind::kRandomDigits, {}}; }
};

struct Template {
  std::string input_prefix = "Input: ";
  std::string label_prefix = "Label: ";
  std::string separator = "\n";

  /// input_prefix + x + separator + label_prefix + y
  std::string render(const std::string& x, const std::string& y) const;
  /// The same rendering with the label held out (the scoring context).
  std::string render_query(const std::string& x) const;

  /// Prefix-free rendering: "x\ny".
  static Template no_format() { return {"", "", "\n"}; }
  bool operator==(const Template&) const = default;
};

struct SyntheticTaskSpec {
  std::string name = "synthetic";
  std::vector<std::string> classes{"A", "B", "C"};
  std::vector<Generator> generators{Generator::letters(), Generator::specials(),
                                    Generator::digits()};
  int min_length = 3;
  int max_length = 6;
  std::uint64_t seed = 0;
  Template format;

  /// >= 2 classes, one generator per class, pairwise disjoint alphabets,
  /// 1 <= min_length <= max_length.
  void validate() const;
};

struct Demonstration {
  std::string x;
  std::string y;
  int class_index = 0;

  bool operator==(const Demonstration&) const = default;
};

struct Dataset {
  SyntheticTaskSpec spec;
  std::vector<Demonstration> train_pool;
  std::vector<Demonstration> eval;
  std::vector<Demonstration> holdout;
};

/// Deterministic in spec.seed; the three pools share no input string and the
/// eval set is class-balanced (counts differ by at most one).
Dataset generate_task(const SyntheticTaskSpec& spec, int n_train_pool, int n_eval, int n_holdout);

/// Draws one random input string of class `class_index`.
std::string sample_input(const SyntheticTaskSpec& spec, int class_index, Pcg64& rng);

/// Exactly k examples per class from the train pool, shuffled by `seed`.
std::vector<Demonstration> sample_demos(const Dataset& dataset, int k_per_class,
                                        std::uint64_t seed);

enum class Corruption { kRandomLabel, kRandomToken, kNoFormat };

/// Demonstrations together with the template they are rendered with.
struct DemoSet {
  std::vector<Demonstration> demos;
  Template format;
};

/// RANDOM_LABEL redraws every label uniformly from the classes; RANDOM_TOKEN
/// permutes the characters of each input; NO_FORMAT keeps the pairs and
/// switches to the prefix-free template.
DemoSet corrupt(const std::vector<Demonstration>& demos, const SyntheticTaskSpec& spec,
                       Corruption mode, std::uint64_t seed);

Corruption parse_corruption(const std::string& s);

/// Meta-training distribution: tasks share the class labels and generator
/// pool, and each instance assigns generators to labels by a random
/// permutation, so the mapping has to be read from the context.
struct TaskFamily {
  SyntheticTaskSpec base;

  SyntheticTaskSpec sample(Pcg64& rng) const;
};

// Files ---------------------------------------------------------------------

/// One JSON object per line with string fields "x" and "y".
void save_demonstrations(const std::vector<Demonstration>& demos,
                         const std::filesystem::path& path);
/// Class indices are resolved against `classes`; unknown labels are an error.
std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path,
                                               const std::vector<std::string>& classes);

/// Flat `key = value` text.
void save_task_spec(const SyntheticTaskSpec& spec, const std::filesystem::path& path);
SyntheticTaskSpec load_task_spec(const std::filesystem::path& path);

}  // namespace i2cl
