#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace abmll::tasks {

using Tokens = std::vector<std::size_t>;

struct Example {
  std::size_t id = 0;
  Tokens prompt;
  std::vector<Tokens> options;
  std::size_t answer = 0;

  const Tokens& correct() const { return options.at(answer); }
  bool operator==(const Example&) const = default;
};

enum class RuleFamily { kPermutedSuccessor, kMarkedParity, kCopyReverse, kMajority };

std::string family_name(RuleFamily family);
RuleFamily parse_family(const std::string& name);

// Which rule generated a task, with its task-specific parameters:
//   successor: the letter cycle;
//   parity:    marker letter followed by the filler letters;
//   copy/rev:  mode (0 copy, 1 reverse) followed by the letter pool;
//   majority:  the letter pool.
struct RuleDescriptor {
  RuleFamily family = RuleFamily::kPermutedSuccessor;
  std::vector<std::size_t> params;

  // Parameters that must differ between seen and unseen tasks of a family.
  std::vector<std::size_t> identity() const;
  bool operator==(const RuleDescriptor&) const = default;
};

struct Task {
  std::string id;
  std::vector<Example> examples;
  std::optional<RuleDescriptor> rule;  // absent for ingested records
};

// Fixed symbol table: 32 letters, the answer delimiter "?", the parity words
// and one marker per rule family.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(std::size_t token) const;
  std::optional<std::size_t> token(const std::string& symbol) const;

  static constexpr std::size_t kLetters = 32;
  static constexpr std::size_t kSep = 32;
  static constexpr std::size_t kEven = 33;
  static constexpr std::size_t kOdd = 34;
  static std::size_t family_marker(RuleFamily family);

 private:
  std::vector<std::string> symbols_;
};

struct MetaDataset {
  std::vector<Task> seen_tasks;
  std::vector<Task> unseen_tasks;
  Vocabulary vocab;
};

struct SuiteConfig {
  std::uint64_t seed = 7;
  std::size_t n_seen = 16;
  std::size_t n_unseen = 2;
  std::size_t examples_per_task = 60;
  // Families assigned to unseen tasks in order (cycled).
  std::vector<RuleFamily> unseen_families{RuleFamily::kCopyReverse, RuleFamily::kPermutedSuccessor};
};

MetaDataset generate_suite(const SuiteConfig& config);

// Token stream of rendered examples (prompt followed by its answer) from
// freshly drawn tasks of every family, used to pretrain the base model.
Tokens pretraining_corpus(std::uint64_t seed, std::size_t n_tasks, std::size_t examples_per_task);

// Replays the rule on the example's prompt; returns the index of the option
// that the rule selects, or nullopt if no option matches.
std::optional<std::size_t> rule_oracle(const RuleDescriptor& rule, const Example& example);

// Line-delimited JSON records: {"prompt": str, "options": [str...], "answer": int}.
// Strings are space-separated vocabulary symbols.
Task load_records(const std::filesystem::path& path, const Vocabulary& vocab);
void save_records(const Task& task, const std::filesystem::path& path, const Vocabulary& vocab);

using Batch = std::vector<Example>;

struct Episode {
  std::vector<Batch> support;
  std::vector<Batch> query;
};

// Disjoint support and query batches drawn from a seeded shuffle of the task.
Episode sample_episode(const Task& task, std::size_t batch_size, std::size_t n_support_batches,
                       std::size_t n_query_batches, std::uint64_t seed);

}  // namespace abmll::tasks
