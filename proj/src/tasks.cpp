#include "abmll/tasks.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "abmll/errors.hpp"
#include "abmll/rng.hpp"

namespace abmll::tasks {

namespace {

constexpr RuleFamily kFamilies[] = {RuleFamily::kPermutedSuccessor, RuleFamily::kMarkedParity,
                                    RuleFamily::kCopyReverse, RuleFamily::kMajority};

constexpr std::size_t kCycleLength = 6;
constexpr std::size_t kParityLength = 6;
constexpr std::size_t kParityFillers = 3;
constexpr std::size_t kCopyLength = 4;
constexpr std::size_t kCopyPool = 6;
constexpr std::size_t kMajorityLength = 7;
constexpr std::size_t kMajorityPool = 3;

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<std::size_t> distinct_letters(Rng& rng, std::size_t count) {
  std::vector<std::size_t> letters(Vocabulary::kLetters);
  std::iota(letters.begin(), letters.end(), std::size_t{0});
  std::shuffle(letters.begin(), letters.end(), rng);
  letters.resize(count);
  return letters;
}

RuleDescriptor draw_rule(RuleFamily family, Rng& rng) {
  RuleDescriptor rule{family, {}};
  switch (family) {
    case RuleFamily::kPermutedSuccessor:
      rule.params = distinct_letters(rng, kCycleLength);
      break;
    case RuleFamily::kMarkedParity:
      rule.params = distinct_letters(rng, 1 + kParityFillers);
      break;
    case RuleFamily::kCopyReverse: {
      rule.params = {uniform(rng, 0, 1)};
      auto pool = distinct_letters(rng, kCopyPool);
      std::sort(pool.begin(), pool.end());
      rule.params.insert(rule.params.end(), pool.begin(), pool.end());
      break;
    }
    case RuleFamily::kMajority: {
      rule.params = distinct_letters(rng, kMajorityPool);
      std::sort(rule.params.begin(), rule.params.end());
      break;
    }
  }
  return rule;
}

Tokens rotate_left(Tokens seq, std::size_t by) {
  std::rotate(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(by % seq.size()), seq.end());
  return seq;
}

// The answer the rule assigns to a prompt body (tokens between the family
// marker and the delimiter).
Tokens apply_rule(const RuleDescriptor& rule, const Tokens& body) {
  const auto& p = rule.params;
  switch (rule.family) {
    case RuleFamily::kPermutedSuccessor: {
      if (body.size() != 1) return {};
      auto it = std::find(p.begin(), p.end(), body[0]);
      if (it == p.end()) return {};
      const auto pos = static_cast<std::size_t>(it - p.begin());
      return {p[(pos + 1) % p.size()]};
    }
    case RuleFamily::kMarkedParity: {
      const auto count = std::count(body.begin(), body.end(), p[0]);
      return {count % 2 == 0 ? Vocabulary::kEven : Vocabulary::kOdd};
    }
    case RuleFamily::kCopyReverse: {
      Tokens out = body;
      if (p[0] == 1) std::reverse(out.begin(), out.end());
      return out;
    }
    case RuleFamily::kMajority: {
      std::size_t best = body.empty() ? 0 : body[0];
      long best_count = -1;
      for (auto letter : p) {
        const long c = std::count(body.begin(), body.end(), letter);
        if (c > best_count) {
          best = letter;
          best_count = c;
        }
      }
      return {best};
    }
  }
  return {};
}

Tokens make_body(const RuleDescriptor& rule, std::size_t index, Rng& rng) {
  const auto& p = rule.params;
  switch (rule.family) {
    case RuleFamily::kPermutedSuccessor:
      return {p[index % p.size()]};
    case RuleFamily::kMarkedParity: {
      // Alternate the target parity so both answers are equally frequent.
      const std::size_t want = index % 2;
      std::size_t marks;
      do {
        marks = uniform(rng, 0, kParityLength);
      } while (marks % 2 != want);
      Tokens body(kParityLength);
      for (std::size_t i = 0; i < kParityLength; ++i) {
        body[i] = i < marks ? p[0] : p[1 + uniform(rng, 0, kParityFillers - 1)];
      }
      std::shuffle(body.begin(), body.end(), rng);
      return body;
    }
    case RuleFamily::kCopyReverse: {
      Tokens pool(p.begin() + 1, p.end());
      std::shuffle(pool.begin(), pool.end(), rng);
      pool.resize(kCopyLength);
      return pool;
    }
    case RuleFamily::kMajority: {
      const std::size_t winner = p[index % p.size()];
      for (;;) {
        const std::size_t wins = uniform(rng, 3, 5);
        Tokens body(wins, winner);
        while (body.size() < kMajorityLength) {
          const std::size_t other = p[uniform(rng, 0, p.size() - 1)];
          if (other != winner) body.push_back(other);
        }
        // Strict plurality: no other letter may tie the winner.
        const bool strict = std::all_of(p.begin(), p.end(), [&](std::size_t letter) {
          return letter == winner || std::count(body.begin(), body.end(), letter) <
                                         static_cast<std::ptrdiff_t>(wins);
        });
        if (!strict) continue;
        std::shuffle(body.begin(), body.end(), rng);
        return body;
      }
    }
  }
  return {};
}

std::vector<Tokens> distractors(const RuleDescriptor& rule, const Tokens& body, const Tokens& correct,
                                Rng& rng) {
  std::vector<Tokens> out;
  const auto& p = rule.params;
  switch (rule.family) {
    case RuleFamily::kPermutedSuccessor:
    case RuleFamily::kMajority:
      for (auto letter : p) {
        if (Tokens{letter} != correct) out.push_back({letter});
      }
      std::shuffle(out.begin(), out.end(), rng);
      break;
    case RuleFamily::kMarkedParity:
      out.push_back({correct[0] == Vocabulary::kEven ? Vocabulary::kOdd : Vocabulary::kEven});
      break;
    case RuleFamily::kCopyReverse: {
      Tokens other = body;
      if (p[0] == 0) std::reverse(other.begin(), other.end());
      out.push_back(other);
      out.push_back(rotate_left(correct, 1));
      out.push_back(rotate_left(correct, 2));
      break;
    }
  }
  return out;
}

Task make_task(std::string id, const RuleDescriptor& rule, std::size_t n_examples, Rng& rng) {
  Task task{std::move(id), {}, rule};
  const std::size_t marker = Vocabulary::family_marker(rule.family);
  for (std::size_t i = 0; i < n_examples; ++i) {
    Tokens body = make_body(rule, i, rng);
    Tokens correct = apply_rule(rule, body);
    auto wrong = distractors(rule, body, correct, rng);
    const std::size_t max_opts = std::min<std::size_t>(4, wrong.size() + 1);
    const std::size_t n_opts = max_opts <= 2 ? 2 : uniform(rng, 2, max_opts);
    wrong.resize(n_opts - 1);
    const std::size_t answer = i % n_opts;  // balanced answer positions
    Example ex;
    ex.prompt.push_back(marker);
    ex.prompt.insert(ex.prompt.end(), body.begin(), body.end());
    ex.prompt.push_back(Vocabulary::kSep);
    ex.options = std::move(wrong);
    ex.options.insert(ex.options.begin() + static_cast<std::ptrdiff_t>(answer), correct);
    ex.answer = answer;
    task.examples.push_back(std::move(ex));
  }
  std::shuffle(task.examples.begin(), task.examples.end(), rng);
  for (std::size_t i = 0; i < task.examples.size(); ++i) task.examples[i].id = i;
  return task;
}

std::vector<std::string> split_symbols(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string s; in >> s;) out.push_back(s);
  return out;
}

Tokens tokenize(const std::string& text, const Vocabulary& vocab, std::size_t line) {
  Tokens out;
  for (const auto& s : split_symbols(text)) {
    auto t = vocab.token(s);
    if (!t) throw VocabularyError("line " + std::to_string(line) + ": unknown symbol '" + s + "'");
    out.push_back(*t);
  }
  return out;
}

std::string render(const Tokens& tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += vocab.symbol(tokens[i]);
  }
  return out;
}

}  // namespace

std::string family_name(RuleFamily family) {
  switch (family) {
    case RuleFamily::kPermutedSuccessor: return "succ";
    case RuleFamily::kMarkedParity: return "par";
    case RuleFamily::kCopyReverse: return "cr";
    case RuleFamily::kMajority: return "maj";
  }
  return "?";
}

RuleFamily parse_family(const std::string& name) {
  for (auto f : kFamilies) {
    if (family_name(f) == name) return f;
  }
  throw ConfigError("unknown rule family '" + name + "' (valid: succ, par, cr, maj)");
}

std::vector<std::size_t> RuleDescriptor::identity() const {
  switch (family) {
    case RuleFamily::kMarkedParity: return {params.at(0)};
    default: return params;
  }
}

Vocabulary::Vocabulary() {
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
  for (char c = 'A'; c <= 'F'; ++c) symbols_.emplace_back(1, c);
  symbols_.insert(symbols_.end(), {"?", "even", "odd", "#succ", "#par", "#cr", "#maj"});
}

const std::string& Vocabulary::symbol(std::size_t token) const {
  if (token >= symbols_.size()) throw VocabularyError("token " + std::to_string(token) + " has no symbol");
  return symbols_[token];
}

std::optional<std::size_t> Vocabulary::token(const std::string& symbol) const {
  auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - symbols_.begin());
}

std::size_t Vocabulary::family_marker(RuleFamily family) {
  return 35 + static_cast<std::size_t>(family);
}

MetaDataset generate_suite(const SuiteConfig& config) {
  if (config.n_seen < 2) throw ConfigError("suite needs at least 2 seen tasks");
  if (config.examples_per_task < 40) throw ConfigError("suite needs at least 40 examples per task");
  if (config.n_unseen > 0 && config.unseen_families.empty()) {
    throw ConfigError("unseen tasks requested without unseen families");
  }
  Rng rng(derive_seed(config.seed, {0x5u}));
  MetaDataset data;

  std::vector<RuleDescriptor> unseen_rules;
  for (std::size_t i = 0; i < config.n_unseen; ++i) {
    const auto family = config.unseen_families[i % config.unseen_families.size()];
    RuleDescriptor rule;
    do {
      rule = draw_rule(family, rng);
    } while (std::any_of(unseen_rules.begin(), unseen_rules.end(), [&](const RuleDescriptor& r) {
      return r.family == rule.family && r.identity() == rule.identity();
    }));
    unseen_rules.push_back(rule);
  }
  std::vector<RuleDescriptor> seen_rules;
  for (std::size_t i = 0; i < config.n_seen; ++i) {
    const auto family = kFamilies[i % std::size(kFamilies)];
    RuleDescriptor rule;
    auto clashes = [&](const RuleDescriptor& r) {
      return r.family == rule.family && r.identity() == rule.identity();
    };
    do {
      rule = draw_rule(family, rng);
    } while (std::any_of(unseen_rules.begin(), unseen_rules.end(), clashes) ||
             std::any_of(seen_rules.begin(), seen_rules.end(), clashes));
    seen_rules.push_back(rule);
  }
  for (std::size_t i = 0; i < seen_rules.size(); ++i) {
    std::string id = "seen-" + std::to_string(i) + "-" + family_name(seen_rules[i].family);
    data.seen_tasks.push_back(make_task(std::move(id), seen_rules[i], config.examples_per_task, rng));
  }
  for (std::size_t i = 0; i < unseen_rules.size(); ++i) {
    std::string id = "unseen-" + std::to_string(i) + "-" + family_name(unseen_rules[i].family);
    data.unseen_tasks.push_back(make_task(std::move(id), unseen_rules[i], config.examples_per_task, rng));
  }
  return data;
}

Tokens pretraining_corpus(std::uint64_t seed, std::size_t n_tasks, std::size_t examples_per_task) {
  Rng rng(derive_seed(seed, {0xc0u}));
  Tokens stream;
  for (std::size_t i = 0; i < n_tasks; ++i) {
    const auto rule = draw_rule(kFamilies[i % std::size(kFamilies)], rng);
    const Task task = make_task("pretrain", rule, examples_per_task, rng);
    for (const auto& ex : task.examples) {
      stream.insert(stream.end(), ex.prompt.begin(), ex.prompt.end());
      const auto& c = ex.correct();
      stream.insert(stream.end(), c.begin(), c.end());
    }
  }
  return stream;
}

std::optional<std::size_t> rule_oracle(const RuleDescriptor& rule, const Example& example) {
  const auto& pr = example.prompt;
  if (pr.size() < 2 || pr.front() != Vocabulary::family_marker(rule.family) ||
      pr.back() != Vocabulary::kSep) {
    return std::nullopt;
  }
  const Tokens body(pr.begin() + 1, pr.end() - 1);
  const Tokens answer = apply_rule(rule, body);
  auto it = std::find(example.options.begin(), example.options.end(), answer);
  if (it == example.options.end()) return std::nullopt;
  return static_cast<std::size_t>(it - example.options.begin());
}

Task load_records(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open records file " + path.string());
  Task task{path.stem().string(), {}, std::nullopt};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    Example ex;
    try {
      if (!record.is_object()) throw ParseError("record is not an object");
      ex.prompt = tokenize(record.at("prompt").get<std::string>(), vocab, line_no);
      for (const auto& opt : record.at("options")) {
        ex.options.push_back(tokenize(opt.get<std::string>(), vocab, line_no));
      }
      const auto answer = record.at("answer").get<long long>();
      if (answer < 0 || static_cast<std::size_t>(answer) >= ex.options.size()) {
        throw ParseError("answer " + std::to_string(answer) + " out of range");
      }
      ex.answer = static_cast<std::size_t>(answer);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (ex.prompt.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty prompt");
    if (ex.options.size() < 2 || ex.options.size() > 4) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 2-4 options");
    }
    for (const auto& opt : ex.options) {
      if (opt.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty option");
    }
    if (std::set<Tokens>(ex.options.begin(), ex.options.end()).size() != ex.options.size()) {
      throw ParseError("line " + std::to_string(line_no) + ": duplicate options");
    }
    ex.id = task.examples.size();
    task.examples.push_back(std::move(ex));
  }
  if (task.examples.empty()) throw DataError("records file " + path.string() + " is empty");
  return task;
}

void save_records(const Task& task, const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write records file " + path.string());
  for (const auto& ex : task.examples) {
    nlohmann::ordered_json record;
    record["prompt"] = render(ex.prompt, vocab);
    record["options"] = nlohmann::ordered_json::array();
    for (const auto& opt : ex.options) record["options"].push_back(render(opt, vocab));
    record["answer"] = ex.answer;
    out << record.dump() << '\n';
  }
}

Episode sample_episode(const Task& task, std::size_t batch_size, std::size_t n_support_batches,
                       std::size_t n_query_batches, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t need = batch_size * (n_support_batches + n_query_batches);
  if (need > task.examples.size()) {
    throw DataError("task " + task.id + " has " + std::to_string(task.examples.size()) +
                    " examples, episode needs " + std::to_string(need));
  }
  std::vector<std::size_t> order(task.examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  Episode ep;
  std::size_t next = 0;
  auto take = [&](std::size_t n_batches, std::vector<Batch>& dst) {
    for (std::size_t b = 0; b < n_batches; ++b) {
      Batch batch;
      for (std::size_t i = 0; i < batch_size; ++i) batch.push_back(task.examples[order[next++]]);
      dst.push_back(std::move(batch));
    }
  };
  take(n_support_batches, ep.support);
  take(n_query_batches, ep.query);
  return ep;
}

}  // namespace abmll::tasks
