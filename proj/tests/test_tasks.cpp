#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "abmll/errors.hpp"
#include "abmll/tasks.hpp"

using namespace abmll;
using tasks::RuleFamily;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "abmll_test_tasks";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::vector<const tasks::Task*> all_tasks(const tasks::MetaDataset& d) {
  std::vector<const tasks::Task*> out;
  for (const auto& t : d.seen_tasks) out.push_back(&t);
  for (const auto& t : d.unseen_tasks) out.push_back(&t);
  return out;
}

}  // namespace

TEST(Suite, DeterministicGivenSeed) {
  tasks::SuiteConfig cfg;
  auto a = tasks::generate_suite(cfg);
  auto b = tasks::generate_suite(cfg);
  ASSERT_EQ(a.seen_tasks.size(), 16u);
  ASSERT_EQ(a.unseen_tasks.size(), 2u);
  for (std::size_t i = 0; i < a.seen_tasks.size(); ++i) {
    EXPECT_EQ(a.seen_tasks[i].id, b.seen_tasks[i].id);
    EXPECT_EQ(a.seen_tasks[i].examples, b.seen_tasks[i].examples);
  }
  cfg.seed = 8;
  auto c = tasks::generate_suite(cfg);
  EXPECT_NE(a.seen_tasks[0].examples, c.seen_tasks[0].examples);
}

TEST(Suite, EveryExampleSolvedByItsRuleOracle) {
  for (std::uint64_t seed : {1u, 7u, 42u}) {
    tasks::SuiteConfig cfg;
    cfg.seed = seed;
    auto d = tasks::generate_suite(cfg);
    for (const auto* t : all_tasks(d)) {
      ASSERT_TRUE(t->rule.has_value());
      ASSERT_GE(t->examples.size(), 40u);
      for (const auto& ex : t->examples) {
        auto pick = tasks::rule_oracle(*t->rule, ex);
        ASSERT_TRUE(pick.has_value()) << t->id;
        EXPECT_EQ(*pick, ex.answer) << t->id << " example " << ex.id;
      }
    }
  }
}

TEST(Suite, StructuralInvariants) {
  tasks::SuiteConfig cfg;
  auto d = tasks::generate_suite(cfg);
  std::set<std::string> ids;
  for (const auto* t : all_tasks(d)) {
    EXPECT_TRUE(ids.insert(t->id).second) << "duplicate id " << t->id;
    for (const auto& ex : t->examples) {
      ASSERT_GE(ex.options.size(), 2u);
      ASSERT_LE(ex.options.size(), 4u);
      EXPECT_LT(ex.answer, ex.options.size());
      std::set<tasks::Tokens> distinct(ex.options.begin(), ex.options.end());
      EXPECT_EQ(distinct.size(), ex.options.size());
      for (auto tok : ex.prompt) EXPECT_LT(tok, d.vocab.size());
      for (const auto& opt : ex.options) {
        for (auto tok : opt) EXPECT_LT(tok, d.vocab.size());
      }
    }
  }
  EXPECT_LE(d.vocab.size(), 64u);
}

TEST(Suite, UnseenRulesAbsentFromSeen) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    tasks::SuiteConfig cfg;
    cfg.seed = seed;
    auto d = tasks::generate_suite(cfg);
    ASSERT_EQ(d.unseen_tasks[0].rule->family, RuleFamily::kCopyReverse);
    ASSERT_EQ(d.unseen_tasks[1].rule->family, RuleFamily::kPermutedSuccessor);
    for (const auto& u : d.unseen_tasks) {
      for (const auto& s : d.seen_tasks) {
        if (s.rule->family != u.rule->family) continue;
        EXPECT_NE(s.rule->identity(), u.rule->identity()) << u.id << " vs " << s.id;
      }
    }
  }
}

TEST(Suite, MajorityClassPredictorIsWeak) {
  for (std::uint64_t seed : {3u, 9u}) {
    tasks::SuiteConfig cfg;
    cfg.seed = seed;
    auto d = tasks::generate_suite(cfg);
    for (const auto* t : all_tasks(d)) {
      std::map<std::size_t, std::size_t> by_index;
      std::map<tasks::Tokens, std::size_t> by_content;
      for (const auto& ex : t->examples) {
        ++by_index[ex.answer];
        ++by_content[ex.correct()];
      }
      const double n = static_cast<double>(t->examples.size());
      auto top = [](const auto& m) {
        std::size_t best = 0;
        for (const auto& [k, v] : m) best = std::max(best, v);
        return best;
      };
      EXPECT_LE(static_cast<double>(top(by_index)) / n, 0.6) << t->id;
      EXPECT_LE(static_cast<double>(top(by_content)) / n, 0.6) << t->id;
    }
  }
}

TEST(Suite, RejectsInvalidSizes) {
  tasks::SuiteConfig cfg;
  cfg.n_seen = 1;
  EXPECT_THROW(tasks::generate_suite(cfg), ConfigError);
  cfg = {};
  cfg.examples_per_task = 39;
  EXPECT_THROW(tasks::generate_suite(cfg), ConfigError);
  cfg = {};
  cfg.unseen_families.clear();
  EXPECT_THROW(tasks::generate_suite(cfg), ConfigError);
  EXPECT_THROW(tasks::parse_family("nope"), ConfigError);
  EXPECT_EQ(tasks::parse_family("maj"), RuleFamily::kMajority);
}

TEST(Records, RoundTrip) {
  tasks::SuiteConfig cfg;
  auto d = tasks::generate_suite(cfg);
  for (const auto* t : all_tasks(d)) {
    auto path = temp_file("rt.jsonl");
    tasks::save_records(*t, path, d.vocab);
    auto back = tasks::load_records(path, d.vocab);
    ASSERT_EQ(back.examples.size(), t->examples.size());
    for (std::size_t i = 0; i < back.examples.size(); ++i) {
      EXPECT_EQ(back.examples[i].prompt, t->examples[i].prompt);
      EXPECT_EQ(back.examples[i].options, t->examples[i].options);
      EXPECT_EQ(back.examples[i].answer, t->examples[i].answer);
    }
    // Writing the reloaded task gives the same bytes.
    auto again = temp_file("rt2.jsonl");
    tasks::save_records(back, again, d.vocab);
    std::ifstream f1(path, std::ios::binary), f2(again, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
    EXPECT_EQ(s1, s2);
  }
}

TEST(Records, OneLineAndErrors) {
  tasks::Vocabulary vocab;
  auto path = temp_file("one.jsonl");
  write_text(path, R"({"prompt": "#succ a b ?", "options": ["c", "d"], "answer": 1})" "\n");
  auto task = tasks::load_records(path, vocab);
  ASSERT_EQ(task.examples.size(), 1u);
  EXPECT_EQ(task.examples[0].answer, 1u);
  EXPECT_EQ(task.examples[0].options[0], (tasks::Tokens{*vocab.token("c")}));
  EXPECT_FALSE(task.rule.has_value());

  write_text(path, "");
  EXPECT_THROW(tasks::load_records(path, vocab), DataError);

  write_text(path, R"({"prompt": "a", "options": ["b", "c"], "answer": 0})" "\n{not json\n");
  try {
    tasks::load_records(path, vocab);
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }

  write_text(path, R"({"prompt": "a zz", "options": ["b", "c"], "answer": 0})" "\n");
  EXPECT_THROW(tasks::load_records(path, vocab), VocabularyError);

  write_text(path, R"({"prompt": "a", "options": ["b", "c"], "answer": 2})" "\n");
  EXPECT_THROW(tasks::load_records(path, vocab), ParseError);

  write_text(path, R"({"prompt": "a", "options": ["b", "b"], "answer": 0})" "\n");
  EXPECT_THROW(tasks::load_records(path, vocab), ParseError);

  EXPECT_THROW(tasks::load_records(temp_file("missing.jsonl"), vocab), DataError);
}

TEST(Episode, SupportAndQueryAreDisjointAndDeterministic) {
  auto d = tasks::generate_suite({});
  const auto& task = d.seen_tasks[0];
  auto ep = tasks::sample_episode(task, 2, 5, 3, 99);
  ASSERT_EQ(ep.support.size(), 5u);
  ASSERT_EQ(ep.query.size(), 3u);
  std::set<std::size_t> support_ids, query_ids;
  for (const auto& b : ep.support) {
    ASSERT_EQ(b.size(), 2u);
    for (const auto& ex : b) support_ids.insert(ex.id);
  }
  for (const auto& b : ep.query) {
    for (const auto& ex : b) query_ids.insert(ex.id);
  }
  EXPECT_EQ(support_ids.size(), 10u);
  for (auto id : query_ids) EXPECT_FALSE(support_ids.count(id));

  auto again = tasks::sample_episode(task, 2, 5, 3, 99);
  for (std::size_t b = 0; b < 5; ++b) EXPECT_EQ(again.support[b], ep.support[b]);
  auto other = tasks::sample_episode(task, 2, 5, 3, 100);
  EXPECT_NE(other.support[0], ep.support[0]);

  EXPECT_THROW(tasks::sample_episode(task, 2, 40, 0, 1), DataError);
  EXPECT_THROW(tasks::sample_episode(task, 0, 1, 0, 1), ConfigError);
}

TEST(Corpus, InVocabularyAndDeterministic) {
  auto a = tasks::pretraining_corpus(5, 8, 10);
  auto b = tasks::pretraining_corpus(5, 8, 10);
  EXPECT_EQ(a, b);
  EXPECT_FALSE(a.empty());
  tasks::Vocabulary vocab;
  for (auto t : a) EXPECT_LT(t, vocab.size());
}

TEST(Vocabulary, SymbolsRoundTrip) {
  tasks::Vocabulary vocab;
  for (std::size_t t = 0; t < vocab.size(); ++t) EXPECT_EQ(vocab.token(vocab.symbol(t)), t);
  EXPECT_EQ(vocab.symbol(tasks::Vocabulary::kSep), "?");
  EXPECT_FALSE(vocab.token("nope").has_value());
  EXPECT_THROW(vocab.symbol(vocab.size()), VocabularyError);
}
