#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "abmll/lm.hpp"
#include "abmll/metatrain.hpp"
#include "abmll/tasks.hpp"

namespace abmll::cli {

// Everything one experiment needs, read from a flat `key = value` file.
struct ExperimentConfig {
  lm::ModelConfig model;
  lm::PretrainConfig pretrain;
  std::size_t corpus_tasks = 64;  // pretraining corpus size, in tasks
  std::size_t corpus_examples = 40;  // examples rendered per corpus task
  tasks::SuiteConfig suite;
  metatrain::TrainConfig train;
};

// Keys are `section.field`; unknown keys, duplicates and malformed values
// raise ConfigError naming the line. Omitted keys keep their defaults.
ExperimentConfig parse_config(std::string_view text);
// UsageError naming the path if the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical listing of every key; parse_config(to_text(c)) == c.
std::string to_text(const ExperimentConfig& config);

}  // namespace abmll::cli
