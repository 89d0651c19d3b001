#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "abmll/cli/config.hpp"
#include "abmll/lm.hpp"
#include "abmll/metatrain.hpp"

namespace abmll::cli {

inline constexpr std::string_view kCheckpointMagic = "ABMLL1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Section {
  std::string name;
  std::string payload;
};

// Container layout (little endian):
//   magic "ABMLL1" | u32 version | u32 section count
//   per section: u32 name length | name | u64 payload length | payload
//                | u32 CRC-32 of name followed by payload
std::string encode_container(const std::vector<Section>& sections);
// IntegrityError on bad magic, unknown version, truncation or checksum mismatch.
std::vector<Section> decode_container(std::string_view bytes);

// Written to a sibling temporary file and renamed into place.
void write_file(const std::filesystem::path& path, std::string_view bytes);
// UsageError if the file does not exist or cannot be read.
std::string read_file(const std::filesystem::path& path);

enum class CheckpointKind { kBase, kRun };

struct Checkpoint {
  CheckpointKind kind = CheckpointKind::kBase;
  ExperimentConfig config;
  lm::BaseWeights base;
  // Present for run checkpoints only.
  std::optional<metatrain::RunState> state;
};

std::string encode_base(const ExperimentConfig& config, const lm::BaseWeights& base);
std::string encode_run(const ExperimentConfig& config, const lm::BaseWeights& base,
                       const metatrain::RunState& state);
Checkpoint decode_checkpoint(std::string_view bytes);

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace abmll::cli
