#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "attestllm/attest.hpp"
#include "attestllm/watermark.hpp"

namespace attestllm {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Zeroth-order settings left unset fall back to the per-bit-width defaults.
struct PostQuantOverrides {
  std::optional<int> mu;
  std::optional<double> learning_rate;
  std::size_t subset = 100;
  std::size_t epochs = 40;

  bool operator==(const PostQuantOverrides&) const = default;
};

struct RunConfig {
  ModelShape shape;
  std::uint64_t model_seed = 42;

  int bits = 8;
  std::size_t total_bits = 20;
  double channel_fraction = 0.4;
  double projection_scale = 1.0;
  PreQuantConfig pre;
  PostQuantOverrides post;
  std::size_t trigger_count = 16;
  std::size_t trigger_length = 32;
  std::uint64_t trigger_seed = 0x5eed;
  std::uint64_t key_seed = 0xbeef;
  EmbedStages stages = EmbedStages::two_stage;

  AttestationPolicy policy;
  CostModel cost;

  std::size_t tokens = 1000;
  std::size_t sessions = 20000;
  std::size_t trials = 100;
  std::size_t jobs = 1;
  std::uint64_t seed = 1;  // sampling, attacks and tamper targets
  std::string tamper = "none";

  std::filesystem::path bundle = "model.atlm";
  std::filesystem::path keys = "model.keys";
  std::filesystem::path out;

  /// Throws ConfigError on any out-of-range value.
  void validate() const;
  WatermarkConfig watermark() const;
  /// Policy with the block count taken from the model shape.
  AttestationPolicy attestation_policy() const;

  bool operator==(const RunConfig&) const = default;
};

/// Every field is written, so the output is a complete config.
nlohmann::ordered_json to_json(const RunConfig& config);
/// Missing fields keep their defaults; unknown fields and wrong types throw
/// ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
/// Parses JSON with // and /* */ comments.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace attestllm
