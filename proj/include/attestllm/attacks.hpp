#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "attestllm/attest.hpp"
#include "attestllm/watermark.hpp"

namespace attestllm {

enum class TamperKind { none, replace_all, replace_blocks, forge_keys, noise };

/// What an adversary does to a deployed bundle. `count` is t for
/// replace_blocks; `sigma` is the noise stddev in grid steps. Explicit
/// `targets` override seeded target selection.
struct TamperSpec {
  TamperKind kind = TamperKind::none;
  std::size_t count = 0;
  double sigma = 0.0;
  std::vector<std::size_t> targets;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on invalid targets, t > L or t = 0.
  void validate(std::size_t blocks) const;
  /// Accepts "none", "all", "forge", "noise:<sigma>" or a block count t.
  static TamperSpec parse(const std::string& text, std::uint64_t seed);
  std::string describe() const;
};

struct TamperedModel {
  QuantizedModel model;
  std::vector<std::size_t> targets;  // sorted block ids that were altered
};

/// Same-architecture block with fresh random weights, quantized like the victim.
QuantizedBlock fresh_block(const ModelShape& shape, int bits, SeededRng& rng);

/// Applies replace_all, replace_blocks or noise. forge_keys is handled by
/// forgery_attack and is rejected here.
TamperedModel apply_tamper(const QuantizedModel& victim, const TamperSpec& spec);

struct AttackOptions {
  std::size_t trials = 100;
  std::size_t tokens = 1000;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  std::size_t proxy_epochs = 0;  // replacement: gradient steps on an unrelated objective
};

struct TrialOutcome {
  std::uint64_t seed = 0;
  bool aborted = false;
  std::optional<std::size_t> abort_round;
  std::vector<double> block_wer;  // every block checked against the victim keys
  bool self_check_passed = false;  // forgery: forged model against forged keys
};

struct AttackReport {
  std::string kind;
  std::vector<TrialOutcome> trials;
  AttestationReport first_session;  // representative session for the report body

  std::size_t aborted() const;
  double abort_rate() const;
  double mean_block_wer() const;
};

/// Per-block WERs of a bundle against a key store, without sampling.
std::vector<double> block_wers(const QuantizedModel& model, const KeyMaterial& keys);

/// Runs one attestation session of `substitute` against `keys`. Throws
/// AuthenticationError when the architectures differ.
AttestationReport attest_substitute(const QuantizedModel& substitute, const KeyMaterial& keys,
                                    const AttestationPolicy& policy, const CostModel& cost, std::size_t tokens,
                                    SeededRng& rng);

/// Model replacement: each trial hosts a freshly initialised model of the
/// victim's architecture and attests it with the victim's keys.
AttackReport replacement_attack(const KeyMaterial& keys, const AttestationPolicy& policy, const CostModel& cost,
                                const AttackOptions& options);

/// Watermark forgery: each trial embeds a random signature under a random
/// projection and trigger set into an unauthorised model, then attests it
/// against the authentic keys. The forger's embedding settings come from
/// `forger`; its seeds are replaced per trial.
AttackReport forgery_attack(const KeyMaterial& keys, const WatermarkConfig& forger, const AttestationPolicy& policy,
                            const CostModel& cost, const AttackOptions& options);

struct PartialTamperReport {
  std::vector<std::size_t> targets;
  std::size_t detectable = 0;  // tampered blocks that decode below 100%
  std::size_t sessions = 0;
  std::size_t evaded = 0;
  std::size_t rounds = 0;
  double empirical = 0.0;
  double standard_error = 0.0;
  double analytic = 0.0;             // evasion probability at t
  double analytic_detectable = 0.0;  // same, counting only detectable blocks
  AttestationReport first_session;

  /// |empirical - analytic| <= 3 standard errors of the analytic rate.
  bool within_three_se() const;
};

/// Replaces t blocks once (seeded), then runs independent sessions with
/// per-session sampling streams and counts those that never abort.
PartialTamperReport partial_tamper(const QuantizedModel& victim, const KeyMaterial& keys, const TamperSpec& spec,
                                   const AttestationPolicy& policy, const CostModel& cost,
                                   const AttackOptions& options);

nlohmann::ordered_json to_json(const AttackReport& report);
nlohmann::ordered_json to_json(const PartialTamperReport& report);

}  // namespace attestllm
