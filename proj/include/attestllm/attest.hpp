#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "attestllm/crypto.hpp"
#include "attestllm/watermark.hpp"

namespace attestllm {

enum class PipelineMode { sequential, overlapped };

/// Dynamic attestation: every `interval` generated tokens, verify `sample`
/// blocks drawn uniformly without replacement from `blocks`. A round passes
/// only when every sampled block decodes at 100%.
struct AttestationPolicy {
  std::size_t interval = 100;
  std::size_t sample = 2;
  std::size_t blocks = 16;
  PipelineMode mode = PipelineMode::overlapped;
  std::size_t workers = 1;
  bool early_exit = true;

  /// Throws std::invalid_argument unless 1 <= sample <= blocks, interval >= 1
  /// and workers >= 1.
  void validate() const;
  bool operator==(const AttestationPolicy&) const = default;
};

/// Simulated costs in microseconds. Buffer setup is paid per block by the
/// sequential pipeline only; the overlapped pipeline keeps its buffers.
struct CostModel {
  double copy_us_per_byte = 1.13e-4;
  double decrypt_us_per_byte = 3.04e-5;
  double verify_us_per_mflop = 1.65;
  double world_switch_us = 2.0;
  double buffer_setup_us = 20.5;
  double baseline_token_us = 15.0;  // per-token latency of plain inference

  void validate() const;
  bool operator==(const CostModel&) const = default;
};

/// What a round costs to attest, per block.
struct AttestationTarget {
  std::vector<std::size_t> block_bytes;       // staged and copied per sampled block
  std::vector<double> verify_mflops;          // recomputation on the trigger set
  std::vector<std::size_t> key_record_bytes;  // decrypted per sampled block
  std::size_t trigger_bytes = 0;              // decrypted once per round

  std::size_t blocks() const { return block_bytes.size(); }
};

/// Forward cost of one block over `tokens` tokens in sequences of `seq_len`.
double block_forward_mflops(const ModelShape& shape, std::size_t tokens, std::size_t seq_len);

AttestationTarget describe_target(const QuantizedModel& model, const KeyMaterial& keys);
/// Identical blocks, for shapes without a materialized model.
AttestationTarget uniform_target(std::size_t blocks, std::size_t block_bytes, double verify_mflops,
                                 std::size_t key_record_bytes, std::size_t trigger_bytes);
/// Target for the default toy block geometry replicated over `blocks`.
AttestationTarget toy_target(std::size_t blocks, int bits = 8);

struct RoundWorkload {
  double world_switch_us = 0.0;
  double decrypt_us = 0.0;
  double setup_us = 0.0;  // per block, sequential only
  std::vector<double> copy_us;
  std::vector<double> verify_us;
};

RoundWorkload make_workload(const CostModel& cost, const AttestationTarget& target,
                            std::span<const std::size_t> blocks);

enum class BlockState { verified, cancelled, unprocessed };

struct BlockTimeline {
  double copy_start = 0.0;
  double copy_end = 0.0;
  double verify_start = 0.0;
  double verify_end = 0.0;
  BlockState state = BlockState::unprocessed;
};

struct StageTotals {
  double world_switch = 0.0;
  double decrypt = 0.0;
  double setup = 0.0;
  double copy = 0.0;
  double verify = 0.0;

  double sum() const { return world_switch + decrypt + setup + copy + verify; }
  StageTotals& operator+=(const StageTotals& o);
};

struct Schedule {
  double total_us = 0.0;
  std::vector<BlockTimeline> blocks;
  StageTotals busy;
  std::optional<std::size_t> failed;  // position in the sample
};

/// Verdict of one block, asked at the simulated moment its verification
/// completes. Positions are indices into the sample.
using VerdictFn = std::function<bool(std::size_t position)>;

/// Event-driven schedule of one round.
/// Sequential: world switch, decrypt, then per block setup, copy, verify.
/// Overlapped: the trigger decrypt and the serial copy channel both start
/// after the world switch; verification of block j starts once its copy and
/// the decrypt are done and a worker is free, assigned in sample order.
/// With early exit the first failing completion cancels in-flight work and
/// leaves the rest unprocessed. A null verdict function means all pass.
Schedule schedule_pipeline(const RoundWorkload& work, PipelineMode mode, std::size_t workers,
                           const VerdictFn& verdict = {}, bool early_exit = true);

struct EarlyExit {
  bool passed = true;
  std::optional<std::size_t> first_failure;
};

/// Scans verification results in completion order and stops at the first WER below 100%.
EarlyExit early_exit_check(std::span<const double> wers);

/// k distinct blocks out of L, uniform, sorted ascending.
std::vector<std::size_t> sample_blocks(std::size_t blocks, std::size_t sample, SeededRng& rng);

/// Exact C(L-t, k) / C(L, k).
double round_miss_probability(std::size_t blocks, std::size_t sample, std::size_t tampered);

/// (C(L-t,k)/C(L,k))^r, computed in log space; exactly 0 when every sample must
/// hit a tampered block. Throws std::invalid_argument on t > L or k > L.
double evasion_probability(std::size_t blocks, std::size_t sample, std::size_t tampered, std::size_t rounds);

class BlockVerifier {
 public:
  virtual ~BlockVerifier() = default;
  virtual Verification verify(std::size_t block) = 0;
};

/// Read-only staging area shared with the untrusted side: bytes are written
/// to an anonymous temporary file and mapped PROT_READ.
class StagingRegion {
 public:
  explicit StagingRegion(std::span<const std::uint8_t> data);
  ~StagingRegion();
  StagingRegion(const StagingRegion&) = delete;
  StagingRegion& operator=(const StagingRegion&) = delete;

  std::span<const std::uint8_t> view() const { return {static_cast<const std::uint8_t*>(base_), size_}; }

 private:
  void* base_ = nullptr;
  std::size_t size_ = 0;
};

/// Verifies blocks of a serialized bundle the way the secure side would:
/// stage the block, copy it into owned memory, parse it, run the trigger
/// checkpoint through it and decode the signature.
class EnclaveVerifier : public BlockVerifier {
 public:
  EnclaveVerifier(Bytes bundle, KeyMaterial keys);
  Verification verify(std::size_t block) override;

  const KeyMaterial& keys() const { return keys_; }
  const Bytes& bundle() const { return bundle_; }

 private:
  Bytes bundle_;
  KeyMaterial keys_;
  ModelShape shape_;
  int bits_ = 8;
  std::vector<std::pair<std::size_t, std::size_t>> extents_;
};

/// Memoizes another verifier; thread-safe.
class CachedVerifier : public BlockVerifier {
 public:
  explicit CachedVerifier(BlockVerifier& inner) : inner_(inner) {}
  Verification verify(std::size_t block) override;
  std::size_t misses() const;

 private:
  BlockVerifier& inner_;
  mutable std::mutex mutex_;
  std::map<std::size_t, Verification> cache_;
  std::size_t misses_ = 0;
};

/// Fixed outcomes: blocks in `failing` decode at 0%, all others at 100%.
class OutcomeVerifier : public BlockVerifier {
 public:
  OutcomeVerifier(std::size_t blocks, std::span<const std::size_t> failing);
  Verification verify(std::size_t block) override;

 private:
  std::vector<bool> failing_;
};

/// Real parallel verification for wall-clock use. Workers share a cancel
/// flag; with early exit, a failure stops blocks that have not started.
/// Results come back in input order; skipped blocks are empty.
std::vector<std::optional<Verification>> verify_parallel(BlockVerifier& verifier, std::span<const std::size_t> blocks,
                                                         std::size_t workers, bool early_exit);

struct RoundRecord {
  std::size_t index = 0;
  std::size_t token = 0;
  std::vector<std::size_t> blocks;
  StageTotals stage_us;
  double latency_us = 0.0;
  std::vector<std::optional<double>> wer;  // empty when the block was not processed
  std::vector<BlockState> states;
  bool passed = true;
  std::optional<std::size_t> early_exit_block;
};

struct AttestationReport {
  AttestationPolicy policy;
  CostModel cost;
  std::size_t tokens = 0;
  std::size_t tampered = 0;
  std::size_t planned_rounds = 0;
  std::vector<RoundRecord> rounds;
  bool aborted = false;
  double attestation_us = 0.0;
  double overhead_pct = 0.0;
  double evasion_analytic = 1.0;

  bool passed() const { return !aborted; }
  /// Tokens generated before the session ended.
  std::size_t tokens_generated() const;
  StageTotals stage_totals() const;
};

struct SessionOptions {
  std::size_t tokens = 1000;
  std::size_t tampered = 0;     // only feeds the analytic evasion figure
  bool prefetch = false;        // verify each sample with real threads first
};

/// Runs floor(tokens / interval) rounds, stopping at the first abort.
AttestationReport run_session(BlockVerifier& verifier, const AttestationTarget& target,
                              const AttestationPolicy& policy, const CostModel& cost, const SessionOptions& options,
                              SeededRng& rng);

/// 100 * (attestation time per generated token) / baseline per-token time.
double overhead_report(const AttestationReport& report, double baseline_token_us);

nlohmann::ordered_json to_json(const AttestationPolicy& policy);
nlohmann::ordered_json to_json(const CostModel& cost);
nlohmann::ordered_json to_json(const AttestationReport& report);

}  // namespace attestllm
