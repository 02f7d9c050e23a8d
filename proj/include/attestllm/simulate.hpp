#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "attestllm/attest.hpp"
#include "attestllm/config.hpp"

namespace attestllm {

/// Session over the toy block geometry with fixed per-block outcomes: the
/// `tampered` blocks (seeded choice) fail, the rest pass.
AttestationReport simulate_session(const RunConfig& config, std::size_t tampered, SeededRng& rng);

struct SweepRow {
  std::string sweep;  // "interval" or "sample"
  std::size_t interval = 0;
  std::size_t sample = 0;
  std::size_t blocks = 0;
  std::size_t tokens = 0;
  std::size_t rounds = 0;
  double round_latency_us = 0.0;  // mean over rounds
  double attestation_us = 0.0;
  double overhead_pct = 0.0;
};

std::vector<SweepRow> interval_sweep(const RunConfig& config, std::span<const std::size_t> intervals);
std::vector<SweepRow> sample_sweep(const RunConfig& config, std::span<const std::size_t> samples);

struct BreakdownRow {
  PipelineMode mode = PipelineMode::overlapped;
  StageTotals busy;  // summed over the session
  double latency_us = 0.0;

  /// Stage share in percent of all busy time.
  double share(double stage) const { return busy.sum() > 0.0 ? 100.0 * stage / busy.sum() : 0.0; }
};

/// One untampered session per pipeline mode.
std::vector<BreakdownRow> stage_breakdown(const RunConfig& config);

std::string sweep_csv_header();
std::string to_csv(const SweepRow& row, const std::string& run_id);
std::string breakdown_csv_header();
std::string to_csv(const BreakdownRow& row, const std::string& run_id);

/// Short digest of the effective config, tagging appended CSV rows.
std::string run_id(const RunConfig& config);

/// Appends rows to a CSV, writing the header first when the file is new.
void append_csv(const std::filesystem::path& path, const std::string& header, const std::vector<std::string>& rows);

}  // namespace attestllm
