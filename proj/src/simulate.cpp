#include "attestllm/simulate.hpp"

#include <fstream>
#include <sstream>

namespace attestllm {

AttestationReport simulate_session(const RunConfig& config, std::size_t tampered, SeededRng& rng) {
  const AttestationPolicy policy = config.attestation_policy();
  if (tampered > policy.blocks) throw std::invalid_argument("simulate: tampered count exceeds the block count");
  SeededRng target_rng = rng.fork(0x7a);
  const auto failing = sample_blocks(policy.blocks, tampered, target_rng);
  OutcomeVerifier verifier(policy.blocks, failing);
  SessionOptions options;
  options.tokens = config.tokens;
  options.tampered = tampered;
  return run_session(verifier, toy_target(policy.blocks, config.bits), policy, config.cost, options, rng);
}

namespace {

SweepRow sweep_row(const std::string& name, const RunConfig& config) {
  SeededRng rng(config.seed);
  const AttestationReport report = simulate_session(config, 0, rng);
  SweepRow row;
  row.sweep = name;
  row.interval = config.policy.interval;
  row.sample = config.policy.sample;
  row.blocks = config.shape.blocks;
  row.tokens = report.tokens_generated();
  row.rounds = report.rounds.size();
  row.attestation_us = report.attestation_us;
  row.round_latency_us = row.rounds ? report.attestation_us / static_cast<double>(row.rounds) : 0.0;
  row.overhead_pct = report.overhead_pct;
  return row;
}

}  // namespace

std::vector<SweepRow> interval_sweep(const RunConfig& config, std::span<const std::size_t> intervals) {
  std::vector<SweepRow> rows;
  for (std::size_t f : intervals) {
    RunConfig c = config;
    c.policy.interval = f;
    rows.push_back(sweep_row("interval", c));
  }
  return rows;
}

std::vector<SweepRow> sample_sweep(const RunConfig& config, std::span<const std::size_t> samples) {
  std::vector<SweepRow> rows;
  for (std::size_t k : samples) {
    RunConfig c = config;
    c.policy.sample = k;
    rows.push_back(sweep_row("sample", c));
  }
  return rows;
}

std::vector<BreakdownRow> stage_breakdown(const RunConfig& config) {
  std::vector<BreakdownRow> rows;
  for (PipelineMode mode : {PipelineMode::sequential, PipelineMode::overlapped}) {
    RunConfig c = config;
    c.policy.mode = mode;
    SeededRng rng(config.seed);
    const AttestationReport report = simulate_session(c, 0, rng);
    BreakdownRow row;
    row.mode = mode;
    row.busy = report.stage_totals();
    row.latency_us = report.attestation_us;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv_header() {
  return "run,sweep,interval,sample,blocks,tokens,rounds,round_latency_us,attestation_us,overhead_pct";
}

std::string to_csv(const SweepRow& r, const std::string& run) {
  std::ostringstream out;
  out.precision(10);
  out << run << ',' << r.sweep << ',' << r.interval << ',' << r.sample << ',' << r.blocks << ',' << r.tokens << ','
      << r.rounds << ',' << r.round_latency_us << ',' << r.attestation_us << ',' << r.overhead_pct;
  return out.str();
}

std::string breakdown_csv_header() {
  return "run,mode,latency_us,world_switch_pct,decrypt_pct,setup_pct,copy_pct,verify_pct";
}

std::string to_csv(const BreakdownRow& r, const std::string& run) {
  std::ostringstream out;
  out.precision(10);
  out << run << ',' << (r.mode == PipelineMode::overlapped ? "overlapped" : "sequential") << ',' << r.latency_us << ','
      << r.share(r.busy.world_switch) << ',' << r.share(r.busy.decrypt) << ',' << r.share(r.busy.setup) << ','
      << r.share(r.busy.copy) << ',' << r.share(r.busy.verify);
  return out.str();
}

std::string run_id(const RunConfig& config) {
  const std::string text = to_json(config).dump();
  const Digest d = sha256(Bytes(text.begin(), text.end()));
  return to_hex(d).substr(0, 16);
}

void append_csv(const std::filesystem::path& path, const std::string& header, const std::vector<std::string>& rows) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for appending");
  if (fresh) out << header << '\n';
  for (const auto& row : rows) out << row << '\n';
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace attestllm
