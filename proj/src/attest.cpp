#include "attestllm/attest.hpp"

#include <sys/mman.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numeric>
#include <thread>

#include "attestllm/bundle.hpp"

namespace attestllm {

void AttestationPolicy::validate() const {
  if (blocks == 0) throw std::invalid_argument("policy: model must have at least one block");
  if (sample < 1 || sample > blocks) throw std::invalid_argument("policy: sample count must be in [1, L]");
  if (interval < 1) throw std::invalid_argument("policy: interval must be >= 1");
  if (workers < 1) throw std::invalid_argument("policy: worker limit must be >= 1");
}

void CostModel::validate() const {
  for (double v : {copy_us_per_byte, decrypt_us_per_byte, verify_us_per_mflop, world_switch_us, buffer_setup_us})
    if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument("cost model coefficients must be finite and >= 0");
  if (!(baseline_token_us > 0.0) || !std::isfinite(baseline_token_us))
    throw std::invalid_argument("cost model: baseline per-token latency must be > 0");
}

StageTotals& StageTotals::operator+=(const StageTotals& o) {
  world_switch += o.world_switch;
  decrypt += o.decrypt;
  setup += o.setup;
  copy += o.copy;
  verify += o.verify;
  return *this;
}

double block_forward_mflops(const ModelShape& shape, std::size_t tokens, std::size_t seq_len) {
  const double t = static_cast<double>(tokens);
  const double h = static_cast<double>(shape.hidden);
  const double f = static_cast<double>(shape.ffn);
  const double s = static_cast<double>(seq_len);
  return (8.0 * t * h * h + 4.0 * t * h * f + 4.0 * t * s * h) / 1e6;
}

namespace {

std::size_t serialized_block_size(const ModelShape& shape, int bits) {
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    const std::size_t n = rows * cols;
    return (bits == 8 ? n : (n + 1) / 2) + cols * 5;
  };
  const std::size_t h = shape.hidden;
  return 1 + 4 * (4 * h) + 4 * matrix(h, h) + matrix(h, shape.ffn) + matrix(shape.ffn, h);
}

std::size_t key_record_size(std::size_t channels, std::size_t bits, std::size_t checkpoint_values) {
  return 4 + 4 + 4 * channels + 4 + bits + 4 * bits * channels + 32 + 8 + 4 * checkpoint_values;
}

}  // namespace

AttestationTarget describe_target(const QuantizedModel& model, const KeyMaterial& keys) {
  if (keys.blocks.size() != model.blocks.size()) throw std::invalid_argument("describe_target: key/block count mismatch");
  AttestationTarget t;
  const std::size_t tokens = keys.trigger.sequences.size() * keys.seq_len();
  t.trigger_bytes = 4 * tokens;
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    t.block_bytes.push_back(serialize_block(model.blocks[i]).size());
    t.verify_mflops.push_back(block_forward_mflops(model.shape, tokens, keys.seq_len()));
    t.key_record_bytes.push_back(
        key_record_size(keys.blocks[i].channels.size(), keys.blocks[i].bits.size(), keys.checkpoints[i].size()));
  }
  return t;
}

AttestationTarget uniform_target(std::size_t blocks, std::size_t block_bytes, double verify_mflops,
                                 std::size_t key_record_bytes, std::size_t trigger_bytes) {
  AttestationTarget t;
  t.block_bytes.assign(blocks, block_bytes);
  t.verify_mflops.assign(blocks, verify_mflops);
  t.key_record_bytes.assign(blocks, key_record_bytes);
  t.trigger_bytes = trigger_bytes;
  return t;
}

AttestationTarget toy_target(std::size_t blocks, int bits) {
  const ModelShape shape;
  const WatermarkConfig wm;
  const std::size_t tokens = wm.trigger_count * wm.trigger_length;
  const std::size_t bits_per_block = std::max<std::size_t>(1, (wm.total_bits + blocks - 1) / blocks);
  return uniform_target(blocks, serialized_block_size(shape, bits),
                        block_forward_mflops(shape, tokens, wm.trigger_length),
                        key_record_size(channel_count(shape.hidden, wm.channel_fraction), bits_per_block,
                                        tokens * shape.hidden),
                        4 * tokens);
}

RoundWorkload make_workload(const CostModel& cost, const AttestationTarget& target,
                            std::span<const std::size_t> blocks) {
  RoundWorkload w;
  w.world_switch_us = cost.world_switch_us;
  w.setup_us = cost.buffer_setup_us;
  double decrypt_bytes = static_cast<double>(target.trigger_bytes);
  for (std::size_t b : blocks) {
    if (b >= target.blocks()) throw std::out_of_range("make_workload: block id out of range");
    w.copy_us.push_back(cost.copy_us_per_byte * static_cast<double>(target.block_bytes[b]));
    w.verify_us.push_back(cost.verify_us_per_mflop * target.verify_mflops[b]);
    decrypt_bytes += static_cast<double>(target.key_record_bytes[b]);
  }
  w.decrypt_us = cost.decrypt_us_per_byte * decrypt_bytes;
  return w;
}

namespace {

Schedule schedule_sequential(const RoundWorkload& work, const VerdictFn& verdict, bool early_exit) {
  const std::size_t k = work.copy_us.size();
  Schedule s;
  s.blocks.resize(k);
  s.busy.world_switch = work.world_switch_us;
  s.busy.decrypt = work.decrypt_us;
  double t = work.world_switch_us + work.decrypt_us;
  for (std::size_t j = 0; j < k; ++j) {
    BlockTimeline& b = s.blocks[j];
    t += work.setup_us;
    s.busy.setup += work.setup_us;
    b.copy_start = t;
    t += work.copy_us[j];
    b.copy_end = t;
    b.verify_start = t;
    t += work.verify_us[j];
    b.verify_end = t;
    b.state = BlockState::verified;
    s.busy.copy += work.copy_us[j];
    s.busy.verify += work.verify_us[j];
    const bool ok = !verdict || verdict(j);
    if (!ok && !s.failed) {
      s.failed = j;
      if (early_exit) break;
    }
  }
  s.total_us = t;
  return s;
}

Schedule schedule_overlapped(const RoundWorkload& work, std::size_t workers, const VerdictFn& verdict,
                             bool early_exit) {
  const std::size_t k = work.copy_us.size();
  Schedule s;
  s.blocks.resize(k);
  const double t0 = work.world_switch_us;
  const double decrypt_end = t0 + work.decrypt_us;
  std::vector<double> free_at(workers, t0);
  double copy_clock = t0;
  for (std::size_t j = 0; j < k; ++j) {
    BlockTimeline& b = s.blocks[j];
    b.copy_start = copy_clock;
    copy_clock += work.copy_us[j];
    b.copy_end = copy_clock;
    const auto worker = std::min_element(free_at.begin(), free_at.end());
    b.verify_start = std::max({b.copy_end, decrypt_end, *worker});
    b.verify_end = b.verify_start + work.verify_us[j];
    *worker = b.verify_end;
  }

  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return s.blocks[a].verify_end < s.blocks[b].verify_end; });

  std::vector<bool> evaluated(k, false);
  std::optional<double> cutoff;
  for (std::size_t j : order) {
    evaluated[j] = true;
    const bool ok = !verdict || verdict(j);
    if (!ok && !s.failed) {
      s.failed = j;
      if (early_exit) {
        cutoff = s.blocks[j].verify_end;
        break;
      }
    }
  }

  double end = decrypt_end;
  for (std::size_t j = 0; j < k; ++j) {
    BlockTimeline& b = s.blocks[j];
    if (cutoff) {
      const double c = *cutoff;
      if (evaluated[j]) {
        b.state = BlockState::verified;
      } else if (b.verify_start < c) {
        b.state = BlockState::cancelled;
        b.verify_end = c;
      } else {
        b.state = BlockState::unprocessed;
        b.verify_start = b.verify_end = c;
      }
      b.copy_end = std::min(b.copy_end, c);
      b.copy_start = std::min(b.copy_start, c);
    } else {
      b.state = BlockState::verified;
    }
    s.busy.copy += b.copy_end - b.copy_start;
    s.busy.verify += b.verify_end - b.verify_start;
    end = std::max(end, b.verify_end);
  }
  s.busy.world_switch = work.world_switch_us;
  s.busy.decrypt = work.decrypt_us;
  s.total_us = cutoff ? std::max(*cutoff, decrypt_end) : end;
  return s;
}

}  // namespace

Schedule schedule_pipeline(const RoundWorkload& work, PipelineMode mode, std::size_t workers, const VerdictFn& verdict,
                           bool early_exit) {
  if (work.copy_us.size() != work.verify_us.size()) throw std::invalid_argument("schedule_pipeline: ragged workload");
  if (workers < 1) throw std::invalid_argument("schedule_pipeline: worker limit must be >= 1");
  return mode == PipelineMode::sequential ? schedule_sequential(work, verdict, early_exit)
                                          : schedule_overlapped(work, workers, verdict, early_exit);
}

EarlyExit early_exit_check(std::span<const double> wers) {
  for (std::size_t i = 0; i < wers.size(); ++i)
    if (wers[i] < 100.0) return {false, i};
  return {};
}

std::vector<std::size_t> sample_blocks(std::size_t blocks, std::size_t sample, SeededRng& rng) {
  auto out = sample_uniform_without_replacement(blocks, sample, rng);
  std::sort(out.begin(), out.end());
  return out;
}

double round_miss_probability(std::size_t blocks, std::size_t sample, std::size_t tampered) {
  if (tampered > blocks || sample > blocks) throw std::invalid_argument("round_miss_probability: counts exceed L");
  if (tampered == 0) return 1.0;
  if (sample > blocks - tampered) return 0.0;
  return std::exp(log_choose(blocks - tampered, sample) - log_choose(blocks, sample));
}

double evasion_probability(std::size_t blocks, std::size_t sample, std::size_t tampered, std::size_t rounds) {
  if (tampered > blocks || sample > blocks) throw std::invalid_argument("evasion_probability: counts exceed L");
  if (tampered == 0 || rounds == 0) return 1.0;
  if (sample > blocks - tampered) return 0.0;
  const double log_miss = log_choose(blocks - tampered, sample) - log_choose(blocks, sample);
  return std::exp(static_cast<double>(rounds) * log_miss);
}

StagingRegion::StagingRegion(std::span<const std::uint8_t> data) : size_(data.size()) {
  if (size_ == 0) return;
  std::string pattern = (std::filesystem::temp_directory_path() / "attestllm-stage-XXXXXX").string();
  const int fd = ::mkstemp(pattern.data());
  if (fd < 0) throw std::runtime_error("staging: cannot create backing file");
  ::unlink(pattern.c_str());
  std::size_t written = 0;
  while (written < size_) {
    const ssize_t n = ::write(fd, data.data() + written, size_ - written);
    if (n <= 0) {
      ::close(fd);
      throw std::runtime_error("staging: write failed");
    }
    written += static_cast<std::size_t>(n);
  }
  base_ = ::mmap(nullptr, size_, PROT_READ, MAP_SHARED, fd, 0);
  ::close(fd);
  if (base_ == MAP_FAILED) {
    base_ = nullptr;
    throw std::runtime_error("staging: mmap failed");
  }
}

StagingRegion::~StagingRegion() {
  if (base_) ::munmap(base_, size_);
}

EnclaveVerifier::EnclaveVerifier(Bytes bundle, KeyMaterial keys) : bundle_(std::move(bundle)), keys_(std::move(keys)) {
  const BundleInfo info = read_bundle_info(bundle_);
  shape_ = info.shape;
  bits_ = info.bits;
  if (!(shape_ == keys_.shape) || bits_ != keys_.bits || keys_.blocks.size() != shape_.blocks)
    throw AuthenticationError("bundle architecture does not match the key store");
  for (const auto& e : block_extents(bundle_)) extents_.emplace_back(e.offset, e.length);
}

Verification EnclaveVerifier::verify(std::size_t block) {
  if (block >= extents_.size()) throw std::out_of_range("EnclaveVerifier: block id out of range");
  const auto [offset, length] = extents_[block];
  const StagingRegion region(std::span<const std::uint8_t>(bundle_).subspan(offset, length));
  const auto staged = region.view();
  const Bytes owned(staged.begin(), staged.end());
  QuantizedBlock parsed;
  try {
    parsed = deserialize_block(owned, shape_, bits_);
  } catch (const FormatError&) {
    Verification v;
    v.wer = keys_.blocks[block].bits.empty() ? 100.0 : 0.0;
    return v;
  }
  return verify_block(parsed, keys_.blocks[block], keys_.checkpoints[block], keys_.seq_len());
}

Verification CachedVerifier::verify(std::size_t block) {
  {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(block); it != cache_.end()) return it->second;
  }
  Verification v = inner_.verify(block);
  std::lock_guard lock(mutex_);
  ++misses_;
  return cache_.emplace(block, std::move(v)).first->second;
}

std::size_t CachedVerifier::misses() const {
  std::lock_guard lock(mutex_);
  return misses_;
}

OutcomeVerifier::OutcomeVerifier(std::size_t blocks, std::span<const std::size_t> failing) : failing_(blocks, false) {
  for (std::size_t b : failing) failing_.at(b) = true;
}

Verification OutcomeVerifier::verify(std::size_t block) {
  Verification v;
  v.wer = failing_.at(block) ? 0.0 : 100.0;
  return v;
}

std::vector<std::optional<Verification>> verify_parallel(BlockVerifier& verifier, std::span<const std::size_t> blocks,
                                                         std::size_t workers, bool early_exit) {
  std::vector<std::optional<Verification>> out(blocks.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> cancel{false};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    while (!cancel.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= blocks.size()) return;
      try {
        out[i] = verifier.verify(blocks[i]);
        if (early_exit && out[i]->wer < 100.0) cancel.store(true);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        cancel.store(true);
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(1, blocks.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < n; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return out;
}

std::size_t AttestationReport::tokens_generated() const {
  if (aborted && !rounds.empty()) return rounds.back().token;
  return tokens;
}

StageTotals AttestationReport::stage_totals() const {
  StageTotals t;
  for (const auto& r : rounds) t += r.stage_us;
  return t;
}

AttestationReport run_session(BlockVerifier& verifier, const AttestationTarget& target,
                              const AttestationPolicy& policy, const CostModel& cost, const SessionOptions& options,
                              SeededRng& rng) {
  policy.validate();
  cost.validate();
  if (target.blocks() != policy.blocks) throw std::invalid_argument("run_session: policy block count does not match the model");
  AttestationReport report;
  report.policy = policy;
  report.cost = cost;
  report.tokens = options.tokens;
  report.tampered = options.tampered;
  report.planned_rounds = options.tokens / policy.interval;

  for (std::size_t r = 0; r < report.planned_rounds; ++r) {
    RoundRecord round;
    round.index = r;
    round.token = (r + 1) * policy.interval;
    round.blocks = sample_blocks(policy.blocks, policy.sample, rng);
    round.wer.assign(round.blocks.size(), std::nullopt);

    std::vector<std::optional<Verification>> prefetched;
    if (options.prefetch && policy.workers > 1)
      prefetched = verify_parallel(verifier, round.blocks, policy.workers, policy.early_exit);
    auto verdict = [&](std::size_t pos) {
      const Verification v = pos < prefetched.size() && prefetched[pos] ? *prefetched[pos]
                                                                        : verifier.verify(round.blocks[pos]);
      round.wer[pos] = v.wer;
      return v.wer >= 100.0;
    };

    const Schedule s = schedule_pipeline(make_workload(cost, target, round.blocks), policy.mode, policy.workers,
                                         verdict, policy.early_exit);
    for (std::size_t j = 0; j < s.blocks.size(); ++j) {
      round.states.push_back(s.blocks[j].state);
      if (s.blocks[j].state != BlockState::verified) round.wer[j].reset();
    }
    round.stage_us = s.busy;
    round.latency_us = s.total_us;
    round.passed = !s.failed.has_value();
    if (s.failed) round.early_exit_block = round.blocks[*s.failed];
    report.attestation_us += s.total_us;
    report.rounds.push_back(std::move(round));
    if (!report.rounds.back().passed) {
      report.aborted = true;
      break;
    }
  }
  report.overhead_pct = overhead_report(report, cost.baseline_token_us);
  report.evasion_analytic = evasion_probability(policy.blocks, policy.sample, options.tampered, report.planned_rounds);
  return report;
}

double overhead_report(const AttestationReport& report, double baseline_token_us) {
  if (!(baseline_token_us > 0.0)) throw std::invalid_argument("overhead_report: baseline must be > 0");
  const std::size_t tokens = report.tokens_generated();
  if (tokens == 0 || report.rounds.empty()) return 0.0;
  return 100.0 * (report.attestation_us / static_cast<double>(tokens)) / baseline_token_us;
}

nlohmann::ordered_json to_json(const AttestationPolicy& policy) {
  return {{"interval", policy.interval},
          {"sample", policy.sample},
          {"blocks", policy.blocks},
          {"mode", policy.mode == PipelineMode::overlapped ? "overlapped" : "sequential"},
          {"workers", policy.workers},
          {"early_exit", policy.early_exit}};
}

nlohmann::ordered_json to_json(const CostModel& cost) {
  return {{"copy_us_per_byte", cost.copy_us_per_byte},
          {"decrypt_us_per_byte", cost.decrypt_us_per_byte},
          {"verify_us_per_mflop", cost.verify_us_per_mflop},
          {"world_switch_us", cost.world_switch_us},
          {"buffer_setup_us", cost.buffer_setup_us},
          {"baseline_token_us", cost.baseline_token_us}};
}

namespace {

nlohmann::ordered_json stage_json(const StageTotals& s, double total) {
  return {{"world_switch", s.world_switch}, {"decrypt", s.decrypt}, {"setup", s.setup},
          {"copy", s.copy},                 {"verify", s.verify},   {"total", total}};
}

const char* state_name(BlockState s) {
  switch (s) {
    case BlockState::verified:
      return "verified";
    case BlockState::cancelled:
      return "cancelled";
    case BlockState::unprocessed:
      return "unprocessed";
  }
  return "unknown";
}

}  // namespace

nlohmann::ordered_json to_json(const AttestationReport& report) {
  nlohmann::ordered_json rounds = nlohmann::ordered_json::array();
  for (const auto& r : report.rounds) {
    nlohmann::ordered_json wer = nlohmann::ordered_json::array();
    for (const auto& w : r.wer) wer.push_back(w ? nlohmann::ordered_json(*w) : nlohmann::ordered_json(nullptr));
    nlohmann::ordered_json states = nlohmann::ordered_json::array();
    for (auto s : r.states) states.push_back(state_name(s));
    rounds.push_back({{"token", r.token},
                      {"blocks", r.blocks},
                      {"stage_us", stage_json(r.stage_us, r.latency_us)},
                      {"wer", wer},
                      {"states", states},
                      {"verdict", r.passed ? "pass" : "abort"},
                      {"early_exit_block", r.early_exit_block ? nlohmann::ordered_json(*r.early_exit_block)
                                                              : nlohmann::ordered_json(nullptr)}});
  }
  return {{"policy", to_json(report.policy)},
          {"cost_model", to_json(report.cost)},
          {"rounds", rounds},
          {"aggregate",
           {{"rounds", report.rounds.size()},
            {"planned_rounds", report.planned_rounds},
            {"tokens", report.tokens},
            {"tokens_generated", report.tokens_generated()},
            {"verdict", report.aborted ? "abort" : "pass"},
            {"attestation_us", report.attestation_us},
            {"overhead_pct", report.overhead_pct},
            {"tampered_blocks", report.tampered},
            {"evasion_analytic", report.evasion_analytic}}}};
}

}  // namespace attestllm
