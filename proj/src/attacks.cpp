#include "attestllm/attacks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

#include "attestllm/bundle.hpp"

namespace attestllm {

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(1, n));
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  auto worker = [&](std::size_t w) {
    try {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    } catch (...) {
      errors[w] = std::current_exception();
      next.store(n);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < jobs; ++w) pool.emplace_back(worker, w);
  worker(0);
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<std::size_t> all_blocks(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

AttestationPolicy policy_for(const AttestationPolicy& policy, const ModelShape& shape) {
  AttestationPolicy p = policy;
  p.blocks = shape.blocks;
  return p;
}

const char* kind_name(TamperKind kind) {
  switch (kind) {
    case TamperKind::none:
      return "none";
    case TamperKind::replace_all:
      return "replace_all";
    case TamperKind::replace_blocks:
      return "replace_blocks";
    case TamperKind::forge_keys:
      return "forge_keys";
    case TamperKind::noise:
      return "noise";
  }
  return "unknown";
}

}  // namespace

void TamperSpec::validate(std::size_t blocks) const {
  for (std::size_t t : targets)
    if (t >= blocks) throw std::invalid_argument("tamper: target block id out of range");
  std::vector<std::size_t> sorted = targets;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw std::invalid_argument("tamper: duplicate target block id");
  if (kind == TamperKind::replace_blocks) {
    if (count == 0) throw std::invalid_argument("tamper: t must be >= 1");
    if (count > blocks) throw std::invalid_argument("tamper: t exceeds the block count");
    if (!targets.empty() && targets.size() != count) throw std::invalid_argument("tamper: target list must have t ids");
  }
  if (kind == TamperKind::noise && !(sigma > 0.0 && std::isfinite(sigma)))
    throw std::invalid_argument("tamper: noise sigma must be > 0");
}

TamperSpec TamperSpec::parse(const std::string& text, std::uint64_t seed) {
  TamperSpec spec;
  spec.seed = seed;
  if (text.empty() || text == "none") return spec;
  if (text == "all") {
    spec.kind = TamperKind::replace_all;
    return spec;
  }
  if (text == "forge") {
    spec.kind = TamperKind::forge_keys;
    return spec;
  }
  if (text.rfind("noise:", 0) == 0) {
    spec.kind = TamperKind::noise;
    try {
      std::size_t used = 0;
      spec.sigma = std::stod(text.substr(6), &used);
      if (used != text.size() - 6) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw std::invalid_argument("tamper: bad noise level in '" + text + "'");
    }
    return spec;
  }
  if (!std::all_of(text.begin(), text.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw std::invalid_argument("tamper: expected none, all, forge, noise:<sigma> or a block count, got '" + text + "'");
  spec.kind = TamperKind::replace_blocks;
  spec.count = std::stoul(text);
  return spec;
}

std::string TamperSpec::describe() const {
  std::ostringstream out;
  out << kind_name(kind);
  if (kind == TamperKind::replace_blocks) out << "(" << count << ")";
  if (kind == TamperKind::noise) out << "(" << sigma << ")";
  return out.str();
}

QuantizedBlock fresh_block(const ModelShape& shape, int bits, SeededRng& rng) {
  return quantize_block(ToyBlock::random(shape.hidden, shape.heads, shape.ffn, rng), bits);
}

TamperedModel apply_tamper(const QuantizedModel& victim, const TamperSpec& spec) {
  const std::size_t L = victim.blocks.size();
  spec.validate(L);
  if (spec.kind == TamperKind::forge_keys)
    throw std::invalid_argument("apply_tamper: forgery changes keys, not weights; use forgery_attack");
  TamperedModel out{victim, {}};
  SeededRng rng(spec.seed);
  switch (spec.kind) {
    case TamperKind::none:
    case TamperKind::forge_keys:
      return out;
    case TamperKind::replace_all:
      out.targets = spec.targets.empty() ? all_blocks(L) : spec.targets;
      break;
    case TamperKind::replace_blocks:
      out.targets = spec.targets.empty() ? sample_uniform_without_replacement(L, spec.count, rng) : spec.targets;
      break;
    case TamperKind::noise:
      out.targets = spec.targets.empty() ? all_blocks(L) : spec.targets;
      break;
  }
  std::sort(out.targets.begin(), out.targets.end());
  for (std::size_t b : out.targets) {
    SeededRng block_rng = rng.fork(b + 1);
    if (spec.kind == TamperKind::noise) {
      QuantizedBlock& q = out.model.blocks[b];
      const int qmax = quant_max(q.bits);
      for (QuantizedMatrix* m : q.weights())
        for (auto& v : m->values) {
          const long shifted = std::lround(static_cast<double>(v) + spec.sigma * block_rng.normal());
          v = static_cast<std::int8_t>(std::clamp<long>(shifted, -qmax, qmax));
        }
    } else {
      out.model.blocks[b] = fresh_block(victim.shape, victim.bits, block_rng);
    }
  }
  return out;
}

std::size_t AttackReport::aborted() const {
  return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.aborted; }));
}

double AttackReport::abort_rate() const {
  return trials.empty() ? 0.0 : static_cast<double>(aborted()) / static_cast<double>(trials.size());
}

double AttackReport::mean_block_wer() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& t : trials)
    for (double w : t.block_wer) {
      sum += w;
      ++n;
    }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

std::vector<double> block_wers(const QuantizedModel& model, const KeyMaterial& keys) {
  EnclaveVerifier verifier(serialize_model(model), keys);
  std::vector<double> out;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) out.push_back(verifier.verify(b).wer);
  return out;
}

AttestationReport attest_substitute(const QuantizedModel& substitute, const KeyMaterial& keys,
                                    const AttestationPolicy& policy, const CostModel& cost, std::size_t tokens,
                                    SeededRng& rng) {
  EnclaveVerifier verifier(serialize_model(substitute), keys);
  const AttestationTarget target = describe_target(substitute, keys);
  SessionOptions options;
  options.tokens = tokens;
  return run_session(verifier, target, policy_for(policy, keys.shape), cost, options, rng);
}

namespace {

std::optional<std::size_t> abort_round(const AttestationReport& report) {
  if (!report.aborted) return std::nullopt;
  return report.rounds.back().index;
}

}  // namespace

AttackReport replacement_attack(const KeyMaterial& keys, const AttestationPolicy& policy, const CostModel& cost,
                                const AttackOptions& options) {
  AttackReport report;
  report.kind = "replacement";
  report.trials.resize(options.trials);
  std::vector<AttestationReport> sessions(options.trials);
  const SeededRng base(options.seed);
  parallel_for(options.trials, options.jobs, [&](std::size_t i) {
    SeededRng trial_rng = base.fork(i);
    TrialOutcome& t = report.trials[i];
    t.seed = trial_rng.next_u64();
    ToyModel substitute = ToyModel::random(keys.shape, t.seed);
    if (options.proxy_epochs > 0) {
      SeededRng proxy_rng = trial_rng.fork(0x9a0);
      const TriggerSet probe = TriggerSet::generate(4, keys.seq_len(), keys.shape.vocab, proxy_rng.next_u64());
      const ActivationTrace trace = trace_batch(substitute, probe.sequences);
      PreQuantConfig pre;
      pre.epochs = options.proxy_epochs;
      for (std::size_t b = 0; b < substitute.blocks.size(); ++b) {
        BlockKey proxy;
        proxy.block = b;
        proxy.channels = keys.blocks[b].channels;
        proxy.bits.resize(4);
        for (auto& bit : proxy.bits) bit = static_cast<std::uint8_t>(proxy_rng.uniform_index(2));
        proxy.projection = Matrix(proxy.bits.size(), proxy.channels.size());
        for (double& v : proxy.projection.data()) v = proxy_rng.normal();
        substitute.blocks[b] =
            embed_pre_quant(substitute.blocks[b], proxy, trace.feeding(b), trace.seq_len, pre).block;
      }
    }
    const QuantizedModel quantized = quantize_model(substitute, keys.bits);
    t.block_wer = block_wers(quantized, keys);
    SeededRng session_rng = trial_rng.fork(1);
    sessions[i] = attest_substitute(quantized, keys, policy, cost, options.tokens, session_rng);
    t.aborted = sessions[i].aborted;
    t.abort_round = abort_round(sessions[i]);
  });
  if (!sessions.empty()) report.first_session = std::move(sessions.front());
  return report;
}

AttackReport forgery_attack(const KeyMaterial& keys, const WatermarkConfig& forger, const AttestationPolicy& policy,
                            const CostModel& cost, const AttackOptions& options) {
  AttackReport report;
  report.kind = "forgery";
  report.trials.resize(options.trials);
  std::vector<AttestationReport> sessions(options.trials);
  const SeededRng base(options.seed);
  parallel_for(options.trials, options.jobs, [&](std::size_t i) {
    SeededRng trial_rng = base.fork(i);
    TrialOutcome& t = report.trials[i];
    t.seed = trial_rng.next_u64();
    WatermarkConfig config = forger;
    config.bits = keys.bits;
    config.key_seed = trial_rng.next_u64();
    config.trigger_seed = trial_rng.next_u64();
    config.require_full_wer = false;
    const EmbedResult forged = embed_model(ToyModel::random(keys.shape, t.seed), config, 1);

    SeededRng self_rng = trial_rng.fork(2);
    t.self_check_passed =
        !attest_substitute(forged.model, forged.keys, policy, cost, options.tokens, self_rng).aborted;

    t.block_wer = block_wers(forged.model, keys);
    SeededRng session_rng = trial_rng.fork(1);
    sessions[i] = attest_substitute(forged.model, keys, policy, cost, options.tokens, session_rng);
    t.aborted = sessions[i].aborted;
    t.abort_round = abort_round(sessions[i]);
  });
  if (!sessions.empty()) report.first_session = std::move(sessions.front());
  return report;
}

bool PartialTamperReport::within_three_se() const {
  return std::abs(empirical - analytic) <= 3.0 * standard_error;
}

PartialTamperReport partial_tamper(const QuantizedModel& victim, const KeyMaterial& keys, const TamperSpec& spec,
                                   const AttestationPolicy& policy, const CostModel& cost,
                                   const AttackOptions& options) {
  if (spec.kind != TamperKind::replace_blocks && spec.kind != TamperKind::replace_all)
    throw std::invalid_argument("partial_tamper: needs a block replacement spec");
  const TamperedModel tampered = apply_tamper(victim, spec);
  const AttestationPolicy p = policy_for(policy, keys.shape);
  p.validate();

  EnclaveVerifier enclave(serialize_model(tampered.model), keys);
  CachedVerifier verifier(enclave);
  const AttestationTarget target = describe_target(tampered.model, keys);

  PartialTamperReport report;
  report.targets = tampered.targets;
  for (std::size_t b : tampered.targets)
    if (verifier.verify(b).wer < 100.0) ++report.detectable;
  report.sessions = options.trials;
  report.rounds = options.tokens / p.interval;

  SessionOptions session;
  session.tokens = options.tokens;
  session.tampered = tampered.targets.size();
  std::vector<char> evaded(options.trials, 0);
  std::vector<AttestationReport> first(1);
  const SeededRng base(options.seed);
  parallel_for(options.trials, options.jobs, [&](std::size_t i) {
    SeededRng rng = base.fork(i);
    AttestationReport r = run_session(verifier, target, p, cost, session, rng);
    evaded[i] = r.aborted ? 0 : 1;
    if (i == 0) first[0] = std::move(r);
  });
  report.first_session = std::move(first[0]);
  report.evaded = static_cast<std::size_t>(std::count(evaded.begin(), evaded.end(), 1));
  const double n = static_cast<double>(std::max<std::size_t>(1, report.sessions));
  report.empirical = static_cast<double>(report.evaded) / n;
  report.analytic = evasion_probability(p.blocks, p.sample, tampered.targets.size(), report.rounds);
  report.analytic_detectable = evasion_probability(p.blocks, p.sample, report.detectable, report.rounds);
  report.standard_error = std::sqrt(report.analytic * (1.0 - report.analytic) / n);
  return report;
}

nlohmann::ordered_json to_json(const AttackReport& report) {
  nlohmann::ordered_json out = to_json(report.first_session);
  nlohmann::ordered_json trials = nlohmann::ordered_json::array();
  for (const auto& t : report.trials) {
    nlohmann::ordered_json row = {{"seed", t.seed},
                                  {"verdict", t.aborted ? "abort" : "pass"},
                                  {"abort_round", t.abort_round ? nlohmann::ordered_json(*t.abort_round)
                                                                : nlohmann::ordered_json(nullptr)},
                                  {"block_wer", t.block_wer}};
    if (report.kind == "forgery") row["self_check"] = t.self_check_passed ? "pass" : "abort";
    trials.push_back(std::move(row));
  }
  out["attack"] = {{"kind", report.kind},
                   {"trials", report.trials.size()},
                   {"aborted", report.aborted()},
                   {"abort_rate", report.abort_rate()},
                   {"mean_block_wer", report.mean_block_wer()},
                   {"outcomes", trials}};
  return out;
}

nlohmann::ordered_json to_json(const PartialTamperReport& report) {
  nlohmann::ordered_json out = to_json(report.first_session);
  out["attack"] = {{"kind", "partial_tamper"},
                   {"targets", report.targets},
                   {"detectable_blocks", report.detectable},
                   {"sessions", report.sessions},
                   {"rounds_per_session", report.rounds},
                   {"evaded", report.evaded},
                   {"empirical_evasion", report.empirical},
                   {"analytic_evasion", report.analytic},
                   {"analytic_evasion_detectable", report.analytic_detectable},
                   {"standard_error", report.standard_error},
                   {"within_three_se", report.within_three_se()}};
  return out;
}

}  // namespace attestllm
