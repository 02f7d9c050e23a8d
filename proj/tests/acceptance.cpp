// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "attestllm/attacks.hpp"
#include "attestllm/bundle.hpp"
#include "attestllm/cli.hpp"
#include "attestllm/config.hpp"
#include "attestllm/keystore.hpp"
#include "attestllm/simulate.hpp"

using namespace attestllm;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

std::size_t jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

/// Value printed after `label` on the matching analyze output line.
double analyze_value(const std::string& output, const std::string& label) {
  std::istringstream lines(output);
  std::string line;
  while (std::getline(lines, line))
    if (line.rfind(label, 0) == 0) return std::stod(line.substr(label.size()));
  throw std::runtime_error("analyze output lacks '" + label + "'");
}

/// Within half a unit of the reference's second significant digit.
bool two_significant(double value, double reference) {
  const double unit = std::pow(10.0, std::floor(std::log10(std::abs(reference))) - 1);
  return std::abs(value - reference) <= 0.5 * unit * (1 + 1e-9);
}

struct Shared {
  ToyModel model = ToyModel::random(ModelShape{}, 42);
  std::optional<EmbedResult> int8;
  std::optional<EmbedResult> int4;
  double int8_seconds = 0.0;
  double int4_seconds = 0.0;
};

EmbedResult embed_default(const ToyModel& model, int bits, EmbedStages stages, bool require_full) {
  RunConfig c;
  c.bits = bits;
  c.stages = stages;
  WatermarkConfig w = c.watermark();
  w.require_full_wer = require_full;
  return embed_model(model, w, jobs());
}

Verdict criterion1() {
  Stopwatch clock;
  struct Case {
    std::vector<std::string> args;
    std::string label;
    double reference;
    bool approximate;
  };
  const std::vector<Case> cases = {
      {{"analyze", "--L", "28", "--k", "2", "--t", "2"}, "evasion", 2.2e-1, false},
      {{"analyze", "--L", "40", "--k", "6", "--t", "2"}, "evasion", 3.7e-2, false},
      {{"analyze", "--L", "36", "--k", "4", "--t", "2"}, "evasion", 0.10, true},
      {{"analyze", "--L", "28", "--k", "2", "--t", "2", "--sessions", "10"}, "sessions=10", 2.77e-7, false},
  };
  Verdict v{true, ""};
  for (const auto& c : cases) {
    const CliRun r = cli(c.args);
    if (r.code != kExitOk) return {false, "analyze failed: " + r.err};
    const double value = analyze_value(r.out, c.label);
    // The L=36 figure is quoted only as approximately 0.10; it is held to 10% instead.
    const bool ok = c.approximate ? std::abs(value - c.reference) <= 0.1 * c.reference
                                  : two_significant(value, c.reference);
    v.pass = v.pass && ok;
    v.detail += format("L=%s k=%s %.4e vs %.3g%s; ", c.args[2].c_str(), c.args[4].c_str(), value, c.reference,
                       ok ? "" : " (off)");
  }
  const double t = clock.seconds();
  v.pass = v.pass && t < 1.0;
  v.detail += format("%.3f s", t);
  return v;
}

Verdict criterion2(const Shared& s) {
  Stopwatch clock;
  const EmbedResult& victim = *s.int8;
  RunConfig c;
  AttackOptions options;
  options.trials = 20000;
  options.seed = c.seed;
  options.tokens = c.tokens;
  options.jobs = jobs();
  const TamperSpec spec = TamperSpec::parse("2", c.seed);
  const PartialTamperReport r =
      partial_tamper(victim.model, victim.keys, spec, c.attestation_policy(), c.cost, options);
  const double se_detectable =
      std::sqrt(r.analytic_detectable * (1 - r.analytic_detectable) / static_cast<double>(r.sessions));
  const bool detectable_match = std::abs(r.empirical - r.analytic_detectable) <= 3 * se_detectable + 1e-12;

  // Same sampling process with both tampered blocks forced to fail.
  OutcomeVerifier forced(16, r.targets);
  SessionOptions opts;
  opts.tokens = c.tokens;
  std::size_t forced_evaded = 0;
  const SeededRng root(c.seed);
  for (std::size_t i = 0; i < options.trials; ++i) {
    SeededRng rng = root.fork(i);
    forced_evaded += run_session(forced, toy_target(16), c.attestation_policy(), c.cost, opts, rng).passed();
  }
  const double forced_rate = static_cast<double>(forced_evaded) / static_cast<double>(options.trials);
  const bool forced_match = std::abs(forced_rate - r.analytic) <= 3 * r.standard_error;

  const double t = clock.seconds();
  return {r.within_three_se() && t < 120.0,
          format("tampered blocks %zu,%zu, %zu detectable; empirical %.4f vs analytic %.4f (3 SE = %.4f); "
                 "against t=%zu detectable: %.4f (%s); forced-fail sampling: %.4f (%s); %.1f s",
                 r.targets[0], r.targets[1], r.detectable, r.empirical, r.analytic, 3 * r.standard_error, r.detectable,
                 r.analytic_detectable, detectable_match ? "within 3 SE" : "outside 3 SE", forced_rate,
                 forced_match ? "within 3 SE" : "outside 3 SE", t)};
}

Verdict criterion3(Shared& s) {
  Stopwatch clock;
  s.int8 = embed_default(s.model, 8, EmbedStages::two_stage, false);
  s.int8_seconds = clock.seconds();
  Stopwatch clock4;
  s.int4 = embed_default(s.model, 4, EmbedStages::two_stage, false);
  s.int4_seconds = clock4.seconds();
  auto count = [](const EmbedResult& r) {
    return static_cast<std::size_t>(std::count_if(r.report.begin(), r.report.end(),
                                                  [](const BlockReport& b) { return b.wer_final >= 100.0; }));
  };
  const double t = clock.seconds();
  const bool ok = s.int8->all_verified() && s.int4->all_verified() && t < 300.0;
  return {ok, format("INT8 %zu/16 blocks at 100%% (%.1f s), INT4 %zu/16 blocks at 100%% (%.1f s)", count(*s.int8),
                     s.int8_seconds, count(*s.int4), s.int4_seconds)};
}

Verdict criterion4(const Shared& s) {
  Stopwatch clock;
  RunConfig c;
  AttackOptions options;
  options.trials = 100;
  options.seed = c.seed;
  options.tokens = c.tokens;
  options.jobs = jobs();
  const AttackReport r = replacement_attack(s.int8->keys, c.attestation_policy(), c.cost, options);
  const double wer = r.mean_block_wer();
  const double t = clock.seconds();
  const bool ok = r.aborted() == 100 && wer >= 40.0 && wer <= 60.0 && t < 120.0;
  return {ok, format("%zu/100 sessions aborted, mean block WER %.2f%%, %.1f s", r.aborted(), wer, t)};
}

Verdict criterion5() {
  Stopwatch clock;
  const ModelShape shape{1, 64, 4, 256, 512};
  const ToyModel model = ToyModel::random(shape, 7);
  const TriggerSet trigger = TriggerSet::generate(4, 16, shape.vocab, 7);
  const ActivationTrace trace = trace_batch(model, trigger.sequences);
  SeededRng rng(7);
  ToyBlock reference = model.blocks[0];
  ToyBlock block = reference;
  for (auto p : block.parameters())
    for (double& v : p) v += 0.01 * rng.normal();
  ProjectionObjective objective;
  objective.channels = sample_uniform_without_replacement(64, 26, rng);
  std::sort(objective.channels.begin(), objective.channels.end());
  for (int b = 0; b < 8; ++b) objective.targets.push_back(rng.uniform() < 0.5 ? -1.0 : 1.0);
  Matrix wm(8, 26);
  for (double& v : wm.data()) v = rng.normal();
  const double alpha = 1e-3, h = 1e-5;
  const std::size_t seq = trigger.seq_len();

  const LossGradients g = loss_and_gradients(block, wm, trace.input, seq, objective, alpha, reference);
  auto loss = [&](const ToyBlock& b, const Matrix& w) {
    return watermark_loss(b, w, trace.input, seq, objective, alpha, reference).total;
  };
  double worst = 0.0;
  std::size_t checked = 0;
  auto compare = [&](double numeric, double analytic) {
    const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
    worst = std::max(worst, std::abs(numeric - analytic) / scale);
    ++checked;
  };
  auto params = block.parameters();
  const auto grads = g.block.parameters();
  for (std::size_t n = 0; n < 150; ++n) {
    const std::size_t tensor = rng.uniform_index(params.size());
    const std::size_t i = rng.uniform_index(params[tensor].size());
    const double saved = params[tensor][i];
    params[tensor][i] = saved + h;
    const double up = loss(block, wm);
    params[tensor][i] = saved - h;
    const double down = loss(block, wm);
    params[tensor][i] = saved;
    compare((up - down) / (2 * h), grads[tensor][i]);
  }
  for (std::size_t n = 0; n < 50; ++n) {
    const std::size_t i = rng.uniform_index(wm.size());
    const double saved = wm.data()[i];
    wm.data()[i] = saved + h;
    const double up = loss(block, wm);
    wm.data()[i] = saved - h;
    const double down = loss(block, wm);
    wm.data()[i] = saved;
    compare((up - down) / (2 * h), g.projection.data()[i]);
  }
  const double t = clock.seconds();
  return {worst < 1e-4 && checked >= 100 && t < 30.0,
          format("max relative error %.2e over %zu coordinates, %.1f s", worst, checked, t)};
}

Verdict criterion6(const Shared& s) {
  Stopwatch clock;
  const EmbedResult pre = embed_default(s.model, 4, EmbedStages::pre_only, false);
  const EmbedResult post = embed_default(s.model, 4, EmbedStages::post_only, false);
  std::vector<std::size_t> fragile;
  for (const auto& b : pre.report)
    if (b.wer_final < 100.0) fragile.push_back(b.block);

  const auto inputs = held_out_inputs(32, 32, s.model.shape.vocab, 0xf1de);
  const ToyModel baseline = dequantize(quantize_model(s.model, 4));
  const double two_stage = mean_abs_logit_deviation(dequantize(s.int4->model), baseline, inputs);
  const double post_only = mean_abs_logit_deviation(dequantize(post.model), baseline, inputs);
  const double quantization = mean_abs_logit_deviation(baseline, s.model, inputs);

  std::string blocks;
  for (std::size_t b : fragile) blocks += (blocks.empty() ? "" : ",") + std::to_string(b);
  const double t = clock.seconds() + s.int4_seconds;
  return {!fragile.empty() && post_only > two_stage && t < 600.0,
          format("pre-only INT4 below 100%% on blocks [%s]; logit deviation post-only %.4f vs two-stage %.4f "
                 "(quantization alone %.4f); %.1f s",
                 blocks.c_str(), post_only, two_stage, quantization, t)};
}

Verdict criterion7() {
  Stopwatch clock;
  SeededRng rng(77);
  std::size_t draws = 0, violations = 0;
  for (int i = 0; i < 2000; ++i) {
    CostModel c;
    c.copy_us_per_byte = rng.uniform() * 1e-3;
    c.decrypt_us_per_byte = rng.uniform() * 1e-3;
    c.verify_us_per_mflop = rng.uniform() * 5;
    c.world_switch_us = rng.uniform() * 20;
    c.buffer_setup_us = rng.uniform() * 50;
    const std::size_t L = 2 + rng.uniform_index(40);
    const std::size_t k = 1 + rng.uniform_index(std::min<std::size_t>(L, 8));
    const AttestationTarget target = toy_target(L, rng.uniform() < 0.5 ? 4 : 8);
    SeededRng pick = rng.fork(i);
    const auto blocks = sample_blocks(L, k, pick);
    const RoundWorkload w = make_workload(c, target, blocks);
    const std::size_t workers = 1 + rng.uniform_index(4);
    const double seq = schedule_pipeline(w, PipelineMode::sequential, workers).total_us;
    const double ovl = schedule_pipeline(w, PipelineMode::overlapped, workers).total_us;
    ++draws;
    violations += !(ovl < seq);
  }
  RunConfig c;
  c.shape.blocks = 36;
  c.policy.sample = 4;
  const auto rows = stage_breakdown(c);
  const double ratio = rows[1].latency_us / rows[0].latency_us;
  const double t = clock.seconds();
  return {violations == 0 && ratio >= 0.70 && ratio <= 0.85 && t < 60.0,
          format("overlapped faster in %zu/%zu random cost models; default L=36 k=4 INT8 ratio %.3f "
                 "(sequential %.2f us/session, overlapped %.2f us/session); %.2f s",
                 draws - violations, draws, ratio, rows[0].latency_us, rows[1].latency_us, t)};
}

Verdict criterion8() {
  Stopwatch clock;
  const RunConfig c;
  const std::vector<std::size_t> intervals = {50, 100, 200, 500};
  const std::vector<std::size_t> samples = {1, 2, 4, 6};
  const auto f_rows = interval_sweep(c, intervals);
  const auto k_rows = sample_sweep(c, samples);
  bool f_down = true, k_up = true;
  std::string f_text, k_text;
  for (std::size_t i = 0; i < f_rows.size(); ++i) {
    if (i > 0) f_down = f_down && f_rows[i].overhead_pct < f_rows[i - 1].overhead_pct;
    f_text += format("%s%.2f", i ? "/" : "", f_rows[i].overhead_pct);
  }
  for (std::size_t i = 0; i < k_rows.size(); ++i) {
    if (i > 0) k_up = k_up && k_rows[i].overhead_pct > k_rows[i - 1].overhead_pct;
    k_text += format("%s%.2f", i ? "/" : "", k_rows[i].overhead_pct);
  }
  const BreakdownRow overlapped = stage_breakdown(c)[1];
  const StageTotals& b = overlapped.busy;
  const double verify = overlapped.share(b.verify);
  const double copy_decrypt = overlapped.share(b.copy + b.decrypt);
  const bool verify_dominant = b.verify > std::max({b.copy, b.decrypt, b.world_switch, b.setup});
  const double t = clock.seconds();
  return {f_down && k_up && verify_dominant && copy_decrypt >= 8.0 && copy_decrypt <= 12.0 && t < 120.0,
          format("overhead %% over f=50/100/200/500: %s; over k=1/2/4/6: %s; verify %.1f%%, copy+decrypt %.1f%%; "
                 "%.2f s",
                 f_text.c_str(), k_text.c_str(), verify, copy_decrypt, t)};
}

Verdict criterion9(const Shared& s) {
  Stopwatch clock;
  const fs::path dir = fs::temp_directory_path() / "attestllm_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string bundle = (dir / "v.atlm").string(), keys = (dir / "v.keys").string(),
                    key = (dir / "k.hex").string();
  if (cli({"keygen", "--out", key}).code != kExitOk) return {false, "keygen failed"};
  const Manifest m = save_bundle(bundle, s.int8->model);
  atomic_write(keys, seal_key_store(s.int8->keys, digest_from_hex(m.content_hash), SecretKey::load(key)));

  const std::vector<std::vector<std::string>> commands = {
      {"analyze", "--L", "16", "--k", "2", "--t", "2", "--sessions", "3"},
      {"simulate", "--sweep", "all", "--tamper", "2"},
      {"attest", "--bundle", bundle, "--keys", keys, "--key", key},
      {"attack", "--bundle", bundle, "--keys", keys, "--key", key, "--tamper", "2", "--sessions", "2000"},
      {"attack", "--bundle", bundle, "--keys", keys, "--key", key, "--tamper", "noise:1"},
      {"config", "dump", "--seed", "7"},
  };
  std::size_t identical = 0;
  std::string differing;
  for (const auto& args : commands) {
    const CliRun a = cli(args), b = cli(args);
    if (a.out == b.out && a.code == b.code && !a.out.empty())
      ++identical;
    else
      differing += " " + args[0];
  }
  const ModelShape tiny{4, 16, 2, 32, 64};
  WatermarkConfig w;
  w.total_bits = 8;
  w.trigger_count = 4;
  w.trigger_length = 8;
  const EmbedResult one = embed_model(ToyModel::random(tiny, 5), w, 1);
  const EmbedResult many = embed_model(ToyModel::random(tiny, 5), w, 4);
  const bool embed_same = serialize_model(one.model) == serialize_model(many.model) &&
                          serialize_keys(one.keys) == serialize_keys(many.keys);
  fs::remove_all(dir);
  const double t = clock.seconds();
  return {identical == commands.size() && embed_same,
          format("%zu/%zu commands byte-identical on repeat%s; embedding identical across 1 and 4 jobs: %s; %.1f s",
                 identical, commands.size(), differing.empty() ? "" : (" (differs:" + differing + ")").c_str(),
                 embed_same ? "yes" : "no", t)};
}

Verdict criterion10(bool structure_ok) {
  return {structure_ok,
          "absolute device latency and energy overheads need real hardware and are not reproduced; "
          "their structure is covered by criteria 7 and 8"};
}

}  // namespace

int main() {
  Shared shared;
  std::vector<std::pair<int, Verdict>> results;
  auto report = [&](int id, const std::function<Verdict()>& fn) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %2d %s  %s\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
    std::fflush(stdout);
    results.emplace_back(id, v);
  };

  report(1, criterion1);
  report(3, [&] { return criterion3(shared); });
  report(2, [&] { return criterion2(shared); });
  report(4, [&] { return criterion4(shared); });
  report(5, criterion5);
  report(6, [&] { return criterion6(shared); });
  report(7, criterion7);
  report(8, criterion8);
  report(9, [&] { return criterion9(shared); });
  const bool structure = std::all_of(results.begin(), results.end(), [](const auto& r) {
    return (r.first != 7 && r.first != 8) || r.second.pass;
  });
  report(10, [&] { return criterion10(structure); });

  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.second.pass; });
  std::printf("%zu/%zu criteria passed\n", results.size() - static_cast<std::size_t>(failed), results.size());
  return failed == 0 ? 0 : 1;
}
