#include "attestllm/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "attestllm/attacks.hpp"
#include "attestllm/bundle.hpp"
#include "attestllm/config.hpp"
#include "attestllm/keystore.hpp"
#include "attestllm/simulate.hpp"

namespace attestllm {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string scientific(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*e", digits, v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string text_of(const Bytes& bytes) { return std::string(bytes.begin(), bytes.end()); }

std::vector<std::size_t> parse_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty() || !std::all_of(item.begin(), item.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw UsageError(std::string(flag) + " expects a comma-separated list of positive integers");
    out.push_back(std::stoul(item));
  }
  if (out.empty()) throw UsageError(std::string(flag) + " is empty");
  return out;
}

/// Flags shared by the commands that take a run configuration. Only flags
/// given on the command line override the config file.
struct Overrides {
  std::string config;
  std::uint64_t seed = 0;
  int bits = 8;
  std::size_t interval = 0, sample = 0, tokens = 0, sessions = 0, trials = 0, jobs = 0, workers = 0;
  std::string mode, tamper, out, bundle, keys;
  std::map<std::string, CLI::Option*> given;

  void attach(CLI::App& app, bool paths) {
    app.add_option("--config", config, "Run configuration (JSON with comments)")->check(CLI::ExistingFile);
    given["seed"] = app.add_option("--seed", seed, "Seed for sampling, attacks and tamper targets");
    given["bits"] = app.add_option("--bits", bits, "Quantization bit width")->check(CLI::IsMember({4, 8}));
    given["f"] = app.add_option("--f", interval, "Attestation interval in tokens");
    given["k"] = app.add_option("--k", sample, "Blocks sampled per round");
    given["tokens"] = app.add_option("--tokens", tokens, "Tokens generated per session");
    given["jobs"] = app.add_option("--jobs", jobs, "Worker thread cap");
    given["mode"] = app.add_option("--mode", mode, "Pipeline mode")->check(CLI::IsMember({"overlapped", "sequential"}));
    given["workers"] = app.add_option("--workers", workers, "Verification workers inside the enclave");
    given["out"] = app.add_option("--out", out, "Report path (stdout when omitted)");
    if (paths) {
      given["bundle"] = app.add_option("--bundle", bundle, "Model bundle");
      given["keys"] = app.add_option("--keys", keys, "Encrypted key store");
    }
  }

  void attach_sessions(CLI::App& app) {
    given["sessions"] = app.add_option("--sessions", sessions, "Independent sessions");
    given["trials"] = app.add_option("--trials", trials, "Attack trials");
  }

  void attach_tamper(CLI::App& app, const char* help) { given["tamper"] = app.add_option("--tamper", tamper, help); }

  bool has(const std::string& name) const {
    auto it = given.find(name);
    return it != given.end() && it->second->count() > 0;
  }

  RunConfig resolve() const {
    RunConfig c = config.empty() ? RunConfig{} : load_config(config);
    if (has("seed")) c.seed = seed;
    if (has("bits")) c.bits = bits;
    if (has("f")) c.policy.interval = interval;
    if (has("k")) c.policy.sample = sample;
    if (has("tokens")) c.tokens = tokens;
    if (has("sessions")) c.sessions = sessions;
    if (has("trials")) c.trials = trials;
    if (has("jobs")) c.jobs = jobs;
    if (has("workers")) c.policy.workers = workers;
    if (has("mode")) c.policy.mode = mode == "sequential" ? PipelineMode::sequential : PipelineMode::overlapped;
    if (has("tamper")) c.tamper = tamper;
    if (has("out")) c.out = out;
    if (has("bundle")) c.bundle = bundle;
    if (has("keys")) c.keys = keys;
    c.policy.blocks = c.shape.blocks;
    c.validate();
    if (has("jobs")) c.policy.workers = std::min(c.policy.workers, c.jobs);
    return c;
  }
};

SecretKey load_secret(const std::string& path) {
  return path.empty() ? SecretKey::from_environment() : SecretKey::load(path);
}

void emit(const nlohmann::ordered_json& report, const fs::path& path, std::ostream& out) {
  const std::string text = report.dump(2) + "\n";
  if (path.empty())
    out << text;
  else
    atomic_write(path, text);
}

/// Bundle bytes plus the key store opened against the manifest's declared
/// content hash. The weights actually loaded may differ from that manifest;
/// catching that is the watermark's job.
struct Deployment {
  Bytes bundle;
  Manifest manifest;
  KeyMaterial keys;
  bool bundle_matches_manifest = true;
};

Deployment open_deployment(const fs::path& bundle_path, const fs::path& keys_path, const SecretKey& key) {
  Deployment d;
  d.bundle = read_file(bundle_path);
  const Manifest actual = make_manifest(d.bundle);
  const fs::path sidecar = manifest_path(bundle_path);
  d.manifest = fs::exists(sidecar) ? Manifest::from_json(text_of(read_file(sidecar))) : actual;
  d.bundle_matches_manifest = d.manifest.content_hash == actual.content_hash;
  const Bytes sealed = read_file(keys_path);
  const Digest declared = digest_from_hex(d.manifest.content_hash);
  if (read_key_store_header(sealed).bundle_hash != declared)
    throw AuthenticationError("key store is bound to a different model bundle");
  d.keys = open_key_store(sealed, declared, key);
  return d;
}

class Cli {
 public:
  Cli(std::ostream& out, std::ostream& err) : out_(out), err_(err) {}

  int run(const std::vector<std::string>& args);

 private:
  int embed();
  int attest();
  int analyze();
  int simulate();
  int attack();
  int keygen();
  int dump_config();

  std::ostream& out_;
  std::ostream& err_;

  Overrides embed_flags_, attest_flags_, simulate_flags_, attack_flags_, dump_flags_;
  std::string embed_key_, attest_key_, attack_key_;
  bool single_round_ = false;

  std::size_t an_blocks_ = 0, an_sample_ = 0, an_tampered_ = 0, an_interval_ = 100, an_tokens_ = 1000,
              an_sessions_ = 1;
  std::string an_out_;

  std::string sweep_ = "none", csv_dir_, intervals_ = "50,100,200,500", samples_ = "1,2,4,6";

  std::string tampered_out_;
  std::size_t proxy_epochs_ = 0;

  std::string keygen_out_;
  bool keygen_force_ = false;
};

int Cli::run(const std::vector<std::string>& args) {
  CLI::App app{"Watermark-based attestation toolkit for quantized transformer models", "attestllm"};
  app.require_subcommand(1);

  auto* embed = app.add_subcommand("embed", "Watermark a toy model and write the bundle and encrypted key store");
  embed_flags_.attach(*embed, true);
  embed->add_option("--key", embed_key_, "Key file (default: $ATTESTLLM_KEY_FILE)");

  auto* attest = app.add_subcommand("attest", "Attest a bundle against its key store");
  attest_flags_.attach(*attest, true);
  attest->add_option("--key", attest_key_, "Key file (default: $ATTESTLLM_KEY_FILE)");
  attest->add_flag("--single-round", single_round_, "Run one attestation round instead of a session");

  auto* analyze = app.add_subcommand("analyze", "Analytic evasion probability of a tampering adversary");
  analyze->add_option("--L", an_blocks_, "Transformer blocks")->required();
  analyze->add_option("--k", an_sample_, "Blocks sampled per round")->required();
  analyze->add_option("--t", an_tampered_, "Tampered blocks")->required();
  analyze->add_option("--f", an_interval_, "Attestation interval in tokens");
  analyze->add_option("--m", an_tokens_, "Tokens per session");
  analyze->add_option("--sessions", an_sessions_, "Independent sessions");
  analyze->add_option("--out", an_out_, "JSON output path");

  auto* simulate = app.add_subcommand("simulate", "Simulate attestation sessions and parameter sweeps");
  simulate_flags_.attach(*simulate, false);
  simulate_flags_.attach_tamper(*simulate, "Number of tampered blocks");
  simulate->add_option("--sweep", sweep_, "Sweep to emit")
      ->check(CLI::IsMember({"none", "interval", "sample", "breakdown", "all"}));
  simulate->add_option("--csv-dir", csv_dir_, "Directory receiving appended CSV rows");
  simulate->add_option("--intervals", intervals_, "Interval values for the interval sweep");
  simulate->add_option("--samples", samples_, "Sample sizes for the sample sweep");

  auto* attack = app.add_subcommand("attack", "Run an adversary against a watermarked bundle");
  attack_flags_.attach(*attack, true);
  attack_flags_.attach_sessions(*attack);
  attack_flags_.attach_tamper(*attack, "Blocks to replace (t), all, forge or noise:<sigma>");
  attack->add_option("--key", attack_key_, "Key file (default: $ATTESTLLM_KEY_FILE)");
  attack->add_option("--tampered-out", tampered_out_, "Also write the tampered bundle here");
  attack->add_option("--proxy-epochs", proxy_epochs_, "Replacement: training steps on an unrelated objective");

  auto* keygen = app.add_subcommand("keygen", "Generate a key-store encryption key");
  keygen->add_option("--out", keygen_out_, "Key file to create")->required();
  keygen->add_flag("--force", keygen_force_, "Overwrite an existing key file");

  auto* config = app.add_subcommand("config", "Configuration utilities");
  config->require_subcommand(1);
  auto* dump = config->add_subcommand("dump", "Print the effective configuration");
  dump_flags_.attach(*dump, true);
  dump_flags_.attach_sessions(*dump);
  dump_flags_.attach_tamper(*dump, "Tamper setting");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out_, err_);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out_, err_);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out_, err_);
    return kExitUsage;
  }

  if (embed->parsed()) return this->embed();
  if (attest->parsed()) return this->attest();
  if (analyze->parsed()) return this->analyze();
  if (simulate->parsed()) return this->simulate();
  if (attack->parsed()) return this->attack();
  if (keygen->parsed()) return this->keygen();
  if (dump->parsed()) return this->dump_config();
  return kExitUsage;
}

int Cli::embed() {
  RunConfig c = embed_flags_.resolve();
  if (embed_flags_.has("seed")) c.model_seed = embed_flags_.seed;
  const SecretKey key = load_secret(embed_key_);
  if (c.total_bits == 0) err_ << "warning: nothing embedded (signature budget is 0 bits)\n";

  WatermarkConfig wm = c.watermark();
  EmbedResult result = embed_model(ToyModel::random(c.shape, c.model_seed), wm, c.jobs);

  out_ << "block  bits  peak        wer_fp   wer_q    wer\n";
  for (const auto& r : result.report)
    out_ << std::left << std::setw(7) << r.block << std::setw(6) << r.signature_bits << std::setw(12)
         << fixed(r.peak_activation, 4) << std::setw(9) << (fixed(r.wer_full_precision, 0) + "%") << std::setw(9)
         << (fixed(r.wer_quantized, 0) + "%") << fixed(r.wer_final, 0) << "%\n";
  std::map<std::size_t, std::size_t> histogram;
  for (std::size_t len : result.lengths) ++histogram[len];
  out_ << "signature lengths:";
  for (const auto& [len, count] : histogram) out_ << ' ' << len << " bits x" << count;
  out_ << '\n';

  const Manifest manifest = save_bundle(c.bundle, result.model);
  try {
    atomic_write(c.keys, seal_key_store(result.keys, digest_from_hex(manifest.content_hash), key));
  } catch (...) {
    std::error_code ec;
    fs::remove(c.bundle, ec);
    fs::remove(manifest_path(c.bundle), ec);
    throw;
  }

  nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
  for (const auto& r : result.report)
    blocks.push_back({{"block", r.block},
                      {"signature_bits", r.signature_bits},
                      {"peak_activation", r.peak_activation},
                      {"wer_full_precision", r.wer_full_precision},
                      {"wer_quantized", r.wer_quantized},
                      {"wer", r.wer_final},
                      {"drift", r.drift},
                      {"post_epochs", r.post_epochs}});
  if (!c.out.empty())
    emit({{"config", to_json(c)},
          {"bundle_hash", manifest.content_hash},
          {"blocks", blocks},
          {"all_verified", result.all_verified()}},
         c.out, out_);
  out_ << "wrote " << c.bundle.string() << " and " << c.keys.string() << '\n';
  return kExitOk;
}

int Cli::attest() {
  RunConfig c = attest_flags_.resolve();
  if (single_round_) c.tokens = c.policy.interval;
  const Deployment d = open_deployment(c.bundle, c.keys, load_secret(attest_key_));
  if (!d.bundle_matches_manifest) err_ << "note: bundle contents differ from its manifest\n";

  EnclaveVerifier verifier(d.bundle, d.keys);
  const QuantizedModel model = deserialize_model(d.bundle);
  AttestationPolicy policy = c.policy;
  policy.blocks = d.keys.shape.blocks;
  SessionOptions options;
  options.tokens = c.tokens;
  SeededRng rng(c.seed);
  const AttestationReport report = run_session(verifier, describe_target(model, d.keys), policy, c.cost, options, rng);

  nlohmann::ordered_json json = to_json(report);
  json["bundle"] = {{"content_hash", make_manifest(d.bundle).content_hash},
                    {"matches_manifest", d.bundle_matches_manifest}};
  emit(json, c.out, out_);
  err_ << "verdict: " << (report.passed() ? "pass" : "abort") << " after " << report.rounds.size() << " round(s)\n";
  return report.passed() ? kExitOk : kExitAbort;
}

int Cli::analyze() {
  if (an_blocks_ == 0) throw UsageError("--L must be >= 1");
  if (an_sample_ == 0 || an_sample_ > an_blocks_) throw UsageError("--k must be in [1, L]");
  if (an_tampered_ > an_blocks_) throw UsageError("--t must be in [0, L]");
  if (an_interval_ == 0) throw UsageError("--f must be >= 1");
  if (an_sessions_ == 0) throw UsageError("--sessions must be >= 1");
  const std::size_t rounds = an_tokens_ / an_interval_;
  const double miss = round_miss_probability(an_blocks_, an_sample_, an_tampered_);
  const double evasion = evasion_probability(an_blocks_, an_sample_, an_tampered_, rounds);
  const double multi = evasion_probability(an_blocks_, an_sample_, an_tampered_, rounds * an_sessions_);

  out_ << "L=" << an_blocks_ << " k=" << an_sample_ << " t=" << an_tampered_ << " f=" << an_interval_
       << " m=" << an_tokens_ << " rounds=" << rounds << '\n';
  out_ << "per_round_miss  " << scientific(miss) << '\n';
  out_ << "evasion         " << scientific(evasion) << '\n';
  if (an_sessions_ > 1) out_ << "sessions=" << an_sessions_ << "      " << scientific(multi) << '\n';
  if (!an_out_.empty()) {
    nlohmann::ordered_json j = {{"blocks", an_blocks_},       {"sample", an_sample_},   {"tampered", an_tampered_},
                                {"interval", an_interval_},   {"tokens", an_tokens_},   {"rounds", rounds},
                                {"sessions", an_sessions_},   {"per_round_miss", miss}, {"evasion", evasion},
                                {"evasion_sessions", multi}};
    atomic_write(an_out_, j.dump(2) + "\n");
  }
  return kExitOk;
}

int Cli::simulate() {
  const RunConfig c = simulate_flags_.resolve();
  std::size_t tampered = 0;
  if (c.tamper != "none") {
    const TamperSpec spec = TamperSpec::parse(c.tamper, c.seed);
    if (spec.kind != TamperKind::replace_blocks) throw UsageError("simulate: --tamper takes a block count");
    spec.validate(c.shape.blocks);
    tampered = spec.count;
  }
  SeededRng rng(c.seed);
  const AttestationReport report = simulate_session(c, tampered, rng);
  nlohmann::ordered_json json = to_json(report);

  const bool want_interval = sweep_ == "interval" || sweep_ == "all";
  const bool want_sample = sweep_ == "sample" || sweep_ == "all";
  const bool want_breakdown = sweep_ == "breakdown" || sweep_ == "all";
  const std::string run = run_id(c);
  nlohmann::ordered_json sweeps = nlohmann::ordered_json::object();
  std::vector<std::string> sweep_rows;
  auto add_rows = [&](const char* name, const std::vector<SweepRow>& rows) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : rows) {
      arr.push_back({{"interval", r.interval},
                     {"sample", r.sample},
                     {"rounds", r.rounds},
                     {"round_latency_us", r.round_latency_us},
                     {"overhead_pct", r.overhead_pct}});
      sweep_rows.push_back(to_csv(r, run));
    }
    sweeps[name] = arr;
  };
  if (want_interval) add_rows("interval", interval_sweep(c, parse_list(intervals_, "--intervals")));
  if (want_sample) {
    const auto samples = parse_list(samples_, "--samples");
    for (std::size_t k : samples)
      if (k == 0 || k > c.shape.blocks) throw UsageError("--samples values must be in [1, L]");
    add_rows("sample", sample_sweep(c, samples));
  }
  std::vector<std::string> breakdown_rows;
  if (want_breakdown) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : stage_breakdown(c)) {
      arr.push_back({{"mode", r.mode == PipelineMode::overlapped ? "overlapped" : "sequential"},
                     {"latency_us", r.latency_us},
                     {"world_switch_pct", r.share(r.busy.world_switch)},
                     {"decrypt_pct", r.share(r.busy.decrypt)},
                     {"setup_pct", r.share(r.busy.setup)},
                     {"copy_pct", r.share(r.busy.copy)},
                     {"verify_pct", r.share(r.busy.verify)}});
      breakdown_rows.push_back(to_csv(r, run));
    }
    sweeps["breakdown"] = arr;
  }
  if (!sweeps.empty()) json["sweeps"] = sweeps;

  if (!csv_dir_.empty()) {
    fs::create_directories(csv_dir_);
    std::vector<std::string> interval_rows, sample_rows;
    for (const auto& row : sweep_rows) (row.find(",interval,") != std::string::npos ? interval_rows : sample_rows).push_back(row);
    if (want_interval) append_csv(fs::path(csv_dir_) / "interval_sweep.csv", sweep_csv_header(), interval_rows);
    if (want_sample) append_csv(fs::path(csv_dir_) / "sample_sweep.csv", sweep_csv_header(), sample_rows);
    if (want_breakdown) append_csv(fs::path(csv_dir_) / "stage_breakdown.csv", breakdown_csv_header(), breakdown_rows);
  }
  emit(json, c.out, out_);
  return report.passed() ? kExitOk : kExitAbort;
}

int Cli::attack() {
  const RunConfig c = attack_flags_.resolve();
  const TamperSpec spec = TamperSpec::parse(c.tamper, c.seed);
  if (spec.kind == TamperKind::none) throw UsageError("attack: --tamper is required");
  const Deployment d = open_deployment(c.bundle, c.keys, load_secret(attack_key_));
  const QuantizedModel victim = deserialize_model(d.bundle);
  spec.validate(victim.blocks.size());

  AttackOptions options;
  options.tokens = c.tokens;
  options.seed = c.seed;
  options.jobs = c.jobs;
  options.proxy_epochs = proxy_epochs_;
  const AttestationPolicy policy = c.policy;

  if (!tampered_out_.empty() && spec.kind != TamperKind::forge_keys) {
    const TamperedModel tampered = apply_tamper(victim, spec);
    atomic_write(tampered_out_, serialize_model(tampered.model));
    atomic_write(manifest_path(tampered_out_), d.manifest.to_json());
  }

  nlohmann::ordered_json json;
  switch (spec.kind) {
    case TamperKind::replace_blocks: {
      options.trials = c.sessions;
      const PartialTamperReport r = partial_tamper(victim, d.keys, spec, policy, c.cost, options);
      json = to_json(r);
      err_ << "evasion: empirical " << scientific(r.empirical, 4) << ", analytic " << scientific(r.analytic, 4)
           << " (" << r.detectable << "/" << r.targets.size() << " tampered blocks detectable)\n";
      break;
    }
    case TamperKind::replace_all: {
      options.trials = c.trials;
      const AttackReport r = replacement_attack(d.keys, policy, c.cost, options);
      json = to_json(r);
      err_ << "replacement: " << r.aborted() << "/" << r.trials.size() << " sessions aborted, mean block WER "
           << fixed(r.mean_block_wer(), 2) << "%\n";
      break;
    }
    case TamperKind::forge_keys: {
      options.trials = c.trials;
      const AttackReport r = forgery_attack(d.keys, c.watermark(), policy, c.cost, options);
      json = to_json(r);
      err_ << "forgery: " << r.aborted() << "/" << r.trials.size() << " sessions aborted\n";
      break;
    }
    case TamperKind::noise: {
      const TamperedModel tampered = apply_tamper(victim, spec);
      SeededRng rng(c.seed);
      const AttestationReport r = attest_substitute(tampered.model, d.keys, policy, c.cost, c.tokens, rng);
      json = to_json(r);
      json["attack"] = {{"kind", "noise"},
                        {"sigma", spec.sigma},
                        {"targets", tampered.targets},
                        {"block_wer", block_wers(tampered.model, d.keys)}};
      err_ << "noise: session " << (r.passed() ? "passed" : "aborted") << '\n';
      break;
    }
    case TamperKind::none:
      break;
  }
  emit(json, c.out, out_);
  return kExitOk;
}

int Cli::keygen() {
  if (fs::exists(keygen_out_) && !keygen_force_)
    throw UsageError("refusing to overwrite " + keygen_out_ + " (use --force)");
  const SecretKey key = SecretKey::generate();
  atomic_write(keygen_out_, key.hex() + "\n");
  fs::permissions(keygen_out_, fs::perms::owner_read | fs::perms::owner_write, fs::perm_options::replace);
  out_ << "wrote " << keygen_out_ << '\n';
  return kExitOk;
}

int Cli::dump_config() {
  const RunConfig c = dump_flags_.resolve();
  out_ << to_json(c).dump(2) << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Cli cli(out, err);
  try {
    return cli.run(args);
  } catch (const AuthenticationError& e) {
    err << "authentication failed: " << e.what() << '\n';
    return kExitAuthentication;
  } catch (const EmbeddingError& e) {
    err << "embedding failed: " << e.what() << '\n';
    return kExitEmbedding;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "malformed input: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}

}  // namespace attestllm
