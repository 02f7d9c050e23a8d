#include "attestllm/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "attestllm/attacks.hpp"

namespace attestllm {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

const char* stages_name(EmbedStages s) {
  switch (s) {
    case EmbedStages::two_stage:
      return "two_stage";
    case EmbedStages::pre_only:
      return "pre_only";
    case EmbedStages::post_only:
      return "post_only";
  }
  return "two_stage";
}

EmbedStages parse_stages(const std::string& s) {
  if (s == "two_stage") return EmbedStages::two_stage;
  if (s == "pre_only") return EmbedStages::pre_only;
  if (s == "post_only") return EmbedStages::post_only;
  throw ConfigError("watermark.stages must be two_stage, pre_only or post_only, got '" + s + "'");
}

PipelineMode parse_mode(const std::string& s) {
  if (s == "overlapped") return PipelineMode::overlapped;
  if (s == "sequential") return PipelineMode::sequential;
  throw ConfigError("policy.mode must be overlapped or sequential, got '" + s + "'");
}

PreQuantOptimizer parse_optimizer(const std::string& s) {
  if (s == "gradient_descent") return PreQuantOptimizer::gradient_descent;
  if (s == "adam") return PreQuantOptimizer::adam;
  throw ConfigError("watermark.pre_optimizer must be gradient_descent or adam, got '" + s + "'");
}

/// Reads fields of one section and rejects anything it was not asked for.
class Section {
 public:
  Section(const json& parent, const std::string& name) : name_(name) {
    if (!parent.contains(name)) return;
    node_ = &parent.at(name);
    if (!node_->is_object()) throw ConfigError("'" + name + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    try {
      target = node_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }

  template <typename T>
  void read_optional(const char* key, std::optional<T>& target) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    const json& v = node_->at(key);
    if (v.is_null()) {
      target.reset();
      return;
    }
    try {
      target = v.get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + " has the wrong type");
    }
  }

  void reject_unknown() const {
    if (!node_) return;
    for (const auto& item : node_->items())
      if (!seen_.count(item.key())) throw ConfigError("unknown field '" + name_ + "." + item.key() + "'");
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

template <typename T>
ordered_json optional_json(const std::optional<T>& v) {
  return v ? ordered_json(*v) : ordered_json(nullptr);
}

}  // namespace

void RunConfig::validate() const {
  try {
    shape.validate();
    attestation_policy().validate();
    cost.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (bits != 4 && bits != 8) throw ConfigError("watermark.bits must be 4 or 8");
  if (!(channel_fraction > 0.0 && channel_fraction <= 1.0)) throw ConfigError("watermark.channel_fraction must be in (0, 1]");
  if (!(projection_scale > 0.0) || !std::isfinite(projection_scale)) throw ConfigError("watermark.projection_scale must be > 0");
  if (!(pre.alpha >= 0.0) || !std::isfinite(pre.alpha)) throw ConfigError("watermark.alpha must be >= 0");
  if (!(pre.learning_rate > 0.0) || !std::isfinite(pre.learning_rate)) throw ConfigError("watermark.pre_learning_rate must be > 0");
  if (post.mu && *post.mu < 1) throw ConfigError("watermark.post_mu must be >= 1");
  if (post.learning_rate && !(*post.learning_rate > 0.0)) throw ConfigError("watermark.post_learning_rate must be > 0");
  if (post.subset == 0) throw ConfigError("watermark.subset must be >= 1");
  if (trigger_count == 0 || trigger_length == 0) throw ConfigError("trigger set must be non-empty");
  if (trials == 0) throw ConfigError("run.trials must be >= 1");
  if (sessions == 0) throw ConfigError("run.sessions must be >= 1");
  if (jobs == 0) throw ConfigError("run.jobs must be >= 1");
  try {
    TamperSpec::parse(tamper, seed).validate(shape.blocks);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("run.tamper: ") + e.what());
  }
}

WatermarkConfig RunConfig::watermark() const {
  WatermarkConfig w;
  w.bits = bits;
  w.total_bits = total_bits;
  w.channel_fraction = channel_fraction;
  w.projection_scale = projection_scale;
  w.pre = pre;
  w.post = default_post_quant(bits);
  if (post.mu) w.post.mu = *post.mu;
  if (post.learning_rate) w.post.learning_rate = *post.learning_rate;
  w.post.subset = post.subset;
  w.post.epochs = post.epochs;
  w.post.alpha = pre.alpha;
  w.trigger_count = trigger_count;
  w.trigger_length = trigger_length;
  w.trigger_seed = trigger_seed;
  w.key_seed = key_seed;
  w.stages = stages;
  return w;
}

AttestationPolicy RunConfig::attestation_policy() const {
  AttestationPolicy p = policy;
  p.blocks = shape.blocks;
  return p;
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["model"] = {{"blocks", c.shape.blocks}, {"hidden", c.shape.hidden}, {"heads", c.shape.heads},
                {"ffn", c.shape.ffn},       {"vocab", c.shape.vocab},   {"seed", c.model_seed}};
  j["watermark"] = {{"bits", c.bits},
                    {"total_bits", c.total_bits},
                    {"channel_fraction", c.channel_fraction},
                    {"projection_scale", c.projection_scale},
                    {"alpha", c.pre.alpha},
                    {"pre_learning_rate", c.pre.learning_rate},
                    {"pre_epochs", c.pre.epochs},
                    {"pre_optimizer", c.pre.optimizer == PreQuantOptimizer::adam ? "adam" : "gradient_descent"},
                    {"post_mu", optional_json(c.post.mu)},
                    {"post_learning_rate", optional_json(c.post.learning_rate)},
                    {"post_epochs", c.post.epochs},
                    {"subset", c.post.subset},
                    {"trigger_count", c.trigger_count},
                    {"trigger_length", c.trigger_length},
                    {"trigger_seed", c.trigger_seed},
                    {"key_seed", c.key_seed},
                    {"stages", stages_name(c.stages)}};
  j["policy"] = {{"interval", c.policy.interval},
                 {"sample", c.policy.sample},
                 {"mode", c.policy.mode == PipelineMode::overlapped ? "overlapped" : "sequential"},
                 {"workers", c.policy.workers},
                 {"early_exit", c.policy.early_exit}};
  j["cost"] = to_json(c.cost);
  j["run"] = {{"tokens", c.tokens}, {"sessions", c.sessions}, {"trials", c.trials},
              {"jobs", c.jobs},     {"seed", c.seed},         {"tamper", c.tamper}};
  j["paths"] = {{"bundle", c.bundle.string()}, {"keys", c.keys.string()}, {"out", c.out.string()}};
  return j;
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  static const std::set<std::string> sections = {"model", "watermark", "policy", "cost", "run", "paths"};
  for (const auto& item : j.items())
    if (!sections.count(item.key())) throw ConfigError("unknown section '" + item.key() + "'");

  RunConfig c;
  Section model(j, "model");
  model.read("blocks", c.shape.blocks);
  model.read("hidden", c.shape.hidden);
  model.read("heads", c.shape.heads);
  model.read("ffn", c.shape.ffn);
  model.read("vocab", c.shape.vocab);
  model.read("seed", c.model_seed);
  model.reject_unknown();

  Section wm(j, "watermark");
  std::string optimizer = c.pre.optimizer == PreQuantOptimizer::adam ? "adam" : "gradient_descent";
  std::string stages = stages_name(c.stages);
  wm.read("bits", c.bits);
  wm.read("total_bits", c.total_bits);
  wm.read("channel_fraction", c.channel_fraction);
  wm.read("projection_scale", c.projection_scale);
  wm.read("alpha", c.pre.alpha);
  wm.read("pre_learning_rate", c.pre.learning_rate);
  wm.read("pre_epochs", c.pre.epochs);
  wm.read("pre_optimizer", optimizer);
  wm.read_optional("post_mu", c.post.mu);
  wm.read_optional("post_learning_rate", c.post.learning_rate);
  wm.read("post_epochs", c.post.epochs);
  wm.read("subset", c.post.subset);
  wm.read("trigger_count", c.trigger_count);
  wm.read("trigger_length", c.trigger_length);
  wm.read("trigger_seed", c.trigger_seed);
  wm.read("key_seed", c.key_seed);
  wm.read("stages", stages);
  wm.reject_unknown();
  c.pre.optimizer = parse_optimizer(optimizer);
  c.stages = parse_stages(stages);

  Section policy(j, "policy");
  std::string mode = "overlapped";
  policy.read("interval", c.policy.interval);
  policy.read("sample", c.policy.sample);
  policy.read("mode", mode);
  policy.read("workers", c.policy.workers);
  policy.read("early_exit", c.policy.early_exit);
  policy.reject_unknown();
  c.policy.mode = parse_mode(mode);

  Section cost(j, "cost");
  cost.read("copy_us_per_byte", c.cost.copy_us_per_byte);
  cost.read("decrypt_us_per_byte", c.cost.decrypt_us_per_byte);
  cost.read("verify_us_per_mflop", c.cost.verify_us_per_mflop);
  cost.read("world_switch_us", c.cost.world_switch_us);
  cost.read("buffer_setup_us", c.cost.buffer_setup_us);
  cost.read("baseline_token_us", c.cost.baseline_token_us);
  cost.reject_unknown();

  Section run(j, "run");
  run.read("tokens", c.tokens);
  run.read("sessions", c.sessions);
  run.read("trials", c.trials);
  run.read("jobs", c.jobs);
  run.read("seed", c.seed);
  run.read("tamper", c.tamper);
  run.reject_unknown();

  Section paths(j, "paths");
  std::string bundle = c.bundle.string(), keys = c.keys.string(), out = c.out.string();
  paths.read("bundle", bundle);
  paths.read("keys", keys);
  paths.read("out", out);
  paths.reject_unknown();
  c.bundle = bundle;
  c.keys = keys;
  c.out = out;

  c.policy.blocks = c.shape.blocks;
  c.validate();
  return c;
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config(text.str());
}

}  // namespace attestllm
