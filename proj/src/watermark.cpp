#include "attestllm/watermark.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <thread>

namespace attestllm {

SignatureSpec SignatureSpec::random(std::span<const std::size_t> lengths, SeededRng& rng) {
  SignatureSpec spec;
  std::size_t offset = 0;
  for (std::size_t len : lengths) {
    spec.slices.push_back({offset, len});
    offset += len;
  }
  spec.bits.resize(offset);
  for (auto& b : spec.bits) b = static_cast<std::uint8_t>(rng.next_u64() >> 63);
  return spec;
}

std::vector<std::uint8_t> SignatureSpec::slice_bits(std::size_t block) const {
  const auto& s = slices.at(block);
  return {bits.begin() + static_cast<std::ptrdiff_t>(s.offset),
          bits.begin() + static_cast<std::ptrdiff_t>(s.offset + s.length)};
}

std::vector<std::size_t> allocate_signature_lengths(std::span<const double> peaks, std::size_t total_bits) {
  if (peaks.empty()) throw std::invalid_argument("allocate_signature_lengths: no blocks");
  std::vector<double> inverse(peaks.size());
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    if (!std::isfinite(peaks[i]) || peaks[i] < 0.0) throw std::invalid_argument("allocate_signature_lengths: bad peak");
    inverse[i] = 1.0 / std::max(peaks[i], kWeightFloor);
  }
  const double norm = std::accumulate(inverse.begin(), inverse.end(), 0.0);
  std::vector<std::size_t> lengths(peaks.size());
  std::vector<double> remainder(peaks.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < peaks.size(); ++i) {
    const double share = static_cast<double>(total_bits) * inverse[i] / norm;
    lengths[i] = static_cast<std::size_t>(std::floor(share));
    remainder[i] = share - std::floor(share);
    assigned += lengths[i];
  }
  std::vector<std::size_t> order(peaks.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t n = 0; assigned < total_bits; ++n, ++assigned) lengths[order[n % order.size()]] += 1;
  return lengths;
}

std::size_t channel_count(std::size_t hidden, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("channel fraction must be in (0, 1]");
  const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(hidden) - 1e-9));
  return std::clamp<std::size_t>(n, 1, hidden);
}

std::vector<std::size_t> select_channels(std::span<const double> mean_abs_activation, double fraction, SeededRng& rng) {
  const std::size_t n = channel_count(mean_abs_activation.size(), fraction);
  std::vector<double> weights(mean_abs_activation.size());
  for (std::size_t c = 0; c < weights.size(); ++c)
    weights[c] = 1.0 / std::max(std::abs(mean_abs_activation[c]), kWeightFloor);
  auto picked = multinomial_without_replacement(weights, n, rng);
  std::sort(picked.begin(), picked.end());
  return picked;
}

TriggerSet TriggerSet::generate(std::size_t count, std::size_t length, std::size_t vocab, std::uint64_t seed) {
  if (count == 0 || length == 0 || vocab == 0) throw std::invalid_argument("TriggerSet: empty configuration");
  TriggerSet set;
  set.seed = seed;
  SeededRng rng(seed);
  set.sequences.assign(count, std::vector<std::uint32_t>(length));
  for (auto& seq : set.sequences)
    for (auto& id : seq) id = static_cast<std::uint32_t>(rng.uniform_index(vocab));
  return set;
}

std::vector<double> bits_to_targets(std::span<const std::uint8_t> bits) {
  std::vector<double> t(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) t[i] = bits[i] ? 1.0 : -1.0;
  return t;
}

std::vector<std::uint8_t> decode_bits(std::span<const double> projections) {
  std::vector<std::uint8_t> bits(projections.size());
  for (std::size_t i = 0; i < projections.size(); ++i) bits[i] = projections[i] > 0.0 ? 1 : 0;
  return bits;
}

ProjectionObjective BlockKey::objective() const { return {channels, bits_to_targets(bits)}; }

double extraction_rate(std::span<const std::uint8_t> decoded, std::span<const std::uint8_t> expected) {
  if (decoded.size() != expected.size()) throw std::invalid_argument("extraction_rate: length mismatch");
  if (expected.empty()) return 100.0;
  std::size_t matches = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) matches += decoded[i] == expected[i];
  return 100.0 * static_cast<double>(matches) / static_cast<double>(expected.size());
}

Verification verify_block(const ToyBlock& block, const BlockKey& key, const Matrix& checkpoint, std::size_t seq_len) {
  if (checkpoint.cols() != block.hidden()) throw std::invalid_argument("verify_block: checkpoint width mismatch");
  Verification v;
  if (key.bits.empty()) return v;
  const Matrix out = block_forward_from(block, checkpoint, seq_len);
  v.decoded = decode_bits(project(out, checkpoint, key.projection, key.channels));
  for (std::size_t i = 0; i < key.bits.size(); ++i) v.matches += v.decoded[i] == key.bits[i];
  v.wer = extraction_rate(v.decoded, key.bits);
  return v;
}

Verification verify_block(const QuantizedBlock& block, const BlockKey& key, const Matrix& checkpoint,
                          std::size_t seq_len) {
  return verify_block(dequantize(block), key, checkpoint, seq_len);
}

namespace {

void axpy_block(ToyBlock& dst, const ToyBlock& grad, double step) {
  auto d = dst.parameters();
  const auto g = grad.parameters();
  for (std::size_t t = 0; t < d.size(); ++t)
    for (std::size_t i = 0; i < d[t].size(); ++i) d[t][i] -= step * g[t][i];
}

Matrix axpy(const Matrix& m, const Matrix& grad, double step) {
  Matrix out = m;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= step * grad.data()[i];
  return out;
}

// Adam moments over every tensor the gradient stage touches.
class AdamMoments {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  AdamMoments(const ToyBlock& shape, const Matrix& projection) : first_(shape), second_(shape) {
    for (auto span : first_.parameters()) std::fill(span.begin(), span.end(), 0.0);
    for (auto span : second_.parameters()) std::fill(span.begin(), span.end(), 0.0);
    first_projection_ = Matrix(projection.rows(), projection.cols());
    second_projection_ = Matrix(projection.rows(), projection.cols());
  }

  // Replaces the gradients with bias-corrected Adam directions.
  void precondition(ToyBlock& grad_block, Matrix& grad_projection) {
    ++steps_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps_));
    auto g = grad_block.parameters();
    auto m = first_.parameters();
    auto v = second_.parameters();
    for (std::size_t t = 0; t < g.size(); ++t)
      for (std::size_t i = 0; i < g[t].size(); ++i) update(g[t][i], m[t][i], v[t][i], c1, c2);
    for (std::size_t i = 0; i < grad_projection.size(); ++i)
      update(grad_projection.data()[i], first_projection_.data()[i], second_projection_.data()[i], c1, c2);
  }

 private:
  static void update(double& g, double& m, double& v, double c1, double c2) {
    m = kBeta1 * m + (1.0 - kBeta1) * g;
    v = kBeta2 * v + (1.0 - kBeta2) * g * g;
    g = (m / c1) / (std::sqrt(v / c2) + kEps);
  }

  ToyBlock first_, second_;
  Matrix first_projection_, second_projection_;
  std::size_t steps_ = 0;
};

}  // namespace

PreQuantResult embed_pre_quant(const ToyBlock& block, const BlockKey& key, const Matrix& prev_activation,
                               std::size_t seq_len, const PreQuantConfig& config) {
  if (config.epochs < 1) throw std::invalid_argument("embed_pre_quant: epochs must be >= 1");
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("embed_pre_quant: learning rate must be > 0");
  const ProjectionObjective objective = key.objective();
  PreQuantResult result;
  result.block = block;
  result.projection = key.projection;

  double current =
      watermark_loss(block, key.projection, prev_activation, seq_len, objective, config.alpha, block).total;
  result.loss_curve.push_back(current);
  AdamMoments moments(block, key.projection);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    LossGradients g = loss_and_gradients(result.block, result.projection, prev_activation, seq_len, objective,
                                               config.alpha, block);
    if (!std::isfinite(g.loss.total)) throw EmbeddingError("embed_pre_quant: loss is not finite");
    if (config.optimizer == PreQuantOptimizer::adam) moments.precondition(g.block, g.projection);
    double step = config.learning_rate;
    for (int attempt = 0; attempt < 40; ++attempt, step *= 0.5) {
      ToyBlock candidate = result.block;
      axpy_block(candidate, g.block, step);
      Matrix projection = axpy(result.projection, g.projection, step);
      const double loss =
          watermark_loss(candidate, projection, prev_activation, seq_len, objective, config.alpha, block).total;
      if (!std::isfinite(loss)) throw EmbeddingError("embed_pre_quant: loss is not finite");
      if (loss <= current + 1e-6) {
        result.block = std::move(candidate);
        result.projection = std::move(projection);
        current = loss;
        break;
      }
    }
    result.loss_curve.push_back(current);
  }
  result.drift = squared_drift(result.block, block);
  return result;
}

PostQuantConfig default_post_quant(int bits) {
  PostQuantConfig c;
  if (bits == 4) {
    c.mu = 2;
    c.learning_rate = 0.5;
  } else {
    c.mu = 20;
    c.learning_rate = 0.1;
  }
  return c;
}

int spsa_step(const PostQuantConfig& config) {
  return std::max(1, static_cast<int>(std::lround(config.learning_rate * config.mu)));
}

std::vector<std::size_t> channel_output_indices(const QuantizedBlock& block, std::span<const std::size_t> channels) {
  const std::size_t h = block.hidden();
  std::size_t wo_base = 0;
  for (const auto* m : {&block.wq, &block.wk, &block.wv}) wo_base += m->values.size();
  const std::size_t w2_base = wo_base + block.wo.values.size() + block.w1.values.size();
  std::vector<std::size_t> out;
  out.reserve(channels.size() * (h + block.ffn()));
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c : channels) out.push_back(wo_base + r * h + c);
  for (std::size_t r = 0; r < block.ffn(); ++r)
    for (std::size_t c : channels) out.push_back(w2_base + r * h + c);
  return out;
}

namespace {

struct PostEval {
  double loss;
  double wer;
};

PostEval evaluate_quantized(const QuantizedBlock& q, const ToyBlock& reference, const BlockKey& key,
                            const ProjectionObjective& objective, const Matrix& prev, std::size_t seq_len,
                            double alpha) {
  const ToyBlock b = dequantize(q);
  const Matrix out = block_forward_from(b, prev, seq_len);
  const std::vector<double> y = project(out, prev, key.projection, key.channels);
  double loss = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) loss += std::abs(y[j] - objective.targets[j]);
  if (!y.empty()) loss /= static_cast<double>(y.size());
  if (alpha > 0.0) loss += alpha * squared_drift(b, reference);
  return {loss, extraction_rate(decode_bits(y), key.bits)};
}

}  // namespace

PostQuantResult embed_post_quant(const QuantizedBlock& block, const BlockKey& key, const Matrix& prev_activation,
                                 std::size_t seq_len, const PostQuantConfig& config, SeededRng& rng) {
  if (config.subset < 1) throw std::invalid_argument("embed_post_quant: subset must be >= 1");
  if (config.mu < 1) throw std::invalid_argument("embed_post_quant: mu must be >= 1 step");
  const ProjectionObjective objective = key.objective();
  const ToyBlock reference = dequantize(block);
  const std::vector<std::size_t> pool = channel_output_indices(block, key.channels);
  const int step = spsa_step(config);

  PostQuantResult result;
  result.block = block;
  PostEval current = evaluate_quantized(block, reference, key, objective, prev_activation, seq_len, config.alpha);
  const double initial = current.loss;
  result.loss_curve.push_back(current.loss);

  for (std::size_t epoch = 0; epoch < config.epochs && !pool.empty() && !key.bits.empty(); ++epoch) {
    if (config.stop_when_verified && current.wer >= 100.0) break;
    const auto picks = sample_uniform_without_replacement(pool.size(), std::min(config.subset, pool.size()), rng);
    std::vector<std::size_t> theta(picks.size());
    std::vector<int> direction(picks.size());
    for (std::size_t n = 0; n < picks.size(); ++n) {
      theta[n] = pool[picks[n]];
      direction[n] = (rng.next_u64() >> 63) ? 1 : -1;
    }
    std::vector<int> plus(direction), minus(direction);
    for (std::size_t n = 0; n < direction.size(); ++n) {
      plus[n] *= config.mu;
      minus[n] *= -config.mu;
    }
    const double loss_plus = evaluate_quantized(perturb_quantized(result.block, theta, plus), reference, key,
                                                objective, prev_activation, seq_len, config.alpha)
                                 .loss;
    const double loss_minus = evaluate_quantized(perturb_quantized(result.block, theta, minus), reference, key,
                                                 objective, prev_activation, seq_len, config.alpha)
                                  .loss;
    // g = (L+ - L-) / (2 mu) * u; the integer update keeps only its sign pattern.
    const double slope = (loss_plus - loss_minus) / (2.0 * config.mu);
    if (slope != 0.0 && config.learning_rate > 0.0) {
      const int sign = slope > 0.0 ? -1 : 1;
      std::vector<int> update(direction);
      for (int& u : update) u *= sign * step;
      result.block = perturb_quantized(result.block, theta, update);
      current = evaluate_quantized(result.block, reference, key, objective, prev_activation, seq_len, config.alpha);
    }
    if (!std::isfinite(current.loss) || current.loss > 10.0 * std::max(initial, 1e-12))
      throw EmbeddingError("embed_post_quant: loss diverged");
    result.loss_curve.push_back(current.loss);
    ++result.epochs_run;
  }
  result.wer = current.wer;
  result.warning = result.wer < 100.0;
  return result;
}

bool EmbedResult::all_verified() const {
  return std::all_of(report.begin(), report.end(), [](const BlockReport& r) { return r.wer_final >= 100.0; });
}

namespace {

struct BlockJob {
  BlockReport report;
  QuantizedBlock block;
  BlockKey key;
};

BlockJob embed_one(const ToyBlock& original, std::size_t index, const Matrix& checkpoint, const Matrix& activation,
                   std::vector<std::uint8_t> bits, std::size_t seq_len, const WatermarkConfig& config) {
  SeededRng rng = SeededRng(config.key_seed).fork(index + 1);
  BlockJob job;
  job.report.block = index;
  job.report.signature_bits = bits.size();
  job.report.peak_activation = max_abs(activation);

  std::vector<double> mean_abs(activation.cols(), 0.0);
  for (std::size_t r = 0; r < activation.rows(); ++r)
    for (std::size_t c = 0; c < activation.cols(); ++c) mean_abs[c] += std::abs(activation(r, c));
  for (double& v : mean_abs) v /= static_cast<double>(activation.rows());

  job.key.block = index;
  job.key.channels = select_channels(mean_abs, config.channel_fraction, rng);
  job.key.bits = std::move(bits);
  job.key.projection = Matrix(job.key.bits.size(), job.key.channels.size());
  for (double& v : job.key.projection.data()) v = config.projection_scale * rng.normal();
  round_to_float(job.key.projection.data());

  ToyBlock block = original;
  const bool has_bits = !job.key.bits.empty();
  if (has_bits && config.stages != EmbedStages::post_only) {
    PreQuantResult pre = embed_pre_quant(original, job.key, checkpoint, seq_len, config.pre);
    block = std::move(pre.block);
    job.key.projection = std::move(pre.projection);
    round_to_float(job.key.projection.data());
    job.report.drift = pre.drift;
  }
  job.report.wer_full_precision = verify_block(block, job.key, checkpoint, seq_len).wer;

  job.block = quantize_block(block, config.bits);
  job.report.wer_quantized = verify_block(job.block, job.key, checkpoint, seq_len).wer;

  if (has_bits && config.stages != EmbedStages::pre_only) {
    SeededRng spsa_rng = rng.fork(0x5b5a);
    PostQuantResult post = embed_post_quant(job.block, job.key, checkpoint, seq_len, config.post, spsa_rng);
    job.block = std::move(post.block);
    job.report.post_epochs = post.epochs_run;
    job.report.warning = post.warning;
  }
  job.report.wer_final = verify_block(job.block, job.key, checkpoint, seq_len).wer;
  return job;
}

}  // namespace

EmbedResult embed_model(const ToyModel& model, const WatermarkConfig& config, std::size_t jobs) {
  model.validate();
  if (config.bits != 4 && config.bits != 8) throw std::invalid_argument("embed_model: bits must be 4 or 8");
  const std::size_t L = model.shape.blocks;

  EmbedResult result;
  result.keys.shape = model.shape;
  result.keys.bits = config.bits;
  result.keys.total_bits = config.total_bits;
  result.keys.trigger =
      TriggerSet::generate(config.trigger_count, config.trigger_length, model.shape.vocab, config.trigger_seed);
  const std::size_t seq_len = result.keys.seq_len();

  const ActivationTrace trace = trace_batch(model, result.keys.trigger.sequences);
  std::vector<double> peaks(L);
  for (std::size_t i = 0; i < L; ++i) {
    Matrix cp = trace.feeding(i);
    round_to_float(cp.data());
    result.keys.checkpoints.push_back(std::move(cp));
    peaks[i] = max_abs(trace.outputs[i]);
  }
  result.lengths = allocate_signature_lengths(peaks, config.total_bits);
  SeededRng signature_rng = SeededRng(config.key_seed).fork(0);
  const SignatureSpec signature = SignatureSpec::random(result.lengths, signature_rng);

  std::vector<BlockJob> done(L);
  auto work = [&](std::size_t i) {
    done[i] = embed_one(model.blocks[i], i, result.keys.checkpoints[i], trace.outputs[i], signature.slice_bits(i),
                        seq_len, config);
  };
  jobs = std::clamp<std::size_t>(jobs, 1, L);
  if (jobs == 1) {
    for (std::size_t i = 0; i < L; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(jobs);
    for (std::size_t w = 0; w < jobs; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < L; i += jobs) work(i);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  result.model.shape = model.shape;
  result.model.bits = config.bits;
  result.model.embedding = model.embedding;
  round_to_float(result.model.embedding.data());
  result.model.final_norm = float_rounded(model.final_norm);
  for (auto& job : done) {
    result.model.blocks.push_back(std::move(job.block));
    result.keys.blocks.push_back(std::move(job.key));
    result.report.push_back(job.report);
  }

  if (config.require_full_wer && !result.all_verified()) {
    std::ostringstream msg;
    msg << "embedding failed on blocks:";
    for (const auto& r : result.report)
      if (r.wer_final < 100.0) msg << ' ' << r.block << " (" << r.wer_final << "%)";
    throw EmbeddingError(msg.str());
  }
  return result;
}

double mean_abs_logit_deviation(const ToyModel& a, const ToyModel& b,
                                std::span<const std::vector<std::uint32_t>> inputs) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : inputs) {
    const Matrix la = forward(a, seq, false).logits;
    const Matrix lb = forward(b, seq, false).logits;
    for (std::size_t i = 0; i < la.size(); ++i) total += std::abs(la.data()[i] - lb.data()[i]);
    count += la.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

std::vector<std::vector<std::uint32_t>> held_out_inputs(std::size_t count, std::size_t length, std::size_t vocab,
                                                        std::uint64_t seed) {
  return TriggerSet::generate(count, length, vocab, seed).sequences;
}

}  // namespace attestllm
