#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "attestllm/model.hpp"
#include "attestllm/quant.hpp"

namespace attestllm {

struct SignatureSlice {
  std::size_t offset = 0;
  std::size_t length = 0;
  bool operator==(const SignatureSlice&) const = default;
};

/// The device signature B and its partition into per-block slices B_i.
struct SignatureSpec {
  std::vector<std::uint8_t> bits;
  std::vector<SignatureSlice> slices;

  static SignatureSpec random(std::span<const std::size_t> lengths, SeededRng& rng);
  std::vector<std::uint8_t> slice_bits(std::size_t block) const;
};

/// Sensitivity-driven allocation: block i gets a share proportional to
/// 1 / peak_i, rounded by largest remainder so the lengths sum to total_bits.
/// Peaks are floored at kWeightFloor. Throws on an empty peak list.
std::vector<std::size_t> allocate_signature_lengths(std::span<const double> peaks, std::size_t total_bits);

/// Number of watermark channels, ceil(fraction * hidden).
std::size_t channel_count(std::size_t hidden, double fraction);

/// Samples channel_count(H, fraction) channels without replacement with
/// probability proportional to 1 / |A_c|. Result is sorted.
std::vector<std::size_t> select_channels(std::span<const double> mean_abs_activation, double fraction, SeededRng& rng);

/// Synthetic trigger dataset: equal-length token sequences from a seeded stream.
struct TriggerSet {
  std::vector<std::vector<std::uint32_t>> sequences;
  std::uint64_t seed = 0;

  static TriggerSet generate(std::size_t count, std::size_t length, std::size_t vocab, std::uint64_t seed);
  std::size_t seq_len() const { return sequences.empty() ? 0 : sequences.front().size(); }
  bool operator==(const TriggerSet&) const = default;
};

/// Secret material for one block: channel subset C, projection WM_i
/// (|B_i| x |C|) and the signature slice. Bit b decodes as 1 iff its
/// projection component is > 0; targets are -1 / +1 for bits 0 / 1.
struct BlockKey {
  std::size_t block = 0;
  std::vector<std::size_t> channels;
  Matrix projection;
  std::vector<std::uint8_t> bits;

  ProjectionObjective objective() const;
  bool operator==(const BlockKey&) const = default;
};

std::vector<double> bits_to_targets(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> decode_bits(std::span<const double> projections);

struct Verification {
  double wer = 100.0;  // percent of matching bits; 100 for an empty slice
  std::size_t matches = 0;
  std::vector<std::uint8_t> decoded;
};

/// Percent of positions where decoded == expected.
double extraction_rate(std::span<const std::uint8_t> decoded, std::span<const std::uint8_t> expected);

/// Standalone check of one block from the checkpointed activation A_{i-1}.
Verification verify_block(const ToyBlock& block, const BlockKey& key, const Matrix& checkpoint, std::size_t seq_len);
Verification verify_block(const QuantizedBlock& block, const BlockKey& key, const Matrix& checkpoint,
                          std::size_t seq_len);

enum class PreQuantOptimizer { adam, gradient_descent };

struct PreQuantConfig {
  double alpha = 1e-3;
  double learning_rate = 1e-3;
  std::size_t epochs = 20;
  PreQuantOptimizer optimizer = PreQuantOptimizer::gradient_descent;
  bool operator==(const PreQuantConfig&) const = default;
};

struct PreQuantResult {
  ToyBlock block;
  Matrix projection;
  std::vector<double> loss_curve;  // initial loss followed by one entry per epoch
  double drift = 0.0;              // ||M' - M||^2
};

class EmbeddingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Gradient stage: descends on block weights and projection together, either
/// with raw gradients or Adam-preconditioned ones.
/// A step that would raise the loss is retried at half size, so the curve
/// never increases by more than 1e-6. Throws EmbeddingError on a NaN loss.
PreQuantResult embed_pre_quant(const ToyBlock& block, const BlockKey& key, const Matrix& prev_activation,
                               std::size_t seq_len, const PreQuantConfig& config);

struct PostQuantConfig {
  int mu = 20;                // perturbation size in grid steps
  std::size_t subset = 100;   // |Theta|
  double learning_rate = 0.1;
  std::size_t epochs = 40;
  double alpha = 1e-3;
  bool stop_when_verified = true;
};

/// Default zeroth-order settings per bit width (mu = 2 / 20, lr = 0.5 / 0.1).
PostQuantConfig default_post_quant(int bits);

struct PostQuantResult {
  QuantizedBlock block;
  std::vector<double> loss_curve;  // initial loss followed by one entry per epoch run
  double wer = 0.0;
  std::size_t epochs_run = 0;
  bool warning = false;  // set when the budget ran out before WER reached 100%
};

/// Integer grid step applied per SPSA update, max(1, round(lr * mu)).
int spsa_step(const PostQuantConfig& config);

/// Flat weight indices that write directly into the watermark channels
/// (columns C of wo and w2). The zeroth-order stage samples Theta from these.
std::vector<std::size_t> channel_output_indices(const QuantizedBlock& block, std::span<const std::size_t> channels);

/// Zeroth-order stage on the integer grid. Each epoch draws Theta, a
/// Rademacher direction u over it, evaluates L(q + mu u) and L(q - mu u), and
/// moves spsa_step grid steps against sign(L+ - L-) u. The projection is
/// frozen. Throws EmbeddingError when the loss exceeds 10x its initial value.
PostQuantResult embed_post_quant(const QuantizedBlock& block, const BlockKey& key, const Matrix& prev_activation,
                                 std::size_t seq_len, const PostQuantConfig& config, SeededRng& rng);

enum class EmbedStages { two_stage, pre_only, post_only };

struct WatermarkConfig {
  int bits = 8;
  std::size_t total_bits = 20;
  double channel_fraction = 0.4;
  double projection_scale = 1.0;  // stddev of the initial projection entries
  PreQuantConfig pre;
  PostQuantConfig post = default_post_quant(8);
  std::size_t trigger_count = 16;
  std::size_t trigger_length = 32;
  std::uint64_t trigger_seed = 0x5eed;
  std::uint64_t key_seed = 0xbeef;
  EmbedStages stages = EmbedStages::two_stage;
  bool require_full_wer = true;
};

/// Everything the verifier needs, before encryption.
struct KeyMaterial {
  ModelShape shape;
  int bits = 8;
  TriggerSet trigger;
  std::vector<BlockKey> blocks;
  std::vector<Matrix> checkpoints;  // A_{i-1} per block, float32-exact
  std::size_t total_bits = 0;

  std::size_t seq_len() const { return trigger.seq_len(); }
  bool operator==(const KeyMaterial&) const = default;
};

struct BlockReport {
  std::size_t block = 0;
  std::size_t signature_bits = 0;
  double peak_activation = 0.0;
  double wer_full_precision = 0.0;  // after the gradient stage
  double wer_quantized = 0.0;       // right after quantization
  double wer_final = 0.0;
  double drift = 0.0;
  std::size_t post_epochs = 0;
  bool warning = false;
};

struct EmbedResult {
  QuantizedModel model;
  KeyMaterial keys;
  std::vector<BlockReport> report;
  std::vector<std::size_t> lengths;

  bool all_verified() const;
};

/// Full offline pipeline: trigger probe, length allocation, channel sampling,
/// gradient stage, quantization, zeroth-order stage, per-block verification.
/// Blocks run on up to `jobs` threads; results do not depend on `jobs`.
/// Throws EmbeddingError when require_full_wer is set and a block stays
/// below 100%.
EmbedResult embed_model(const ToyModel& model, const WatermarkConfig& config, std::size_t jobs = 1);

/// Mean absolute logit difference between two models over the same inputs.
double mean_abs_logit_deviation(const ToyModel& a, const ToyModel& b,
                                std::span<const std::vector<std::uint32_t>> inputs);

/// Held-out token sequences for fidelity measurements.
std::vector<std::vector<std::uint32_t>> held_out_inputs(std::size_t count, std::size_t length, std::size_t vocab,
                                                        std::uint64_t seed);

}  // namespace attestllm
