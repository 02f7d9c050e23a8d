#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "attestllm/numkit.hpp"

namespace attestllm {

/// Architecture of the toy transformer. Defaults mirror a 1B-class model's
/// shape ratios at 1/32 scale.
struct ModelShape {
  std::size_t blocks = 16;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab = 512;

  /// Throws std::invalid_argument when the shape is unusable.
  void validate() const;
  bool operator==(const ModelShape&) const = default;
};

struct LayerNorm {
  std::vector<double> gain;
  std::vector<double> bias;

  static LayerNorm unit(std::size_t width);
  bool operator==(const LayerNorm&) const = default;
};

inline constexpr double kLayerNormEps = 1e-5;

/// Pre-norm transformer block:
///   h = x + Wo * attn(LN1(x)),  y = h + W2 * gelu(W1 * LN2(h)).
/// Projections act on row vectors (y = x W). With `residual` off the skip
/// connections are dropped.
struct ToyBlock {
  LayerNorm ln1;
  Matrix wq, wk, wv, wo;  // hidden x hidden
  LayerNorm ln2;
  Matrix w1;  // hidden x ffn
  Matrix w2;  // ffn x hidden
  std::size_t heads = 1;
  bool residual = true;

  std::size_t hidden() const { return wq.rows(); }
  std::size_t ffn() const { return w1.cols(); }

  static ToyBlock random(std::size_t hidden, std::size_t heads, std::size_t ffn, SeededRng& rng);
  /// Zero attention/FFN weights and unit layer norms.
  static ToyBlock zeros(std::size_t hidden, std::size_t heads, std::size_t ffn);

  /// Every trainable tensor, in a fixed order: ln1 gain/bias, wq, wk, wv, wo,
  /// ln2 gain/bias, w1, w2.
  std::vector<std::span<double>> parameters();
  std::vector<std::span<const double>> parameters() const;
  std::size_t parameter_count() const;

  void validate() const;
  bool operator==(const ToyBlock&) const = default;
};

/// Squared parameter distance sum ||a - b||^2.
double squared_drift(const ToyBlock& a, const ToyBlock& b);

struct ToyModel {
  ModelShape shape;
  Matrix embedding;  // vocab x hidden, tied with the output head
  LayerNorm final_norm;
  std::vector<ToyBlock> blocks;

  static ToyModel random(const ModelShape& shape, std::uint64_t seed);
  void validate() const;
  bool operator==(const ToyModel&) const = default;
};

/// Per-block outputs of a forward pass. `input` is the embedded token matrix
/// (the activation fed to block 0); outputs[i] is block i's output.
struct ActivationTrace {
  Matrix input;
  std::vector<Matrix> outputs;
  std::size_t seq_len = 0;

  /// Activation that feeds block i.
  const Matrix& feeding(std::size_t block) const { return block == 0 ? input : outputs[block - 1]; }
};

struct ForwardResult {
  Matrix logits;
  std::optional<ActivationTrace> trace;
};

/// Stacks several equal-length sequences row-wise. Attention never crosses
/// sequence boundaries.
Matrix embed_tokens(const ToyModel& model, std::span<const std::vector<std::uint32_t>> sequences);

/// Forward pass over one token sequence. Throws std::invalid_argument on
/// out-of-vocabulary ids or an empty sequence.
ForwardResult forward(const ToyModel& model, std::span<const std::uint32_t> tokens, bool capture);

/// Captures the per-block trace for a batch of equal-length sequences.
ActivationTrace trace_batch(const ToyModel& model, std::span<const std::vector<std::uint32_t>> sequences);

/// Runs one block on a stacked activation. `seq_len` = 0 means the whole
/// matrix is one sequence.
Matrix block_forward_from(const ToyBlock& block, const Matrix& prev_activation, std::size_t seq_len = 0);

/// What a block adds to its input, pooled per channel: column mean of the
/// output minus column mean of the input (mean over tokens, then sequences).
/// The pass-through part of the residual stream carries no block identity.
std::vector<double> pooled_activation(const Matrix& block_output, const Matrix& block_input);

/// What the watermark objective projects: the pooled activation restricted
/// to `channels`, mapped through a projection and compared with +-1 targets.
struct ProjectionObjective {
  std::vector<std::size_t> channels;
  std::vector<double> targets;  // +-1, one per signature bit
};

struct LossBreakdown {
  double total = 0.0;
  double watermark = 0.0;  // mean |projection - target|
  double penalty = 0.0;    // alpha * ||block - reference||^2
};

/// Loss without gradients; shares the exact arithmetic of loss_and_gradients.
LossBreakdown watermark_loss(const ToyBlock& block, const Matrix& projection, const Matrix& prev_activation,
                             std::size_t seq_len, const ProjectionObjective& objective, double alpha,
                             const ToyBlock& reference);

struct LossGradients {
  LossBreakdown loss;
  ToyBlock block;     // same layout as the input block, holds dL/dparam
  Matrix projection;  // dL/dWM
};

/// Loss L = mean_j |(WM * pooled[C])_j - t_j| + alpha * ||block - reference||^2
/// with hand-derived reverse-mode gradients through the whole block.
LossGradients loss_and_gradients(const ToyBlock& block, const Matrix& projection, const Matrix& prev_activation,
                                 std::size_t seq_len, const ProjectionObjective& objective, double alpha,
                                 const ToyBlock& reference);

/// Projection of the pooled activation, WM * pooled[C].
std::vector<double> project(const Matrix& block_output, const Matrix& block_input, const Matrix& projection,
                            std::span<const std::size_t> channels);

}  // namespace attestllm
