#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "attestllm/model.hpp"

namespace attestllm {

inline constexpr double kMinScale = 1e-8;

/// Largest representable magnitude of a symmetric signed grid.
constexpr int quant_max(int bits) { return bits == 8 ? 127 : 7; }

/// Symmetric per-output-channel quantized matrix. Values are kept unpacked in
/// memory; the bundle format packs INT4 two per byte.
struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  int bits = 8;
  std::vector<std::int8_t> values;       // row-major, within [-qmax, qmax]
  std::vector<float> scales;             // one per output channel (column)
  std::vector<std::int8_t> zero_points;  // always 0 for the symmetric scheme

  double dequantized(std::size_t r, std::size_t c) const {
    return static_cast<double>(values[r * cols + c] - zero_points[c]) * static_cast<double>(scales[c]);
  }
  bool operator==(const QuantizedMatrix&) const = default;
};

QuantizedMatrix quantize_matrix(const Matrix& m, int bits);
Matrix dequantize(const QuantizedMatrix& q);

/// Integer weights for every projection; layer norms stay real but are
/// rounded to float32 so the block round-trips through the bundle exactly.
struct QuantizedBlock {
  int bits = 8;
  LayerNorm ln1;
  QuantizedMatrix wq, wk, wv, wo;
  LayerNorm ln2;
  QuantizedMatrix w1, w2;
  std::size_t heads = 1;
  bool residual = true;

  std::size_t hidden() const { return wq.rows; }
  std::size_t ffn() const { return w1.cols; }

  /// Weight matrices in perturbation-index order: wq, wk, wv, wo, w1, w2.
  std::vector<QuantizedMatrix*> weights();
  std::vector<const QuantizedMatrix*> weights() const;
  /// Number of integer weights addressable by perturb_quantized.
  std::size_t weight_count() const;

  bool operator==(const QuantizedBlock&) const = default;
};

/// Round-to-nearest-even onto a symmetric per-column grid. Throws
/// std::invalid_argument unless bits is 4 or 8.
QuantizedBlock quantize_block(const ToyBlock& block, int bits);
ToyBlock dequantize(const QuantizedBlock& qblock);

/// block_forward_from on the dequantized weights.
Matrix dequantized_forward(const QuantizedBlock& qblock, const Matrix& prev_activation, std::size_t seq_len = 0);

/// Shifts the integer weights at flat `indices` by `deltas` grid steps,
/// saturating at the bit-width range. Scales are untouched.
QuantizedBlock perturb_quantized(const QuantizedBlock& qblock, std::span<const std::size_t> indices,
                                 std::span<const int> deltas);
QuantizedBlock perturb_quantized(const QuantizedBlock& qblock, std::span<const std::size_t> indices, int delta);

/// Rounds every value to float32 precision.
void round_to_float(std::span<double> values);
LayerNorm float_rounded(const LayerNorm& ln);

/// Quantized counterpart of ToyModel: blocks quantized, embedding and final
/// norm kept at float32 precision.
struct QuantizedModel {
  ModelShape shape;
  int bits = 8;
  Matrix embedding;
  LayerNorm final_norm;
  std::vector<QuantizedBlock> blocks;

  bool operator==(const QuantizedModel&) const = default;
};

QuantizedModel quantize_model(const ToyModel& model, int bits);
ToyModel dequantize(const QuantizedModel& model);

}  // namespace attestllm
