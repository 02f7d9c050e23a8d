#include "attestllm/quant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace attestllm {

namespace {

void check_bits(int bits) {
  if (bits != 4 && bits != 8) throw std::invalid_argument("quantization: bits must be 4 or 8");
}

}  // namespace

void round_to_float(std::span<double> values) {
  for (double& v : values) v = static_cast<double>(static_cast<float>(v));
}

LayerNorm float_rounded(const LayerNorm& ln) {
  LayerNorm out = ln;
  round_to_float(out.gain);
  round_to_float(out.bias);
  return out;
}

QuantizedMatrix quantize_matrix(const Matrix& m, int bits) {
  check_bits(bits);
  const int qmax = quant_max(bits);
  QuantizedMatrix q;
  q.rows = m.rows();
  q.cols = m.cols();
  q.bits = bits;
  q.values.assign(m.size(), 0);
  q.scales.assign(m.cols(), 0.0f);
  q.zero_points.assign(m.cols(), 0);
  for (std::size_t c = 0; c < m.cols(); ++c) {
    double amax = 0.0;
    for (std::size_t r = 0; r < m.rows(); ++r) amax = std::max(amax, std::abs(m(r, c)));
    const float scale = static_cast<float>(std::max(amax / qmax, kMinScale));
    q.scales[c] = scale;
    for (std::size_t r = 0; r < m.rows(); ++r) {
      // nearbyint honours the default round-half-to-even mode.
      const double level = std::nearbyint(m(r, c) / static_cast<double>(scale));
      q.values[r * q.cols + c] = static_cast<std::int8_t>(std::clamp(level, -double(qmax), double(qmax)));
    }
  }
  return q;
}

Matrix dequantize(const QuantizedMatrix& q) {
  Matrix m(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) m(r, c) = q.dequantized(r, c);
  return m;
}

std::vector<QuantizedMatrix*> QuantizedBlock::weights() { return {&wq, &wk, &wv, &wo, &w1, &w2}; }
std::vector<const QuantizedMatrix*> QuantizedBlock::weights() const { return {&wq, &wk, &wv, &wo, &w1, &w2}; }

std::size_t QuantizedBlock::weight_count() const {
  std::size_t n = 0;
  for (const auto* w : weights()) n += w->values.size();
  return n;
}

QuantizedBlock quantize_block(const ToyBlock& block, int bits) {
  check_bits(bits);
  block.validate();
  QuantizedBlock q;
  q.bits = bits;
  q.heads = block.heads;
  q.residual = block.residual;
  q.ln1 = float_rounded(block.ln1);
  q.ln2 = float_rounded(block.ln2);
  q.wq = quantize_matrix(block.wq, bits);
  q.wk = quantize_matrix(block.wk, bits);
  q.wv = quantize_matrix(block.wv, bits);
  q.wo = quantize_matrix(block.wo, bits);
  q.w1 = quantize_matrix(block.w1, bits);
  q.w2 = quantize_matrix(block.w2, bits);
  return q;
}

ToyBlock dequantize(const QuantizedBlock& q) {
  ToyBlock b;
  b.heads = q.heads;
  b.residual = q.residual;
  b.ln1 = q.ln1;
  b.ln2 = q.ln2;
  b.wq = dequantize(q.wq);
  b.wk = dequantize(q.wk);
  b.wv = dequantize(q.wv);
  b.wo = dequantize(q.wo);
  b.w1 = dequantize(q.w1);
  b.w2 = dequantize(q.w2);
  return b;
}

Matrix dequantized_forward(const QuantizedBlock& qblock, const Matrix& prev_activation, std::size_t seq_len) {
  return block_forward_from(dequantize(qblock), prev_activation, seq_len);
}

QuantizedBlock perturb_quantized(const QuantizedBlock& qblock, std::span<const std::size_t> indices,
                                 std::span<const int> deltas) {
  if (indices.size() != deltas.size()) throw std::invalid_argument("perturb_quantized: indices/deltas length mismatch");
  QuantizedBlock out = qblock;
  const int qmax = quant_max(out.bits);
  const auto mats = out.weights();
  for (std::size_t n = 0; n < indices.size(); ++n) {
    std::size_t idx = indices[n];
    std::size_t m = 0;
    while (m < mats.size() && idx >= mats[m]->values.size()) idx -= mats[m++]->values.size();
    if (m == mats.size()) throw std::invalid_argument("perturb_quantized: index out of range");
    auto& v = mats[m]->values[idx];
    v = static_cast<std::int8_t>(std::clamp(int(v) + deltas[n], -qmax, qmax));
  }
  return out;
}

QuantizedBlock perturb_quantized(const QuantizedBlock& qblock, std::span<const std::size_t> indices, int delta) {
  const std::vector<int> deltas(indices.size(), delta);
  return perturb_quantized(qblock, indices, deltas);
}

QuantizedModel quantize_model(const ToyModel& model, int bits) {
  check_bits(bits);
  model.validate();
  QuantizedModel q;
  q.shape = model.shape;
  q.bits = bits;
  q.embedding = model.embedding;
  round_to_float(q.embedding.data());
  q.final_norm = float_rounded(model.final_norm);
  for (const auto& b : model.blocks) q.blocks.push_back(quantize_block(b, bits));
  return q;
}

ToyModel dequantize(const QuantizedModel& model) {
  ToyModel m;
  m.shape = model.shape;
  m.embedding = model.embedding;
  m.final_norm = model.final_norm;
  for (const auto& b : model.blocks) m.blocks.push_back(dequantize(b));
  return m;
}

}  // namespace attestllm
