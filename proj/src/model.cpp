#include "attestllm/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace attestllm {

namespace {

constexpr double kGeluCoeff = 0.044715;
const double kGeluScale = std::sqrt(2.0 / std::numbers::pi);

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluScale * (x + kGeluCoeff * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluScale * (x + kGeluCoeff * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCoeff * x * x);
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, SeededRng& rng) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * rng.normal();
  return m;
}

struct NormCache {
  Matrix normalized;  // (x - mean) * rstd, before gain/bias
  std::vector<double> rstd;
};

Matrix layer_norm(const Matrix& x, const LayerNorm& ln, NormCache* cache) {
  const std::size_t n = x.rows(), h = x.cols();
  Matrix out(n, h);
  if (cache) {
    cache->normalized = Matrix(n, h);
    cache->rstd.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(h);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(h);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < h; ++j) {
      const double xhat = (row[j] - mean) * rstd;
      out(i, j) = ln.gain[j] * xhat + ln.bias[j];
      if (cache) cache->normalized(i, j) = xhat;
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return out;
}

// Accumulates gain/bias gradients and returns dL/dx.
Matrix layer_norm_backward(const Matrix& dout, const NormCache& cache, const LayerNorm& ln, LayerNorm& grad) {
  const std::size_t n = dout.rows(), h = dout.cols();
  Matrix dx(n, h);
  std::vector<double> dxhat(h);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      const double xhat = cache.normalized(i, j);
      grad.gain[j] += dout(i, j) * xhat;
      grad.bias[j] += dout(i, j);
      dxhat[j] = dout(i, j) * ln.gain[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xhat;
    }
    mean_d /= static_cast<double>(h);
    mean_dx /= static_cast<double>(h);
    for (std::size_t j = 0; j < h; ++j)
      dx(i, j) = cache.rstd[i] * (dxhat[j] - mean_d - cache.normalized(i, j) * mean_dx);
  }
  return dx;
}

struct BlockCache {
  NormCache norm1, norm2;
  Matrix ln1_out, q, k, v;
  std::vector<double> probs;  // [seq][head][t][t'] causal softmax weights
  Matrix attn;                // concatenated head outputs, before wo
  Matrix ln2_out, pre_act, act;
};

std::size_t resolve_seq_len(const Matrix& x, std::size_t seq_len) {
  if (seq_len == 0) seq_len = x.rows();
  if (seq_len == 0 || x.rows() % seq_len != 0)
    throw std::invalid_argument("block forward: activation rows not a multiple of the sequence length");
  return seq_len;
}

Matrix block_forward_impl(const ToyBlock& block, const Matrix& x, std::size_t seq_len, BlockCache* cache) {
  const std::size_t h = block.hidden();
  if (x.cols() != h) throw std::invalid_argument("block forward: activation width does not match hidden size");
  seq_len = resolve_seq_len(x, seq_len);
  const std::size_t n = x.rows();
  const std::size_t seqs = n / seq_len;
  const std::size_t heads = block.heads;
  const std::size_t dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  NormCache local1, local2;
  NormCache& norm1 = cache ? cache->norm1 : local1;
  NormCache& norm2 = cache ? cache->norm2 : local2;

  Matrix ln1_out = layer_norm(x, block.ln1, &norm1);
  Matrix q = matmul(ln1_out, block.wq);
  Matrix k = matmul(ln1_out, block.wk);
  Matrix v = matmul(ln1_out, block.wv);

  Matrix attn(n, h);
  std::vector<double> probs;
  if (cache) probs.assign(seqs * heads * seq_len * seq_len, 0.0);
  std::vector<double> row(seq_len);
  for (std::size_t s = 0; s < seqs; ++s) {
    const std::size_t base = s * seq_len;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t t = 0; t < seq_len; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t d = 0; d < dh; ++d) dot += q(base + t, off + d) * k(base + u, off + d);
          row[u] = dot * scale;
          mx = std::max(mx, row[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          row[u] = std::exp(row[u] - mx);
          z += row[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = row[u] / z;
          if (cache) probs[((s * heads + hd) * seq_len + t) * seq_len + u] = p;
          for (std::size_t d = 0; d < dh; ++d) attn(base + t, off + d) += p * v(base + u, off + d);
        }
      }
    }
  }

  Matrix hres = matmul(attn, block.wo);
  if (block.residual)
    for (std::size_t i = 0; i < hres.size(); ++i) hres.data()[i] += x.data()[i];

  Matrix ln2_out = layer_norm(hres, block.ln2, &norm2);
  Matrix pre_act = matmul(ln2_out, block.w1);
  Matrix act(pre_act.rows(), pre_act.cols());
  for (std::size_t i = 0; i < act.size(); ++i) act.data()[i] = gelu(pre_act.data()[i]);
  Matrix out = matmul(act, block.w2);
  if (block.residual)
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += hres.data()[i];

  if (cache) {
    cache->ln1_out = std::move(ln1_out);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn = std::move(attn);
    cache->ln2_out = std::move(ln2_out);
    cache->pre_act = std::move(pre_act);
    cache->act = std::move(act);
  }
  return out;
}

void add_into(Matrix& dst, const Matrix& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += src.data()[i];
}

// Reverse pass through the block given dL/d(output). Writes parameter
// gradients into `grad` (which must be zero-initialised with the block's shape).
void block_backward(const ToyBlock& block, const Matrix& dout, std::size_t seq_len, const BlockCache& cache,
                    ToyBlock& grad) {
  const std::size_t n = dout.rows();
  const std::size_t h = block.hidden();
  const std::size_t seqs = n / seq_len;
  const std::size_t heads = block.heads;
  const std::size_t dh = h / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // FFN branch.
  add_into(grad.w2, matmul_tn(cache.act, dout));
  Matrix dpre = matmul_nt(dout, block.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_grad(cache.pre_act.data()[i]);
  add_into(grad.w1, matmul_tn(cache.ln2_out, dpre));
  Matrix dln2 = matmul_nt(dpre, block.w1);
  Matrix dhres = layer_norm_backward(dln2, cache.norm2, block.ln2, grad.ln2);
  if (block.residual) add_into(dhres, dout);

  // Attention branch.
  add_into(grad.wo, matmul_tn(cache.attn, dhres));
  Matrix dattn = matmul_nt(dhres, block.wo);
  Matrix dq(n, h), dk(n, h), dv(n, h);
  std::vector<double> dp(seq_len);
  for (std::size_t s = 0; s < seqs; ++s) {
    const std::size_t base = s * seq_len;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dh;
      for (std::size_t t = 0; t < seq_len; ++t) {
        const double* p = &cache.probs[((s * heads + hd) * seq_len + t) * seq_len];
        double weighted = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          double dot = 0.0;
          for (std::size_t d = 0; d < dh; ++d) {
            dot += dattn(base + t, off + d) * cache.v(base + u, off + d);
            dv(base + u, off + d) += p[u] * dattn(base + t, off + d);
          }
          dp[u] = dot;
          weighted += dot * p[u];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = p[u] * (dp[u] - weighted) * scale;
          if (ds == 0.0) continue;
          for (std::size_t d = 0; d < dh; ++d) {
            dq(base + t, off + d) += ds * cache.k(base + u, off + d);
            dk(base + u, off + d) += ds * cache.q(base + t, off + d);
          }
        }
      }
    }
  }
  add_into(grad.wq, matmul_tn(cache.ln1_out, dq));
  add_into(grad.wk, matmul_tn(cache.ln1_out, dk));
  add_into(grad.wv, matmul_tn(cache.ln1_out, dv));
  Matrix dln1 = matmul_nt(dq, block.wq);
  add_into(dln1, matmul_nt(dk, block.wk));
  add_into(dln1, matmul_nt(dv, block.wv));
  layer_norm_backward(dln1, cache.norm1, block.ln1, grad.ln1);
}

ToyBlock zero_like(const ToyBlock& b) {
  ToyBlock g = b;
  for (auto p : g.parameters()) std::fill(p.begin(), p.end(), 0.0);
  return g;
}

void check_objective(const Matrix& projection, const ProjectionObjective& objective, std::size_t hidden) {
  if (projection.rows() != objective.targets.size() || projection.cols() != objective.channels.size())
    throw std::invalid_argument("watermark objective: projection shape does not match targets/channels");
  for (std::size_t c : objective.channels)
    if (c >= hidden) throw std::invalid_argument("watermark objective: channel index out of range");
}

double penalty_term(const ToyBlock& block, const ToyBlock& reference, double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("watermark objective: alpha must be >= 0");
  return alpha == 0.0 ? 0.0 : alpha * squared_drift(block, reference);
}

}  // namespace

void ModelShape::validate() const {
  if (blocks < 1) throw std::invalid_argument("ModelShape: need at least one block");
  if (hidden == 0 || heads == 0 || ffn == 0 || vocab == 0) throw std::invalid_argument("ModelShape: zero dimension");
  if (hidden % heads != 0) throw std::invalid_argument("ModelShape: hidden size must be divisible by head count");
}

LayerNorm LayerNorm::unit(std::size_t width) { return {std::vector<double>(width, 1.0), std::vector<double>(width, 0.0)}; }

ToyBlock ToyBlock::random(std::size_t hidden, std::size_t heads, std::size_t ffn, SeededRng& rng) {
  ToyBlock b;
  b.heads = heads;
  const double sh = 1.0 / std::sqrt(static_cast<double>(hidden));
  const double sf = 1.0 / std::sqrt(static_cast<double>(ffn));
  b.ln1 = LayerNorm::unit(hidden);
  b.wq = random_matrix(hidden, hidden, sh, rng);
  b.wk = random_matrix(hidden, hidden, sh, rng);
  b.wv = random_matrix(hidden, hidden, sh, rng);
  b.wo = random_matrix(hidden, hidden, sh, rng);
  b.ln2 = LayerNorm::unit(hidden);
  b.w1 = random_matrix(hidden, ffn, sh, rng);
  b.w2 = random_matrix(ffn, hidden, sf, rng);
  b.validate();
  return b;
}

ToyBlock ToyBlock::zeros(std::size_t hidden, std::size_t heads, std::size_t ffn) {
  ToyBlock b;
  b.heads = heads;
  b.ln1 = LayerNorm::unit(hidden);
  b.wq = b.wk = b.wv = b.wo = Matrix(hidden, hidden);
  b.ln2 = LayerNorm::unit(hidden);
  b.w1 = Matrix(hidden, ffn);
  b.w2 = Matrix(ffn, hidden);
  return b;
}

std::vector<std::span<double>> ToyBlock::parameters() {
  return {ln1.gain, ln1.bias, wq.data(), wk.data(), wv.data(), wo.data(), ln2.gain, ln2.bias, w1.data(), w2.data()};
}

std::vector<std::span<const double>> ToyBlock::parameters() const {
  return {ln1.gain, ln1.bias, wq.data(), wk.data(), wv.data(), wo.data(), ln2.gain, ln2.bias, w1.data(), w2.data()};
}

std::size_t ToyBlock::parameter_count() const {
  std::size_t n = 0;
  for (auto p : parameters()) n += p.size();
  return n;
}

void ToyBlock::validate() const {
  const std::size_t h = wq.rows();
  if (h == 0 || heads == 0 || h % heads != 0) throw std::invalid_argument("ToyBlock: bad hidden/head configuration");
  auto square = [h](const Matrix& m) { return m.rows() == h && m.cols() == h; };
  if (!square(wq) || !square(wk) || !square(wv) || !square(wo)) throw std::invalid_argument("ToyBlock: attention shape");
  if (w1.rows() != h || w2.cols() != h || w1.cols() != w2.rows() || w1.cols() == 0)
    throw std::invalid_argument("ToyBlock: FFN shape");
  for (const LayerNorm* ln : {&ln1, &ln2})
    if (ln->gain.size() != h || ln->bias.size() != h) throw std::invalid_argument("ToyBlock: layer norm width");
}

double squared_drift(const ToyBlock& a, const ToyBlock& b) {
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  double s = 0.0;
  for (std::size_t t = 0; t < pa.size(); ++t) {
    if (pa[t].size() != pb[t].size()) throw std::invalid_argument("squared_drift: shape mismatch");
    for (std::size_t i = 0; i < pa[t].size(); ++i) {
      const double d = pa[t][i] - pb[t][i];
      s += d * d;
    }
  }
  return s;
}

ToyModel ToyModel::random(const ModelShape& shape, std::uint64_t seed) {
  shape.validate();
  ToyModel m;
  m.shape = shape;
  SeededRng rng(seed);
  m.embedding = random_matrix(shape.vocab, shape.hidden, 1.0, rng);
  m.final_norm = LayerNorm::unit(shape.hidden);
  m.blocks.reserve(shape.blocks);
  for (std::size_t i = 0; i < shape.blocks; ++i) m.blocks.push_back(ToyBlock::random(shape.hidden, shape.heads, shape.ffn, rng));
  return m;
}

void ToyModel::validate() const {
  shape.validate();
  if (blocks.size() != shape.blocks) throw std::invalid_argument("ToyModel: block count does not match shape");
  if (embedding.rows() != shape.vocab || embedding.cols() != shape.hidden)
    throw std::invalid_argument("ToyModel: embedding shape");
  for (const auto& b : blocks) {
    b.validate();
    if (b.hidden() != shape.hidden || b.ffn() != shape.ffn || b.heads != shape.heads)
      throw std::invalid_argument("ToyModel: block shape does not match model shape");
  }
}

Matrix embed_tokens(const ToyModel& model, std::span<const std::vector<std::uint32_t>> sequences) {
  if (sequences.empty() || sequences.front().empty()) throw std::invalid_argument("embed_tokens: empty input");
  const std::size_t len = sequences.front().size();
  const std::size_t h = model.shape.hidden;
  Matrix x(sequences.size() * len, h);
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    if (sequences[s].size() != len) throw std::invalid_argument("embed_tokens: sequences differ in length");
    for (std::size_t t = 0; t < len; ++t) {
      const std::uint32_t id = sequences[s][t];
      if (id >= model.shape.vocab)
        throw std::invalid_argument("embed_tokens: token id " + std::to_string(id) + " out of vocabulary");
      std::copy_n(model.embedding.row(id).begin(), h, x.row(s * len + t).begin());
    }
  }
  return x;
}

ForwardResult forward(const ToyModel& model, std::span<const std::uint32_t> tokens, bool capture) {
  const std::vector<std::vector<std::uint32_t>> one{std::vector<std::uint32_t>(tokens.begin(), tokens.end())};
  ForwardResult result;
  Matrix x = embed_tokens(model, one);
  ActivationTrace trace;
  trace.seq_len = tokens.size();
  if (capture) trace.input = x;
  for (const auto& block : model.blocks) {
    x = block_forward_from(block, x);
    if (capture) trace.outputs.push_back(x);
  }
  const Matrix normed = layer_norm(x, model.final_norm, nullptr);
  result.logits = matmul_nt(normed, model.embedding);
  if (capture) result.trace = std::move(trace);
  return result;
}

ActivationTrace trace_batch(const ToyModel& model, std::span<const std::vector<std::uint32_t>> sequences) {
  ActivationTrace trace;
  trace.input = embed_tokens(model, sequences);
  trace.seq_len = sequences.front().size();
  const Matrix* x = &trace.input;
  for (const auto& block : model.blocks) {
    trace.outputs.push_back(block_forward_from(block, *x, trace.seq_len));
    x = &trace.outputs.back();
  }
  return trace;
}

Matrix block_forward_from(const ToyBlock& block, const Matrix& prev_activation, std::size_t seq_len) {
  return block_forward_impl(block, prev_activation, seq_len, nullptr);
}

std::vector<double> pooled_activation(const Matrix& block_output, const Matrix& block_input) {
  if (block_output.rows() != block_input.rows() || block_output.cols() != block_input.cols())
    throw std::invalid_argument("pooled_activation: output/input shape mismatch");
  std::vector<double> pooled = column_mean(block_output);
  const std::vector<double> base = column_mean(block_input);
  for (std::size_t c = 0; c < pooled.size(); ++c) pooled[c] -= base[c];
  return pooled;
}

std::vector<double> project(const Matrix& block_output, const Matrix& block_input, const Matrix& projection,
                            std::span<const std::size_t> channels) {
  if (projection.cols() != channels.size()) throw std::invalid_argument("project: projection/channel mismatch");
  const std::vector<double> pooled = pooled_activation(block_output, block_input);
  std::vector<double> out(projection.rows(), 0.0);
  for (std::size_t j = 0; j < projection.rows(); ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels.size(); ++c) acc += projection(j, c) * pooled.at(channels[c]);
    out[j] = acc;
  }
  return out;
}

LossBreakdown watermark_loss(const ToyBlock& block, const Matrix& projection, const Matrix& prev_activation,
                             std::size_t seq_len, const ProjectionObjective& objective, double alpha,
                             const ToyBlock& reference) {
  check_objective(projection, objective, block.hidden());
  const Matrix out = block_forward_impl(block, prev_activation, seq_len, nullptr);
  const std::vector<double> y = project(out, prev_activation, projection, objective.channels);
  LossBreakdown loss;
  if (!y.empty()) {
    for (std::size_t j = 0; j < y.size(); ++j) loss.watermark += std::abs(y[j] - objective.targets[j]);
    loss.watermark /= static_cast<double>(y.size());
  }
  loss.penalty = penalty_term(block, reference, alpha);
  loss.total = loss.watermark + loss.penalty;
  return loss;
}

LossGradients loss_and_gradients(const ToyBlock& block, const Matrix& projection, const Matrix& prev_activation,
                                 std::size_t seq_len, const ProjectionObjective& objective, double alpha,
                                 const ToyBlock& reference) {
  check_objective(projection, objective, block.hidden());
  seq_len = resolve_seq_len(prev_activation, seq_len);
  BlockCache cache;
  const Matrix out = block_forward_impl(block, prev_activation, seq_len, &cache);
  const std::vector<double> pooled = pooled_activation(out, prev_activation);
  const std::size_t bits = projection.rows();
  const std::size_t nc = objective.channels.size();

  LossGradients result;
  result.block = zero_like(block);
  result.projection = Matrix(bits, nc);

  std::vector<double> dy(bits, 0.0);
  for (std::size_t j = 0; j < bits; ++j) {
    double yj = 0.0;
    for (std::size_t c = 0; c < nc; ++c) yj += projection(j, c) * pooled[objective.channels[c]];
    const double diff = yj - objective.targets[j];
    result.loss.watermark += std::abs(diff);
    dy[j] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / static_cast<double>(bits);
  }
  if (bits > 0) result.loss.watermark /= static_cast<double>(bits);

  std::vector<double> dpooled(block.hidden(), 0.0);
  for (std::size_t j = 0; j < bits; ++j) {
    for (std::size_t c = 0; c < nc; ++c) {
      result.projection(j, c) = dy[j] * pooled[objective.channels[c]];
      dpooled[objective.channels[c]] += projection(j, c) * dy[j];
    }
  }

  const double inv_rows = 1.0 / static_cast<double>(out.rows());
  Matrix dout(out.rows(), out.cols());
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t c = 0; c < out.cols(); ++c) dout(i, c) = dpooled[c] * inv_rows;
  block_backward(block, dout, seq_len, cache, result.block);

  result.loss.penalty = penalty_term(block, reference, alpha);
  if (alpha > 0.0) {
    auto g = result.block.parameters();
    const auto p = block.parameters();
    const auto r = reference.parameters();
    for (std::size_t t = 0; t < g.size(); ++t)
      for (std::size_t i = 0; i < g[t].size(); ++i) g[t][i] += 2.0 * alpha * (p[t][i] - r[t][i]);
  }
  result.loss.total = result.loss.watermark + result.loss.penalty;
  return result;
}

}  // namespace attestllm
