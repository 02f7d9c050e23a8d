#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "attestllm/watermark.hpp"

using namespace attestllm;

namespace {

const ModelShape kTiny{4, 16, 2, 32, 64};

WatermarkConfig tiny_config() {
  WatermarkConfig c;
  c.total_bits = 8;
  c.trigger_count = 4;
  c.trigger_length = 8;
  c.pre.optimizer = PreQuantOptimizer::adam;
  c.pre.learning_rate = 1e-2;
  c.post.epochs = 200;
  return c;
}

BlockKey random_key(std::size_t block, std::size_t hidden, std::size_t bits, SeededRng& rng) {
  BlockKey key;
  key.block = block;
  key.channels = sample_uniform_without_replacement(hidden, channel_count(hidden, 0.4), rng);
  std::sort(key.channels.begin(), key.channels.end());
  key.projection = Matrix(bits, key.channels.size());
  for (double& v : key.projection.data()) v = rng.normal();
  for (std::size_t i = 0; i < bits; ++i) key.bits.push_back(static_cast<std::uint8_t>(rng.next_u64() >> 63));
  return key;
}

}  // namespace

TEST(Allocation, InverseToPeak) {
  const std::vector<double> equal = {1, 1, 1, 1};
  EXPECT_EQ(allocate_signature_lengths(equal, 20), (std::vector<std::size_t>{5, 5, 5, 5}));
  const std::vector<double> skewed = {2, 1, 1};
  EXPECT_EQ(allocate_signature_lengths(skewed, 20), (std::vector<std::size_t>{4, 8, 8}));
}

TEST(Allocation, LengthsAlwaysSumToTotal) {
  SeededRng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.uniform_index(40);
    const std::size_t total = rng.uniform_index(200);
    std::vector<double> peaks(n);
    for (double& p : peaks) p = rng.uniform() * 10.0;
    const auto lengths = allocate_signature_lengths(peaks, total);
    ASSERT_EQ(lengths.size(), n);
    EXPECT_EQ(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}), total);
    // Largest-remainder rounding never moves a share by a whole bit.
    const double norm = std::accumulate(peaks.begin(), peaks.end(), 0.0,
                                        [](double s, double p) { return s + 1.0 / std::max(p, kWeightFloor); });
    for (std::size_t i = 0; i < n; ++i) {
      const double share = total / norm / std::max(peaks[i], kWeightFloor);
      EXPECT_LT(std::abs(static_cast<double>(lengths[i]) - share), 1.0);
    }
  }
}

TEST(Allocation, RejectsBadInput) {
  EXPECT_THROW(allocate_signature_lengths(std::vector<double>{}, 4), std::invalid_argument);
  EXPECT_THROW(allocate_signature_lengths(std::vector<double>{1.0, -1.0}, 4), std::invalid_argument);
}

TEST(Channels, CountAndSelection) {
  EXPECT_EQ(channel_count(64, 0.4), 26u);
  EXPECT_EQ(channel_count(10, 1.0), 10u);
  EXPECT_THROW(channel_count(10, 0.0), std::invalid_argument);
  SeededRng rng(2);
  std::vector<double> act(64);
  for (double& a : act) a = rng.uniform();
  const auto picked = select_channels(act, 0.4, rng);
  ASSERT_EQ(picked.size(), 26u);
  EXPECT_TRUE(std::is_sorted(picked.begin(), picked.end()));
  EXPECT_EQ(std::set<std::size_t>(picked.begin(), picked.end()).size(), 26u);
}

TEST(Channels, QuietChannelsArePreferred) {
  SeededRng rng(3);
  std::vector<double> act(10, 100.0);
  act[4] = 0.01;
  int hits = 0;
  for (int t = 0; t < 200; ++t) {
    const auto picked = select_channels(act, 0.1, rng);
    hits += picked[0] == 4;
  }
  EXPECT_GT(hits, 190);
}

TEST(Decoding, ExtractionRate) {
  const std::vector<std::uint8_t> expected = {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 1, 0, 1, 0, 1};
  std::vector<std::uint8_t> decoded = expected;
  decoded[3] ^= 1;
  decoded[17] ^= 1;
  EXPECT_DOUBLE_EQ(extraction_rate(decoded, expected), 90.0);
  EXPECT_DOUBLE_EQ(extraction_rate(std::vector<std::uint8_t>{}, std::vector<std::uint8_t>{}), 100.0);
  EXPECT_THROW(extraction_rate(decoded, std::vector<std::uint8_t>{1}), std::invalid_argument);
  const std::vector<double> proj = {0.3, -0.1, 0.0};
  EXPECT_EQ(decode_bits(proj), (std::vector<std::uint8_t>{1, 0, 0}));
  EXPECT_EQ(bits_to_targets(std::vector<std::uint8_t>{1, 0}), (std::vector<double>{1.0, -1.0}));
}

TEST(Decoding, UnmarkedBlockMatchesAboutHalf) {
  SeededRng rng(4);
  const ToyModel m = ToyModel::random(kTiny, 4);
  const TriggerSet trigger = TriggerSet::generate(4, 8, kTiny.vocab, 9);
  const ActivationTrace trace = trace_batch(m, trigger.sequences);
  double sum = 0.0;
  const int trials = 200;
  for (int t = 0; t < trials; ++t) {
    SeededRng trial = rng.fork(t);
    const ToyBlock block = ToyBlock::random(kTiny.hidden, kTiny.heads, kTiny.ffn, trial);
    const BlockKey key = random_key(0, kTiny.hidden, 20, trial);
    sum += verify_block(block, key, trace.input, 8).wer;
  }
  const double mean = sum / trials;
  EXPECT_GE(mean, 40.0);
  EXPECT_LE(mean, 60.0);
}

TEST(Decoding, EmptySliceAlwaysVerifies) {
  SeededRng rng(5);
  const ToyBlock block = ToyBlock::random(8, 2, 16, rng);
  BlockKey key;
  EXPECT_DOUBLE_EQ(verify_block(block, key, Matrix(4, 8), 4).wer, 100.0);
}

TEST(Triggers, DeterministicAndInVocabulary) {
  const TriggerSet a = TriggerSet::generate(3, 5, 17, 1), b = TriggerSet::generate(3, 5, 17, 1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, TriggerSet::generate(3, 5, 17, 2));
  EXPECT_EQ(a.seq_len(), 5u);
  for (const auto& s : a.sequences)
    for (auto id : s) EXPECT_LT(id, 17u);
}

TEST(Signature, SlicesPartitionTheBits) {
  SeededRng rng(6);
  const std::vector<std::size_t> lengths = {2, 0, 3};
  const SignatureSpec s = SignatureSpec::random(lengths, rng);
  EXPECT_EQ(s.bits.size(), 5u);
  EXPECT_TRUE(s.slice_bits(1).empty());
  EXPECT_EQ(s.slice_bits(2).size(), 3u);
  EXPECT_EQ(s.slice_bits(2)[0], s.bits[2]);
}

TEST(GradientStage, LossNeverIncreases) {
  SeededRng rng(7);
  const ToyModel m = ToyModel::random(kTiny, 7);
  const TriggerSet trigger = TriggerSet::generate(4, 8, kTiny.vocab, 7);
  const ActivationTrace trace = trace_batch(m, trigger.sequences);
  const BlockKey key = random_key(1, kTiny.hidden, 6, rng);
  for (auto opt : {PreQuantOptimizer::gradient_descent, PreQuantOptimizer::adam}) {
    PreQuantConfig cfg;
    cfg.optimizer = opt;
    cfg.epochs = 30;
    cfg.learning_rate = opt == PreQuantOptimizer::adam ? 1e-2 : 1e-1;
    const PreQuantResult r = embed_pre_quant(m.blocks[1], key, trace.feeding(1), 8, cfg);
    ASSERT_EQ(r.loss_curve.size(), 31u);
    for (std::size_t e = 1; e < r.loss_curve.size(); ++e) EXPECT_LE(r.loss_curve[e], r.loss_curve[e - 1] + 1e-6);
    EXPECT_LT(r.loss_curve.back(), r.loss_curve.front());
    EXPECT_NEAR(r.drift, squared_drift(r.block, m.blocks[1]), 1e-12);
  }
}

TEST(ZerothOrderStage, StepAndCandidateIndices) {
  PostQuantConfig c = default_post_quant(8);
  EXPECT_EQ(c.mu, 20);
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.1);
  EXPECT_EQ(spsa_step(c), 2);
  c = default_post_quant(4);
  EXPECT_EQ(c.mu, 2);
  EXPECT_EQ(spsa_step(c), 1);
  c.learning_rate = 0.01;
  EXPECT_EQ(spsa_step(c), 1);

  SeededRng rng(8);
  const QuantizedBlock q = quantize_block(ToyBlock::random(8, 2, 16, rng), 8);
  const std::vector<std::size_t> channels = {1, 5};
  const auto idx = channel_output_indices(q, channels);
  // wo has 8 rows and w2 has 16 rows, each contributing both channels.
  EXPECT_EQ(idx.size(), 2u * (8 + 16));
  EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), idx.size());
  for (auto i : idx) EXPECT_LT(i, q.weight_count());
}

TEST(ZerothOrderStage, RecoversAfterQuantization) {
  // Gradient stage with Adam, then the INT8 zeroth-order stage, on one block
  // of the default geometry.
  const ToyModel m = ToyModel::random(ModelShape{}, 3);
  const TriggerSet trigger = TriggerSet::generate(16, 32, m.shape.vocab, 0x5eed);
  const ActivationTrace trace = trace_batch(m, trigger.sequences);
  SeededRng rng(3);
  const BlockKey key = random_key(0, m.shape.hidden, 20, rng);
  PreQuantConfig pre;
  pre.optimizer = PreQuantOptimizer::adam;
  pre.learning_rate = 1e-3;
  pre.epochs = 20;
  PreQuantResult marked = embed_pre_quant(m.blocks[0], key, trace.input, 32, pre);
  BlockKey tuned = key;
  tuned.projection = marked.projection;
  const QuantizedBlock q = quantize_block(marked.block, 8);
  const PostQuantResult post = embed_post_quant(q, tuned, trace.input, 32, default_post_quant(8), rng);
  EXPECT_DOUBLE_EQ(post.wer, 100.0);
  EXPECT_DOUBLE_EQ(verify_block(post.block, tuned, trace.input, 32).wer, 100.0);
  EXPECT_FALSE(post.warning);
}

TEST(Embedding, TinyModelVerifiesAndIsIndependentOfJobs) {
  const ToyModel m = ToyModel::random(kTiny, 11);
  const EmbedResult one = embed_model(m, tiny_config(), 1);
  EXPECT_TRUE(one.all_verified());
  EXPECT_EQ(std::accumulate(one.lengths.begin(), one.lengths.end(), std::size_t{0}), 8u);
  EXPECT_EQ(one.keys.blocks.size(), 4u);
  EXPECT_EQ(one.keys.checkpoints.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_DOUBLE_EQ(verify_block(one.model.blocks[i], one.keys.blocks[i], one.keys.checkpoints[i], 8).wer, 100.0);
  const EmbedResult three = embed_model(m, tiny_config(), 3);
  EXPECT_EQ(one.model, three.model);
  EXPECT_EQ(one.keys, three.keys);
}

TEST(Embedding, CheckpointsFeedTheNextBlock) {
  const ToyModel m = ToyModel::random(kTiny, 12);
  const EmbedResult r = embed_model(m, tiny_config(), 2);
  const Matrix out0 = dequantized_forward(r.model.blocks[0], r.keys.checkpoints[0], 8);
  // Checkpoints come from the unmarked model, not the embedded one.
  const ActivationTrace trace = trace_batch(m, r.keys.trigger.sequences);
  for (std::size_t i = 0; i < out0.size(); ++i)
    EXPECT_NEAR(r.keys.checkpoints[1].data()[i], trace.outputs[0].data()[i], 1e-6);
}

TEST(Embedding, ZeroBudgetLeavesWeightsQuantizedOnly) {
  const ToyModel m = ToyModel::random(kTiny, 13);
  WatermarkConfig c = tiny_config();
  c.total_bits = 0;
  const EmbedResult r = embed_model(m, c);
  EXPECT_TRUE(r.all_verified());
  EXPECT_EQ(r.model, quantize_model(m, 8));
}

TEST(Fidelity, IdenticalModelsHaveZeroDeviation) {
  const ToyModel m = ToyModel::random(kTiny, 14);
  const auto inputs = held_out_inputs(3, 6, kTiny.vocab, 1);
  EXPECT_DOUBLE_EQ(mean_abs_logit_deviation(m, m, inputs), 0.0);
  EXPECT_GT(mean_abs_logit_deviation(m, ToyModel::random(kTiny, 15), inputs), 0.0);
}

TEST(Allocation, SmallerPeakNeverGetsASmallerShare) {
  SeededRng rng(20);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> peaks(6);
    for (double& p : peaks) p = 0.1 + rng.uniform();
    const auto lengths = allocate_signature_lengths(peaks, 20);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j)
        if (peaks[i] < peaks[j]) EXPECT_GE(lengths[i], lengths[j]);
  }
}

TEST(Decoding, StandaloneVerificationIgnoresOtherBlocks) {
  const ToyModel m = ToyModel::random(kTiny, 21);
  const EmbedResult r = embed_model(m, tiny_config());
  for (std::size_t i = 0; i < kTiny.blocks; ++i) {
    // Only block i, its key and its checkpoint are handed over.
    const QuantizedBlock alone = r.model.blocks[i];
    const BlockKey key = r.keys.blocks[i];
    const Matrix checkpoint = r.keys.checkpoints[i];
    const Verification v = verify_block(alone, key, checkpoint, 8);
    EXPECT_DOUBLE_EQ(v.wer, r.report[i].wer_final);
    EXPECT_GE(v.wer, 0.0);
    EXPECT_LE(v.wer, 100.0);
  }
}

TEST(GradientStage, LargeAlphaKeepsWeightsClose) {
  SeededRng rng(22);
  const ToyModel m = ToyModel::random(kTiny, 22);
  const TriggerSet trigger = TriggerSet::generate(4, 8, kTiny.vocab, 22);
  const ActivationTrace trace = trace_batch(m, trigger.sequences);
  const BlockKey key = random_key(2, kTiny.hidden, 6, rng);
  PreQuantConfig loose, tight;
  loose.alpha = 1e-3;
  tight.alpha = 1e3;
  loose.epochs = tight.epochs = 20;
  loose.learning_rate = tight.learning_rate = 1e-3;
  const double d_loose = embed_pre_quant(m.blocks[2], key, trace.feeding(2), 8, loose).drift;
  const double d_tight = embed_pre_quant(m.blocks[2], key, trace.feeding(2), 8, tight).drift;
  EXPECT_GT(d_loose, 10.0 * d_tight);
}
