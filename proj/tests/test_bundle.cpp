#include <gtest/gtest.h>

#include <filesystem>

#include "attestllm/bundle.hpp"

using namespace attestllm;

namespace {

const ModelShape kShape{3, 8, 2, 16, 32};

class TempDir {
 public:
  TempDir() : path_(std::filesystem::temp_directory_path() / ("attestllm_bundle_" + std::to_string(counter_++))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  std::filesystem::path path_;
};

}  // namespace

TEST(ByteCodec, LittleEndianRoundTrip) {
  ByteWriter w;
  w.u16(0x1234);
  w.u32(0xdeadbeef);
  w.u64(0x0102030405060708ull);
  w.f32(1.5f);
  w.f64(-2.25);
  EXPECT_EQ(w.data()[0], 0x34);
  ByteReader r(w.data());
  EXPECT_EQ(r.u16(), 0x1234);
  EXPECT_EQ(r.u32(), 0xdeadbeefu);
  EXPECT_EQ(r.u64(), 0x0102030405060708ull);
  EXPECT_EQ(r.f32(), 1.5f);
  EXPECT_EQ(r.f64(), -2.25);
  EXPECT_NO_THROW(r.expect_end());
  EXPECT_THROW(r.u8(), FormatError);
}

class BundleWidth : public ::testing::TestWithParam<int> {};

TEST_P(BundleWidth, ModelRoundTripsExactly) {
  const QuantizedModel q = quantize_model(ToyModel::random(kShape, 5), GetParam());
  const Bytes bytes = serialize_model(q);
  EXPECT_EQ(deserialize_model(bytes), q);
  const BundleInfo info = read_bundle_info(bytes);
  EXPECT_EQ(info.shape, kShape);
  EXPECT_EQ(info.bits, GetParam());
  const auto extents = block_extents(bytes);
  ASSERT_EQ(extents.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto slice = std::span<const std::uint8_t>(bytes).subspan(extents[i].offset, extents[i].length);
    EXPECT_EQ(deserialize_block(slice, kShape, GetParam()), q.blocks[i]);
  }
}

TEST_P(BundleWidth, EveryTruncationIsRejected) {
  const Bytes bytes = serialize_model(quantize_model(ToyModel::random(kShape, 6), GetParam()));
  for (std::size_t n = 0; n < bytes.size(); n += 37)
    EXPECT_THROW(deserialize_model(std::span<const std::uint8_t>(bytes).first(n)), FormatError) << n;
  Bytes longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(deserialize_model(longer), FormatError);
}

INSTANTIATE_TEST_SUITE_P(Widths, BundleWidth, ::testing::Values(4, 8));

TEST(Bundle, Int4PacksTwoWeightsPerByte) {
  const QuantizedModel q8 = quantize_model(ToyModel::random(kShape, 7), 8);
  const QuantizedModel q4 = quantize_model(ToyModel::random(kShape, 7), 4);
  const std::size_t weights = q8.blocks[0].weight_count();
  EXPECT_EQ(serialize_block(q8.blocks[0]).size() - serialize_block(q4.blocks[0]).size(), weights / 2);
}

TEST(Bundle, RejectsForeignBytes) {
  Bytes bytes = serialize_model(quantize_model(ToyModel::random(kShape, 8), 8));
  Bytes bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_model(bad_magic), FormatError);
  EXPECT_THROW(read_bundle_info(Bytes{}), FormatError);
}

TEST(Manifest, JsonRoundTripAndHash) {
  const Bytes bytes = serialize_model(quantize_model(ToyModel::random(kShape, 9), 4));
  const Manifest m = make_manifest(bytes);
  EXPECT_EQ(m.content_hash, to_hex(sha256(bytes)));
  EXPECT_EQ(m.block_bytes.size(), 3u);
  EXPECT_EQ(Manifest::from_json(m.to_json()), m);
  EXPECT_THROW(Manifest::from_json("{}"), FormatError);
  EXPECT_THROW(Manifest::from_json("not json"), FormatError);
}

TEST(Files, SaveAndLoadBundle) {
  TempDir dir;
  const auto path = dir.path() / "m.atlm";
  const QuantizedModel q = quantize_model(ToyModel::random(kShape, 10), 8);
  const Manifest m = save_bundle(path, q);
  EXPECT_EQ(load_bundle(path), q);
  EXPECT_EQ(manifest_path(path).filename(), "m.atlm.json");
  EXPECT_EQ(Manifest::from_json(std::string(reinterpret_cast<const char*>(read_file(manifest_path(path)).data()),
                                            read_file(manifest_path(path)).size())),
            m);
}

TEST(Files, AtomicWriteLeavesNoTemporaries) {
  TempDir dir;
  atomic_write(dir.path() / "a.txt", std::string("one"));
  atomic_write(dir.path() / "a.txt", std::string("two"));
  EXPECT_EQ(read_file(dir.path() / "a.txt"), (Bytes{'t', 'w', 'o'}));
  std::size_t entries = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir.path())) ++entries;
  EXPECT_EQ(entries, 1u);
  EXPECT_THROW(atomic_write(dir.path() / "missing" / "a.txt", std::string("x")), std::runtime_error);
  EXPECT_THROW(read_file(dir.path() / "nope"), std::runtime_error);
}
