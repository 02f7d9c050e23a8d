#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "attestllm/crypto.hpp"
#include "attestllm/quant.hpp"

namespace attestllm {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian binary writer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> data);
  void floats(std::span<const double> values);  // stored as float32

  const Bytes& data() const { return out_; }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

/// Bounds-checked reader over a byte span; throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::span<const std::uint8_t> bytes(std::size_t n);
  std::vector<double> floats(std::size_t n);

  std::size_t remaining() const { return data_.size() - pos_; }
  void expect_end() const;

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

/// Serialized form of one quantized block: float32 norms, integer weights
/// (INT4 packed two per byte, low nibble first), float32 scales, zero points.
Bytes serialize_block(const QuantizedBlock& block);
QuantizedBlock deserialize_block(std::span<const std::uint8_t> data, const ModelShape& shape, int bits);

/// Whole bundle: "ATLM" magic, version, shape, bit width, embedding, final
/// norm, then each block prefixed by its byte length.
Bytes serialize_model(const QuantizedModel& model);
QuantizedModel deserialize_model(std::span<const std::uint8_t> data);

struct BundleInfo {
  ModelShape shape;
  int bits = 8;
};
/// Parses and validates only the bundle header.
BundleInfo read_bundle_info(std::span<const std::uint8_t> bundle);

/// Byte offset and length of every block inside a serialized bundle.
struct BlockExtent {
  std::size_t offset = 0;
  std::size_t length = 0;
};
std::vector<BlockExtent> block_extents(std::span<const std::uint8_t> bundle);

/// Sidecar describing a bundle; the content hash is what the key store binds to.
struct Manifest {
  ModelShape shape;
  int bits = 8;
  std::string content_hash;  // SHA-256 hex of the serialized bundle
  std::vector<std::size_t> block_bytes;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  bool operator==(const Manifest&) const = default;
};

Manifest make_manifest(std::span<const std::uint8_t> bundle_bytes);

std::filesystem::path manifest_path(const std::filesystem::path& bundle);

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never sees a partial file. Throws std::runtime_error on I/O failure.
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> data);
void atomic_write(const std::filesystem::path& path, const std::string& text);
Bytes read_file(const std::filesystem::path& path);

/// Writes the bundle and its manifest sidecar; returns the manifest.
Manifest save_bundle(const std::filesystem::path& path, const QuantizedModel& model);
QuantizedModel load_bundle(const std::filesystem::path& path);

}  // namespace attestllm
