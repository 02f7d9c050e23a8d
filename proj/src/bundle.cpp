#include "attestllm/bundle.hpp"

#include <unistd.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <json.hpp>

namespace attestllm {

namespace {

constexpr std::array<std::uint8_t, 4> kBundleMagic = {'A', 'T', 'L', 'M'};
constexpr std::uint16_t kBundleVersion = 1;

void write_norm(ByteWriter& w, const LayerNorm& ln) {
  w.floats(ln.gain);
  w.floats(ln.bias);
}

LayerNorm read_norm(ByteReader& r, std::size_t width) {
  LayerNorm ln;
  ln.gain = r.floats(width);
  ln.bias = r.floats(width);
  return ln;
}

void write_matrix(ByteWriter& w, const QuantizedMatrix& m) {
  if (m.bits == 8) {
    for (std::int8_t v : m.values) w.u8(static_cast<std::uint8_t>(v));
  } else {
    for (std::size_t i = 0; i < m.values.size(); i += 2) {
      const auto lo = static_cast<std::uint8_t>(m.values[i] & 0x0f);
      const auto hi = i + 1 < m.values.size() ? static_cast<std::uint8_t>(m.values[i + 1] & 0x0f) : std::uint8_t{0};
      w.u8(static_cast<std::uint8_t>(lo | hi << 4));
    }
  }
  for (float s : m.scales) w.f32(s);
  for (std::int8_t z : m.zero_points) w.u8(static_cast<std::uint8_t>(z));
}

std::int8_t sign_extend_nibble(std::uint8_t n) { return static_cast<std::int8_t>(n & 0x8 ? int(n) - 16 : int(n)); }

QuantizedMatrix read_matrix(ByteReader& r, std::size_t rows, std::size_t cols, int bits) {
  QuantizedMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.bits = bits;
  const std::size_t n = rows * cols;
  m.values.resize(n);
  if (bits == 8) {
    const auto raw = r.bytes(n);
    for (std::size_t i = 0; i < n; ++i) m.values[i] = static_cast<std::int8_t>(raw[i]);
  } else {
    const auto raw = r.bytes((n + 1) / 2);
    for (std::size_t i = 0; i < n; ++i) m.values[i] = sign_extend_nibble(i % 2 ? raw[i / 2] >> 4 : raw[i / 2] & 0x0f);
  }
  const int qmax = quant_max(bits);
  for (std::int8_t v : m.values)
    if (v < -qmax || v > qmax) throw FormatError("quantized weight outside the symmetric grid");
  m.scales.resize(cols);
  for (float& s : m.scales) {
    s = r.f32();
    if (!std::isfinite(s) || s <= 0.0f) throw FormatError("invalid quantization scale");
  }
  m.zero_points.resize(cols);
  for (auto& z : m.zero_points) z = static_cast<std::int8_t>(r.u8());
  return m;
}

using BundleHeader = BundleInfo;

BundleHeader read_header(ByteReader& r) {
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kBundleMagic.begin())) throw FormatError("not a model bundle");
  if (r.u16() != kBundleVersion) throw FormatError("unsupported bundle version");
  BundleHeader h;
  h.shape.blocks = r.u32();
  h.shape.hidden = r.u32();
  h.shape.heads = r.u32();
  h.shape.ffn = r.u32();
  h.shape.vocab = r.u32();
  h.bits = r.u8();
  if (h.bits != 4 && h.bits != 8) throw FormatError("bundle bit width must be 4 or 8");
  try {
    h.shape.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bundle shape: ") + e.what());
  }
  return h;
}

std::uint32_t checked_u32(std::size_t v) {
  if (v > 0xffffffffu) throw FormatError("value does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace

void ByteWriter::u16(std::uint16_t v) {
  for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
void ByteWriter::bytes(std::span<const std::uint8_t> data) { out_.insert(out_.end(), data.begin(), data.end()); }
void ByteWriter::floats(std::span<const double> values) {
  for (double v : values) f32(static_cast<float>(v));
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
  if (n > remaining()) throw FormatError("truncated input");
  auto out = data_.subspan(pos_, n);
  pos_ += n;
  return out;
}
std::uint8_t ByteReader::u8() { return bytes(1)[0]; }
std::uint16_t ByteReader::u16() {
  const auto b = bytes(2);
  return static_cast<std::uint16_t>(b[0] | b[1] << 8);
}
std::uint32_t ByteReader::u32() {
  const auto b = bytes(4);
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = v << 8 | b[static_cast<std::size_t>(i)];
  return v;
}
std::uint64_t ByteReader::u64() {
  const auto b = bytes(8);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = v << 8 | b[static_cast<std::size_t>(i)];
  return v;
}
float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }
std::vector<double> ByteReader::floats(std::size_t n) {
  if (n > remaining() / 4) throw FormatError("truncated input");
  std::vector<double> out(n);
  for (double& v : out) {
    v = f32();
    if (!std::isfinite(v)) throw FormatError("non-finite value");
  }
  return out;
}
void ByteReader::expect_end() const {
  if (remaining() != 0) throw FormatError("trailing bytes after payload");
}

Bytes serialize_block(const QuantizedBlock& block) {
  ByteWriter w;
  w.u8(block.residual ? 1 : 0);
  write_norm(w, block.ln1);
  for (const auto* m : {&block.wq, &block.wk, &block.wv, &block.wo}) write_matrix(w, *m);
  write_norm(w, block.ln2);
  write_matrix(w, block.w1);
  write_matrix(w, block.w2);
  return w.take();
}

QuantizedBlock deserialize_block(std::span<const std::uint8_t> data, const ModelShape& shape, int bits) {
  ByteReader r(data);
  QuantizedBlock b;
  b.bits = bits;
  b.heads = shape.heads;
  const std::uint8_t residual = r.u8();
  if (residual > 1) throw FormatError("invalid residual flag");
  b.residual = residual == 1;
  const std::size_t h = shape.hidden;
  b.ln1 = read_norm(r, h);
  b.wq = read_matrix(r, h, h, bits);
  b.wk = read_matrix(r, h, h, bits);
  b.wv = read_matrix(r, h, h, bits);
  b.wo = read_matrix(r, h, h, bits);
  b.ln2 = read_norm(r, h);
  b.w1 = read_matrix(r, h, shape.ffn, bits);
  b.w2 = read_matrix(r, shape.ffn, h, bits);
  r.expect_end();
  return b;
}

Bytes serialize_model(const QuantizedModel& model) {
  model.shape.validate();
  if (model.blocks.size() != model.shape.blocks) throw std::invalid_argument("serialize_model: block count mismatch");
  ByteWriter w;
  w.bytes(kBundleMagic);
  w.u16(kBundleVersion);
  for (std::size_t v : {model.shape.blocks, model.shape.hidden, model.shape.heads, model.shape.ffn, model.shape.vocab})
    w.u32(checked_u32(v));
  w.u8(static_cast<std::uint8_t>(model.bits));
  w.floats(model.embedding.data());
  write_norm(w, model.final_norm);
  for (const auto& block : model.blocks) {
    const Bytes b = serialize_block(block);
    w.u32(checked_u32(b.size()));
    w.bytes(b);
  }
  return w.take();
}

QuantizedModel deserialize_model(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  const BundleHeader h = read_header(r);
  QuantizedModel m;
  m.shape = h.shape;
  m.bits = h.bits;
  m.embedding = Matrix(h.shape.vocab, h.shape.hidden);
  const auto emb = r.floats(h.shape.vocab * h.shape.hidden);
  std::copy(emb.begin(), emb.end(), m.embedding.data().begin());
  m.final_norm = read_norm(r, h.shape.hidden);
  for (std::size_t i = 0; i < h.shape.blocks; ++i) {
    const std::uint32_t len = r.u32();
    m.blocks.push_back(deserialize_block(r.bytes(len), h.shape, h.bits));
  }
  r.expect_end();
  return m;
}

BundleInfo read_bundle_info(std::span<const std::uint8_t> bundle) {
  ByteReader r(bundle);
  return read_header(r);
}

std::vector<BlockExtent> block_extents(std::span<const std::uint8_t> bundle) {
  ByteReader r(bundle);
  const BundleHeader h = read_header(r);
  r.bytes(4 * (h.shape.vocab * h.shape.hidden + 2 * h.shape.hidden));
  std::vector<BlockExtent> out;
  for (std::size_t i = 0; i < h.shape.blocks; ++i) {
    const std::uint32_t len = r.u32();
    out.push_back({bundle.size() - r.remaining(), len});
    r.bytes(len);
  }
  r.expect_end();
  return out;
}

std::string Manifest::to_json() const {
  nlohmann::ordered_json j;
  j["format"] = "attestllm-bundle";
  j["version"] = kBundleVersion;
  j["shape"] = {{"blocks", shape.blocks},
                {"hidden", shape.hidden},
                {"heads", shape.heads},
                {"ffn", shape.ffn},
                {"vocab", shape.vocab}};
  j["bits"] = bits;
  j["content_hash"] = content_hash;
  j["block_bytes"] = block_bytes;
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != "attestllm-bundle") throw FormatError("not a bundle manifest");
    Manifest m;
    const auto& s = j.at("shape");
    m.shape.blocks = s.at("blocks").get<std::size_t>();
    m.shape.hidden = s.at("hidden").get<std::size_t>();
    m.shape.heads = s.at("heads").get<std::size_t>();
    m.shape.ffn = s.at("ffn").get<std::size_t>();
    m.shape.vocab = s.at("vocab").get<std::size_t>();
    m.bits = j.at("bits").get<int>();
    m.content_hash = j.at("content_hash").get<std::string>();
    m.block_bytes = j.at("block_bytes").get<std::vector<std::size_t>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

Manifest make_manifest(std::span<const std::uint8_t> bundle_bytes) {
  ByteReader r(bundle_bytes);
  const BundleHeader h = read_header(r);
  Manifest m;
  m.shape = h.shape;
  m.bits = h.bits;
  m.content_hash = to_hex(sha256(bundle_bytes));
  for (const auto& e : block_extents(bundle_bytes)) m.block_bytes.push_back(e.length);
  return m;
}

std::filesystem::path manifest_path(const std::filesystem::path& bundle) {
  std::filesystem::path p = bundle;
  p += ".json";
  return p;
}

void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw std::runtime_error("write failed for " + path.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot move output into place at " + path.string());
  }
}

void atomic_write(const std::filesystem::path& path, const std::string& text) {
  atomic_write(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return Bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Manifest save_bundle(const std::filesystem::path& path, const QuantizedModel& model) {
  const Bytes bytes = serialize_model(model);
  const Manifest manifest = make_manifest(bytes);
  atomic_write(path, bytes);
  try {
    atomic_write(manifest_path(path), manifest.to_json());
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(path, ec);
    throw;
  }
  return manifest;
}

QuantizedModel load_bundle(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

}  // namespace attestllm
