#include "attestllm/keystore.hpp"

#include <algorithm>

#include "attestllm/bundle.hpp"

namespace attestllm {

namespace {

constexpr std::array<std::uint8_t, 4> kKeyStoreMagic = {'A', 'T', 'K', 'S'};
constexpr std::uint16_t kKeyStoreVersion = 1;

std::uint32_t u32_of(std::size_t v) {
  if (v > 0xffffffffu) throw std::invalid_argument("key store field does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

Bytes encode_header(const KeyStoreHeader& h) {
  ByteWriter w;
  w.bytes(kKeyStoreMagic);
  w.u16(kKeyStoreVersion);
  w.bytes(h.bundle_hash);
  w.bytes(h.nonce);
  return w.take();
}

}  // namespace

Digest checkpoint_digest(const Matrix& checkpoint) {
  ByteWriter w;
  w.u32(u32_of(checkpoint.rows()));
  w.u32(u32_of(checkpoint.cols()));
  w.floats(checkpoint.data());
  return sha256(w.data());
}

Bytes serialize_keys(const KeyMaterial& keys) {
  if (keys.blocks.size() != keys.checkpoints.size())
    throw std::invalid_argument("serialize_keys: one checkpoint per block key required");
  ByteWriter w;
  for (std::size_t v : {keys.shape.blocks, keys.shape.hidden, keys.shape.heads, keys.shape.ffn, keys.shape.vocab})
    w.u32(u32_of(v));
  w.u8(static_cast<std::uint8_t>(keys.bits));
  w.u32(u32_of(keys.total_bits));
  w.u64(keys.trigger.seed);
  w.u32(u32_of(keys.trigger.sequences.size()));
  w.u32(u32_of(keys.trigger.seq_len()));
  for (const auto& seq : keys.trigger.sequences) {
    if (seq.size() != keys.trigger.seq_len()) throw std::invalid_argument("serialize_keys: ragged trigger set");
    for (std::uint32_t t : seq) w.u32(t);
  }
  w.u32(u32_of(keys.blocks.size()));
  for (std::size_t i = 0; i < keys.blocks.size(); ++i) {
    const BlockKey& k = keys.blocks[i];
    if (k.projection.rows() != k.bits.size() || k.projection.cols() != k.channels.size())
      throw std::invalid_argument("serialize_keys: projection shape does not match key");
    w.u32(u32_of(k.block));
    w.u32(u32_of(k.channels.size()));
    for (std::size_t c : k.channels) w.u32(u32_of(c));
    w.u32(u32_of(k.bits.size()));
    for (std::uint8_t b : k.bits) w.u8(b);
    w.floats(k.projection.data());
    const Matrix& cp = keys.checkpoints[i];
    w.bytes(checkpoint_digest(cp));
    w.u32(u32_of(cp.rows()));
    w.u32(u32_of(cp.cols()));
    w.floats(cp.data());
  }
  return w.take();
}

KeyMaterial deserialize_keys(std::span<const std::uint8_t> data) {
  ByteReader r(data);
  KeyMaterial keys;
  keys.shape.blocks = r.u32();
  keys.shape.hidden = r.u32();
  keys.shape.heads = r.u32();
  keys.shape.ffn = r.u32();
  keys.shape.vocab = r.u32();
  keys.bits = r.u8();
  keys.total_bits = r.u32();
  keys.trigger.seed = r.u64();
  const std::uint32_t count = r.u32();
  const std::uint32_t length = r.u32();
  if (static_cast<std::uint64_t>(count) * length > r.remaining() / 4) throw FormatError("truncated trigger set");
  keys.trigger.sequences.assign(count, std::vector<std::uint32_t>(length));
  for (auto& seq : keys.trigger.sequences)
    for (auto& t : seq) {
      t = r.u32();
      if (t >= keys.shape.vocab) throw FormatError("trigger token outside the vocabulary");
    }
  const std::uint32_t blocks = r.u32();
  if (blocks != keys.shape.blocks) throw FormatError("key store block count does not match its shape");
  for (std::uint32_t i = 0; i < blocks; ++i) {
    BlockKey k;
    k.block = r.u32();
    if (k.block != i) throw FormatError("key store records out of order");
    const std::uint32_t nc = r.u32();
    if (nc > keys.shape.hidden) throw FormatError("too many channels");
    for (std::uint32_t c = 0; c < nc; ++c) {
      k.channels.push_back(r.u32());
      if (k.channels.back() >= keys.shape.hidden) throw FormatError("channel index out of range");
    }
    const std::uint32_t nb = r.u32();
    const auto bits = r.bytes(nb);
    k.bits.assign(bits.begin(), bits.end());
    if (std::any_of(k.bits.begin(), k.bits.end(), [](std::uint8_t b) { return b > 1; }))
      throw FormatError("signature bit is not 0 or 1");
    k.projection = Matrix(nb, nc);
    const auto proj = r.floats(static_cast<std::size_t>(nb) * nc);
    std::copy(proj.begin(), proj.end(), k.projection.data().begin());
    Digest digest{};
    const auto d = r.bytes(digest.size());
    std::copy(d.begin(), d.end(), digest.begin());
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (cols != keys.shape.hidden) throw FormatError("checkpoint width does not match hidden size");
    Matrix cp(rows, cols);
    const auto values = r.floats(static_cast<std::size_t>(rows) * cols);
    std::copy(values.begin(), values.end(), cp.data().begin());
    if (checkpoint_digest(cp) != digest) throw AuthenticationError("checkpoint digest mismatch for block " + std::to_string(i));
    keys.blocks.push_back(std::move(k));
    keys.checkpoints.push_back(std::move(cp));
  }
  r.expect_end();
  return keys;
}

Bytes seal_key_store(const KeyMaterial& keys, const Digest& bundle_hash, const SecretKey& key) {
  const Bytes plaintext = serialize_keys(keys);
  KeyStoreHeader header;
  header.bundle_hash = bundle_hash;
  Bytes nonce_input(bundle_hash.begin(), bundle_hash.end());
  nonce_input.insert(nonce_input.end(), plaintext.begin(), plaintext.end());
  const Digest mac = hmac_sha256(key.bytes(), nonce_input);
  std::copy_n(mac.begin(), kNonceSize, header.nonce.begin());
  Bytes out = encode_header(header);
  const Bytes sealed = aes_gcm_encrypt(key, header.nonce, out, plaintext);
  out.insert(out.end(), sealed.begin(), sealed.end());
  return out;
}

KeyStoreHeader read_key_store_header(std::span<const std::uint8_t> sealed) {
  ByteReader r(sealed);
  const auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kKeyStoreMagic.begin())) throw FormatError("not a key store");
  if (r.u16() != kKeyStoreVersion) throw FormatError("unsupported key store version");
  KeyStoreHeader h;
  const auto hash = r.bytes(h.bundle_hash.size());
  std::copy(hash.begin(), hash.end(), h.bundle_hash.begin());
  const auto nonce = r.bytes(h.nonce.size());
  std::copy(nonce.begin(), nonce.end(), h.nonce.begin());
  return h;
}

KeyMaterial open_key_store(std::span<const std::uint8_t> sealed, const Digest& expected_bundle_hash,
                           const SecretKey& key) {
  const KeyStoreHeader header = read_key_store_header(sealed);
  if (header.bundle_hash != expected_bundle_hash)
    throw AuthenticationError("key store is bound to a different model bundle");
  const auto aad = sealed.first(kKeyStoreHeaderSize);
  const Bytes plaintext = aes_gcm_decrypt(key, header.nonce, aad, sealed.subspan(kKeyStoreHeaderSize));
  return deserialize_keys(plaintext);
}

Digest digest_from_hex(const std::string& hex) {
  const Bytes raw = from_hex(hex);
  if (raw.size() != 32) throw std::invalid_argument("digest must be 32 bytes");
  Digest d{};
  std::copy(raw.begin(), raw.end(), d.begin());
  return d;
}

}  // namespace attestllm
