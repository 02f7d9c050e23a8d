#pragma once

#include <span>

#include "attestllm/crypto.hpp"
#include "attestllm/watermark.hpp"

namespace attestllm {

/// SHA-256 over the float32 encoding of a checkpoint.
Digest checkpoint_digest(const Matrix& checkpoint);

/// Plaintext record layout: shape, bit width, trigger set, then per block the
/// index, channels, signature bits, float32 projection, checkpoint digest
/// and float32 checkpoint.
Bytes serialize_keys(const KeyMaterial& keys);
/// Throws FormatError on malformed input and AuthenticationError when a
/// checkpoint does not match its recorded digest.
KeyMaterial deserialize_keys(std::span<const std::uint8_t> data);

/// Authenticated header: "ATKS" magic, version, bound bundle hash, nonce.
/// The whole header is the AES-GCM associated data.
struct KeyStoreHeader {
  Digest bundle_hash{};
  std::array<std::uint8_t, kNonceSize> nonce{};
};

inline constexpr std::size_t kKeyStoreHeaderSize = 4 + 2 + 32 + kNonceSize;

/// Encrypts key material bound to a bundle hash. The nonce is derived from
/// the key and content, so sealing is deterministic.
Bytes seal_key_store(const KeyMaterial& keys, const Digest& bundle_hash, const SecretKey& key);

KeyStoreHeader read_key_store_header(std::span<const std::uint8_t> sealed);

/// Throws AuthenticationError when the store is bound to another bundle, was
/// modified, or was sealed under another key.
KeyMaterial open_key_store(std::span<const std::uint8_t> sealed, const Digest& expected_bundle_hash,
                           const SecretKey& key);

Digest digest_from_hex(const std::string& hex);

}  // namespace attestllm
