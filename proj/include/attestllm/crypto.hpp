#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace attestllm {

using Bytes = std::vector<std::uint8_t>;
using Digest = std::array<std::uint8_t, 32>;

class CryptoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ciphertext, tag or binding check failed. Distinct from CryptoError so
/// callers can tell tampering apart from a broken environment.
class AuthenticationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Digest sha256(std::span<const std::uint8_t> data);
Digest hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data);

std::string to_hex(std::span<const std::uint8_t> bytes);
/// Throws std::invalid_argument on odd length or non-hex characters.
Bytes from_hex(std::string_view hex);

/// 256-bit symmetric key. Zeroed on destruction.
class SecretKey {
 public:
  static constexpr std::size_t kSize = 32;

  explicit SecretKey(std::span<const std::uint8_t> bytes);
  SecretKey(const SecretKey&) = default;
  SecretKey& operator=(const SecretKey&) = default;
  ~SecretKey();

  static SecretKey generate();
  /// Accepts either 32 raw bytes or 64 hex characters (surrounding
  /// whitespace ignored).
  static SecretKey load(const std::filesystem::path& path);
  /// Key file named by the environment variable, if set and non-empty.
  static SecretKey from_environment(const char* variable = kEnvironmentVariable);

  std::span<const std::uint8_t> bytes() const { return key_; }
  std::string hex() const;

  static constexpr const char* kEnvironmentVariable = "ATTESTLLM_KEY_FILE";

 private:
  std::array<std::uint8_t, kSize> key_{};
};

inline constexpr std::size_t kNonceSize = 12;
inline constexpr std::size_t kTagSize = 16;

/// AES-256-GCM. Output is ciphertext followed by the 16-byte tag.
Bytes aes_gcm_encrypt(const SecretKey& key, std::span<const std::uint8_t> nonce, std::span<const std::uint8_t> aad,
                      std::span<const std::uint8_t> plaintext);
/// Throws AuthenticationError when the tag does not verify.
Bytes aes_gcm_decrypt(const SecretKey& key, std::span<const std::uint8_t> nonce, std::span<const std::uint8_t> aad,
                      std::span<const std::uint8_t> sealed);

}  // namespace attestllm
