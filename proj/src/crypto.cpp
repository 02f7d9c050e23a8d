#include "attestllm/crypto.hpp"

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <limits>
#include <memory>

namespace attestllm {

namespace {

struct CipherCtxDeleter {
  void operator()(EVP_CIPHER_CTX* ctx) const { EVP_CIPHER_CTX_free(ctx); }
};
using CipherCtx = std::unique_ptr<EVP_CIPHER_CTX, CipherCtxDeleter>;

CipherCtx new_ctx() {
  CipherCtx ctx(EVP_CIPHER_CTX_new());
  if (!ctx) throw CryptoError("EVP_CIPHER_CTX_new failed");
  return ctx;
}

void check(int ok, const char* what) {
  if (ok != 1) throw CryptoError(what);
}

int as_int(std::size_t n) {
  if (n > static_cast<std::size_t>(std::numeric_limits<int>::max())) throw CryptoError("buffer too large");
  return static_cast<int>(n);
}

void check_nonce(std::span<const std::uint8_t> nonce) {
  if (nonce.size() != kNonceSize) throw std::invalid_argument("AES-GCM nonce must be 12 bytes");
}

}  // namespace

Digest sha256(std::span<const std::uint8_t> data) {
  Digest out{};
  unsigned int len = 0;
  check(EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr), "SHA-256 failed");
  return out;
}

Digest hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data) {
  Digest out{};
  unsigned int len = 0;
  if (!HMAC(EVP_sha256(), key.data(), as_int(key.size()), data.data(), data.size(), out.data(), &len))
    throw CryptoError("HMAC-SHA256 failed");
  return out;
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0xf]);
  }
  return out;
}

Bytes from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw std::invalid_argument("hex string has odd length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::invalid_argument("invalid hex character");
  };
  Bytes out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
  return out;
}

SecretKey::SecretKey(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kSize) throw std::invalid_argument("secret key must be 32 bytes");
  std::copy(bytes.begin(), bytes.end(), key_.begin());
}

SecretKey::~SecretKey() { OPENSSL_cleanse(key_.data(), key_.size()); }

SecretKey SecretKey::generate() {
  std::array<std::uint8_t, kSize> raw{};
  check(RAND_bytes(raw.data(), static_cast<int>(raw.size())), "RAND_bytes failed");
  SecretKey key(raw);
  OPENSSL_cleanse(raw.data(), raw.size());
  return key;
}

SecretKey SecretKey::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read key file " + path.string());
  std::string content((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (content.size() == kSize) return SecretKey(std::span(reinterpret_cast<const std::uint8_t*>(content.data()), kSize));
  std::string trimmed;
  for (char c : content)
    if (!std::isspace(static_cast<unsigned char>(c))) trimmed.push_back(c);
  if (trimmed.size() != 2 * kSize) throw std::invalid_argument("key file must hold 32 raw bytes or 64 hex characters");
  return SecretKey(from_hex(trimmed));
}

SecretKey SecretKey::from_environment(const char* variable) {
  const char* path = std::getenv(variable);
  if (!path || !*path) throw std::runtime_error(std::string("no key file: set --key or ") + variable);
  return load(path);
}

std::string SecretKey::hex() const { return to_hex(key_); }

Bytes aes_gcm_encrypt(const SecretKey& key, std::span<const std::uint8_t> nonce, std::span<const std::uint8_t> aad,
                      std::span<const std::uint8_t> plaintext) {
  check_nonce(nonce);
  CipherCtx ctx = new_ctx();
  check(EVP_EncryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr), "GCM init failed");
  check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(kNonceSize), nullptr),
        "GCM IV length failed");
  check(EVP_EncryptInit_ex(ctx.get(), nullptr, nullptr, key.bytes().data(), nonce.data()), "GCM key setup failed");
  int len = 0;
  if (!aad.empty()) check(EVP_EncryptUpdate(ctx.get(), nullptr, &len, aad.data(), as_int(aad.size())), "GCM AAD failed");
  Bytes out(plaintext.size() + kTagSize);
  int written = 0;
  if (!plaintext.empty()) {
    check(EVP_EncryptUpdate(ctx.get(), out.data(), &len, plaintext.data(), as_int(plaintext.size())),
          "GCM encrypt failed");
    written = len;
  }
  check(EVP_EncryptFinal_ex(ctx.get(), out.data() + written, &len), "GCM final failed");
  written += len;
  check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_GET_TAG, static_cast<int>(kTagSize), out.data() + written),
        "GCM tag failed");
  out.resize(static_cast<std::size_t>(written) + kTagSize);
  return out;
}

Bytes aes_gcm_decrypt(const SecretKey& key, std::span<const std::uint8_t> nonce, std::span<const std::uint8_t> aad,
                      std::span<const std::uint8_t> sealed) {
  check_nonce(nonce);
  if (sealed.size() < kTagSize) throw AuthenticationError("ciphertext shorter than the GCM tag");
  const std::size_t body = sealed.size() - kTagSize;
  CipherCtx ctx = new_ctx();
  check(EVP_DecryptInit_ex(ctx.get(), EVP_aes_256_gcm(), nullptr, nullptr, nullptr), "GCM init failed");
  check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_IVLEN, static_cast<int>(kNonceSize), nullptr),
        "GCM IV length failed");
  check(EVP_DecryptInit_ex(ctx.get(), nullptr, nullptr, key.bytes().data(), nonce.data()), "GCM key setup failed");
  int len = 0;
  if (!aad.empty()) check(EVP_DecryptUpdate(ctx.get(), nullptr, &len, aad.data(), as_int(aad.size())), "GCM AAD failed");
  Bytes out(body);
  int written = 0;
  if (body > 0) {
    check(EVP_DecryptUpdate(ctx.get(), out.data(), &len, sealed.data(), as_int(body)), "GCM decrypt failed");
    written = len;
  }
  Bytes tag(sealed.begin() + static_cast<std::ptrdiff_t>(body), sealed.end());
  check(EVP_CIPHER_CTX_ctrl(ctx.get(), EVP_CTRL_GCM_SET_TAG, static_cast<int>(kTagSize), tag.data()),
        "GCM set tag failed");
  if (EVP_DecryptFinal_ex(ctx.get(), out.data() + written, &len) != 1) {
    OPENSSL_cleanse(out.data(), out.size());
    throw AuthenticationError("key store authentication failed");
  }
  out.resize(static_cast<std::size_t>(written + len));
  return out;
}

}  // namespace attestllm
