// hash.hpp — SHA-256 content hashes via OpenSSL
#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace closedsys {

using Digest = std::array<unsigned char, 32>;

inline Digest sha256(const void* data, std::size_t len) {
  Digest out{};
  unsigned int n = 0;
  if (EVP_Digest(data, len, out.data(), &n, EVP_sha256(), nullptr) != 1 || n != out.size())
    throw std::runtime_error("sha256: EVP_Digest failed");
  return out;
}

inline Digest sha256(std::string_view s) { return sha256(s.data(), s.size()); }

inline std::string to_hex(const Digest& d) {
  static const char* hex = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (unsigned char c : d) {
    s.push_back(hex[c >> 4]);
    s.push_back(hex[c & 15]);
  }
  return s;
}

inline std::string sha256_hex(std::string_view s) { return to_hex(sha256(s)); }

}  // namespace closedsys
