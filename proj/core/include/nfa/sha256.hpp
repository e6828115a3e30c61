#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

namespace nfa {

/// Incremental SHA-256 (FIPS 180-4).
class Sha256 {
 public:
  Sha256();
  void update(const void* data, std::size_t len);
  /// Finalizes and returns the lowercase hex digest. The instance must not be
  /// updated afterwards.
  std::string hex_digest();

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t state_[8];
  std::uint64_t bit_len_ = 0;
  std::uint8_t buf_[64];
  std::size_t buf_len_ = 0;
  bool done_ = false;
};

std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_hex(const std::string& s);
/// Throws std::runtime_error if the file cannot be read.
std::string sha256_file(const std::filesystem::path& path);

}  // namespace nfa
