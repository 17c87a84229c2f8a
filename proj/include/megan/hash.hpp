#pragma once

#include <array>
#include <span>
#include <string>

namespace megan {

using Digest = std::array<unsigned char, 32>;

Digest sha256(std::span<const unsigned char> bytes);
std::string to_hex(const Digest& digest);

/// Incremental SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const unsigned char> bytes);
  Digest finish();

 private:
  void* ctx_;
};

}  // namespace megan
