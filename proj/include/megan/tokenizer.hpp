#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace megan {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by four specials.
inline constexpr int kPad = 256;
inline constexpr int kBos = 257;
inline constexpr int kEos = 258;
inline constexpr int kSep = 259;
inline constexpr int kByteVocab = 260;

std::vector<int> tokenize(std::string_view text);

/// Inverse of tokenize. Special ids are skipped (with a logged warning).
std::string detokenize(std::span<const int> ids);

}  // namespace megan
