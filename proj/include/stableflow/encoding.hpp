#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stableflow::encoding {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws ParseError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Row-major float64 payloads, little-endian, as used by image observations.
std::string encode_doubles_base64(std::span<const double> values);
std::vector<double> decode_doubles_base64(std::string_view text);

/// IEEE-754 bit pattern as 16 lowercase hex digits; lossless for every double.
std::string double_to_hex(double value);
/// Throws ParseError unless `text` is exactly 16 hex digits.
double double_from_hex(std::string_view text);

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);

}  // namespace stableflow::encoding
