#pragma once

#include "stableflow/state.hpp"

#include <filesystem>
#include <string>
#include <string_view>

namespace stableflow {

/// Netpbm graymap (P2 ascii or P5 binary, maxval up to 65535) scaled to [0, 1].
/// Throws ParseError on malformed input.
ImagePtr parse_pgm(std::string_view bytes);
ImagePtr load_pgm(const std::filesystem::path& path);

/// Binary P5 with 16-bit samples.
std::string encode_pgm(const Image& image);
void save_pgm(const Image& image, const std::filesystem::path& path);

}  // namespace stableflow
