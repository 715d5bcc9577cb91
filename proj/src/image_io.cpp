#include "stableflow/image_io.hpp"

#include "stableflow/error.hpp"

#include "json_support.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>

namespace stableflow {

namespace {

class PgmReader {
 public:
  explicit PgmReader(std::string_view bytes) : bytes_(bytes) {}

  // Header tokens are separated by whitespace; '#' starts a comment line.
  std::size_t number(const char* what) {
    skip_space();
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(bytes_[pos_++] - '0');
      if (++digits > 9) throw ParseError("pgm", std::string(what) + " is too large");
    }
    if (digits == 0) throw ParseError("pgm", std::string("expected ") + what);
    return value;
  }

  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::string_view take(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw ParseError("pgm", "pixel data is truncated");
    const std::string_view out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  void single_space() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw ParseError("pgm", "expected whitespace after the header");
    }
    ++pos_;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

ImagePtr parse_pgm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '2' && bytes[1] != '5')) {
    throw ParseError("pgm", "not a P2/P5 graymap");
  }
  const bool binary = bytes[1] == '5';
  PgmReader in(bytes.substr(2));
  const std::size_t width = in.number("width");
  const std::size_t height = in.number("height");
  const std::size_t maxval = in.number("maxval");
  if (width == 0 || height == 0) throw ParseError("pgm", "empty image");
  if (maxval == 0 || maxval > 65535) throw ParseError("pgm", "maxval must be in 1..65535");
  std::vector<double> pixels(width * height);
  const double scale = 1.0 / static_cast<double>(maxval);
  if (binary) {
    in.single_space();
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    const std::string_view raw = in.take(pixels.size() * bytes_per);
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      std::size_t v = static_cast<unsigned char>(raw[i * bytes_per]);
      if (bytes_per == 2) v = (v << 8) | static_cast<unsigned char>(raw[i * 2 + 1]);
      if (v > maxval) throw ParseError("pgm", "sample exceeds maxval");
      pixels[i] = static_cast<double>(v) * scale;
    }
  } else {
    for (double& p : pixels) {
      const std::size_t v = in.number("pixel value");
      if (v > maxval) throw ParseError("pgm", "sample exceeds maxval");
      p = static_cast<double>(v) * scale;
    }
  }
  return std::make_shared<const Image>(height, width, std::move(pixels));
}

ImagePtr load_pgm(const std::filesystem::path& path) { return parse_pgm(detail::read_file(path)); }

std::string encode_pgm(const Image& image) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n65535\n";
  for (double p : image.pixels) {
    const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(p, 0.0, 1.0) * 65535.0));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

void save_pgm(const Image& image, const std::filesystem::path& path) { detail::write_file(path, encode_pgm(image)); }

}  // namespace stableflow
