#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "geopix/errors.hpp"

// Uncompressed COCO-style run-length masks: column-major traversal, the
// first count is the number of leading zeros (possibly 0).

namespace geopix {

/// Binary mask in row-major order.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t area() const {
    std::size_t n = 0;
    for (auto b : bits) n += b != 0;
    return n;
  }
  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

struct Rle {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint32_t> counts;

  friend bool operator==(const Rle&, const Rle&) = default;
};

inline Rle rle_encode(const BinaryMask& m) {
  if (m.bits.size() != m.height * m.width) throw DimensionError("rle_encode: mask size mismatch");
  Rle r{m.height, m.width, {}};
  std::uint8_t cur = 0;
  std::uint32_t run = 0;
  for (std::size_t x = 0; x < m.width; ++x)
    for (std::size_t y = 0; y < m.height; ++y) {
      const std::uint8_t b = m.at(y, x) ? 1 : 0;
      if (b != cur) {
        r.counts.push_back(run);
        run = 0;
        cur = b;
      }
      ++run;
    }
  r.counts.push_back(run);
  return r;
}

inline BinaryMask rle_decode(const Rle& r) {
  BinaryMask m(r.height, r.width);
  std::size_t pos = 0;
  std::uint8_t cur = 0;
  const std::size_t n = r.height * r.width;
  for (std::uint32_t c : r.counts) {
    if (pos + c > n) throw DataError("rle_decode: counts exceed mask size");
    for (std::uint32_t i = 0; i < c; ++i, ++pos) m.at(pos % r.height, pos / r.height) = cur;
    cur ^= 1;
  }
  if (pos != n) throw DataError("rle_decode: counts cover " + std::to_string(pos) + " of " + std::to_string(n) + " pixels");
  return m;
}

inline std::size_t rle_area(const Rle& r) {
  std::size_t a = 0;
  for (std::size_t i = 1; i < r.counts.size(); i += 2) a += r.counts[i];
  return a;
}

inline void to_json(nlohmann::json& j, const Rle& r) {
  j = nlohmann::json{{"size", {r.height, r.width}}, {"counts", r.counts}};
}

inline void from_json(const nlohmann::json& j, Rle& r) {
  try {
    const auto& size = j.at("size");
    r.height = size.at(0).get<std::size_t>();
    r.width = size.at(1).get<std::size_t>();
    r.counts = j.at("counts").get<std::vector<std::uint32_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("rle: ") + e.what());
  }
}

}  // namespace geopix
