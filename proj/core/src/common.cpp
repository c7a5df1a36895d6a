#include "hypa/common.hpp"

#include <zlib.h>

#include <cstdio>

namespace hypa {

std::uint32_t crc32_bytes(const void* data, std::size_t len,
                          std::uint32_t seed) {
  return static_cast<std::uint32_t>(
      ::crc32(seed, static_cast<const Bytef*>(data),
              static_cast<uInt>(len)));
}

std::uint32_t checksum(const Mat& m) {
  // Row-major dynamic matrices are contiguous, so the buffer already matches
  // the row-major serialization order.
  return crc32_bytes(m.data(), sizeof(double) * static_cast<std::size_t>(
                                                    m.rows() * m.cols()));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace hypa
