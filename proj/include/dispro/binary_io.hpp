// SPDX-License-Identifier: Apache-2.0
// Little-endian primitive encoding shared by the feature and checkpoint files.
#pragma once

#include "dispro/core.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

namespace dispro::io {

template <class U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

inline void put_f32(std::ostream& os, float f) { put_le(os, std::bit_cast<std::uint32_t>(f)); }

/// Reads little-endian values from a stream; any short read is reported as a
/// truncated file naming `what`.
class Reader {
 public:
  Reader(std::istream& is, std::string what) : is_(is), what_(std::move(what)) {}

  template <class U>
  U le() {
    static_assert(std::is_unsigned_v<U>);
    unsigned char buf[sizeof(U)];
    bytes(reinterpret_cast<char*>(buf), sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }

  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }

  void bytes(char* out, std::size_t n) {
    is_.read(out, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n)
      throw Error(ErrorCode::Format, what_ + ": truncated file");
  }

  bool at_eof() { return is_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& is_;
  std::string what_;
};

}  // namespace dispro::io
