#pragma once

// Little-endian encoding helpers shared by the latent and checkpoint files.

#include <bit>
#include <cstdint>
#include <string>

#include "musrec/error.hpp"

namespace musrec::binio {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : b_(bytes), src_(std::move(source)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(read(4)); }
  std::uint64_t u64() { return read(8); }
  double f64() { return std::bit_cast<double>(read(8)); }
  std::string tag(std::size_t n) {
    need(n);
    std::string s = b_.substr(off_, n);
    off_ += n;
    return s;
  }
  std::size_t offset() const { return off_; }
  std::size_t remaining() const { return b_.size() - off_; }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError(src_ + ": " + what + " at byte offset " + std::to_string(off_));
  }

 private:
  void need(std::size_t n) const {
    if (off_ + n > b_.size()) fail("unexpected end of file");
  }
  std::uint64_t read(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b_[off_ + static_cast<std::size_t>(i)])) << (8 * i);
    }
    off_ += static_cast<std::size_t>(n);
    return v;
  }

  const std::string& b_;
  std::string src_;
  std::size_t off_ = 0;
};

}  // namespace musrec::binio
