#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace cola {

// Little-endian byte stream helpers shared by every on-disk format. Reals are
// narrowed to f32 at this boundary unless written via f64 explicitly.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v) { raw(&v, 2); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void bytes_raw(const void* p, size_t n) { raw(p, n); }
  void bytes(const std::vector<uint8_t>& b) { raw(b.data(), b.size()); }

  size_t size() const { return buf_.size(); }
  std::vector<uint8_t> take() && { return std::move(buf_); }

 private:
  void raw(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<uint8_t>& buf) : buf_(buf) {}

  uint8_t u8() { return take<uint8_t>(); }
  uint16_t u16() { return take<uint16_t>(); }
  uint32_t u32() { return take<uint32_t>(); }
  uint64_t u64() { return take<uint64_t>(); }
  float f32() { return take<float>(); }
  double f64() { return take<double>(); }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void bytes_raw(void* p, size_t n) {
    need(n);
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  size_t remaining() const { return buf_.size() - pos_; }
  void expect_end(const char* what) const;

 private:
  template <typename T>
  T take() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(size_t n) const;

  const std::vector<uint8_t>& buf_;
  size_t pos_ = 0;
};

// Section-framed container: magic "COLAST", version u16, section count u32,
// then per section a tag string, payload size u64, payload bytes.
struct Section {
  std::string tag;
  std::vector<uint8_t> payload;
};

std::vector<uint8_t> container_bytes(const std::vector<Section>& sections);
std::vector<Section> container_from_bytes(const std::vector<uint8_t>& bytes);
const Section& find_section(const std::vector<Section>& sections, const std::string& tag);

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);

}  // namespace cola
