#include "cola/serialize.hpp"

#include <fstream>
#include <stdexcept>

namespace cola {

void ByteReader::need(size_t n) const {
  if (pos_ + n > buf_.size()) throw std::runtime_error("deserialize: truncated input");
}

void ByteReader::expect_end(const char* what) const {
  if (remaining() != 0) {
    throw std::runtime_error(std::string(what) + ": trailing bytes in input");
  }
}

std::vector<uint8_t> container_bytes(const std::vector<Section>& sections) {
  ByteWriter w;
  w.bytes_raw("COLAST", 6);
  w.u16(1);
  w.u32(static_cast<uint32_t>(sections.size()));
  for (const Section& s : sections) {
    w.str(s.tag);
    w.u64(s.payload.size());
    w.bytes(s.payload);
  }
  return std::move(w).take();
}

std::vector<Section> container_from_bytes(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[6];
  r.bytes_raw(magic, 6);
  if (std::memcmp(magic, "COLAST", 6) != 0) {
    throw std::runtime_error("container: bad magic");
  }
  if (r.u16() != 1) throw std::runtime_error("container: unsupported version");
  const uint32_t n = r.u32();
  std::vector<Section> sections;
  for (uint32_t i = 0; i < n; ++i) {
    Section s;
    s.tag = r.str();
    const uint64_t sz = r.u64();
    s.payload.resize(sz);
    if (sz > 0) r.bytes_raw(s.payload.data(), sz);
    sections.push_back(std::move(s));
  }
  r.expect_end("container");
  return sections;
}

const Section& find_section(const std::vector<Section>& sections, const std::string& tag) {
  for (const Section& s : sections) {
    if (s.tag == tag) return s;
  }
  throw std::runtime_error("container: missing section " + tag);
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open: " + path);
  const std::streamsize n = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(n));
  f.read(reinterpret_cast<char*>(bytes.data()), n);
  if (!f) throw std::runtime_error("read failed: " + path);
  return bytes;
}

}  // namespace cola
