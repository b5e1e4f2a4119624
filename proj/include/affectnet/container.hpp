#pragma once

// Manifest + payload file family used for checkpoints and image exports.
//
//   <format tag>                         e.g. "mtanet-ckpt/1"
//   meta <key> <value>                   zero or more, value runs to end of line
//   tensor <name> <dims|-> <offset> <count> <fnv1a64>
//   payload <bytes>
//   end
//   <payload: little-endian IEEE-754 float32, tensors back to back>
//
// Offsets are bytes from the start of the payload. Rank-0 tensors use "-"
// for dims. The checksum is FNV-1a 64 over each tensor's payload bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "affectnet/error.hpp"
#include "affectnet/tensor.hpp"

namespace affectnet {

struct ContainerTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Container {
  std::string format;
  std::vector<std::pair<std::string, std::string>> meta;
  std::vector<ContainerTensor> tensors;

  const ContainerTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  std::string meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta)
      if (k == key) return v;
    return {};
  }
};

namespace detail {

inline void put_le32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float get_le32(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
                             (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(bits);
}

inline std::uint64_t fnv1a64(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string dims_str(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline Shape parse_dims(const std::string& text) {
  Shape s;
  if (text == "-") return s;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) s.push_back(std::stoull(item));
  return s;
}

}  // namespace detail

inline void write_container(const std::string& path, const Container& c) {
  std::string payload;
  std::ostringstream header;
  header << c.format << "\n";
  for (const auto& [k, v] : c.meta) header << "meta " << k << " " << v << "\n";
  for (const auto& t : c.tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw ShapeError("container: tensor '" + t.name + "' shape/data mismatch");
    const std::size_t offset = payload.size();
    for (float v : t.values) detail::put_le32(payload, v);
    const auto sum = detail::fnv1a64(payload.data() + offset, payload.size() - offset);
    header << "tensor " << t.name << " " << detail::dims_str(t.shape) << " " << offset << " " << t.values.size() << " "
           << std::hex << std::setw(16) << std::setfill('0') << sum << std::dec << "\n";
  }
  header << "payload " << payload.size() << "\nend\n";
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw ValidationError("failed writing '" + path + "'");
}

inline Container read_container(const std::string& path, const std::string& expected_format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  Container c;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) throw ParseError(path, 1, "empty file");
  ++lineno;
  c.format = line;
  if (c.format != expected_format) {
    throw ParseError(path, 1, "unsupported format '" + c.format + "', expected '" + expected_format + "'");
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, count;
    std::uint64_t sum;
  };
  std::vector<Entry> entries;
  std::size_t payload_bytes = 0;
  bool ended = false;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "end") {
      ended = true;
      break;
    }
    if (kind == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls >> std::ws, value);
      c.meta.emplace_back(key, value);
    } else if (kind == "tensor") {
      Entry e;
      std::string dims, sum;
      if (!(ls >> e.name >> dims >> e.offset >> e.count >> sum)) throw ParseError(path, lineno, "malformed tensor line");
      e.shape = detail::parse_dims(dims);
      e.sum = std::stoull(sum, nullptr, 16);
      if (shape_numel(e.shape) != e.count) throw ParseError(path, lineno, "tensor '" + e.name + "' count does not match shape");
      entries.push_back(std::move(e));
    } else if (kind == "payload") {
      if (!(ls >> payload_bytes)) throw ParseError(path, lineno, "malformed payload line");
    } else {
      throw ParseError(path, lineno, "unknown manifest record '" + kind + "'");
    }
  }
  if (!ended) throw ParseError(path, lineno, "manifest has no 'end' record");

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (const auto& e : entries) {
    const std::size_t need = e.offset + 4 * e.count;
    if (need > payload.size()) {
      throw ValidationError(path + ": truncated payload at parameter '" + e.name + "' (needs bytes up to " +
                            std::to_string(need) + ", file has " + std::to_string(payload.size()) + ")");
    }
    if (detail::fnv1a64(payload.data() + e.offset, 4 * e.count) != e.sum) {
      throw ValidationError(path + ": corrupted payload for parameter '" + e.name + "' (checksum mismatch)");
    }
    ContainerTensor t{e.name, e.shape, std::vector<float>(e.count)};
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data() + e.offset);
    for (std::size_t i = 0; i < e.count; ++i) t.values[i] = detail::get_le32(p + 4 * i);
    c.tensors.push_back(std::move(t));
  }
  if (payload.size() != payload_bytes) {
    throw ValidationError(path + ": payload is " + std::to_string(payload.size()) + " bytes, manifest declares " +
                          std::to_string(payload_bytes));
  }
  return c;
}

}  // namespace affectnet
