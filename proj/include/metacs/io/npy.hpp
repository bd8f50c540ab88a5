#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "metacs/core.hpp"

namespace metacs::io {

static_assert(std::endian::native == std::endian::little, "NPY I/O assumes a little-endian host");

/// Dense float64 array in C order.
struct NpyArray {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  std::int64_t count() const {
    std::int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

/// NPY v1.0, '<f8', fortran_order False. Same bytes as numpy.save: the
/// header reserves room for the leading axis to grow, then pads to 64 bytes.
inline std::string encode_npy(const NpyArray& a) {
  if (a.count() != static_cast<std::int64_t>(a.data.size())) throw ValidationError("npy: shape/data size mismatch");
  std::ostringstream dict;
  dict << "{'descr': '<f8', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < a.shape.size(); ++i) dict << (i ? ", " : "") << a.shape[i];
  if (a.shape.size() == 1) dict << ',';
  dict << "), }";
  std::string header = dict.str();
  if (!a.shape.empty()) header.append(21 - std::to_string(a.shape[0]).size(), ' ');
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  std::string out("\x93NUMPY\x01\x00", 8);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>(len >> 8));
  out += header;
  out.append(reinterpret_cast<const char*>(a.data.data()), a.data.size() * sizeof(double));
  return out;
}

inline void write_npy(const std::filesystem::path& path, const NpyArray& a) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("npy: cannot open " + path.string() + " for writing");
  const std::string bytes = encode_npy(a);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("npy: write failed for " + path.string());
}

inline NpyArray decode_npy(const std::string& bytes) {
  if (bytes.size() < 10 || bytes.compare(0, 6, "\x93NUMPY") != 0) throw ValidationError("npy: bad magic");
  const int major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(bytes[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(bytes[9])) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw ValidationError("npy: truncated header");
    for (int i = 0; i < 4; ++i) header_len |= static_cast<std::size_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    offset = 12;
  } else {
    throw ValidationError("npy: unsupported version");
  }
  if (bytes.size() < offset + header_len) throw ValidationError("npy: truncated header");
  const std::string header = bytes.substr(offset, header_len);
  if (header.find("'<f8'") == std::string::npos) throw ValidationError("npy: only little-endian float64 is supported");
  if (header.find("'fortran_order': True") != std::string::npos) throw ValidationError("npy: Fortran order unsupported");
  const auto open = header.find('(', header.find("'shape'"));
  const auto close = header.find(')', open);
  if (open == std::string::npos || close == std::string::npos) throw ValidationError("npy: missing shape");
  NpyArray a;
  std::string dims = header.substr(open + 1, close - open - 1);
  std::istringstream ds(dims);
  for (std::string tok; std::getline(ds, tok, ',');) {
    if (tok.find_first_not_of(' ') == std::string::npos) continue;
    a.shape.push_back(std::stoll(tok));
  }
  const std::size_t n = static_cast<std::size_t>(a.count());
  const std::size_t start = offset + header_len;
  if (bytes.size() != start + n * sizeof(double)) throw ValidationError("npy: payload size mismatch");
  a.data.resize(n);
  std::memcpy(a.data.data(), bytes.data() + start, n * sizeof(double));
  return a;
}

inline NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("npy: cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_npy(ss.str());
}

inline NpyArray to_npy(const Vector& v) { return {{static_cast<std::int64_t>(v.size())}, {v.data(), v.data() + v.size()}}; }

inline NpyArray to_npy(const RealField& f) {
  return {{static_cast<std::int64_t>(f.rows()), static_cast<std::int64_t>(f.cols())}, {f.data(), f.data() + f.size()}};
}

inline RealField field_from_npy(const NpyArray& a) {
  if (a.shape.size() != 2) throw ValidationError("npy: expected a 2-D array");
  RealField f(a.shape[0], a.shape[1]);
  std::memcpy(f.data(), a.data.data(), a.data.size() * sizeof(double));
  return f;
}

inline Vector vector_from_npy(const NpyArray& a) {
  Vector v(static_cast<Index>(a.data.size()));
  std::memcpy(v.data(), a.data.data(), a.data.size() * sizeof(double));
  return v;
}

}  // namespace metacs::io
