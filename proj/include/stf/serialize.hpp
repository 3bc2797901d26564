#pragma once

// TNSR tensor blobs, little-endian:
//   "TNSR" | u32 rank | u64 extent x rank | f64 payload (row-major)

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "stf/tensor.hpp"

namespace stf::inline STF_PRECISION_NS::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace detail {

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
bool get(std::istream& is, T& v) {
  return static_cast<bool>(is.read(reinterpret_cast<char*>(&v), sizeof(T)));
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write("TNSR", 4);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) detail::put<std::uint64_t>(os, e);
  for (real v : t.values()) detail::put<double>(os, static_cast<double>(v));
}

// `context` names the source in error messages.
inline Tensor read_tensor(std::istream& is, const std::string& context = "stream") {
  const auto start = static_cast<long long>(is.tellg());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TNSR", 4) != 0) {
    throw DataError(context + " @" + std::to_string(start) + ": missing TNSR magic");
  }
  std::uint32_t rank = 0;
  if (!detail::get(is, rank) || rank == 0 || rank > 16) {
    throw DataError(context + " @" + std::to_string(start + 4) + ": bad TNSR rank");
  }
  Shape shape(rank);
  for (auto& e : shape) {
    std::uint64_t v = 0;
    if (!detail::get(is, v)) throw DataError(context + ": truncated TNSR extents");
    e = static_cast<std::size_t>(v);
  }
  const std::size_t n = shape_numel(shape);
  std::vector<double> raw(n);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
    throw DataError(context + ": TNSR payload truncated, expected " + std::to_string(n * sizeof(double)) +
                    " bytes, got " + std::to_string(is.gcount()));
  }
  return Tensor::from(std::move(shape), std::vector<real>(raw.begin(), raw.end()));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open " + path);
  return read_tensor(is, path);
}

// Rank-2 tensor (or the last two axes flattened over the rest) as CSV rows.
inline void save_matrix_csv(const std::string& path, const Tensor& t) {
  if (t.rank() < 1) throw ShapeError("csv export needs rank >= 1");
  const std::size_t cols = t.shape().back();
  const std::size_t rows = t.numel() / cols;
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  os << std::setprecision(9);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) os << (c ? "," : "") << t.values()[r * cols + c];
    os << '\n';
  }
}

inline Tensor load_matrix_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  std::vector<real> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(static_cast<real>(std::stod(cell)));
      ++n;
    }
    if (rows == 0) cols = n;
    if (n != cols) throw DataError(path + ": ragged CSV at row " + std::to_string(rows));
    ++rows;
  }
  if (rows == 0) throw DataError(path + ": empty CSV");
  return Tensor::from({rows, cols}, std::move(values));
}

}  // namespace stf::inline STF_PRECISION_NS::io
