#ifndef MMFLOW_CHECKPOINT_HPP
#define MMFLOW_CHECKPOINT_HPP

// Checkpoint layout (all integers and floats little-endian):
//
//   "MFLW"            4 bytes magic
//   version           u32
//   repeated until EOF:
//     name_len        u32
//     name            name_len bytes
//     rank            u32
//     dims            rank x u64
//     values          prod(dims) x f64, row-major

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "mmflow/mlp.hpp"

namespace mmflow {

inline constexpr char kCheckpointMagic[4] = {'M', 'F', 'L', 'W'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct StoredTensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

namespace detail {

template <class T>
void put_le(std::ostream& out, T v) {
  std::uint64_t bits = 0;
  if constexpr (std::is_same_v<T, double>)
    bits = std::bit_cast<std::uint64_t>(v);
  else
    bits = static_cast<std::uint64_t>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <class T>
bool get_le(std::istream& in, T& v) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) return false;
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>)
    v = std::bit_cast<double>(bits);
  else
    v = static_cast<T>(bits);
  return true;
}

}  // namespace detail

/// Matrices are written as rank-2 tensors (rows, cols).
inline void write_checkpoint(std::ostream& out, const std::vector<TensorRef>& tensors) {
  out.write(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& t : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_le<std::uint32_t>(out, 2);
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.data->rows()));
    detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.data->cols()));
    for (Eigen::Index i = 0; i < t.data->rows(); ++i)
      for (Eigen::Index j = 0; j < t.data->cols(); ++j) detail::put_le<double>(out, (*t.data)(i, j));
  }
}

inline std::map<std::string, StoredTensor> read_checkpoint(std::istream& in, const std::string& source = "<checkpoint>") {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    fail(ErrorKind::CheckpointMismatch, source + ": bad magic");
  std::uint32_t version = 0;
  if (!detail::get_le(in, version)) fail(ErrorKind::CheckpointMismatch, source + ": truncated header");
  if (version != kCheckpointVersion)
    fail(ErrorKind::CheckpointMismatch, source + ": unsupported version " + std::to_string(version));
  std::map<std::string, StoredTensor> out;
  for (;;) {
    std::uint32_t name_len = 0;
    if (!detail::get_le(in, name_len)) break;
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) fail(ErrorKind::CheckpointMismatch, source + ": truncated name");
    std::uint32_t rank = 0;
    if (!detail::get_le(in, rank) || rank > 8) fail(ErrorKind::CheckpointMismatch, source + ": bad rank for " + name);
    StoredTensor t;
    std::uint64_t count = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      std::uint64_t d = 0;
      if (!detail::get_le(in, d) || d > (1ULL << 32)) fail(ErrorKind::CheckpointMismatch, source + ": bad dims for " + name);
      t.dims.push_back(d);
      count *= d;
    }
    t.values.resize(count);
    for (auto& v : t.values)
      if (!detail::get_le(in, v)) fail(ErrorKind::CheckpointMismatch, source + ": truncated data for " + name);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

/// Copies stored tensors into the given parameters; names and shapes must match exactly.
inline void load_checkpoint(const std::map<std::string, StoredTensor>& stored, const std::vector<TensorRef>& params) {
  if (stored.size() != params.size())
    fail(ErrorKind::CheckpointMismatch, "checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                                            std::to_string(params.size()));
  for (const auto& p : params) {
    const auto it = stored.find(p.name);
    if (it == stored.end()) fail(ErrorKind::CheckpointMismatch, "missing tensor " + p.name);
    const StoredTensor& t = it->second;
    if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint64_t>(p.data->rows()) ||
        t.dims[1] != static_cast<std::uint64_t>(p.data->cols()))
      fail(ErrorKind::CheckpointMismatch, "shape mismatch for " + p.name);
    for (Eigen::Index i = 0; i < p.data->rows(); ++i)
      for (Eigen::Index j = 0; j < p.data->cols(); ++j) (*p.data)(i, j) = t.values[i * p.data->cols() + j];
  }
}

}  // namespace mmflow

#endif  // MMFLOW_CHECKPOINT_HPP
