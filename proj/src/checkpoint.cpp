// SPDX-License-Identifier: Apache-2.0
#include "pamoe/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace pamoe {
namespace {

constexpr char kMagic[8] = {'P', 'A', 'M', 'O', 'E', 'C', 'K', '1'};

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(std::ostream& out, const std::vector<ad::Tensor*>& tensors) {
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, tensors.size());
  for (const ad::Tensor* t : tensors) {
    put<std::uint64_t>(out, t->name.size());
    out.write(t->name.data(), static_cast<std::streamsize>(t->name.size()));
    put<std::int64_t>(out, t->rows());
    put<std::int64_t>(out, t->cols());
    out.write(reinterpret_cast<const char*>(t->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(t->size())));
  }
  if (!out) throw std::runtime_error("checkpoint: write failed");
}

void save_checkpoint(const std::string& path, const std::vector<ad::Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(out, tensors);
}

void load_checkpoint(std::istream& in, const std::vector<ad::Tensor*>& tensors) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  const auto count = take<std::uint64_t>(in);
  std::map<std::string, ad::Matrix> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = take<std::uint64_t>(in);
    if (len > (1u << 20)) throw std::runtime_error("checkpoint: implausible name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated file");
    const auto rows = take<std::int64_t>(in);
    const auto cols = take<std::int64_t>(in);
    if (rows < 0 || cols < 0) throw std::runtime_error("checkpoint: negative shape");
    ad::Matrix m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()),
                 static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(m.size())))) {
      throw std::runtime_error("checkpoint: truncated file");
    }
    entries[name] = std::move(m);
  }
  for (ad::Tensor* t : tensors) {
    auto it = entries.find(t->name);
    if (it == entries.end()) throw std::runtime_error("checkpoint: missing tensor '" + t->name + "'");
    if (it->second.rows() != t->rows() || it->second.cols() != t->cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for '" + t->name + "'");
    }
    t->value = it->second;
  }
}

void load_checkpoint(const std::string& path, const std::vector<ad::Tensor*>& tensors) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  load_checkpoint(in, tensors);
}

}  // namespace pamoe
