#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "unblur/errors.hpp"
#include "unblur/tensor.hpp"

namespace unblur {

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

// Single-file container: JSON metadata plus named, shape-annotated
// little-endian float32 arrays. Shared parameters appear once under their
// canonical name; ties are re-established when the model is rebuilt.
struct Container {
  nlohmann::json meta;
  std::map<std::string, Tensor<float>> tensors;
};

namespace detail {

template <typename V>
void write_pod(std::ofstream& out, const V& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& in) {
  V v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!in) throw DataError("truncated container");
  return v;
}

}  // namespace detail

inline constexpr char kContainerMagic[8] = {'U', 'N', 'B', 'L', 'U', 'R', 'C', 'K'};
inline constexpr uint32_t kContainerVersion = 1;

inline void write_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(kContainerMagic, sizeof(kContainerMagic));
  detail::write_pod(out, kContainerVersion);
  const std::string meta = c.meta.dump();
  detail::write_pod(out, static_cast<uint64_t>(meta.size()));
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  detail::write_pod(out, static_cast<uint64_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    detail::write_pod(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<uint8_t>(0));  // dtype: float32
    detail::write_pod(out, static_cast<uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d)
      detail::write_pod(out, static_cast<int64_t>(t.dim(d)));
    out.write(reinterpret_cast<const char*>(t.data()),
              static_cast<std::streamsize>(t.numel() * sizeof(float)));
  }
  if (!out) throw DataError("write failed: " + path.string());
}

inline Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open container: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kContainerMagic, sizeof(magic)) != 0)
    throw DataError("not a checkpoint container: " + path.string());
  const auto version = detail::read_pod<uint32_t>(in);
  if (version != kContainerVersion)
    throw DataError("unsupported container version " + std::to_string(version));
  const auto meta_len = detail::read_pod<uint64_t>(in);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  Container c;
  try {
    c.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad container metadata: ") + e.what());
  }
  const auto count = detail::read_pod<uint64_t>(in);
  for (uint64_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_pod<uint32_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto dtype = detail::read_pod<uint8_t>(in);
    if (dtype != 0) throw DataError("unsupported tensor dtype");
    const auto ndim = detail::read_pod<uint32_t>(in);
    std::vector<int> shape(ndim);
    for (auto& d : shape) d = static_cast<int>(detail::read_pod<int64_t>(in));
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw DataError("truncated tensor payload in " + path.string());
    c.tensors.emplace(std::move(name), std::move(t));
  }
  return c;
}

}  // namespace unblur
