#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "normbench/tensor.hpp"

namespace normbench {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Named float32 arrays in the NBCK container:
///   "NBCK" | u32 version | u32 count
///   count x (u32 name_len | name | u32 ndim | u64 dims[ndim] | u64 offset | u64 numel)
///   payload (little-endian f32, offsets relative to payload start)
///   u32 CRC-32 of every preceding byte
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  void add(std::string name, Shape shape, std::vector<float> data);
  template <typename T>
  void add(std::string name, const Tensor<T>& t) {
    std::vector<float> v(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) v[i] = static_cast<float>(t[i]);
    add(std::move(name), t.shape(), std::move(v));
  }
  void add_scalar(std::string name, double v) { add(std::move(name), Shape{1}, {static_cast<float>(v)}); }

  const NamedArray* find(std::string_view name) const;
  /// Throws CheckpointError when absent.
  const NamedArray& at(std::string_view name) const;
  const std::vector<NamedArray>& arrays() const noexcept { return arrays_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::vector<NamedArray> arrays_;
};

}  // namespace normbench
