#pragma once

#include "multilane/precision.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "multilane/tensor.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

/// Named tensor collection in the little-endian "MLTA" container:
///
///   magic "MLTA" | u32 version (=1) | u32 entry count
///   per entry: u16 name length | UTF-8 name | u8 dtype | u8 rank |
///              rank × u64 extents | raw row-major payload
///
/// dtype 0 is 32-bit IEEE float. dtype 1 (64-bit float) is written only by
/// 64-bit builds so their checkpoints round-trip exactly.
class Archive {
 public:
  static constexpr std::uint32_t kVersion = 1;
  static constexpr std::uint8_t kFloat32 = 0;
  static constexpr std::uint8_t kFloat64 = 1;

  void put(std::string name, Tensor tensor);
  bool contains(const std::string& name) const;
  // Throws LoadError naming the entry when absent.
  const Tensor& get(const std::string& name) const;
  // Like get(), additionally checking the stored extents.
  const Tensor& get(const std::string& name, const Shape& expected) const;
  std::optional<Tensor> find(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> serialize() const;
  static Archive deserialize(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static Archive load(const std::filesystem::path& path);

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
