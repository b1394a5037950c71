#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fgn/layers.hpp"

namespace fgn {

inline constexpr std::uint16_t kModelFormatVersion = 1;

/// Malformed model bytes; `offset()` is where decoding stopped.
class ModelFormatError : public std::runtime_error {
 public:
  ModelFormatError(const std::string& what, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Layout: "FGNN", u16 version, u16 layer count, then per layer
///   u8 kind (0 dense, 1 fgn-dense, 2 conv1d, 3 fgn-conv1d), u8 activation,
///   u32 dims (dense: in, out; conv: channels, kernel, stride, dilation),
///   u8 variance kind (0 classical, 1 spherical, 2 diagonal, 3 full),
///   fgn-dense only: f32 p-norm, u8 coupled,
///   f32 blocks: W, b, then for FGN layers C and the raw variance.
/// Integers and floats are little-endian.
std::vector<std::uint8_t> serialize_model(const Network& net);
Network deserialize_model(std::span<const std::uint8_t> bytes);

void save_model(const Network& net, const std::filesystem::path& path);
Network load_model(const std::filesystem::path& path);

}  // namespace fgn
