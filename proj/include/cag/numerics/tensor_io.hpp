#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "cag/numerics/tensor.hpp"

namespace cag {

// CAGT layout, all integers little-endian:
//   "CAGT" | version u8 = 1 | dtype u8 (0 f32, 1 f64, 2 bool-as-u8) | ndim u8 | reserved u8 = 0
//   | ndim x u64 dims | row-major payload
inline constexpr std::string_view kTensorMagic = "CAGT";
inline constexpr std::uint8_t kTensorVersion = 1;

std::string encode_tensor(const Tensor& t);
Tensor decode_tensor(std::string_view bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

} // namespace cag
