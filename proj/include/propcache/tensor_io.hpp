#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "propcache/tensor.hpp"

namespace propcache {

// PCT1 tensor files:
//   "PCT1" | u16 version=1 | u8 dtype=1 (f64) | u8 ndim | ndim × u32 dims |
//   row-major f64 payload | u32 CRC32 of the payload bytes
// All integers and floats little-endian.
inline constexpr std::uint16_t kPct1Version = 1;
inline constexpr std::uint8_t kPct1DtypeF64 = 1;

std::uint32_t crc32_bytes(std::span<const std::uint8_t> bytes);
std::uint32_t payload_crc32(const Tensor& t);

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
// Throws FormatError, ShapeHeaderMismatch or ChecksumError.
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace propcache
