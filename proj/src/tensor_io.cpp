#include "propcache/tensor_io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "propcache/errors.hpp"

namespace propcache {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'T', '1'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  const U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(bytes[offset + i]) << (8 * i);
  return v;
}

void put_payload(std::vector<std::uint8_t>& out, const Tensor& t) {
  for (double d : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(d));
}

}  // namespace

std::uint32_t crc32_bytes(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large buffers.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint32_t payload_crc32(const Tensor& t) {
  std::vector<std::uint8_t> payload;
  payload.reserve(t.size() * 8);
  put_payload(payload, t);
  return crc32_bytes(payload);
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.ndim() > 255) throw ArgumentError("PCT1 supports at most 255 dims");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le<std::uint16_t>(out, kPct1Version);
  out.push_back(kPct1DtypeF64);
  out.push_back(static_cast<std::uint8_t>(t.ndim()));
  for (std::size_t d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw ArgumentError("PCT1 dimension exceeds u32");
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  const std::size_t payload_begin = out.size();
  put_payload(out, t);
  const std::uint32_t crc =
      crc32_bytes(std::span<const std::uint8_t>(out).subspan(payload_begin));
  put_le<std::uint32_t>(out, crc);
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("bad PCT1 magic");
  const auto version = get_le<std::uint16_t>(bytes, 4);
  if (version != kPct1Version) throw FormatError("unsupported PCT1 version " + std::to_string(version));
  if (bytes[6] != kPct1DtypeF64) throw FormatError("unsupported PCT1 dtype " + std::to_string(bytes[6]));
  const std::size_t ndim = bytes[7];
  const std::size_t header = 8 + 4 * ndim;
  if (bytes.size() < header + 4) throw FormatError("truncated PCT1 header");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i) shape[i] = get_le<std::uint32_t>(bytes, 8 + 4 * i);
  const std::size_t payload_len = bytes.size() - header - 4;
  if (payload_len % 8 != 0 || payload_len / 8 != shape_numel(shape)) {
    throw ShapeHeaderMismatch("header says " + shape_str(shape) + " but payload holds " +
                              std::to_string(payload_len / 8) + " values");
  }
  const auto payload = bytes.subspan(header, payload_len);
  const auto stored = get_le<std::uint32_t>(bytes, header + payload_len);
  if (crc32_bytes(payload) != stored) throw ChecksumError("PCT1 payload checksum mismatch");

  std::vector<double> data(payload_len / 8);
  for (std::size_t i = 0; i < data.size(); ++i)
    data[i] = std::bit_cast<double>(get_le<std::uint64_t>(payload, 8 * i));
  Tensor t(std::move(shape), std::move(data));
  if (!t.all_finite()) throw FormatError("PCT1 payload contains NaN or Inf");
  return t;
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, encode_tensor(t));
}

Tensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file_bytes(path));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArgumentError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArgumentError("short write to " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace propcache
