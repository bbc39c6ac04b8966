#include "af/aftn.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "af/error.hpp"

namespace af {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'T', 'N'};
constexpr std::uint8_t kVersion = 1;
constexpr std::uint8_t kDtypeF64 = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is, const std::filesystem::path& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("truncated AFTN file: " + path.string());
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void write_aftn(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  os.put(static_cast<char>(kVersion));
  os.put(static_cast<char>(kDtypeF64));
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  static_assert(sizeof(double) == 8);
  os.write(reinterpret_cast<const char*>(t.array().data()),
           static_cast<std::streamsize>(t.size() * 8));
  if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_aftn(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("not an AFTN file: " + path.string());
  int version = is.get(), dtype = is.get();
  if (version != kVersion) throw IoError("unsupported AFTN version in " + path.string());
  if (dtype != kDtypeF64) throw IoError("unsupported AFTN dtype in " + path.string());
  std::uint32_t rank = get_u32(is, path);
  if (rank > 16) throw IoError("implausible AFTN rank in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(get_u32(is, path));
  std::int64_t n = shape_size(shape);
  Eigen::ArrayXd data(n);
  if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 8)))
    throw IoError("truncated AFTN payload: " + path.string());
  if (!data.allFinite()) throw NumericError("non-finite values in AFTN file: " + path.string());
  return Tensor::from_array(std::move(shape), std::move(data));
}

}  // namespace af
