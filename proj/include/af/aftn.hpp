#pragma once

#include <filesystem>
#include <string>

#include "af/tensor.hpp"

namespace af {

// AFTN tensor container: magic "AFTN", u8 version=1, u8 dtype=1 (f64 LE),
// u32 rank, u32 dims[rank], raw row-major float64 payload.  Round trips are
// bit-exact.  An optional "<name>.json" sidecar carries semantic metadata.
void write_aftn(const std::filesystem::path& path, const Tensor& t);
Tensor read_aftn(const std::filesystem::path& path);

}  // namespace af
