#pragma once

#include <filesystem>

#include "multiref/tensor.hpp"

namespace multiref {

/// Decode an 8-bit PNG into (3,H,W) doubles in [0,1] (v/255). Gray and
/// paletted inputs are expanded; 16-bit is reduced; alpha is dropped.
Tensor read_png(const std::filesystem::path& path);

/// Encode (3,H,W) in [0,1] as an 8-bit RGB PNG (values clamped and rounded).
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Round-trip quantization applied by write_png followed by read_png.
Tensor quantize_to_8bit(const Tensor& image);

}  // namespace multiref
