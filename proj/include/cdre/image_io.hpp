#pragma once

#include <filesystem>

#include "cdre/tensor.hpp"

namespace cdre {

// Binary PPM (P6, maxval 255) <-> [3, H, W] tensor in [0, 1].
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

// Values snapped to the 8-bit grid k/255.
Tensor quantize_8bit(const Tensor& image);

} // namespace cdre
