#pragma once

#include <string>

#include "img2st/tensor.hpp"

namespace img2st {

// Binary P6, maxval 255. rgb is 3 x H x W with values in [0, 1].
void write_ppm(const std::string& path, const TensorF& rgb);
TensorF read_ppm(const std::string& path);

// Binary P5, maxval 65535, big-endian samples. Values are quantized
// linearly from [lo, hi]; a degenerate range writes zeros.
void write_pgm16(const std::string& path, const TensorF& map, float lo, float hi);

}  // namespace img2st
