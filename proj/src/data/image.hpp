#pragma once

// Images are Tensor<float>[C, H, W] with values in [0, 1].

#include <string>

#include "tensor/tensor.hpp"

namespace magmix {

using Image = Tensor<float>;

// 8-bit PNG of any color type, converted to RGB. Throws IoError naming the file.
Image read_png(const std::string& path);
// Writes 8-bit RGB (C must be 3); values are clamped and rounded to 1/255 steps.
void write_png(const std::string& path, const Image& img);

// Bilinear resampling with pixel centers at (i + 0.5) * scale - 0.5, edges
// clamped. Same-size requests return an exact copy.
Image resize_bilinear(const Image& img, Index target_h, Index target_w);
// Box-filter downscale by integer factors (H and W must be multiples of the targets).
Image resize_area(const Image& img, Index target_h, Index target_w);

// Rounds every value to the nearest multiple of 1/255 after clamping to [0, 1].
void quantize_8bit(Image& img);

}  // namespace magmix
