#pragma once

#include <string>

#include "ckda/tensor.hpp"

namespace ckda {

// Binary PPM (P6) for (H,W,3) tensors with values in [0,1].
void write_ppm(const std::string& path, const Tensor& image);

// Binary PGM (P5) for (H,W) tensors with values in [0,1].
void write_pgm(const std::string& path, const Tensor& image);

}  // namespace ckda
