#pragma once

#include <string>

#include "safectrl/tensor.hpp"

namespace safectrl {

// Binary netpbm images; the only pixel container this project uses. Floats
// are quantized to u8 on write (round(clamp(v,0,1)*255)), so a saved image
// read back equals quantize_unit of the original.

void write_ppm(const std::string& path, const Tensor& img);  // [3,H,W] in [0,1]
Tensor read_ppm(const std::string& path);                    // values k/255

void write_pgm(const std::string& path, const Tensor& mask);  // [H,W] in [0,1]
Tensor read_pgm(const std::string& path);

// In-memory equivalent of a PPM/PGM round-trip; anchors downstream metrics
// to the bytes actually on disk.
Tensor quantize_unit(const Tensor& t);

}  // namespace safectrl
