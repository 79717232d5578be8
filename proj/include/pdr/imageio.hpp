#pragma once

#include <string>

#include "pdr/image.hpp"

namespace pdr::io {

// Binary PGM (P5, maxval <= 255). ASCII P2 is accepted on read.
Image read_pgm(const std::string& path);
void write_pgm(const std::string& path, const Image& img);

/// Foreground is any nonzero pixel; written as 0/255.
Mask read_mask_pgm(const std::string& path);
void write_mask_pgm(const std::string& path, const Mask& mask);

// Little-endian "DFLD": u32 width, u32 height, f32 scale, then per cell f32 dx, f32 dy.
DisplacementField read_field(const std::string& path);
void write_field(const std::string& path, const DisplacementField& field);

// Single-channel variant, magic "PHAS".
struct ScalarMap {
  Grid<double> values;
  double scale = 1.0;
};
ScalarMap read_phase(const std::string& path);
void write_phase(const std::string& path, const Grid<double>& phase, double scale = 1.0);

}  // namespace pdr::io
