#pragma once

#include <iosfwd>
#include <string>

#include "mc3d/tensor.hpp"

namespace mc3d {

// Binary tensor container, little-endian:
//   magic "MC3D" | version u8 = 1 | dtype u8 (0=f32, 1=f64, 2=u8) | ndim u8 |
//   1 padding byte | ndim x u64 extents | row-major payload
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is, const std::string& name);

void save_tensor(const Tensor& t, const std::string& path);
Tensor load_tensor(const std::string& path);

}  // namespace mc3d
