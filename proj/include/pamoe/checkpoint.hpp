// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint of named tensors.
//
// Layout (little-endian):
//   "PAMOECK1"                 8 bytes
//   u64 tensor count
//   per tensor: u64 name length, name bytes, i64 rows, i64 cols,
//               rows*cols f64 values in column-major order
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pamoe/autodiff.hpp"

namespace pamoe {

void save_checkpoint(std::ostream& out, const std::vector<ad::Tensor*>& tensors);
void save_checkpoint(const std::string& path, const std::vector<ad::Tensor*>& tensors);

/// Fills every tensor from the entry with the same name. Throws
/// std::runtime_error on a malformed file, a missing name or a shape mismatch.
void load_checkpoint(std::istream& in, const std::vector<ad::Tensor*>& tensors);
void load_checkpoint(const std::string& path, const std::vector<ad::Tensor*>& tensors);

}  // namespace pamoe
