#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pmae/tensor.hpp"

namespace pmae {

// Ordered so that files are byte-identical when the producer emits tensors in
// a fixed order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Layout: magic "PMAE", version u32, count u32, then per tensor:
// name length u16 + UTF-8 bytes, rank u8, extents u64 each, dtype u8
// (0 = f32, 1 = f64), raw little-endian values.
void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

// Lookup helper; throws IoError when absent.
const Tensor& find_tensor(const NamedTensors& tensors, const std::string& name);

} // namespace pmae
