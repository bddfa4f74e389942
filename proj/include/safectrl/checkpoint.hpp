#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "safectrl/tensor.hpp"

namespace safectrl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Order matters: files are compared byte-for-byte across runs, so callers
// must pass tensors in a fixed order.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Binary tensor container: magic "SCTL", version u32 LE, count u32 LE, then
// per tensor: name length u16 LE, UTF-8 name, rank u8, dims u32 LE, f32 LE
// data. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const NamedTensors& tensors);
NamedTensors load_checkpoint(const std::string& path);

// Convenience: find a tensor by name or fail loudly.
const Tensor& checkpoint_get(const NamedTensors& tensors, const std::string& name);

}  // namespace safectrl
