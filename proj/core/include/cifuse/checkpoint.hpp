#pragma once

#include <string>
#include <vector>

#include "cifuse/pruning.hpp"
#include "cifuse/tensor.hpp"

namespace cifuse {

// Checkpoint tensors are named, shape-tagged, little-endian 32-bit floats.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

void save_tensors(const std::string& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_tensors(const std::string& path);

// Per-layer keep bits, LSB-first, with layer names.
void save_masks(const std::string& path, const BinaryMaskSet& masks,
                const std::vector<std::string>& layer_names);
BinaryMaskSet load_masks(const std::string& path, std::vector<std::string>* layer_names);

// Snapshot of live (double) parameters into checkpoint tensors.
std::vector<NamedTensor> snapshot_params(const std::vector<ParamView>& params);

}  // namespace cifuse
