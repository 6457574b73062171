#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/autodiff.hpp"

namespace hsiseg {

template <typename T>
struct NamedTensor {
  std::string name;
  ad::Tensor<T> tensor;
};

template <typename T>
using ParameterList = std::vector<NamedTensor<T>>;

// Checkpoint directory: manifest.json (format, version, dtype, per-tensor
// name/shape/offset/count) plus params.bin holding little-endian f32 values
// in manifest order. `meta` is stored verbatim under "meta".
inline constexpr int kCheckpointVersion = 1;

template <typename T>
void save_parameters(const ParameterList<T>& params, const std::filesystem::path& dir,
                     const nlohmann::json& meta = nlohmann::json::object());

// Fresh tensors as stored; throws FormatError on a bad manifest or blob.
ParameterList<float> load_parameters(const std::filesystem::path& dir,
                                     nlohmann::json* meta = nullptr);

// Copies values by name into `target`. Every target entry must be present
// in `source` with the same shape.
template <typename T>
void assign_parameters(const ParameterList<T>& target, const ParameterList<float>& source);

}  // namespace hsiseg
