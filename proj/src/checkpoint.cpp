#include "hsiseg/checkpoint.hpp"

#include <map>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/error.hpp"

namespace hsiseg {

template <typename T>
void save_parameters(const ParameterList<T>& params, const std::filesystem::path& dir,
                     const nlohmann::json& meta) {
  std::filesystem::create_directories(dir);
  io::ByteWriter blob;
  nlohmann::json entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : params) {
    const auto values = p.tensor.values();
    std::vector<float> f32(values.begin(), values.end());
    blob.put_all(std::span<const float>(f32));
    entries.push_back({{"name", p.name},
                       {"shape", p.tensor.shape()},
                       {"offset", offset},
                       {"count", f32.size()}});
    offset += f32.size() * sizeof(float);
  }
  nlohmann::json manifest{{"format", "hsiseg-params"},
                          {"version", kCheckpointVersion},
                          {"dtype", "f32"},
                          {"byte_order", "little"},
                          {"tensors", entries},
                          {"meta", meta}};
  io::write_file(dir / "params.bin", blob.take());
  io::write_text(dir / "manifest.json", manifest.dump(2));
}

ParameterList<float> load_parameters(const std::filesystem::path& dir, nlohmann::json* meta) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(io::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what(), 0);
  }
  if (manifest.value("format", "") != "hsiseg-params") {
    throw FormatError("checkpoint manifest has wrong format tag", 0);
  }
  if (manifest.value("version", 0) != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(manifest.value("version", 0)), 0);
  }
  if (manifest.value("dtype", "") != "f32") throw FormatError("checkpoint dtype must be f32", 0);
  const auto bytes = io::read_file(dir / "params.bin");
  ParameterList<float> out;
  for (const auto& e : manifest.at("tensors")) {
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    auto shape = e.at("shape").get<ad::Shape>();
    if (ad::numel(shape) != count) throw FormatError("checkpoint tensor " + e.at("name").get<std::string>() + " has inconsistent shape", offset);
    if (offset > bytes.size() || bytes.size() - offset < count * sizeof(float)) {
      throw FormatError("checkpoint blob truncated for " + e.at("name").get<std::string>(), offset);
    }
    io::ByteReader r(std::span<const std::uint8_t>(bytes).subspan(offset, count * sizeof(float)));
    std::vector<float> values(count);
    r.get_all(std::span<float>(values), "tensor values");
    out.push_back({e.at("name").get<std::string>(), ad::Tensor<float>(std::move(shape), std::move(values))});
  }
  if (meta) *meta = manifest.value("meta", nlohmann::json::object());
  return out;
}

template <typename T>
void assign_parameters(const ParameterList<T>& target, const ParameterList<float>& source) {
  std::map<std::string, const ad::Tensor<float>*> by_name;
  for (const auto& s : source) by_name[s.name] = &s.tensor;
  for (const auto& t : target) {
    const auto it = by_name.find(t.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks tensor " + t.name, 0);
    if (it->second->shape() != t.tensor.shape()) {
      throw ShapeError("checkpoint tensor " + t.name + " has shape " + ad::shape_str(it->second->shape()) +
                       ", model expects " + ad::shape_str(t.tensor.shape()));
    }
    auto dst = ad::Tensor<T>(t.tensor).mutable_values();
    const auto src = it->second->values();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src[i]);
  }
}

template void save_parameters(const ParameterList<float>&, const std::filesystem::path&, const nlohmann::json&);
template void save_parameters(const ParameterList<double>&, const std::filesystem::path&, const nlohmann::json&);
template void assign_parameters(const ParameterList<float>&, const ParameterList<float>&);
template void assign_parameters(const ParameterList<double>&, const ParameterList<float>&);

}  // namespace hsiseg
