#include "hsiseg/cube.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/error.hpp"

namespace hsiseg {

namespace {

constexpr double kMinSpectrumNorm = 1e-12;

void check_same_length(std::span<const float> a, std::span<const float> b,
                       const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": spectra have different lengths (" +
                     std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
}

}  // namespace

HsiCube::HsiCube(std::size_t width, std::size_t height, std::size_t channels,
                 std::vector<float> wavelengths, std::vector<float> data)
    : width_(width),
      height_(height),
      channels_(channels),
      wavelengths_(std::move(wavelengths)),
      data_(std::move(data)) {
  if (width_ == 0 || height_ == 0 || channels_ == 0) {
    throw ShapeError("HsiCube: dimensions must be positive");
  }
  if (wavelengths_.size() != channels_) {
    throw ShapeError("HsiCube: expected " + std::to_string(channels_) +
                     " wavelengths, got " + std::to_string(wavelengths_.size()));
  }
  if (data_.size() != width_ * height_ * channels_) {
    throw ShapeError("HsiCube: data length " + std::to_string(data_.size()) +
                     " != width*height*channels");
  }
  for (std::size_t i = 1; i < wavelengths_.size(); ++i) {
    if (!(wavelengths_[i] > wavelengths_[i - 1])) {
      throw DomainError("HsiCube: wavelengths must be strictly increasing");
    }
  }
  for (float v : data_) {
    if (!std::isfinite(v)) throw DomainError("HsiCube: non-finite value");
  }
}

HsiCube HsiCube::zeros(std::size_t width, std::size_t height,
                       std::size_t channels, float lo_nm, float hi_nm) {
  std::vector<float> wl(channels);
  for (std::size_t i = 0; i < channels; ++i) {
    wl[i] = channels == 1 ? lo_nm
                          : lo_nm + (hi_nm - lo_nm) * static_cast<float>(i) /
                                        static_cast<float>(channels - 1);
  }
  return HsiCube(width, height, channels, std::move(wl),
                 std::vector<float>(width * height * channels, 0.0F));
}

std::size_t HsiCube::clamp_unit() {
  std::size_t changed = 0;
  for (float& v : data_) {
    const float c = std::clamp(v, 0.0F, 1.0F);
    if (c != v) {
      v = c;
      ++changed;
    }
  }
  return changed;
}

double sam_distance(std::span<const float> a, std::span<const float> b) {
  check_same_length(a, b, "sam_distance");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kMinSpectrumNorm) throw DomainError("sam_distance: operand a has zero norm");
  if (nb < kMinSpectrumNorm) throw DomainError("sam_distance: operand b has zero norm");
  return std::acos(std::clamp(dot / (na * nb), -1.0, 1.0));
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  check_same_length(a, b, "l2_distance");
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    sum += d * d;
  }
  return std::sqrt(sum);
}

std::vector<std::uint8_t> encode_cube(const HsiCube& cube) {
  io::ByteWriter w;
  w.magic("HSC1");
  w.put(static_cast<std::uint32_t>(cube.width()));
  w.put(static_cast<std::uint32_t>(cube.height()));
  w.put(static_cast<std::uint32_t>(cube.channels()));
  w.put_all(cube.wavelengths());
  w.put_all(cube.data());
  return w.take();
}

CubeLoadResult decode_cube(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("HSC1", "HSC1 cube");
  const auto width = r.get<std::uint32_t>("width");
  const auto height = r.get<std::uint32_t>("height");
  const auto channels = r.get<std::uint32_t>("channels");
  if (width == 0 || height == 0 || channels == 0) {
    throw FormatError("HSC1 header has a zero dimension", 4);
  }
  // three u32 factors can overflow 64 bits
  const unsigned __int128 wide = static_cast<unsigned __int128>(width) * height * channels;
  constexpr std::uint64_t kMaxValues =
      std::numeric_limits<std::size_t>::max() / sizeof(float);
  if (wide > kMaxValues / 2) {
    throw FormatError("HSC1 dimensions overflow", 4);
  }
  const auto values = static_cast<std::uint64_t>(wide);
  // check before allocating: a corrupt header must not trigger a huge allocation
  const std::uint64_t need = (values + channels) * sizeof(float);
  if (need > r.remaining()) {
    throw FormatError("HSC1 truncated: header declares " + std::to_string(need) + " bytes of data, " +
                          std::to_string(r.remaining()) + " present",
                      r.offset() + r.remaining());
  }
  std::vector<float> wl(channels);
  r.get_all(std::span<float>(wl), "wavelength table");
  const std::size_t payload_at = r.offset();
  std::vector<float> data(values);
  r.get_all(std::span<float>(data), "payload");
  if (r.remaining() != 0) {
    throw FormatError("HSC1 has " + std::to_string(r.remaining()) +
                          " trailing bytes",
                      r.offset());
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (!std::isfinite(data[i])) {
      throw FormatError("HSC1 payload contains a non-finite value",
                        payload_at + i * sizeof(float));
    }
  }
  CubeLoadResult out;
  out.cube = HsiCube(width, height, channels, std::move(wl), std::move(data));
  out.clamped = out.cube.clamp_unit();
  return out;
}

CubeLoadResult load_cube(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_cube(bytes);
}

void save_cube(const HsiCube& cube, const std::filesystem::path& path) {
  io::write_file(path, encode_cube(cube));
}

}  // namespace hsiseg
