#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace hsiseg {

// Hyperspectral data volume. Values are stored channel-last: the spectrum of
// pixel (x, y) occupies data[(y * width + x) * channels, +channels).
class HsiCube {
 public:
  HsiCube() = default;

  // Validates sizes, strictly increasing wavelengths and finite values.
  // Values are NOT clamped here; load_cube() clamps.
  HsiCube(std::size_t width, std::size_t height, std::size_t channels,
          std::vector<float> wavelengths, std::vector<float> data);

  // Zero-filled cube with evenly spaced wavelengths over [lo_nm, hi_nm].
  static HsiCube zeros(std::size_t width, std::size_t height,
                       std::size_t channels, float lo_nm = 468.0F,
                       float hi_nm = 790.0F);

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  std::size_t channels() const { return channels_; }
  std::size_t num_pixels() const { return width_ * height_; }

  std::span<const float> wavelengths() const { return wavelengths_; }
  std::span<const float> data() const { return data_; }
  std::span<float> mutable_data() { return data_; }

  std::span<const float> spectrum(std::size_t pixel) const {
    return {data_.data() + pixel * channels_, channels_};
  }
  std::span<const float> spectrum(std::size_t x, std::size_t y) const {
    return spectrum(y * width_ + x);
  }
  std::span<float> mutable_spectrum(std::size_t pixel) {
    return {data_.data() + pixel * channels_, channels_};
  }

  float at(std::size_t x, std::size_t y, std::size_t band) const {
    return data_[(y * width_ + x) * channels_ + band];
  }

  // Clamps every value into [0, 1]; returns how many values changed.
  std::size_t clamp_unit();

  friend bool operator==(const HsiCube&, const HsiCube&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> wavelengths_;
  std::vector<float> data_;
};

// Spectral angle in radians, in [0, pi]. Throws DomainError if either
// spectrum has norm below 1e-12 and ShapeError on length mismatch.
double sam_distance(std::span<const float> a, std::span<const float> b);

// Euclidean distance between two spectra. Throws ShapeError on length
// mismatch.
double l2_distance(std::span<const float> a, std::span<const float> b);

// HSC1 binary format: "HSC1", u32 width, u32 height, u32 channels (all
// little-endian), channels x f32 wavelengths, then width*height*channels f32
// payload in channel-last order.
struct CubeLoadResult {
  HsiCube cube;
  std::size_t clamped = 0;  // payload values pulled back into [0, 1]
};

CubeLoadResult load_cube(const std::filesystem::path& path);
void save_cube(const HsiCube& cube, const std::filesystem::path& path);

// In-memory variants used by the file functions and the tests.
CubeLoadResult decode_cube(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_cube(const HsiCube& cube);

}  // namespace hsiseg
