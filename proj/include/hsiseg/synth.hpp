#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hsiseg/classes.hpp"
#include "hsiseg/cube.hpp"

namespace hsiseg {

// Values of the degradation mask.
enum class Degradation : std::uint8_t {
  kClean = 0,
  kSaturated = 1,
  kDark = 2,
  kVessel = 3,
  kImpostor = 4,  // spectrum of another tissue class, label unchanged
};

struct PhantomSpec {
  std::size_t width = 256;
  std::size_t height = 256;
  std::size_t channels = 32;
  float lo_nm = 468.0F;
  float hi_nm = 790.0F;
  double margin = 0.08;          // background frame, fraction of each side
  std::size_t tumor_blobs = 3;
  double noise_sigma = 0.02;
  double min_separation = 0.15;  // pairwise endmember SAM, radians
  std::size_t saturated_blobs = 1;
  std::size_t dark_blobs = 1;
  std::size_t vessels = 1;
  std::size_t impostors = 0;
  double impostor_radius = 8.0;
  double max_image_shift = 0.05;  // same-class endmember SAM between any two images

  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);
void from_json(const nlohmann::json& j, PhantomSpec& s);

using Endmembers = std::array<std::vector<float>, kNumClasses>;

struct Phantom {
  HsiCube cube;
  std::vector<std::uint8_t> labels;       // per pixel class id
  std::vector<std::uint8_t> degradation;  // per pixel Degradation
  Endmembers endmembers;
};

// Smooth spectra (a baseline plus 2-3 Gaussian bumps) whose pairwise SAM is
// at least `min_separation`. Throws DomainError after 100 failed draws.
Endmembers draw_endmembers(std::span<const float> wavelengths, double min_separation,
                           std::uint64_t seed);

// Smooth multiplicative perturbation of every endmember with SAM to the
// original of at most max_sam.
Endmembers shift_endmembers(const Endmembers& base, double max_sam, std::uint64_t seed);

// Layout, spectra, noise and degradations all follow from `seed`. When
// `endmembers` is null they are drawn from the seed too.
Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed,
                         const Endmembers* endmembers = nullptr);

struct SynthDataset {
  std::vector<Phantom> images;
  std::vector<std::uint64_t> seeds;
  Endmembers base;
  double max_pairwise_shift = 0.0;  // measured over all image pairs and classes
};

// Independent layouts sharing base endmembers, each image with its own small
// spectral shift. Throws ConfigError for n < 3.
SynthDataset generate_dataset(std::size_t n_images, const PhantomSpec& spec, std::uint64_t seed);

// Writes <dir>/img_XXX.hsc, .labels.hsr, .degradation.hsr and manifest.json.
nlohmann::json write_dataset(const SynthDataset& ds, const PhantomSpec& spec,
                             std::uint64_t seed, const std::filesystem::path& dir);

// "HSR1", u32 width, u32 height, then one byte per pixel.
void save_raster(std::span<const std::uint8_t> values, std::size_t width, std::size_t height,
                 const std::filesystem::path& path);

struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;
};

Raster load_raster(const std::filesystem::path& path);

}  // namespace hsiseg
