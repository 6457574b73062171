#include "hsiseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "hsiseg/binary_io.hpp"
#include "hsiseg/error.hpp"
#include "hsiseg/rng.hpp"

namespace hsiseg {

void PhantomSpec::validate() const {
  if (width < 16 || height < 16) throw ConfigError("PhantomSpec: image must be at least 16x16");
  if (channels < 2 || channels > 512) throw ConfigError("PhantomSpec: channels must lie in [2, 512]");
  if (!(hi_nm > lo_nm)) throw ConfigError("PhantomSpec: hi_nm must exceed lo_nm");
  if (margin < 0.0 || margin >= 0.4) throw ConfigError("PhantomSpec: margin must lie in [0, 0.4)");
  if (noise_sigma < 0.0) throw ConfigError("PhantomSpec: noise_sigma must be >= 0");
  if (min_separation <= 0.0 || min_separation > 1.0) {
    throw ConfigError("PhantomSpec: min_separation must lie in (0, 1]");
  }
  if (max_image_shift < 0.0) throw ConfigError("PhantomSpec: max_image_shift must be >= 0");
  if (impostor_radius <= 0.0) throw ConfigError("PhantomSpec: impostor_radius must be > 0");
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = {{"width", s.width},
       {"height", s.height},
       {"channels", s.channels},
       {"lo_nm", s.lo_nm},
       {"hi_nm", s.hi_nm},
       {"margin", s.margin},
       {"tumor_blobs", s.tumor_blobs},
       {"noise_sigma", s.noise_sigma},
       {"min_separation", s.min_separation},
       {"saturated_blobs", s.saturated_blobs},
       {"dark_blobs", s.dark_blobs},
       {"vessels", s.vessels},
       {"impostors", s.impostors},
       {"impostor_radius", s.impostor_radius},
       {"max_image_shift", s.max_image_shift}};
}

void from_json(const nlohmann::json& j, PhantomSpec& s) {
  PhantomSpec d;
  s.width = j.value("width", d.width);
  s.height = j.value("height", d.height);
  s.channels = j.value("channels", d.channels);
  s.lo_nm = j.value("lo_nm", d.lo_nm);
  s.hi_nm = j.value("hi_nm", d.hi_nm);
  s.margin = j.value("margin", d.margin);
  s.tumor_blobs = j.value("tumor_blobs", d.tumor_blobs);
  s.noise_sigma = j.value("noise_sigma", d.noise_sigma);
  s.min_separation = j.value("min_separation", d.min_separation);
  s.saturated_blobs = j.value("saturated_blobs", d.saturated_blobs);
  s.dark_blobs = j.value("dark_blobs", d.dark_blobs);
  s.vessels = j.value("vessels", d.vessels);
  s.impostors = j.value("impostors", d.impostors);
  s.impostor_radius = j.value("impostor_radius", d.impostor_radius);
  s.max_image_shift = j.value("max_image_shift", d.max_image_shift);
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::vector<double> normalized_axis(std::span<const float> wl) {
  std::vector<double> t(wl.size());
  const double lo = wl.front();
  const double span = std::max(1e-9, static_cast<double>(wl.back()) - lo);
  for (std::size_t k = 0; k < wl.size(); ++k) t[k] = (wl[k] - lo) / span;
  return t;
}

std::vector<float> draw_spectrum(const std::vector<double>& t, Rng& rng) {
  const double base = uniform(rng, 0.1, 0.25);
  const int bumps = std::uniform_int_distribution<int>(2, 3)(rng);
  std::vector<double> s(t.size(), base);
  for (int b = 0; b < bumps; ++b) {
    const double amp = uniform(rng, 0.1, 0.45);
    const double mu = uniform(rng, 0.0, 1.0);
    const double w = uniform(rng, 0.08, 0.25);
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double z = (t[k] - mu) / w;
      s[k] += amp * std::exp(-0.5 * z * z);
    }
  }
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(s.size());
  const double target = uniform(rng, 0.3, 0.34);
  std::vector<float> out(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    out[k] = static_cast<float>(std::min(0.9, s[k] * target / mean));
  }
  return out;
}

struct Disc {
  double cx, cy, r;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= r * r;
  }
};

}  // namespace

Endmembers draw_endmembers(std::span<const float> wavelengths, double min_separation,
                           std::uint64_t seed) {
  const auto t = normalized_axis(wavelengths);
  Rng rng(splitmix64(seed ^ 0xE17DULL));
  for (int attempt = 0; attempt < 100; ++attempt) {
    Endmembers e;
    for (auto& s : e) s = draw_spectrum(t, rng);
    bool ok = true;
    for (int a = 0; a < kNumClasses && ok; ++a) {
      for (int b = a + 1; b < kNumClasses && ok; ++b) {
        ok = sam_distance(e[a], e[b]) >= min_separation;
      }
    }
    if (ok) return e;
  }
  throw DomainError("draw_endmembers: no draw reached SAM separation " +
                    std::to_string(min_separation) + " within 100 attempts");
}

Endmembers shift_endmembers(const Endmembers& base, double max_sam, std::uint64_t seed) {
  Rng rng(splitmix64(seed ^ 0x5A1F7ULL));
  Endmembers out;
  for (int c = 0; c < kNumClasses; ++c) {
    const std::size_t n = base[c].size();
    const double freq = uniform(rng, 0.5, 1.5);
    const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double gain = uniform(rng, 0.92, 1.08);
    double amp = uniform(rng, 0.02, 0.1);
    for (;;) {
      out[c].resize(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double t = n > 1 ? static_cast<double>(k) / static_cast<double>(n - 1) : 0.0;
        const double f = gain * (1.0 + amp * std::sin(2.0 * std::numbers::pi * freq * t + phase));
        out[c][k] = static_cast<float>(std::min(1.0, base[c][k] * f));
      }
      if (sam_distance(out[c], base[c]) <= max_sam || amp < 1e-9) break;
      amp *= 0.5;
    }
  }
  return out;
}

Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed, const Endmembers* endmembers) {
  spec.validate();
  const std::size_t w = spec.width, h = spec.height, c = spec.channels;
  Phantom ph;
  ph.cube = HsiCube::zeros(w, h, c, spec.lo_nm, spec.hi_nm);
  ph.endmembers = endmembers ? *endmembers
                             : draw_endmembers(ph.cube.wavelengths(), spec.min_separation, seed);
  for (const auto& e : ph.endmembers) {
    if (e.size() != c) throw ShapeError("generate_phantom: endmember length does not match channels");
  }
  Rng rng(splitmix64(seed));

  // Tissue: a superellipse inside the background frame with a wavy rim.
  const double cx = 0.5 * static_cast<double>(w), cy = 0.5 * static_cast<double>(h);
  const double ax = (0.5 - spec.margin) * static_cast<double>(w);
  const double ay = (0.5 - spec.margin) * static_cast<double>(h);
  const double wave_amp = uniform(rng, 0.03, 0.08);
  const int wave_freq = std::uniform_int_distribution<int>(3, 6)(rng);
  const double wave_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  std::vector<Disc> tumor;
  const double short_side = static_cast<double>(std::min(w, h));
  for (std::size_t b = 0; b < spec.tumor_blobs; ++b) {
    const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double rad = uniform(rng, 0.0, 0.6);
    tumor.push_back({cx + rad * ax * std::cos(ang), cy + rad * ay * std::sin(ang),
                     uniform(rng, 0.12, 0.2) * short_side});
  }

  ph.labels.assign(w * h, static_cast<std::uint8_t>(kBackground));
  ph.degradation.assign(w * h, static_cast<std::uint8_t>(Degradation::kClean));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - cx) / ax;
      const double dy = (static_cast<double>(y) + 0.5 - cy) / ay;
      const double theta = std::atan2(dy, dx);
      const double rim = 1.0 + wave_amp * std::sin(wave_freq * theta + wave_phase);
      if (std::pow(dx * dx, 2.0) + std::pow(dy * dy, 2.0) > std::pow(rim, 4.0)) continue;
      double field = 0.0;
      for (const auto& d : tumor) {
        const double ex = static_cast<double>(x) - d.cx, ey = static_cast<double>(y) - d.cy;
        field += std::exp(-(ex * ex + ey * ey) / (2.0 * d.r * d.r));
      }
      ph.labels[y * w + x] = static_cast<std::uint8_t>(field > 0.5 ? kTumor : kHealthy);
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  auto data = ph.cube.mutable_data();
  for (std::size_t p = 0; p < w * h; ++p) {
    const auto& e = ph.endmembers[ph.labels[p]];
    for (std::size_t k = 0; k < c; ++k) {
      double v = e[k];
      if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
      data[p * c + k] = static_cast<float>(v);
    }
  }

  std::vector<std::size_t> tissue;
  for (std::size_t p = 0; p < w * h; ++p) {
    if (ph.labels[p] != kBackground) tissue.push_back(p);
  }
  auto random_tissue_pixel = [&]() -> std::size_t {
    if (tissue.empty()) return (h / 2) * w + w / 2;
    return tissue[std::uniform_int_distribution<std::size_t>(0, tissue.size() - 1)(rng)];
  };
  auto mark = [&](std::size_t p, Degradation d) { ph.degradation[p] = static_cast<std::uint8_t>(d); };

  // Vessels: thick random-walk stripes with strongly varying reflectance.
  for (std::size_t v = 0; v < spec.vessels; ++v) {
    const std::size_t start = random_tissue_pixel();
    double px = static_cast<double>(start % w), py = static_cast<double>(start / w);
    double heading = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double half_width = uniform(rng, 1.5, 2.5);
    const auto steps = static_cast<std::size_t>(0.6 * short_side);
    for (std::size_t s = 0; s < steps; ++s) {
      heading += uniform(rng, -0.15, 0.15);
      px += std::cos(heading);
      py += std::sin(heading);
      const int r = static_cast<int>(std::ceil(half_width));
      for (int oy = -r; oy <= r; ++oy) {
        for (int ox = -r; ox <= r; ++ox) {
          if (ox * ox + oy * oy > half_width * half_width) continue;
          const long qx = std::lround(px) + ox, qy = std::lround(py) + oy;
          if (qx < 0 || qy < 0 || qx >= static_cast<long>(w) || qy >= static_cast<long>(h)) continue;
          const auto q = static_cast<std::size_t>(qy) * w + static_cast<std::size_t>(qx);
          if (ph.labels[q] == kBackground || ph.degradation[q] != 0) continue;
          const double gain = uniform(rng, 0.3, 1.4);
          const auto& e = ph.endmembers[ph.labels[q]];
          for (std::size_t k = 0; k < c; ++k) {
            data[q * c + k] = static_cast<float>(e[k] * gain + 0.12 * noise(rng));
          }
          mark(q, Degradation::kVessel);
        }
      }
    }
  }

  auto paint_disc = [&](const Disc& d, auto&& fn) {
    const long x0 = std::max(0L, static_cast<long>(std::floor(d.cx - d.r)));
    const long x1 = std::min(static_cast<long>(w) - 1, static_cast<long>(std::ceil(d.cx + d.r)));
    const long y0 = std::max(0L, static_cast<long>(std::floor(d.cy - d.r)));
    const long y1 = std::min(static_cast<long>(h) - 1, static_cast<long>(std::ceil(d.cy + d.r)));
    for (long y = y0; y <= y1; ++y) {
      for (long x = x0; x <= x1; ++x) {
        if (d.contains(static_cast<double>(x), static_cast<double>(y))) {
          fn(static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x));
        }
      }
    }
  };

  for (std::size_t b = 0; b < spec.saturated_blobs; ++b) {
    const std::size_t p = random_tissue_pixel();
    const Disc d{static_cast<double>(p % w), static_cast<double>(p / w), uniform(rng, 10.0, 14.0)};
    paint_disc(d, [&](std::size_t q) {
      for (std::size_t k = 0; k < c; ++k) {
        data[q * c + k] = static_cast<float>(1.0 - std::abs(spec.noise_sigma * noise(rng)));
      }
      mark(q, Degradation::kSaturated);
    });
  }
  for (std::size_t b = 0; b < spec.dark_blobs; ++b) {
    const std::size_t p = random_tissue_pixel();
    const Disc d{static_cast<double>(p % w), static_cast<double>(p / w), uniform(rng, 10.0, 14.0)};
    paint_disc(d, [&](std::size_t q) {
      const auto& e = ph.endmembers[ph.labels[q]];
      for (std::size_t k = 0; k < c; ++k) {
        data[q * c + k] = static_cast<float>(0.03 * e[k] + 0.1 * spec.noise_sigma * noise(rng));
      }
      mark(q, Degradation::kDark);
    });
  }

  // Impostors: small discs that look like the other tissue class.
  for (std::size_t b = 0; b < spec.impostors; ++b) {
    std::size_t p = 0;
    bool found = false;
    for (int attempt = 0; attempt < 50 && !found; ++attempt) {
      p = random_tissue_pixel();
      found = ph.degradation[p] == 0;
    }
    if (!found) continue;
    const int host = ph.labels[p];
    const int other = host == kTumor ? kHealthy : kTumor;
    const Disc d{static_cast<double>(p % w), static_cast<double>(p / w), spec.impostor_radius};
    paint_disc(d, [&](std::size_t q) {
      if (ph.labels[q] != host || ph.degradation[q] != 0) return;
      for (std::size_t k = 0; k < c; ++k) {
        double v = ph.endmembers[other][k];
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise(rng);
        data[q * c + k] = static_cast<float>(v);
      }
      mark(q, Degradation::kImpostor);
    });
  }

  ph.cube.clamp_unit();
  return ph;
}

SynthDataset generate_dataset(std::size_t n_images, const PhantomSpec& spec, std::uint64_t seed) {
  if (n_images < 3) throw ConfigError("generate_dataset: need at least 3 images");
  spec.validate();
  SynthDataset ds;
  const HsiCube axis = HsiCube::zeros(1, 1, spec.channels, spec.lo_nm, spec.hi_nm);
  ds.base = draw_endmembers(axis.wavelengths(), spec.min_separation, derive_seed({seed, 0xBA5EULL}));
  // Each image stays within half the budget of the base, so any two images
  // stay within the full budget (the spectral angle is a metric).
  const double per_image = 0.5 * spec.max_image_shift;
  for (std::size_t i = 0; i < n_images; ++i) {
    const std::uint64_t s = derive_seed({seed, i});
    ds.seeds.push_back(s);
    const Endmembers shifted = shift_endmembers(ds.base, per_image, s);
    ds.images.push_back(generate_phantom(spec, s, &shifted));
  }
  for (std::size_t a = 0; a < n_images; ++a) {
    for (std::size_t b = a + 1; b < n_images; ++b) {
      for (int c = 0; c < kNumClasses; ++c) {
        ds.max_pairwise_shift = std::max(
            ds.max_pairwise_shift, sam_distance(ds.images[a].endmembers[c], ds.images[b].endmembers[c]));
      }
    }
  }
  return ds;
}

nlohmann::json write_dataset(const SynthDataset& ds, const PhantomSpec& spec, std::uint64_t seed,
                             const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03zu", i);
    const auto& ph = ds.images[i];
    save_cube(ph.cube, dir / (std::string(name) + ".hsc"));
    save_raster(ph.labels, ph.cube.width(), ph.cube.height(), dir / (std::string(name) + ".labels.hsr"));
    save_raster(ph.degradation, ph.cube.width(), ph.cube.height(),
                dir / (std::string(name) + ".degradation.hsr"));
    images.push_back({{"name", name},
                      {"seed", ds.seeds[i]},
                      {"cube", std::string(name) + ".hsc"},
                      {"labels", std::string(name) + ".labels.hsr"},
                      {"degradation", std::string(name) + ".degradation.hsr"},
                      {"width", ph.cube.width()},
                      {"height", ph.cube.height()}});
  }
  nlohmann::json manifest{{"format", "hsiseg-synth"},
                          {"version", 1},
                          {"seed", seed},
                          {"spec", spec},
                          {"classes", {"tumor", "healthy", "background"}},
                          {"max_pairwise_shift", ds.max_pairwise_shift},
                          {"images", images}};
  io::write_text(dir / "manifest.json", manifest.dump(2));
  return manifest;
}

void save_raster(std::span<const std::uint8_t> values, std::size_t width, std::size_t height,
                 const std::filesystem::path& path) {
  if (values.size() != width * height) throw ShapeError("save_raster: size does not match width*height");
  io::ByteWriter wr;
  wr.magic("HSR1");
  wr.put<std::uint32_t>(static_cast<std::uint32_t>(width));
  wr.put<std::uint32_t>(static_cast<std::uint32_t>(height));
  wr.put_all(values);
  io::write_file(path, wr.take());
}

Raster load_raster(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader rd(bytes);
  rd.expect_magic("HSR1", "raster");
  Raster r;
  r.width = rd.get<std::uint32_t>("width");
  r.height = rd.get<std::uint32_t>("height");
  if (r.width == 0 || r.height == 0) throw FormatError("raster: zero dimension", rd.offset());
  r.values.resize(r.width * r.height);
  rd.get_all(std::span<std::uint8_t>(r.values), "raster values");
  if (rd.remaining() != 0) throw FormatError("raster: trailing bytes", rd.offset());
  return r;
}

}  // namespace hsiseg
