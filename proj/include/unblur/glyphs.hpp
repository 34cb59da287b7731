#pragma once

#include <array>
#include <cmath>
#include <filesystem>

#include "unblur/image.hpp"
#include "unblur/manifest.hpp"
#include "unblur/rng.hpp"
#include "unblur/tensor.hpp"

namespace unblur {

// Synthetic "glyph" images: dark anti-aliased strokes on a light
// background. Crisp edges make the sharp/blurred domain gap obvious at
// desk scale, which is what the toy corpora need.
template <typename T>
Tensor<T> render_glyph(uint64_t seed, int size, int channels = 3) {
  Rng rng(derive_seed(seed, "glyph"));
  const double bg = rng.uniform(0.75, 0.95);
  Tensor<T> img({channels, size, size});

  struct Stroke {
    double x0, y0, x1, y1, half_width, ink;
  };
  const int n_strokes = 2 + rng.uniform_int(3);
  std::vector<Stroke> strokes;
  for (int i = 0; i < n_strokes; ++i) {
    Stroke st;
    st.x0 = rng.uniform(0.1, 0.9) * size;
    st.y0 = rng.uniform(0.1, 0.9) * size;
    const double angle = rng.uniform(0, 2 * M_PI);
    const double len = rng.uniform(0.3, 0.8) * size;
    st.x1 = std::clamp(st.x0 + len * std::cos(angle), 0.05 * size, 0.95 * size);
    st.y1 = std::clamp(st.y0 + len * std::sin(angle), 0.05 * size, 0.95 * size);
    st.half_width = rng.uniform(0.9, 1.8);
    st.ink = rng.uniform(-0.95, -0.55);
    strokes.push_back(st);
  }

  auto dist_to_segment = [](double px, double py, const Stroke& s) {
    const double vx = s.x1 - s.x0, vy = s.y1 - s.y0;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0 ? ((px - s.x0) * vx + (py - s.y0) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (s.x0 + t * vx);
    const double dy = py - (s.y0 + t * vy);
    return std::sqrt(dx * dx + dy * dy);
  };

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double value = bg;
      for (const auto& s : strokes) {
        const double d = dist_to_segment(x + 0.5, y + 0.5, s);
        const double cover = std::clamp(s.half_width - d + 0.5, 0.0, 1.0);
        value = value + cover * (s.ink - value);
      }
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = static_cast<T>(value);
    }
  }
  return img;
}

// Writes n glyph PNGs plus a sharp manifest; returns the manifest path.
inline std::filesystem::path make_glyph_corpus(const std::filesystem::path& dir,
                                               int count, int size,
                                               uint64_t seed,
                                               int channels = 3) {
  std::filesystem::create_directories(dir);
  Manifest m;
  m.base_dir = dir;
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "glyph_%04d.png", i);
    save_image_tensor(dir / name,
                      render_glyph<float>(derive_seed(seed, "corpus", i), size,
                                          channels));
    m.entries.push_back({name, "sharp", 0, "0"});
  }
  const auto manifest_path = dir / "manifest.tsv";
  write_manifest(manifest_path, m);
  return manifest_path;
}

}  // namespace unblur
