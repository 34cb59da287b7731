#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "unblur/errors.hpp"
#include "unblur/image.hpp"
#include "unblur/manifest.hpp"
#include "unblur/rng.hpp"
#include "unblur/tensor.hpp"

namespace unblur {

struct TrajectoryParams {
  int num_steps = 2000;
  double max_len = 10.0;          // per-axis displacement bound, pixels
  double p_impulsive = 0.005;     // per-step impulsive shake probability
  double shake_lo = 0.5;          // shake factor drawn once per trajectory
  double shake_hi = 1.0;          //   uniformly from [shake_lo, shake_hi]
  double impulse_factor = 20.0;
  uint64_t seed = 0;

  void validate() const {
    if (num_steps <= 0) throw ParamError("num_steps must be positive");
    if (!(max_len > 0)) throw ParamError("max_len must be positive");
    if (p_impulsive < 0 || p_impulsive > 1)
      throw ParamError("p_impulsive must be in [0,1]");
    if (shake_lo < 0 || shake_hi < shake_lo)
      throw ParamError("shake range must satisfy 0 <= lo <= hi");
    if (impulse_factor < 0) throw ParamError("impulse_factor must be >= 0");
  }
};

struct Trajectory {
  std::vector<std::array<double, 2>> points;
  TrajectoryParams params;
  int impulsive_steps = 0;  // diagnostic: how many steps got an impulse

  // largest per-axis |p_i - p_0|
  std::array<double, 2> extent() const {
    std::array<double, 2> e{0, 0};
    for (const auto& p : points)
      for (int a = 0; a < 2; ++a)
        e[a] = std::max(e[a], std::abs(p[a] - points[0][a]));
    return e;
  }
};

struct BlurKernel {
  int size = 0;                  // K, odd
  std::vector<double> weights;   // K*K row-major, nonnegative, sums to 1
  double raw_mass = 0;           // deposited mass before normalization

  double at(int r, int c) const {
    return weights[static_cast<size_t>(r) * size + c];
  }
  double sum() const {
    double s = 0;
    for (double w : weights) s += w;
    return s;
  }
  void validate() const {
    if (size < 1 || size % 2 == 0) throw ParamError("kernel size must be odd");
    if (static_cast<int>(weights.size()) != size * size)
      throw ShapeError("kernel weights/size mismatch");
    for (double w : weights)
      if (w < 0) throw ParamError("kernel has negative weight");
    if (std::abs(sum() - 1.0) > 1e-6)
      throw ParamError("kernel does not sum to 1");
  }
};

// Markov camera-shake: v_{t+1} = shake * (v_t + g_t), with g_t standard
// normal per axis, amplified by impulse_factor with probability
// p_impulsive. The trajectory is rescaled at the end so the larger axis
// extent does not exceed max_len.
inline Trajectory generate_trajectory(const TrajectoryParams& params) {
  params.validate();
  Rng rng(derive_seed(params.seed, "trajectory"));
  Trajectory traj;
  traj.params = params;
  traj.points.resize(static_cast<size_t>(params.num_steps));

  const double shake = rng.uniform(params.shake_lo, params.shake_hi);
  std::array<double, 2> pos{0, 0};
  std::array<double, 2> vel{0, 0};
  traj.points[0] = pos;
  for (int t = 1; t < params.num_steps; ++t) {
    const bool impulse = rng.bernoulli(params.p_impulsive);
    if (impulse) ++traj.impulsive_steps;
    const double amp = impulse ? params.impulse_factor : 1.0;
    for (int a = 0; a < 2; ++a) {
      vel[a] = shake * (vel[a] + amp * rng.normal());
      pos[a] += vel[a];
    }
    traj.points[static_cast<size_t>(t)] = pos;
  }

  const auto e = traj.extent();
  const double worst = std::max(e[0], e[1]);
  if (worst > params.max_len) {
    const double scale = params.max_len / worst;
    for (auto& p : traj.points)
      for (int a = 0; a < 2; ++a)
        p[a] = traj.points[0][a] + (p[a] - traj.points[0][a]) * scale;
    // points[0] is (0,0) so this is just p *= scale, written to keep the
    // first point fixed under rescaling.
  }
  return traj;
}

namespace detail {

// Splits unit mass bilinearly among the 4 cells around (x, y);
// throws instead of clipping when a receiving cell is off-canvas.
inline void deposit_bilinear(std::vector<double>& grid, int size, double x,
                             double y, double mass = 1.0) {
  const int ix = static_cast<int>(std::floor(x));
  const int iy = static_cast<int>(std::floor(y));
  const double fx = x - ix;
  const double fy = y - iy;
  const double w[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy,
                       fx * fy};
  const int cx[4] = {ix, ix + 1, ix, ix + 1};
  const int cy[4] = {iy, iy, iy + 1, iy + 1};
  for (int k = 0; k < 4; ++k) {
    if (w[k] == 0.0) continue;
    if (cx[k] < 0 || cx[k] >= size || cy[k] < 0 || cy[k] >= size)
      throw ParamError("trajectory point falls outside the kernel canvas");
    grid[static_cast<size_t>(cy[k]) * size + cx[k]] += mass * w[k];
  }
}

}  // namespace detail

// Sub-pixel rasterization of the trajectory onto a KxK canvas: bounding
// box centered, each point deposits unit mass bilinearly, then the grid
// is normalized to sum 1.
inline BlurKernel rasterize_kernel(const Trajectory& traj, int size) {
  if (size < 3 || size % 2 == 0)
    throw ParamError("kernel size must be an odd integer >= 3");
  if (traj.points.empty()) throw ParamError("empty trajectory");

  double min_x = traj.points[0][0], max_x = min_x;
  double min_y = traj.points[0][1], max_y = min_y;
  for (const auto& p : traj.points) {
    min_x = std::min(min_x, p[0]);
    max_x = std::max(max_x, p[0]);
    min_y = std::min(min_y, p[1]);
    max_y = std::max(max_y, p[1]);
  }
  if (std::max(max_x - min_x, max_y - min_y) >= size - 1)
    throw ParamError("trajectory extent exceeds the kernel canvas");

  const double cx = (min_x + max_x) / 2.0;
  const double cy = (min_y + max_y) / 2.0;
  const double center = (size - 1) / 2.0;

  BlurKernel k;
  k.size = size;
  k.weights.assign(static_cast<size_t>(size) * size, 0.0);
  for (const auto& p : traj.points)
    detail::deposit_bilinear(k.weights, size, p[0] - cx + center,
                             p[1] - cy + center);

  k.raw_mass = k.sum();
  if (k.raw_mass <= 0) throw NumericError("kernel mass is zero");
  for (auto& w : k.weights) w /= k.raw_mass;
  return k;
}

inline BlurKernel sample_kernel(const TrajectoryParams& params, int size) {
  return rasterize_kernel(generate_trajectory(params), size);
}

// Per-channel 2-d convolution with reflect (mirror, edge not repeated)
// padding. Accumulates in double and clamps the result to [-1,1]. The
// kernel is renormalized internally so a constant image stays constant.
template <typename T>
Tensor<T> apply_blur(const Tensor<T>& img, const BlurKernel& kernel) {
  kernel.validate();
  if (img.ndim() != 3) throw ShapeError("apply_blur expects a (C,H,W) tensor");
  const int C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const int K = kernel.size;
  if (K > H || K > W)
    throw ShapeError("kernel is larger than the image");

  std::vector<double> kw(kernel.weights);
  const double s = kernel.sum();
  for (auto& w : kw) w /= s;

  const int c0 = (K - 1) / 2;
  auto reflect = [](int i, int n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };

  Tensor<T> out({C, H, W});
  for (int ch = 0; ch < C; ++ch) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int u = 0; u < K; ++u) {
          const int yy = reflect(y - (u - c0), H);
          for (int v = 0; v < K; ++v) {
            const int xx = reflect(x - (v - c0), W);
            acc += kw[static_cast<size_t>(u) * K + v] *
                   static_cast<double>(img.at(ch, yy, xx));
          }
        }
        out.at(ch, y, x) = static_cast<T>(std::min(1.0, std::max(-1.0, acc)));
      }
    }
  }
  return out;
}

inline uint64_t kernel_checksum(const BlurKernel& k) {
  uint64_t h = fnv1a64(&k.size, sizeof(k.size));
  h = fnv1a64(k.weights.data(), k.weights.size() * sizeof(double), h);
  return h;
}

struct BlurredSetOptions {
  TrajectoryParams trajectory;  // .seed is the master seed
  int kernel_size = 31;
  int image_channels = 3;
};

// One freshly sampled kernel per image; per-image seeds derive from
// (master seed, image index) so parallel and serial runs agree.
inline Manifest build_blurred_set(const Manifest& input,
                                  const std::filesystem::path& out_dir,
                                  const BlurredSetOptions& opts) {
  opts.trajectory.validate();
  std::filesystem::create_directories(out_dir);
  Manifest out;
  out.base_dir = out_dir;

  size_t failures = 0;
  for (size_t i = 0; i < input.entries.size(); ++i) {
    const auto& entry = input.entries[i];
    TrajectoryParams p = opts.trajectory;
    p.seed = derive_seed(opts.trajectory.seed, "blur-image", i);
    try {
      const Tensor<float> img =
          load_image_tensor<float>(input.resolve(entry), opts.image_channels);
      const BlurKernel kernel = sample_kernel(p, opts.kernel_size);
      const Tensor<float> blurred = apply_blur(img, kernel);
      const std::string name =
          std::filesystem::path(entry.path).stem().string() + ".png";
      save_image_tensor(out_dir / name, blurred);
      out.entries.push_back(
          {name, "blurred", p.seed, to_hex(kernel_checksum(kernel))});
    } catch (const DataError&) {
      out.skipped.push_back(entry.path);
      ++failures;
    }
  }
  if (!input.entries.empty() && failures == input.entries.size())
    throw DataError("all images in the manifest failed to load");
  return out;
}

}  // namespace unblur
