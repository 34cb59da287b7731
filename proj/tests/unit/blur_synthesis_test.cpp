#include <catch2/catch_amalgamated.hpp>

#include "unblur/blur_synthesis.hpp"
#include "unblur/glyphs.hpp"
#include "support/test_util.hpp"

using namespace unblur;

TEST_CASE("zero-dynamics trajectory stays at the origin") {
  TrajectoryParams p;
  p.num_steps = 100;
  p.shake_lo = p.shake_hi = 0.0;
  p.p_impulsive = 0.0;
  p.seed = 5;
  const Trajectory t = generate_trajectory(p);
  REQUIRE(t.points.size() == 100);
  for (const auto& pt : t.points) {
    REQUIRE(pt[0] == 0.0);
    REQUIRE(pt[1] == 0.0);
  }
}

TEST_CASE("trajectories are deterministic for a fixed seed") {
  TrajectoryParams p;
  p.seed = 1234;
  const Trajectory a = generate_trajectory(p);
  const Trajectory b = generate_trajectory(p);
  REQUIRE(a.points == b.points);
  const auto e = a.extent();
  REQUIRE(e[0] <= p.max_len + 1e-12);
  REQUIRE(e[1] <= p.max_len + 1e-12);
}

TEST_CASE("impulsive shake frequency matches p_impulsive") {
  TrajectoryParams p;
  p.num_steps = 400;  // 10^4 trajectories at default step count is overkill
  int64_t impulses = 0, steps = 0;
  for (int i = 0; i < 10000; ++i) {
    p.seed = derive_seed(77, "impulse-mc", i);
    const Trajectory t = generate_trajectory(p);
    impulses += t.impulsive_steps;
    steps += p.num_steps - 1;
  }
  const double fraction = static_cast<double>(impulses) / steps;
  REQUIRE(fraction == Catch::Approx(0.005).margin(0.002));
}

TEST_CASE("invalid trajectory parameters are rejected") {
  TrajectoryParams p;
  p.num_steps = 0;
  REQUIRE_THROWS_AS(generate_trajectory(p), ParamError);
  p.num_steps = 10;
  p.max_len = 0;
  REQUIRE_THROWS_AS(generate_trajectory(p), ParamError);
  p.max_len = 10;
  p.p_impulsive = 1.5;
  REQUIRE_THROWS_AS(generate_trajectory(p), ParamError);
}

TEST_CASE("single point rasterizes to a delta kernel") {
  Trajectory t;
  t.points = {{0.0, 0.0}};
  const BlurKernel k = rasterize_kernel(t, 5);
  REQUIRE(k.at(2, 2) == 1.0);
  REQUIRE(k.sum() == Catch::Approx(1.0).margin(1e-12));
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c)
      if (r != 2 || c != 2) REQUIRE(k.at(r, c) == 0.0);
}

TEST_CASE("half-pixel deposit splits 0.25 into each neighbor") {
  std::vector<double> grid(25, 0.0);
  detail::deposit_bilinear(grid, 5, 1.5, 2.5);
  REQUIRE(grid[2 * 5 + 1] == Catch::Approx(0.25));
  REQUIRE(grid[2 * 5 + 2] == Catch::Approx(0.25));
  REQUIRE(grid[3 * 5 + 1] == Catch::Approx(0.25));
  REQUIRE(grid[3 * 5 + 2] == Catch::Approx(0.25));
}

TEST_CASE("collinear integer trajectory gives uniform thirds") {
  Trajectory t;
  t.points = {{-1.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}};
  const BlurKernel k = rasterize_kernel(t, 5);
  REQUIRE(k.at(2, 1) == Catch::Approx(1.0 / 3));
  REQUIRE(k.at(2, 2) == Catch::Approx(1.0 / 3));
  REQUIRE(k.at(2, 3) == Catch::Approx(1.0 / 3));
  REQUIRE(k.raw_mass == Catch::Approx(3.0).margin(1e-9));
}

TEST_CASE("rasterization errors instead of clipping") {
  Trajectory t;
  t.points = {{-4.0, 0.0}, {4.0, 0.0}};
  REQUIRE_THROWS_AS(rasterize_kernel(t, 5), ParamError);
}

TEST_CASE("deposited mass before normalization equals the step count") {
  TrajectoryParams p;
  p.seed = 9;
  p.num_steps = 500;
  const BlurKernel k = rasterize_kernel(generate_trajectory(p), 31);
  REQUIRE(k.raw_mass == Catch::Approx(500.0).margin(1e-9));
}

TEST_CASE("delta kernel convolution is the identity") {
  Trajectory t;
  t.points = {{0.0, 0.0}};
  const BlurKernel delta = rasterize_kernel(t, 3);
  Rng rng(3);
  const Tensor<float> img = testutil::random_tensor<float>({3, 8, 8}, rng);
  const Tensor<float> out = apply_blur(img, delta);
  for (int64_t i = 0; i < img.numel(); ++i) REQUIRE(out[i] == img[i]);
}

TEST_CASE("constant images are preserved by any valid kernel") {
  TrajectoryParams p;
  p.seed = 21;
  const BlurKernel k = sample_kernel(p, 31);
  const Tensor<double> img = Tensor<double>::full({1, 40, 40}, 0.37);
  const Tensor<double> out = apply_blur(img, k);
  for (int64_t i = 0; i < out.numel(); ++i)
    REQUIRE(out[i] == Catch::Approx(0.37).margin(1e-12));
}

TEST_CASE("convolution matches the double-loop oracle") {
  // 5x5 ramp image, 3x3 uniform kernel
  Tensor<double> ramp({1, 5, 5});
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) ramp.at(0, y, x) = (y * 5 + x) / 25.0 - 0.5;
  BlurKernel uniform;
  uniform.size = 3;
  uniform.weights.assign(9, 1.0 / 9);
  Tensor<double> mine = apply_blur(ramp, uniform);
  Tensor<double> oracle = testutil::brute_force_blur(ramp, uniform);
  for (int64_t i = 0; i < mine.numel(); ++i)
    REQUIRE(mine[i] == Catch::Approx(oracle[i]).margin(1e-12));

  // and a random kernel over a random image
  TrajectoryParams p;
  p.seed = 33;
  p.max_len = 3;
  const BlurKernel k = sample_kernel(p, 9);
  Rng rng(4);
  const Tensor<double> img = testutil::random_tensor<double>({3, 16, 16}, rng);
  mine = apply_blur(img, k);
  oracle = testutil::brute_force_blur(img, k);
  for (int64_t i = 0; i < mine.numel(); ++i)
    REQUIRE(mine[i] == Catch::Approx(oracle[i]).margin(1e-9));
}

TEST_CASE("kernel larger than the image is rejected") {
  TrajectoryParams p;
  p.seed = 2;
  const BlurKernel k = sample_kernel(p, 31);
  const Tensor<float> tiny({3, 16, 16});
  REQUIRE_THROWS_AS(apply_blur(tiny, k), ShapeError);
}

TEST_CASE("sampled kernels satisfy their invariants") {
  for (int i = 0; i < 50; ++i) {
    TrajectoryParams p;
    p.seed = derive_seed(1, "kernel-invariants", i);
    const BlurKernel k = sample_kernel(p, 31);
    REQUIRE_NOTHROW(k.validate());
  }
}

TEST_CASE("build_blurred_set is deterministic and tracks kernels") {
  const auto dir = testutil::temp_dir("blurset");
  const auto sharp_manifest = make_glyph_corpus(dir / "sharp", 5, 32, 99);

  BlurredSetOptions opts;
  opts.trajectory.seed = 4242;
  opts.trajectory.max_len = 5;
  opts.kernel_size = 13;
  const Manifest m1 =
      build_blurred_set(read_manifest(sharp_manifest), dir / "out1", opts);
  const Manifest m2 =
      build_blurred_set(read_manifest(sharp_manifest), dir / "out2", opts);
  REQUIRE(m1.entries.size() == 5);
  REQUIRE(m2.entries.size() == 5);
  for (size_t i = 0; i < 5; ++i) {
    REQUIRE(m1.entries[i].seed == m2.entries[i].seed);
    REQUIRE(m1.entries[i].checksum == m2.entries[i].checksum);
    // byte-identical image files
    std::ifstream a(dir / "out1" / m1.entries[i].path, std::ios::binary);
    std::ifstream b(dir / "out2" / m2.entries[i].path, std::ios::binary);
    const std::string ba((std::istreambuf_iterator<char>(a)),
                         std::istreambuf_iterator<char>());
    const std::string bb((std::istreambuf_iterator<char>(b)),
                         std::istreambuf_iterator<char>());
    REQUIRE(!ba.empty());
    REQUIRE(ba == bb);
  }
  // distinct kernels per image
  REQUIRE(m1.entries[0].checksum != m1.entries[1].checksum);
  std::filesystem::remove_all(dir);
}

TEST_CASE("empty manifest produces an empty blurred set") {
  const auto dir = testutil::temp_dir("blurset_empty");
  Manifest empty;
  empty.base_dir = dir;
  BlurredSetOptions opts;
  const Manifest out = build_blurred_set(empty, dir / "out", opts);
  REQUIRE(out.entries.empty());
  std::filesystem::remove_all(dir);
}

TEST_CASE("unreadable images are recorded as skipped") {
  const auto dir = testutil::temp_dir("blurset_skip");
  const auto manifest_path = make_glyph_corpus(dir / "sharp", 2, 32, 7);
  Manifest m = read_manifest(manifest_path);
  m.entries.push_back({"missing.png", "sharp", 0, "0"});
  BlurredSetOptions opts;
  opts.trajectory.max_len = 5;
  opts.kernel_size = 13;
  const Manifest out = build_blurred_set(m, dir / "out", opts);
  REQUIRE(out.entries.size() == 2);
  REQUIRE(out.skipped == std::vector<std::string>{"missing.png"});

  Manifest all_bad;
  all_bad.base_dir = dir;
  all_bad.entries.push_back({"nope.png", "sharp", 0, "0"});
  REQUIRE_THROWS_AS(build_blurred_set(all_bad, dir / "out2", opts), DataError);
  std::filesystem::remove_all(dir);
}
