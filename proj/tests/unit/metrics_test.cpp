#include <catch2/catch_amalgamated.hpp>

#include "unblur/glyphs.hpp"
#include "unblur/metrics.hpp"
#include "support/test_util.hpp"

using namespace unblur;

namespace {

Image8 random_image(int channels, int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image8 img;
  img.channels = channels;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<size_t>(channels) * h * w);
  for (auto& p : img.pixels) p = static_cast<uint8_t>(rng.uniform_int(256));
  return img;
}

// independent direct windowed SSIM: explicit two-pass weighted moments
double ssim_oracle(const Image8& x, const Image8& y) {
  const double C1 = 6.5025, C2 = 58.5225;
  std::vector<double> w(121);
  double wsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const double dy = i - 5, dx = j - 5;
      w[static_cast<size_t>(i) * 11 + j] = std::exp(-(dx * dx + dy * dy) / 4.5);
      wsum += w[static_cast<size_t>(i) * 11 + j];
    }
  for (auto& v : w) v /= wsum;

  double total = 0;
  for (int c = 0; c < x.channels; ++c) {
    double acc = 0;
    int64_t windows = 0;
    for (int oy = 0; oy + 11 <= x.height; ++oy)
      for (int ox = 0; ox + 11 <= x.width; ++ox) {
        double mx = 0, my = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            mx += w[static_cast<size_t>(i) * 11 + j] * x.at(c, oy + i, ox + j);
            my += w[static_cast<size_t>(i) * 11 + j] * y.at(c, oy + i, ox + j);
          }
        double vx = 0, vy = 0, cov = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double wx = x.at(c, oy + i, ox + j) - mx;
            const double wy = y.at(c, oy + i, ox + j) - my;
            const double wv = w[static_cast<size_t>(i) * 11 + j];
            vx += wv * wx * wx;
            vy += wv * wy * wy;
            cov += wv * wx * wy;
          }
        acc += ((2 * mx * my + C1) * (2 * cov + C2)) /
               ((mx * mx + my * my + C1) * (vx + vy + C2));
        ++windows;
      }
    total += acc / static_cast<double>(windows);
  }
  return total / x.channels;
}

double psnr_oracle(const Image8& x, const Image8& y) {
  double mse = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = double(x.pixels[size_t(i)]) - double(y.pixels[size_t(i)]);
    mse += d * d;
  }
  mse /= double(x.numel());
  return mse == 0 ? 100.0 : std::min(100.0, 10 * std::log10(255.0 * 255.0 / mse));
}

}  // namespace

TEST_CASE("psnr conventions") {
  const Image8 a = random_image(3, 16, 16, 1);
  REQUIRE(psnr(a, a) == 100.0);

  Image8 b = a;
  for (auto& p : b.pixels) p = static_cast<uint8_t>(std::min(255, p + 5));
  Image8 a_clamped = a;  // avoid clipping at 255 for the exact formula
  for (auto& p : a_clamped.pixels) p = static_cast<uint8_t>(std::min(250, int(p)));
  Image8 b5 = a_clamped;
  for (auto& p : b5.pixels) p = static_cast<uint8_t>(p + 5);
  REQUIRE(psnr(a_clamped, b5) ==
          Catch::Approx(20 * std::log10(255.0 / 5)).margin(1e-9));

  Image8 checker, inverse;
  checker.channels = inverse.channels = 1;
  checker.height = inverse.height = 16;
  checker.width = inverse.width = 16;
  checker.pixels.resize(256);
  inverse.pixels.resize(256);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      const bool on = (x + y) % 2 == 0;
      checker.pixels[static_cast<size_t>(y) * 16 + x] = on ? 255 : 0;
      inverse.pixels[static_cast<size_t>(y) * 16 + x] = on ? 0 : 255;
    }
  REQUIRE(psnr(checker, inverse) == Catch::Approx(0.0).margin(1e-12));

  Image8 wrong = random_image(3, 8, 8, 2);
  REQUIRE_THROWS_AS(psnr(a, wrong), ShapeError);
}

TEST_CASE("ssim conventions") {
  const Image8 a = random_image(3, 16, 16, 3);
  REQUIRE(ssim(a, a) == Catch::Approx(1.0).margin(1e-12));

  // anti-correlated high-contrast pattern
  Image8 checker = a, inverse = a;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const bool on = (x + y) % 2 == 0;
        checker.pixels[(static_cast<size_t>(c) * 16 + y) * 16 + x] = on ? 255 : 0;
        inverse.pixels[(static_cast<size_t>(c) * 16 + y) * 16 + x] = on ? 0 : 255;
      }
  REQUIRE(ssim(checker, inverse) < 0.0);

  const Image8 small = random_image(3, 8, 8, 4);
  REQUIRE_THROWS_AS(ssim(small, small), ShapeError);
}

TEST_CASE("psnr and ssim match the independent oracles on random pairs") {
  for (int trial = 0; trial < 20; ++trial) {
    const Image8 x = random_image(3, 16, 16, 100 + trial);
    const Image8 y = random_image(3, 16, 16, 200 + trial);
    REQUIRE(psnr(x, y) == Catch::Approx(psnr_oracle(x, y)).margin(1e-6));
    REQUIRE(ssim(x, y) == Catch::Approx(ssim_oracle(x, y)).margin(1e-4));
  }
}

TEST_CASE("feature distance is a metric on embeddings") {
  const auto extractor = make_metric_surrogate<float>(3);
  Rng rng(5);
  const auto x = testutil::random_tensor<float>({3, 16, 16}, rng);
  const auto y = testutil::random_tensor<float>({3, 16, 16}, rng);
  REQUIRE(feature_distance(*extractor, x, x) == 0.0);
  REQUIRE(feature_distance(*extractor, x, y) ==
          Catch::Approx(feature_distance(*extractor, y, x)).margin(1e-9));
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = testutil::random_tensor<float>({3, 16, 16}, rng);
    const auto b = testutil::random_tensor<float>({3, 16, 16}, rng);
    const auto c = testutil::random_tensor<float>({3, 16, 16}, rng);
    const double ab = feature_distance(*extractor, a, b);
    const double bc = feature_distance(*extractor, b, c);
    const double ac = feature_distance(*extractor, a, c);
    REQUIRE(ac <= ab + bc + 1e-9);
  }
}

TEST_CASE("levenshtein and cer") {
  REQUIRE(levenshtein("kitten", "sitting") == 3);
  REQUIRE(cer("kitten", "sitting") == Catch::Approx(3.0 / 7).margin(1e-15));
  REQUIRE(cer("same", "same") == 0.0);
  REQUIRE(cer("", "abcd") == 1.0);
  REQUIRE_THROWS_AS(cer("anything", ""), ParamError);

  Rng rng(6);
  const std::string alphabet = "abcde";
  for (int trial = 0; trial < 200; ++trial) {
    std::string a, b;
    const int la = rng.uniform_int(12), lb = rng.uniform_int(12);
    for (int i = 0; i < la; ++i) a += alphabet[static_cast<size_t>(rng.uniform_int(5))];
    for (int i = 0; i < lb; ++i) b += alphabet[static_cast<size_t>(rng.uniform_int(5))];
    REQUIRE(levenshtein(a, b) == testutil::levenshtein_oracle(a, b));
    REQUIRE(levenshtein(a, b) == levenshtein(b, a));
  }
}

TEST_CASE("ocr adapter runs an external command") {
  OcrAdapter missing;
  REQUIRE(!missing.available());
  REQUIRE(!missing.recognize("/tmp/x.png").has_value());

  OcrAdapter echo{"echo kitten #"};
  const auto text = echo.recognize("/tmp/whatever.png");
  REQUIRE(text.has_value());
  REQUIRE(text->rfind("kitten", 0) == 0);

  OcrAdapter failing{"false"};
  REQUIRE(!failing.recognize("/tmp/x.png").has_value());
}

TEST_CASE("evaluate on identical directories hits the caps") {
  const auto dir = testutil::temp_dir("eval_identity");
  make_glyph_corpus(dir / "imgs", 4, 32, 80);
  const auto report = evaluate(dir / "imgs", dir / "imgs");
  REQUIRE(report.per_image.size() == 4);
  REQUIRE(report.aggregates.psnr == 100.0);
  REQUIRE(report.aggregates.ssim == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(report.aggregates.d_feat == 0.0);
  REQUIRE(!report.aggregates.cer.has_value());
  std::filesystem::remove_all(dir);
}

TEST_CASE("evaluate matches filenames and aggregates means") {
  const auto dir = testutil::temp_dir("eval_pairs");
  make_glyph_corpus(dir / "results", 5, 32, 81);
  make_glyph_corpus(dir / "truth", 5, 32, 82);
  save_image_tensor(dir / "results" / "extra.png",
                    render_glyph<float>(1, 32, 3));

  const auto report = evaluate(dir / "results", dir / "truth");
  REQUIRE(report.per_image.size() == 5);
  REQUIRE(report.unmatched_results == std::vector<std::string>{"extra.png"});

  double mean_psnr = 0, mean_ssim = 0, mean_feat = 0;
  for (const auto& m : report.per_image) {
    mean_psnr += m.psnr;
    mean_ssim += m.ssim;
    mean_feat += m.d_feat;
  }
  REQUIRE(report.aggregates.psnr ==
          Catch::Approx(mean_psnr / 5).margin(1e-9));
  REQUIRE(report.aggregates.ssim ==
          Catch::Approx(mean_ssim / 5).margin(1e-9));
  REQUIRE(report.aggregates.d_feat ==
          Catch::Approx(mean_feat / 5).margin(1e-9));

  // machine-readable report has one record per image
  write_metrics_report(dir / "report.tsv", report);
  std::ifstream in(dir / "report.tsv");
  std::string line;
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') ++rows;
  REQUIRE(rows == 5);

  // no overlap at all is an error
  std::filesystem::create_directories(dir / "empty");
  save_image_tensor(dir / "empty" / "zzz.png", render_glyph<float>(2, 32, 3));
  REQUIRE_THROWS_AS(evaluate(dir / "results", dir / "empty"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("metrics tables render one row per method") {
  MetricsAggregates a{20.81, 0.65, 57.6, std::nullopt};
  MetricsAggregates b{18.83, 0.56, 82.9, 0.101};
  const std::string table =
      render_metrics_table({{"Add perceptual loss", a}, {"Only deblurring branch", b}});
  REQUIRE(table.find("Method") != std::string::npos);
  REQUIRE(table.find("PSNR") != std::string::npos);
  REQUIRE(table.find("Add perceptual loss") != std::string::npos);
  REQUIRE(table.find("20.81") != std::string::npos);
  REQUIRE(table.find("n/a") != std::string::npos);
  REQUIRE(std::count(table.begin(), table.end(), '\n') == 3);
}
