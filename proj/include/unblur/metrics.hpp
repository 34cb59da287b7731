#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "unblur/features.hpp"
#include "unblur/image.hpp"
#include "unblur/manifest.hpp"

namespace unblur {

// PSNR on 8-bit images, all channels jointly. Identical images report the
// 100 dB cap so aggregates stay finite; any computed value is clamped to
// the same cap.
inline double psnr(const Image8& x, const Image8& y) {
  if (x.channels != y.channels || x.height != y.height || x.width != y.width)
    throw ShapeError("psnr: image shape mismatch");
  double mse = 0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double d = static_cast<double>(x.pixels[static_cast<size_t>(i)]) -
                     static_cast<double>(y.pixels[static_cast<size_t>(i)]);
    mse += d * d;
  }
  mse /= static_cast<double>(x.numel());
  if (mse == 0) return 100.0;
  return std::min(100.0, 10.0 * std::log10(255.0 * 255.0 / mse));
}

namespace detail {

inline const std::vector<double>& gaussian_window_11() {
  static const std::vector<double> w = [] {
    std::vector<double> v(121);
    const double sigma = 1.5;
    double sum = 0;
    for (int i = 0; i < 11; ++i)
      for (int j = 0; j < 11; ++j) {
        const double dy = i - 5, dx = j - 5;
        v[static_cast<size_t>(i) * 11 + j] =
            std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        sum += v[static_cast<size_t>(i) * 11 + j];
      }
    for (auto& e : v) e /= sum;
    return v;
  }();
  return w;
}

}  // namespace detail

// Mean local SSIM: 11x11 Gaussian window (sigma 1.5) over valid positions,
// C1=(0.01*255)^2, C2=(0.03*255)^2, averaged over channels.
inline double ssim(const Image8& x, const Image8& y) {
  if (x.channels != y.channels || x.height != y.height || x.width != y.width)
    throw ShapeError("ssim: image shape mismatch");
  if (x.height < 11 || x.width < 11)
    throw ShapeError("ssim: image smaller than the 11x11 window");
  const double C1 = (0.01 * 255) * (0.01 * 255);
  const double C2 = (0.03 * 255) * (0.03 * 255);
  const auto& w = detail::gaussian_window_11();

  double total = 0;
  for (int c = 0; c < x.channels; ++c) {
    double acc = 0;
    int64_t count = 0;
    for (int oy = 0; oy + 11 <= x.height; ++oy) {
      for (int ox = 0; ox + 11 <= x.width; ++ox) {
        double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
        for (int i = 0; i < 11; ++i)
          for (int j = 0; j < 11; ++j) {
            const double wv = w[static_cast<size_t>(i) * 11 + j];
            const double xv = x.at(c, oy + i, ox + j);
            const double yv = y.at(c, oy + i, ox + j);
            mx += wv * xv;
            my += wv * yv;
            mxx += wv * xv * xv;
            myy += wv * yv * yv;
            mxy += wv * xv * yv;
          }
        const double vx = mxx - mx * mx;
        const double vy = myy - my * my;
        const double cov = mxy - mx * my;
        acc += ((2 * mx * my + C1) * (2 * cov + C2)) /
               ((mx * mx + my * my + C1) * (vx + vy + C2));
        ++count;
      }
    }
    total += acc / static_cast<double>(count);
  }
  return total / x.channels;
}

// L2 distance between extractor embeddings (the paper's d_VGG protocol,
// with the extractor injected).
template <typename T>
double feature_distance(const FeatureExtractor<T>& extractor, const Tensor<T>& x,
                        const Tensor<T>& y) {
  const Tensor<T> fx = extractor.features(x);
  const Tensor<T> fy = extractor.features(y);
  if (!fx.same_shape(fy))
    throw ShapeError("feature_distance: embedding shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < fx.numel(); ++i) {
    const double d = static_cast<double>(fx[i]) - static_cast<double>(fy[i]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

// Levenshtein distance (unit costs), O(min) space.
inline size_t levenshtein(std::string_view a, std::string_view b) {
  if (a.size() < b.size()) std::swap(a, b);
  std::vector<size_t> row(b.size() + 1);
  for (size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (size_t i = 0; i < a.size(); ++i) {
    size_t corner = row[0];
    row[0] = i + 1;
    for (size_t j = 0; j < b.size(); ++j) {
      const size_t up = row[j + 1];
      row[j + 1] = a[i] == b[j]
                       ? corner
                       : 1 + std::min({corner, up, row[j]});
      corner = up;
    }
  }
  return row[b.size()];
}

// Character error rate: edit distance / ground-truth length.
inline double cer(std::string_view recognized, std::string_view truth) {
  if (truth.empty()) throw ParamError("cer: empty ground-truth text");
  return static_cast<double>(levenshtein(recognized, truth)) /
         static_cast<double>(truth.size());
}

// External OCR: a command taking an image path and emitting recognized
// text on stdout. Missing adapter leaves the metric unavailable, not zero.
struct OcrAdapter {
  std::string command;  // empty: unavailable

  bool available() const { return !command.empty(); }

  std::optional<std::string> recognize(const std::filesystem::path& image) const {
    if (!available()) return std::nullopt;
    std::string quoted = image.string();
    std::string escaped = "'";
    for (char ch : quoted)
      escaped += ch == '\'' ? std::string("'\\''") : std::string(1, ch);
    escaped += "'";
    const std::string cmd = command + " " + escaped;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) return std::nullopt;
    std::string out;
    char buf[4096];
    size_t n;
    while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) out.append(buf, n);
    const int status = pclose(pipe);
    if (status != 0) return std::nullopt;
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r'))
      out.pop_back();
    return out;
  }
};

struct PerImageMetrics {
  std::string name;
  double psnr = 0;
  double ssim = 0;
  double d_feat = 0;
  std::optional<double> cer;
};

struct MetricsAggregates {
  double psnr = 0;
  double ssim = 0;
  double d_feat = 0;
  std::optional<double> cer;
};

struct MetricsReport {
  std::vector<PerImageMetrics> per_image;
  MetricsAggregates aggregates;
  std::vector<std::string> unmatched_results;  // no ground truth found
  std::vector<std::string> unmatched_truth;    // no result found
};

struct EvaluateOptions {
  int channels = 3;
  const FeatureExtractor<float>* extractor = nullptr;  // default: surrogate
  OcrAdapter ocr;
  std::filesystem::path truth_text_dir;  // <stem>.txt ground-truth text
};

inline MetricsReport evaluate(const std::filesystem::path& results_dir,
                              const std::filesystem::path& truth_dir,
                              const EvaluateOptions& opts = {}) {
  Manifest results = manifest_from_dir(results_dir);
  MetricsReport report;
  std::unique_ptr<FeatureExtractor<float>> fallback;
  const FeatureExtractor<float>* extractor = opts.extractor;
  if (!extractor) {
    fallback = make_metric_surrogate<float>(opts.channels);
    extractor = fallback.get();
  }

  std::vector<std::string> matched_names;
  for (const auto& e : results.entries) {
    const auto truth_path = truth_dir / e.path;
    if (!std::filesystem::exists(truth_path)) {
      report.unmatched_results.push_back(e.path);
      continue;
    }
    matched_names.push_back(e.path);
    const Image8 rx = load_image_u8(results_dir / e.path, opts.channels);
    const Image8 ry = load_image_u8(truth_path, opts.channels);
    PerImageMetrics m;
    m.name = e.path;
    m.psnr = psnr(rx, ry);
    m.ssim = ssim(rx, ry);
    m.d_feat = feature_distance(*extractor, to_tensor<float>(rx),
                                to_tensor<float>(ry));
    if (opts.ocr.available() && !opts.truth_text_dir.empty()) {
      const auto text_path =
          opts.truth_text_dir /
          (std::filesystem::path(e.path).stem().string() + ".txt");
      if (std::filesystem::exists(text_path)) {
        std::ifstream in(text_path);
        std::string truth((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        while (!truth.empty() && (truth.back() == '\n' || truth.back() == '\r'))
          truth.pop_back();
        if (const auto rec = opts.ocr.recognize(results_dir / e.path);
            rec && !truth.empty())
          m.cer = cer(*rec, truth);
      }
    }
    report.per_image.push_back(std::move(m));
  }

  Manifest truth = manifest_from_dir(truth_dir);
  for (const auto& e : truth.entries)
    if (!std::filesystem::exists(results_dir / e.path))
      report.unmatched_truth.push_back(e.path);

  if (report.per_image.empty())
    throw DataError("no result/ground-truth pairs matched");

  double sp = 0, ss = 0, sd = 0, sc = 0;
  int nc = 0;
  for (const auto& m : report.per_image) {
    sp += m.psnr;
    ss += m.ssim;
    sd += m.d_feat;
    if (m.cer) {
      sc += *m.cer;
      ++nc;
    }
  }
  const double n = static_cast<double>(report.per_image.size());
  report.aggregates = {sp / n, ss / n, sd / n,
                       nc ? std::optional<double>(sc / nc) : std::nullopt};
  return report;
}

// Table in the layout of the evaluation tables: one row per method.
inline std::string render_metrics_table(
    const std::vector<std::pair<std::string, MetricsAggregates>>& rows) {
  bool with_cer = false;
  size_t label_w = 6;
  for (const auto& [label, agg] : rows) {
    with_cer = with_cer || agg.cer.has_value();
    label_w = std::max(label_w, label.size());
  }
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(label_w)) << "Method"
     << "  " << std::right << std::setw(7) << "PSNR" << "  " << std::setw(6)
     << "SSIM" << "  " << std::setw(9) << "d_feat";
  if (with_cer) os << "  " << std::setw(6) << "CER";
  os << "\n";
  for (const auto& [label, agg] : rows) {
    os << std::left << std::setw(static_cast<int>(label_w)) << label << "  "
       << std::right << std::fixed << std::setprecision(2) << std::setw(7)
       << agg.psnr << "  " << std::setw(6) << agg.ssim << "  " << std::setw(9)
       << agg.d_feat;
    if (with_cer) {
      if (agg.cer)
        os << "  " << std::setw(6) << *agg.cer;
      else
        os << "  " << std::setw(6) << "n/a";
    }
    os << "\n";
  }
  return os.str();
}

// Machine-readable per-image report: name, psnr, ssim, d_feat, cer|n/a.
inline void write_metrics_report(const std::filesystem::path& file,
                                 const MetricsReport& report) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write report: " + file.string());
  out << "# name\tpsnr\tssim\td_feat\tcer\n";
  for (const auto& m : report.per_image) {
    out << m.name << "\t" << m.psnr << "\t" << m.ssim << "\t" << m.d_feat
        << "\t";
    if (m.cer)
      out << *m.cer;
    else
      out << "n/a";
    out << "\n";
  }
}

}  // namespace unblur
