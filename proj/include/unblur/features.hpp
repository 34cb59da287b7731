#pragma once

#include <memory>
#include <string>
#include <vector>

#include "unblur/checkpoint.hpp"
#include "unblur/nn.hpp"

namespace unblur {

// Fixed feature network phi. The perceptual loss and the feature-distance
// metric are agnostic to what fills this interface; production runs bind a
// pretrained network loaded from a weight file, tests bind a fixed-seed
// random stack.
template <typename T>
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  // (N,C,H,W) or (C,H,W) image in [-1,1] -> feature tensor
  virtual Tensor<T> features(const Tensor<T>& img, nn::Ctx<T>* ctx = nullptr) const = 0;
  // gradient of some scalar wrt the input image, given its gradient wrt
  // the features of the matching forward call
  virtual Tensor<T> backward(Tensor<T> dfeat, nn::Ctx<T>& ctx) const = 0;
};

namespace detail {

template <typename T>
Tensor<T> run_batched(const nn::Sequential<T>& body, const nn::ParamStore<T>& params,
                      const Tensor<T>& img, nn::Ctx<T>* ctx) {
  const bool batched = img.ndim() == 4;
  Tensor<T> x = as_batch(img);
  Tensor<T> f = body.forward(params, std::move(x), ctx);
  return maybe_unbatch(std::move(f), batched);
}

}  // namespace detail

// Deterministic random convolutional stack. depth counts stride-2 stages:
// depth=1 is a shallow mid-level map (a conv3_3-like cut), depth=4 ends in
// a coarse grid suited to pool5-style feature distances.
template <typename T>
class SurrogateExtractor : public FeatureExtractor<T> {
 public:
  SurrogateExtractor(uint64_t seed, int in_channels, int depth = 1, int width = 8)
      : seed_(seed) {
    int c = in_channels;
    int w = width;
    body_.template emplace<nn::Conv2d<T>>("surrogate.conv0", c, w, 3, 1, 1);
    body_.template emplace<nn::Activation<T>>(nn::Act::lrelu);
    for (int d = 0; d < depth; ++d) {
      body_.template emplace<nn::Conv2d<T>>("surrogate.down" + std::to_string(d),
                                            w, 2 * w, 4, 2, 1);
      body_.template emplace<nn::Activation<T>>(nn::Act::lrelu);
      w *= 2;
    }
    body_.template emplace<nn::Conv2d<T>>("surrogate.head", w, w, 3, 1, 1);
    Rng rng(derive_seed(seed, "surrogate-extractor"));
    body_.register_params(params_, rng);
  }

  std::string name() const override {
    return "surrogate(seed=" + std::to_string(seed_) + ")";
  }

  Tensor<T> features(const Tensor<T>& img, nn::Ctx<T>* ctx = nullptr) const override {
    return detail::run_batched(body_, params_, img, ctx);
  }

  Tensor<T> backward(Tensor<T> dfeat, nn::Ctx<T>& ctx) const override {
    Tensor<T> d = dfeat.ndim() == 4 ? std::move(dfeat)
                                    : dfeat.reshaped({1, dfeat.dim(0), dfeat.dim(1),
                                                      dfeat.dim(2)});
    return body_.backward(params_, std::move(d), ctx, nullptr);
  }

 private:
  uint64_t seed_;
  nn::Sequential<T> body_;
  nn::ParamStore<T> params_;
};

// Runtime adapter for pretrained feature networks (e.g. the conv3_3 cut of
// a 19-layer VGG). The container's metadata lists the layer sequence:
//   {"extractor": {"input_channels": 3,
//                  "layers": [{"type":"conv","name":"conv1_1","stride":1,"pad":1},
//                             {"type":"relu"}, {"type":"maxpool"}, ...]}}
// with one "<name>.w" / "<name>.b" tensor pair per conv entry. Weights are
// expected to take input in [-1,1]; rescaling belongs to the exporter.
template <typename T>
class FileFeatureExtractor : public FeatureExtractor<T> {
 public:
  explicit FileFeatureExtractor(const std::filesystem::path& path) : path_(path) {
    Container c = read_container(path);
    if (!c.meta.contains("extractor"))
      throw DataError("container has no extractor metadata: " + path.string());
    const auto& ex = c.meta["extractor"];
    for (const auto& layer : ex["layers"]) {
      const std::string type = layer["type"];
      if (type == "conv") {
        const std::string name = layer["name"];
        const Tensor<float>& w = require(c, name + ".w");
        if (w.ndim() != 4) throw DataError("conv weight must be 4-d: " + name);
        body_.template emplace<nn::Conv2d<T>>(name, w.dim(1), w.dim(0), w.dim(2),
                                              layer.value("stride", 1),
                                              layer.value("pad", 1));
        copy_param(name + ".w", w);
        copy_param(name + ".b", require(c, name + ".b"));
      } else if (type == "relu") {
        body_.template emplace<nn::Activation<T>>(nn::Act::relu);
      } else if (type == "maxpool") {
        body_.template emplace<nn::MaxPool2<T>>();
      } else if (type == "avgpool") {
        body_.template emplace<nn::AvgPool2<T>>();
      } else {
        throw DataError("unknown extractor layer type: " + type);
      }
    }
  }

  std::string name() const override { return "file(" + path_.string() + ")"; }

  Tensor<T> features(const Tensor<T>& img, nn::Ctx<T>* ctx = nullptr) const override {
    return detail::run_batched(body_, params_, img, ctx);
  }

  Tensor<T> backward(Tensor<T> dfeat, nn::Ctx<T>& ctx) const override {
    Tensor<T> d = dfeat.ndim() == 4 ? std::move(dfeat)
                                    : dfeat.reshaped({1, dfeat.dim(0), dfeat.dim(1),
                                                      dfeat.dim(2)});
    return body_.backward(params_, std::move(d), ctx, nullptr);
  }

 private:
  static const Tensor<float>& require(const Container& c, const std::string& name) {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end()) throw DataError("missing tensor: " + name);
    return it->second;
  }

  void copy_param(const std::string& name, const Tensor<float>& src) {
    Tensor<T>& dst = params_.create(name, src.shape());
    for (int64_t i = 0; i < src.numel(); ++i) dst[i] = static_cast<T>(src[i]);
  }

  std::filesystem::path path_;
  nn::Sequential<T> body_;
  nn::ParamStore<T> params_;
};

// Test/deblur-loss binding at a conv3_3-equivalent depth.
template <typename T>
std::unique_ptr<FeatureExtractor<T>> make_perceptual_surrogate(int channels,
                                                               uint64_t seed = 7) {
  return std::make_unique<SurrogateExtractor<T>>(seed, channels, 1, 8);
}

// Metric binding at a pool5-equivalent depth (coarse grid).
template <typename T>
std::unique_ptr<FeatureExtractor<T>> make_metric_surrogate(int channels,
                                                           uint64_t seed = 11) {
  return std::make_unique<SurrogateExtractor<T>>(seed, channels, 4, 8);
}

}  // namespace unblur
