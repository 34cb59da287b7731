#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unblur/nn.hpp"

namespace unblur {

using nn::Ctx;
using nn::ParamStore;

struct NetworkConfig {
  int image_channels = 3;
  int base_width = 64;    // first-layer channel count
  int latent_dim = 8;     // N, dimension of the blur code
  int disc_scales = 2;
  int crop_size = 128;

  int content_channels() const { return 4 * base_width; }

  void validate() const {
    if (image_channels < 1) throw ParamError("image_channels must be >= 1");
    if (base_width < 1) throw ParamError("base_width must be >= 1");
    if (latent_dim < 1) throw ParamError("latent_dim must be >= 1");
    if (disc_scales < 1) throw ParamError("disc_scales must be >= 1");
    if (crop_size < 16 || crop_size % 8 != 0)
      throw ParamError("crop_size must be a multiple of 8 and >= 16");
  }

  bool operator==(const NetworkConfig&) const = default;
};

enum class Domain { blurred, sharp };

template <typename T>
using ContentFeatures = Tensor<T>;  // (Cc, H/8, W/8) or batched

template <typename T>
struct BlurPosterior {
  Tensor<T> mu;       // (B,N) or (N)
  Tensor<T> log_var;  // same shape

  bool finite() const { return mu.all_finite() && log_var.all_finite(); }
};

template <typename T>
struct BlurCode {
  Tensor<T> z;      // z_b = mu + noise o exp(log_var / 2)
  Tensor<T> noise;  // the standard-normal draw that produced it
};

// z_b = mu + noise o sigma, elementwise.
template <typename T>
BlurCode<T> sample_blur_code(const BlurPosterior<T>& post, const Tensor<T>& noise) {
  if (!post.mu.same_shape(noise))
    throw ShapeError("sample_blur_code: noise shape " + noise.shape_str() +
                     " does not match posterior " + post.mu.shape_str());
  BlurCode<T> code;
  code.noise = noise;
  code.z = Tensor<T>(noise.shape());
  for (int64_t i = 0; i < noise.numel(); ++i)
    code.z[i] = post.mu[i] + noise[i] * std::exp(T(0.5) * post.log_var[i]);
  return code;
}

namespace detail {

template <typename T>
constexpr T score_eps() {
  if constexpr (std::is_same_v<T, float>) return 1e-7f;
  return 1e-12;
}

// Content encoder: three stride-2 convolutions then four residual blocks;
// the fourth block is the layer shared between the two domain encoders.
template <typename T>
struct ContentEncoderNet {
  nn::Sequential<T> body;
  nn::ResidualBlock<T> shared;

  ContentEncoderNet(const std::string& prefix, const std::string& shared_name,
                    const NetworkConfig& cfg)
      : shared(shared_name, cfg.content_channels()) {
    const int w = cfg.base_width;
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv1", cfg.image_channels, w, 4, 2, 1);
    body.template emplace<nn::InstanceNorm<T>>(prefix + ".in1", w);
    body.template emplace<nn::Activation<T>>(nn::Act::relu);
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv2", w, 2 * w, 4, 2, 1);
    body.template emplace<nn::InstanceNorm<T>>(prefix + ".in2", 2 * w);
    body.template emplace<nn::Activation<T>>(nn::Act::relu);
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv3", 2 * w, 4 * w, 4, 2, 1);
    body.template emplace<nn::InstanceNorm<T>>(prefix + ".in3", 4 * w);
    body.template emplace<nn::Activation<T>>(nn::Act::relu);
    for (int i = 1; i <= 3; ++i)
      body.template emplace<nn::ResidualBlock<T>>(prefix + ".res" + std::to_string(i),
                                                  4 * w);
  }

  void register_params(ParamStore<T>& P, Rng& rng) {
    body.register_params(P, rng);
    shared.register_params(P, rng);
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const {
    return shared.forward(P, body.forward(P, std::move(x), ctx), ctx);
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const {
    return body.backward(P, shared.backward(P, std::move(dy), ctx, grads), ctx,
                         grads);
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    body.param_names(names);
    shared.param_names(names);
    return names;
  }

  std::vector<std::string> shared_param_names() const {
    std::vector<std::string> names;
    shared.param_names(names);
    return names;
  }
};

// Blur encoder: four stride-2 convolutions, global average pooling and a
// fully connected layer emitting (mu, log_var).
template <typename T>
struct BlurEncoderNet {
  nn::Sequential<T> body;
  int latent;

  BlurEncoderNet(const std::string& prefix, const NetworkConfig& cfg)
      : latent(cfg.latent_dim) {
    const int w = cfg.base_width;
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv1", cfg.image_channels, w, 4, 2, 1);
    body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv2", w, 2 * w, 4, 2, 1);
    body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv3", 2 * w, 4 * w, 4, 2, 1);
    body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
    body.template emplace<nn::Conv2d<T>>(prefix + ".conv4", 4 * w, 4 * w, 4, 2, 1);
    body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
    body.template emplace<nn::GlobalAvgPool<T>>();
    body.template emplace<nn::Linear<T>>(prefix + ".fc", 4 * w, 2 * cfg.latent_dim);
  }

  void register_params(ParamStore<T>& P, Rng& rng) { body.register_params(P, rng); }

  BlurPosterior<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const {
    Tensor<T> out = body.forward(P, std::move(x), ctx);  // (B, 2N)
    const int B = out.dim(0);
    BlurPosterior<T> post;
    post.mu = Tensor<T>({B, latent});
    post.log_var = Tensor<T>({B, latent});
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < latent; ++j) {
        post.mu.at(b, j) = out.at(b, j);
        post.log_var.at(b, j) = out.at(b, latent + j);
      }
    return post;
  }

  Tensor<T> backward(const ParamStore<T>& P, const Tensor<T>& dmu,
                     const Tensor<T>& dlog_var, Ctx<T>& ctx,
                     ParamStore<T>* grads) const {
    const int B = dmu.dim(0);
    Tensor<T> dout({B, 2 * latent});
    for (int b = 0; b < B; ++b)
      for (int j = 0; j < latent; ++j) {
        dout.at(b, j) = dmu.at(b, j);
        dout.at(b, latent + j) = dlog_var.at(b, j);
      }
    return body.backward(P, std::move(dout), ctx, grads);
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    body.param_names(names);
    return names;
  }
};

// Generator: four residual blocks on the content grid (with the blur code
// replicated spatially and concatenated as extra channels when present)
// followed by three transposed convolutions and tanh.
template <typename T>
struct GeneratorNet {
  nn::Sequential<T> body;
  int content_ch;
  int code_ch;  // 0 when the model variant has no blur encoder

  GeneratorNet(const std::string& prefix, const NetworkConfig& cfg, int code_channels)
      : content_ch(cfg.content_channels()), code_ch(code_channels) {
    const int w = cfg.base_width;
    const int c = content_ch + code_ch;
    for (int i = 1; i <= 4; ++i)
      body.template emplace<nn::ResidualBlock<T>>(prefix + ".res" + std::to_string(i), c);
    body.template emplace<nn::ConvTranspose2d<T>>(prefix + ".up1", c, 2 * w, 4, 2, 1);
    body.template emplace<nn::InstanceNorm<T>>(prefix + ".in1", 2 * w);
    body.template emplace<nn::Activation<T>>(nn::Act::relu);
    body.template emplace<nn::ConvTranspose2d<T>>(prefix + ".up2", 2 * w, w, 4, 2, 1);
    body.template emplace<nn::InstanceNorm<T>>(prefix + ".in2", w);
    body.template emplace<nn::Activation<T>>(nn::Act::relu);
    body.template emplace<nn::ConvTranspose2d<T>>(prefix + ".up3", w, cfg.image_channels, 4, 2, 1);
    body.template emplace<nn::Activation<T>>(nn::Act::tanh);
  }

  void register_params(ParamStore<T>& P, Rng& rng) { body.register_params(P, rng); }

  Tensor<T> forward(const ParamStore<T>& P, const Tensor<T>& content,
                    const Tensor<T>& code, Ctx<T>* ctx) const {
    if (content.ndim() != 4 || content.dim(1) != content_ch)
      throw ShapeError("generator: bad content shape " + content.shape_str());
    const int B = content.dim(0), H = content.dim(2), W = content.dim(3);
    Tensor<T> input({B, content_ch + code_ch, H, W});
    for (int b = 0; b < B; ++b) {
      std::copy(&content.at(b, 0, 0, 0), &content.at(b, 0, 0, 0) + content_ch * H * W,
                &input.at(b, 0, 0, 0));
      if (code_ch > 0) {
        if (code.ndim() != 2 || code.dim(0) != B || code.dim(1) != code_ch)
          throw ShapeError("generator: bad code shape " + code.shape_str());
        for (int j = 0; j < code_ch; ++j) {
          T* dst = &input.at(b, content_ch + j, 0, 0);
          std::fill(dst, dst + H * W, code.at(b, j));
        }
      }
    }
    return body.forward(P, std::move(input), ctx);
  }

  // returns (d_content, d_code); d_code is empty when code_ch == 0
  std::pair<Tensor<T>, Tensor<T>> backward(const ParamStore<T>& P, Tensor<T> dy,
                                           Ctx<T>& ctx, ParamStore<T>* grads) const {
    Tensor<T> din = body.backward(P, std::move(dy), ctx, grads);
    const int B = din.dim(0), H = din.dim(2), W = din.dim(3);
    Tensor<T> dcontent({B, content_ch, H, W});
    Tensor<T> dcode;
    if (code_ch > 0) dcode = Tensor<T>({B, code_ch});
    for (int b = 0; b < B; ++b) {
      std::copy(&din.at(b, 0, 0, 0), &din.at(b, 0, 0, 0) + content_ch * H * W,
                &dcontent.at(b, 0, 0, 0));
      for (int j = 0; j < code_ch; ++j) {
        const T* src = &din.at(b, content_ch + j, 0, 0);
        double s = 0;
        for (int i = 0; i < H * W; ++i) s += src[i];
        dcode.at(b, j) = static_cast<T>(s);
      }
    }
    return {std::move(dcontent), std::move(dcode)};
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    body.param_names(names);
    return names;
  }
};

// Multi-scale discriminator: each scale sees the input downsampled one
// more time and runs five convolutions ending in a logit map.
template <typename T>
struct DiscriminatorNet {
  std::vector<nn::Sequential<T>> scales;
  nn::AvgPool2<T> pool;

  struct DiscCtx {
    std::vector<Ctx<T>> body;
    std::vector<Ctx<T>> pools;
  };

  DiscriminatorNet(const std::string& prefix, const NetworkConfig& cfg) {
    const int w = cfg.base_width;
    scales.resize(static_cast<size_t>(cfg.disc_scales));
    for (int s = 0; s < cfg.disc_scales; ++s) {
      auto& body = scales[static_cast<size_t>(s)];
      const std::string p = prefix + ".s" + std::to_string(s);
      body.template emplace<nn::Conv2d<T>>(p + ".conv1", cfg.image_channels, w, 4, 2, 1);
      body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
      body.template emplace<nn::Conv2d<T>>(p + ".conv2", w, 2 * w, 4, 2, 1);
      body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
      body.template emplace<nn::Conv2d<T>>(p + ".conv3", 2 * w, 4 * w, 4, 2, 1);
      body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
      body.template emplace<nn::Conv2d<T>>(p + ".conv4", 4 * w, 4 * w, 3, 1, 1);
      body.template emplace<nn::Activation<T>>(nn::Act::lrelu);
      body.template emplace<nn::Conv2d<T>>(p + ".conv5", 4 * w, 1, 3, 1, 1);
    }
  }

  void register_params(ParamStore<T>& P, Rng& rng) {
    for (auto& s : scales) s.register_params(P, rng);
  }

  // one logit map per scale
  std::vector<Tensor<T>> forward_logits(const ParamStore<T>& P, const Tensor<T>& x,
                                        DiscCtx* ctx) const {
    std::vector<Tensor<T>> out;
    Tensor<T> cur = x;
    if (ctx) {
      ctx->body.resize(scales.size());
      ctx->pools.resize(scales.size() ? scales.size() - 1 : 0);
    }
    for (size_t s = 0; s < scales.size(); ++s) {
      if (s > 0) cur = pool.forward(P, std::move(cur), ctx ? &ctx->pools[s - 1] : nullptr);
      out.push_back(scales[s].forward(P, cur, ctx ? &ctx->body[s] : nullptr));
    }
    return out;
  }

  // accumulates through every scale back to the input image
  Tensor<T> backward_logits(const ParamStore<T>& P, std::vector<Tensor<T>> dlogits,
                            DiscCtx& ctx, ParamStore<T>* grads) const {
    Tensor<T> dx;
    // walk scales from the deepest back so pool contexts unwind in order
    for (size_t s = scales.size(); s-- > 0;) {
      Tensor<T> d = scales[s].backward(P, std::move(dlogits[s]), ctx.body[s], grads);
      if (dx.empty()) {
        dx = std::move(d);
      } else {
        dx += d;
      }
      if (s > 0) dx = pool.backward(P, std::move(dx), ctx.pools[s - 1], grads);
    }
    return dx;
  }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (const auto& s : scales) s.param_names(names);
    return names;
  }
};

}  // namespace detail

// All learnable parameters of the seven networks, with the final content
// block held once in storage and referenced by both domain encoders.
template <typename T>
struct ModelState {
  NetworkConfig config;
  bool with_blur_code = true;  // false for variants without the blur encoder
  uint64_t rng_seed = 0;
  ParamStore<T> params;

  detail::ContentEncoderNet<T> enc_content_blurred;
  detail::ContentEncoderNet<T> enc_content_sharp;
  detail::BlurEncoderNet<T> enc_blur;
  detail::GeneratorNet<T> gen_sharp;
  detail::GeneratorNet<T> gen_blurred;
  detail::DiscriminatorNet<T> disc_sharp;
  detail::DiscriminatorNet<T> disc_blurred;

  ModelState(const NetworkConfig& cfg, bool use_blur_code)
      : config(cfg), with_blur_code(use_blur_code),
        enc_content_blurred("enc_cb", "enc_c_shared.res4", cfg),
        enc_content_sharp("enc_cs", "enc_c_shared.res4", cfg),
        enc_blur("enc_b", cfg),
        gen_sharp("gen_s", cfg, use_blur_code ? cfg.latent_dim : 0),
        gen_blurred("gen_b", cfg, use_blur_code ? cfg.latent_dim : 0),
        disc_sharp("disc_s", cfg), disc_blurred("disc_b", cfg) {}

  const detail::ContentEncoderNet<T>& content_encoder(Domain d) const {
    return d == Domain::blurred ? enc_content_blurred : enc_content_sharp;
  }
  const detail::GeneratorNet<T>& generator(Domain d) const {
    return d == Domain::blurred ? gen_blurred : gen_sharp;
  }
  const detail::DiscriminatorNet<T>& discriminator(Domain d) const {
    return d == Domain::blurred ? disc_blurred : disc_sharp;
  }

  // parameter groups for the two optimizer phases
  std::vector<std::string> generator_side_params() const {
    std::vector<std::string> names = enc_content_blurred.param_names();
    append(names, enc_content_sharp.param_names());
    append(names, enc_blur.param_names());
    append(names, gen_sharp.param_names());
    append(names, gen_blurred.param_names());
    dedup(names);
    return names;
  }
  std::vector<std::string> discriminator_side_params() const {
    std::vector<std::string> names = disc_sharp.param_names();
    append(names, disc_blurred.param_names());
    dedup(names);
    return names;
  }
  std::vector<std::string> shared_param_names() const {
    return enc_content_blurred.shared_param_names();
  }

 private:
  static void append(std::vector<std::string>& a, std::vector<std::string> b) {
    a.insert(a.end(), std::make_move_iterator(b.begin()),
             std::make_move_iterator(b.end()));
  }
  static void dedup(std::vector<std::string>& v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
};

template <typename T>
ModelState<T> init_model(const NetworkConfig& cfg, uint64_t seed,
                         bool with_blur_code = true) {
  cfg.validate();
  ModelState<T> m(cfg, with_blur_code);
  m.rng_seed = seed;
  Rng rng(derive_seed(seed, "model-init"));
  // registration order fixes the initialization stream; the shared block
  // is created by the blurred-domain encoder and found (not re-drawn) by
  // the sharp-domain encoder
  m.enc_content_blurred.register_params(m.params, rng);
  m.enc_content_sharp.register_params(m.params, rng);
  m.enc_blur.register_params(m.params, rng);
  m.gen_sharp.register_params(m.params, rng);
  m.gen_blurred.register_params(m.params, rng);
  m.disc_sharp.register_params(m.params, rng);
  m.disc_blurred.register_params(m.params, rng);
  return m;
}

namespace detail {

template <typename T>
void check_spatial(const Tensor<T>& x4, int multiple, const char* what) {
  if (x4.dim(2) % multiple || x4.dim(3) % multiple || x4.dim(2) < 16 ||
      x4.dim(3) < 16)
    throw ShapeError(std::string(what) + ": spatial size " +
                     std::to_string(x4.dim(2)) + "x" + std::to_string(x4.dim(3)) +
                     " must be a multiple of " + std::to_string(multiple) +
                     " and at least 16");
}

}  // namespace detail

template <typename T>
ContentFeatures<T> content_encode(const ModelState<T>& m, Domain domain,
                                  const Tensor<T>& img, Ctx<T>* ctx = nullptr) {
  const bool batched = img.ndim() == 4;
  Tensor<T> x = detail::as_batch(img);
  detail::check_spatial(x, 8, "content_encode");
  Tensor<T> f = m.content_encoder(domain).forward(m.params, std::move(x), ctx);
  return detail::maybe_unbatch(std::move(f), batched);
}

template <typename T>
BlurPosterior<T> blur_encode(const ModelState<T>& m, const Tensor<T>& img,
                             Ctx<T>* ctx = nullptr) {
  if (!m.with_blur_code)
    throw ParamError("this model variant has no blur encoder");
  const bool batched = img.ndim() == 4;
  Tensor<T> x = detail::as_batch(img);
  detail::check_spatial(x, 16, "blur_encode");
  BlurPosterior<T> post = m.enc_blur.forward(m.params, std::move(x), ctx);
  if (!batched) {
    post.mu = post.mu.reshaped({post.mu.dim(1)});
    post.log_var = post.log_var.reshaped({post.log_var.dim(1)});
  }
  return post;
}

template <typename T>
Tensor<T> generate(const ModelState<T>& m, Domain domain,
                   const ContentFeatures<T>& content, const BlurCode<T>& code,
                   Ctx<T>* ctx = nullptr) {
  const bool batched = content.ndim() == 4;
  Tensor<T> c = content.ndim() == 4
                    ? content
                    : content.reshaped({1, content.dim(0), content.dim(1),
                                        content.dim(2)});
  Tensor<T> z = code.z;
  if (m.with_blur_code && z.ndim() == 1) z = z.reshaped({1, z.dim(0)});
  Tensor<T> img = m.generator(domain).forward(m.params, c, z, ctx);
  return detail::maybe_unbatch(std::move(img), batched);
}

// Sigmoid scores per scale, nudged into the open interval (0,1) so that
// downstream log losses stay finite.
template <typename T>
std::vector<Tensor<T>> discriminate(const ModelState<T>& m, Domain domain,
                                    const Tensor<T>& img) {
  const bool batched = img.ndim() == 4;
  Tensor<T> x = detail::as_batch(img);
  detail::check_spatial(x, 8, "discriminate");
  std::vector<Tensor<T>> logits =
      m.discriminator(domain).forward_logits(m.params, x, nullptr);
  const T eps = detail::score_eps<T>();
  for (auto& map : logits) {
    for (int64_t i = 0; i < map.numel(); ++i) {
      T s = nn::sigmoid(map[i]);
      map[i] = std::min(T(1) - eps, std::max(eps, s));
    }
    map = detail::maybe_unbatch(std::move(map), batched);
  }
  return logits;
}

}  // namespace unblur
