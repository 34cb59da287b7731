#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unblur/checkpoint.hpp"
#include "unblur/config.hpp"
#include "unblur/image.hpp"
#include "unblur/losses.hpp"
#include "unblur/manifest.hpp"
#include "unblur/networks.hpp"

namespace unblur {

// Learning-rate schedule: flat for epochs_flat, then exponential decay
// spanning exactly two decades, so the final epoch runs at lr0/100.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.total_epochs())
    throw ParamError("epoch " + std::to_string(epoch) + " outside schedule [0," +
                     std::to_string(cfg.total_epochs()) + ")");
  if (epoch < cfg.epochs_flat) return cfg.lr0;
  const double gamma = std::pow(0.01, 1.0 / cfg.epochs_decay);
  return cfg.lr0 * std::pow(gamma, epoch - cfg.epochs_flat + 1);
}

// The two translation passes. Fields are empty when the active ablation
// variant does not produce them.
template <typename T>
struct TranslationBundle {
  Tensor<T> b, s;           // inputs
  Tensor<T> s_b, b_s;       // forward translation
  Tensor<T> b_hat, s_hat;   // backward translation
  BlurPosterior<T> post_b;  // E^b(b)
  BlurPosterior<T> post_bs; // E^b(b_s)
  BlurCode<T> code_forward; // z_b fed to both forward generators
  BlurCode<T> code_backward;
};

namespace detail {

template <typename T>
struct TranslateCtx {
  Ctx<T> eb_b, ecb_b, ecs_s, gs_f, gb_f;
  Ctx<T> eb_bs, ecs_sb, ecb_bs, gb_b, gs_b;
};

struct BranchFlags {
  bool blurring_branch = true;
  bool blur_code = true;

  static BranchFlags of(const TrainConfig& cfg) {
    return {cfg.use_blurring_branch(), cfg.use_blur_code()};
  }
};

template <typename T>
TranslationBundle<T> translate(const ModelState<T>& m, Tensor<T> b, Tensor<T> s,
                               const Tensor<T>& noise_fwd,
                               const Tensor<T>& noise_bwd, BranchFlags flags,
                               TranslateCtx<T>* ctx) {
  if (!b.same_shape(s)) throw ShapeError("translate: b/s shape mismatch");
  if (flags.blur_code != m.with_blur_code)
    throw ParamError("model was built for a different ablation variant");

  TranslationBundle<T> out;
  out.b = b;
  out.s = s;

  if (flags.blur_code) {
    out.post_b = m.enc_blur.forward(m.params, b, ctx ? &ctx->eb_b : nullptr);
    out.code_forward = sample_blur_code(out.post_b, noise_fwd);
  }
  Tensor<T> cb = m.enc_content_blurred.forward(m.params, b, ctx ? &ctx->ecb_b : nullptr);
  out.s_b = m.gen_sharp.forward(m.params, cb, out.code_forward.z,
                                ctx ? &ctx->gs_f : nullptr);
  if (!flags.blurring_branch) return out;  // b_s, b_hat, s_hat absent

  Tensor<T> cs = m.enc_content_sharp.forward(m.params, s, ctx ? &ctx->ecs_s : nullptr);
  out.b_s = m.gen_blurred.forward(m.params, cs, out.code_forward.z,
                                  ctx ? &ctx->gb_f : nullptr);

  if (flags.blur_code) {
    out.post_bs = m.enc_blur.forward(m.params, out.b_s, ctx ? &ctx->eb_bs : nullptr);
    out.code_backward = sample_blur_code(out.post_bs, noise_bwd);
  }
  Tensor<T> csb = m.enc_content_sharp.forward(m.params, out.s_b,
                                              ctx ? &ctx->ecs_sb : nullptr);
  Tensor<T> cbs = m.enc_content_blurred.forward(m.params, out.b_s,
                                                ctx ? &ctx->ecb_bs : nullptr);
  out.b_hat = m.gen_blurred.forward(m.params, csb, out.code_backward.z,
                                    ctx ? &ctx->gb_b : nullptr);
  out.s_hat = m.gen_sharp.forward(m.params, cbs, out.code_backward.z,
                                  ctx ? &ctx->gs_b : nullptr);
  return out;
}

}  // namespace detail

// Eq.-level entry point: both translation passes with explicit noise.
// noise_fwd seeds z_b = E^b(b); noise_bwd seeds the re-encoded code from
// b_s. Deterministic for fixed (state, b, s, noise).
template <typename T>
TranslationBundle<T> forward_backward_translate(const ModelState<T>& m,
                                                const Tensor<T>& b,
                                                const Tensor<T>& s,
                                                const Tensor<T>& noise_fwd,
                                                const Tensor<T>& noise_bwd,
                                                const TrainConfig& cfg) {
  return detail::translate(m, detail::as_batch(b), detail::as_batch(s),
                           noise_fwd, noise_bwd, detail::BranchFlags::of(cfg),
                           static_cast<detail::TranslateCtx<T>*>(nullptr));
}

template <typename T>
struct TrainerState {
  nn::AdamState<T> gen;
  nn::AdamState<T> disc;
};

namespace detail {

template <typename T>
Tensor<T> make_noise(Rng& rng, int batch, int latent) {
  Tensor<T> n({batch, latent});
  for (int64_t i = 0; i < n.numel(); ++i) n[i] = static_cast<T>(rng.normal());
  return n;
}

// One generator-side update pass: returns the loss breakdown and fills
// g_grads for every encoder/generator parameter on active paths.
template <typename T>
LossBreakdown<T> generator_pass(const ModelState<T>& m, const TrainConfig& cfg,
                                const FeatureExtractor<T>* extractor,
                                const Tensor<T>& b, const Tensor<T>& s,
                                const Tensor<T>& noise_fwd,
                                const Tensor<T>& noise_bwd,
                                ParamStore<T>& g_grads) {
  const BranchFlags flags = BranchFlags::of(cfg);
  TranslateCtx<T> ctx;
  TranslationBundle<T> t = translate(m, b, s, noise_fwd, noise_bwd, flags, &ctx);

  const T lam_adv = static_cast<T>(cfg.weights.lambda_adv);
  const T lam_kl = static_cast<T>(cfg.weights.lambda_kl);
  const T lam_cc = static_cast<T>(cfg.weights.lambda_cc);
  const T lam_p = static_cast<T>(cfg.weights.lambda_p);

  // --- losses ---------------------------------------------------------
  T kl = 0;
  if (cfg.use_kl()) kl = kl_loss(t.post_b);

  typename detail::DiscriminatorNet<T>::DiscCtx ds_ctx, db_ctx;
  std::vector<Tensor<T>> ds_logits =
      m.disc_sharp.forward_logits(m.params, t.s_b, &ds_ctx);
  std::vector<Tensor<T>> ds_dlogits;
  const T adv_ds = adv_g_loss_logits(ds_logits, &ds_dlogits);

  T adv_db = 0;
  std::vector<Tensor<T>> db_dlogits;
  if (flags.blurring_branch) {
    std::vector<Tensor<T>> db_logits =
        m.disc_blurred.forward_logits(m.params, t.b_s, &db_ctx);
    adv_db = adv_g_loss_logits(db_logits, &db_dlogits);
  }

  T cycle = 0;
  if (flags.blurring_branch)
    cycle = cycle_loss(t.s, t.s_hat, t.b, t.b_hat);

  // --- backward -------------------------------------------------------
  Tensor<T> ds_b(t.s_b.shape());
  Tensor<T> db_s;
  Tensor<T> dz_fwd, dz_bwd;
  const int B = t.b.dim(0);
  const int N = cfg.net.latent_dim;
  if (flags.blur_code) {
    dz_fwd = Tensor<T>({B, N});
    dz_bwd = Tensor<T>({B, N});
  }

  if (flags.blurring_branch) {
    db_s = Tensor<T>(t.b_s.shape());

    // top cycle: s vs s_hat
    Tensor<T> ds_hat(t.s_hat.shape());
    l1_grad_wrt_second(t.s, t.s_hat, lam_cc, ds_hat);
    auto [dcbs, dz2a] = m.gen_sharp.backward(m.params, std::move(ds_hat),
                                             ctx.gs_b, &g_grads);
    if (flags.blur_code) dz_bwd += dz2a;
    db_s += m.enc_content_blurred.backward(m.params, std::move(dcbs),
                                           ctx.ecb_bs, &g_grads);

    // bottom cycle: b vs b_hat
    Tensor<T> db_hat(t.b_hat.shape());
    l1_grad_wrt_second(t.b, t.b_hat, lam_cc, db_hat);
    auto [dcsb, dz2b] = m.gen_blurred.backward(m.params, std::move(db_hat),
                                               ctx.gb_b, &g_grads);
    if (flags.blur_code) dz_bwd += dz2b;
    ds_b += m.enc_content_sharp.backward(m.params, std::move(dcsb),
                                         ctx.ecs_sb, &g_grads);

    // backward-translation code re-encoded from b_s
    if (flags.blur_code) {
      Tensor<T> dmu2({B, N}), dlv2({B, N});
      for (int64_t i = 0; i < dz_bwd.numel(); ++i) {
        dmu2[i] = dz_bwd[i];
        dlv2[i] = dz_bwd[i] * t.code_backward.noise[i] * T(0.5) *
                  std::exp(T(0.5) * t.post_bs.log_var[i]);
      }
      db_s += m.enc_blur.backward(m.params, dmu2, dlv2, ctx.eb_bs, &g_grads);
    }
  }

  // adversarial pull on the fakes (discriminators stay frozen here)
  for (auto& d : ds_dlogits) d *= lam_adv;
  ds_b += m.disc_sharp.backward_logits(m.params, std::move(ds_dlogits), ds_ctx,
                                       nullptr);
  if (flags.blurring_branch) {
    for (auto& d : db_dlogits) d *= lam_adv;
    db_s += m.disc_blurred.backward_logits(m.params, std::move(db_dlogits),
                                           db_ctx, nullptr);
  }

  T perceptual = 0;
  if (cfg.use_perceptual()) {
    if (!extractor) throw ParamError("perceptual loss requires an extractor");
    perceptual = perceptual_loss_grad(*extractor, t.s_b, t.b, lam_p, ds_b);
  }

  // forward translation
  auto [dcb, dz1a] = m.gen_sharp.backward(m.params, std::move(ds_b), ctx.gs_f,
                                          &g_grads);
  if (flags.blur_code) dz_fwd += dz1a;
  m.enc_content_blurred.backward(m.params, std::move(dcb), ctx.ecb_b, &g_grads);

  if (flags.blurring_branch) {
    auto [dcs, dz1b] = m.gen_blurred.backward(m.params, std::move(db_s),
                                              ctx.gb_f, &g_grads);
    if (flags.blur_code) dz_fwd += dz1b;
    m.enc_content_sharp.backward(m.params, std::move(dcs), ctx.ecs_s, &g_grads);
  }

  if (flags.blur_code) {
    Tensor<T> dmu1({B, N}), dlv1({B, N});
    for (int64_t i = 0; i < dz_fwd.numel(); ++i) {
      dmu1[i] = dz_fwd[i];
      dlv1[i] = dz_fwd[i] * t.code_forward.noise[i] * T(0.5) *
                std::exp(T(0.5) * t.post_b.log_var[i]);
    }
    if (cfg.use_kl()) kl_loss_grad(t.post_b, lam_kl, dmu1, dlv1);
    m.enc_blur.backward(m.params, dmu1, dlv1, ctx.eb_b, &g_grads);
  }

  return total_loss(kl, adv_ds, adv_db, cycle, perceptual, cfg.weights,
                    cfg.task_preset);
}

// One discriminator update on fresh fakes (generator side frozen).
// Returns the summed discriminator objective across active domains.
template <typename T>
T discriminator_pass(const ModelState<T>& m, const TrainConfig& cfg,
                     const Tensor<T>& b, const Tensor<T>& s,
                     const Tensor<T>& noise, ParamStore<T>& d_grads) {
  const BranchFlags flags = BranchFlags::of(cfg);

  BlurCode<T> code;
  if (flags.blur_code)
    code = sample_blur_code(m.enc_blur.forward(m.params, b, nullptr), noise);
  Tensor<T> cb = m.enc_content_blurred.forward(m.params, b, nullptr);
  Tensor<T> s_b = m.gen_sharp.forward(m.params, cb, code.z, nullptr);

  T total = 0;
  auto update = [&](const detail::DiscriminatorNet<T>& disc, const Tensor<T>& real,
                    const Tensor<T>& fake) {
    typename detail::DiscriminatorNet<T>::DiscCtx rctx, fctx;
    std::vector<Tensor<T>> rl = disc.forward_logits(m.params, real, &rctx);
    std::vector<Tensor<T>> fl = disc.forward_logits(m.params, fake, &fctx);
    std::vector<Tensor<T>> drl, dfl;
    const T loss = adv_d_loss_logits(rl, fl, &drl, &dfl);
    if (!std::isfinite(static_cast<double>(loss)))
      throw NumericError("non-finite loss component: discriminator");
    disc.backward_logits(m.params, std::move(drl), rctx, &d_grads);
    disc.backward_logits(m.params, std::move(dfl), fctx, &d_grads);
    total += loss;
  };

  update(m.disc_sharp, s, s_b);
  if (flags.blurring_branch) {
    Tensor<T> cs = m.enc_content_sharp.forward(m.params, s, nullptr);
    Tensor<T> b_s = m.gen_blurred.forward(m.params, cs, code.z, nullptr);
    update(m.disc_blurred, b, b_s);
  }
  return total;
}

}  // namespace detail

// Batches consumed by one optimization step: d_steps_per_g discriminator
// batches followed by the generator batch.
template <typename T>
struct StepBatches {
  std::vector<std::pair<Tensor<T>, Tensor<T>>> d_batches;  // (b, s)
  Tensor<T> g_b, g_s;
};

// d_steps_per_g discriminator updates with fresh noise, then one update of
// the encoders and generators jointly. Returns the generator-step losses.
template <typename T>
LossBreakdown<T> train_step(ModelState<T>& model, const StepBatches<T>& batches,
                            TrainerState<T>& trainer, const TrainConfig& cfg,
                            const FeatureExtractor<T>* extractor, double lr,
                            uint64_t step_seed) {
  if (static_cast<int>(batches.d_batches.size()) != cfg.d_steps_per_g)
    throw ParamError("expected one batch pair per discriminator step");

  nn::AdamConfig adam;
  adam.lr = lr;
  adam.beta1 = cfg.adam_beta1;
  adam.beta2 = cfg.adam_beta2;
  adam.grad_clip = cfg.grad_clip;

  const int N = cfg.net.latent_dim;
  const std::vector<std::string> d_names = model.discriminator_side_params();
  const std::vector<std::string> g_names = model.generator_side_params();

  for (int k = 0; k < cfg.d_steps_per_g; ++k) {
    const auto& [db, ds] = batches.d_batches[static_cast<size_t>(k)];
    Rng rng(derive_seed(step_seed, "d-noise", static_cast<uint64_t>(k)));
    Tensor<T> noise;
    if (cfg.use_blur_code()) noise = detail::make_noise<T>(rng, db.dim(0), N);
    ParamStore<T> d_grads;
    detail::discriminator_pass(model, cfg, db, ds, noise, d_grads);
    nn::adam_step(model.params, d_grads, trainer.disc, adam, d_names);
  }

  Rng rng(derive_seed(step_seed, "g-noise"));
  Tensor<T> noise_fwd, noise_bwd;
  if (cfg.use_blur_code()) {
    noise_fwd = detail::make_noise<T>(rng, batches.g_b.dim(0), N);
    noise_bwd = detail::make_noise<T>(rng, batches.g_b.dim(0), N);
  }
  ParamStore<T> g_grads;
  LossBreakdown<T> losses = detail::generator_pass(
      model, cfg, extractor, batches.g_b, batches.g_s, noise_fwd, noise_bwd,
      g_grads);
  nn::adam_step(model.params, g_grads, trainer.gen, adam, g_names);
  return losses;
}

// Simple form: discriminator steps reuse the given batch pair.
template <typename T>
LossBreakdown<T> train_step(ModelState<T>& model, const Tensor<T>& batch_b,
                            const Tensor<T>& batch_s, TrainerState<T>& trainer,
                            const TrainConfig& cfg,
                            const FeatureExtractor<T>* extractor, double lr,
                            uint64_t step_seed) {
  StepBatches<T> batches;
  for (int k = 0; k < cfg.d_steps_per_g; ++k)
    batches.d_batches.emplace_back(batch_b, batch_s);
  batches.g_b = batch_b;
  batches.g_s = batch_s;
  return train_step(model, batches, trainer, cfg, extractor, lr, step_seed);
}

// Test-time path: the blurring branch is removed; the blur code is the
// posterior mean (noise = 0), so inference is deterministic.
template <typename T>
Tensor<T> deblur(const ModelState<T>& m, const Tensor<T>& b) {
  const bool batched = b.ndim() == 4;
  Tensor<T> x = detail::as_batch(b);
  detail::check_spatial(x, 8, "deblur");
  BlurCode<T> code;
  if (m.with_blur_code) {
    BlurPosterior<T> post = m.enc_blur.forward(m.params, x, nullptr);
    code.noise = Tensor<T>(post.mu.shape());
    code.z = post.mu;
  }
  Tensor<T> content = m.enc_content_blurred.forward(m.params, std::move(x), nullptr);
  Tensor<T> out = m.gen_sharp.forward(m.params, content, code.z, nullptr);
  return detail::maybe_unbatch(std::move(out), batched);
}

// ---------------------------------------------------------------------------
// Checkpoint round-trip (model parameters + both Adam states + metadata).

template <typename T>
void save_train_checkpoint(const std::filesystem::path& path,
                           const ModelState<T>& model,
                           const TrainerState<T>& trainer,
                           const TrainConfig& cfg, int epoch) {
  Container c;
  c.meta["format_version"] = kContainerVersion;
  c.meta["kind"] = "train";
  c.meta["epoch"] = epoch;
  c.meta["master_seed"] = std::to_string(cfg.master_seed);
  c.meta["config"] = config_to_map(cfg);
  c.meta["config_hash"] = to_hex(config_hash(cfg));
  c.meta["adam_g_t"] = trainer.gen.t;
  c.meta["adam_d_t"] = trainer.disc.t;

  auto put = [&c](const std::string& name, const auto& tensor) {
    if constexpr (std::is_same_v<T, float>) {
      c.tensors.emplace(name, tensor);
    } else {
      c.tensors.emplace(name, tensor.template cast<float>());
    }
  };
  for (const auto& [name, t] : model.params.map()) put("model." + name, t);
  for (const auto& [name, t] : trainer.gen.m.map()) put("adam_g.m." + name, t);
  for (const auto& [name, t] : trainer.gen.v.map()) put("adam_g.v." + name, t);
  for (const auto& [name, t] : trainer.disc.m.map()) put("adam_d.m." + name, t);
  for (const auto& [name, t] : trainer.disc.v.map()) put("adam_d.v." + name, t);
  write_container(path, c);
}

template <typename T>
struct LoadedCheckpoint {
  TrainConfig cfg;
  int epoch = -1;
  ModelState<T> model;
  TrainerState<T> trainer;
};

template <typename T>
LoadedCheckpoint<T> load_train_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (!c.meta.contains("config")) throw DataError("checkpoint has no config");
  std::map<std::string, std::string> cfg_map =
      c.meta["config"].get<std::map<std::string, std::string>>();
  TrainConfig cfg = config_from_map(cfg_map);

  LoadedCheckpoint<T> out{cfg, c.meta.value("epoch", -1),
                          init_model<T>(cfg.net, cfg.master_seed,
                                        cfg.use_blur_code()),
                          {}};
  auto fetch = [&c](const std::string& name) -> const Tensor<float>& {
    auto it = c.tensors.find(name);
    if (it == c.tensors.end())
      throw DataError("checkpoint missing tensor: " + name);
    return it->second;
  };
  auto assign = [](Tensor<T>& dst, const Tensor<float>& src) {
    if (dst.shape() != src.shape()) throw DataError("checkpoint shape mismatch");
    for (int64_t i = 0; i < src.numel(); ++i) dst[i] = static_cast<T>(src[i]);
  };
  for (auto& [name, t] : out.model.params.map()) assign(t, fetch("model." + name));
  for (const auto& [name, t] : c.tensors) {
    auto starts = [&name](const char* p) { return name.rfind(p, 0) == 0; };
    if (starts("adam_g.m.")) assign(out.trainer.gen.m.create(name.substr(9), t.shape()), t);
    else if (starts("adam_g.v.")) assign(out.trainer.gen.v.create(name.substr(9), t.shape()), t);
    else if (starts("adam_d.m.")) assign(out.trainer.disc.m.create(name.substr(9), t.shape()), t);
    else if (starts("adam_d.v.")) assign(out.trainer.disc.v.create(name.substr(9), t.shape()), t);
  }
  out.trainer.gen.t = c.meta.value("adam_g_t", 0);
  out.trainer.disc.t = c.meta.value("adam_d_t", 0);
  return out;
}

// ---------------------------------------------------------------------------
// Dataset: decoded images held in memory (desk scale).

template <typename T>
struct Dataset {
  std::vector<Tensor<T>> images;  // (C,H,W) in [-1,1]

  static Dataset load(const Manifest& m, int channels, int min_size) {
    if (m.entries.empty()) throw DataError("empty manifest");
    Dataset d;
    d.images.reserve(m.entries.size());
    for (const auto& e : m.entries) {
      Tensor<T> img = load_image_tensor<T>(m.resolve(e), channels);
      if (img.dim(1) < min_size || img.dim(2) < min_size)
        throw DataError("image smaller than crop size: " + e.path);
      d.images.push_back(std::move(img));
    }
    return d;
  }
};

namespace detail {

// independent uniform draws with replacement, random crop, optional flip
template <typename T>
Tensor<T> sample_batch(const Dataset<T>& data, Rng& rng, int batch, int crop,
                       bool flips) {
  const int C = data.images[0].dim(0);
  Tensor<T> out({batch, C, crop, crop});
  for (int n = 0; n < batch; ++n) {
    const Tensor<T>& img = data.images[static_cast<size_t>(
        rng.uniform_int(static_cast<int>(data.images.size())))];
    const int oy = rng.uniform_int(img.dim(1) - crop + 1);
    const int ox = rng.uniform_int(img.dim(2) - crop + 1);
    const bool flip = flips && rng.bernoulli(0.5);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
          out.at(n, c, y, x) =
              img.at(c, oy + y, flip ? ox + crop - 1 - x : ox + x);
  }
  return out;
}

inline std::string checkpoint_name(int epoch) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "checkpoint_epoch_%04d.ckpt", epoch);
  return std::string(buf);
}

template <typename T>
std::string breakdown_line(int epoch, int iter, const LossBreakdown<T>& l,
                           double lr) {
  std::ostringstream os;
  os << epoch << "\t" << iter << "\t" << fmt_double(l.kl) << "\t"
     << fmt_double(l.adv_ds) << "\t" << fmt_double(l.adv_db) << "\t"
     << fmt_double(l.cycle) << "\t" << fmt_double(l.perceptual) << "\t"
     << fmt_double(l.total) << "\t" << fmt_double(lr);
  return os.str();
}

}  // namespace detail

struct TrainOutcome {
  std::filesystem::path final_checkpoint;
  int epochs_run = 0;
  int iters_per_epoch = 0;
};

// Full schedule: per-epoch checkpoints, tab-separated metrics log,
// resumable from any epoch checkpoint with a matching config.
template <typename T = float>
TrainOutcome train(const TrainConfig& cfg,
                   const std::filesystem::path& sharp_manifest,
                   const std::filesystem::path& blurred_manifest,
                   const std::filesystem::path& out_dir,
                   const std::filesystem::path& resume = {}) {
  cfg.validate();
  const Manifest sharp_m = read_manifest(sharp_manifest);
  const Manifest blurred_m = read_manifest(blurred_manifest);
  Dataset<T> sharp = Dataset<T>::load(sharp_m, cfg.net.image_channels,
                                      cfg.net.crop_size);
  Dataset<T> blurred = Dataset<T>::load(blurred_m, cfg.net.image_channels,
                                        cfg.net.crop_size);

  std::filesystem::create_directories(out_dir);
  write_config_echo(out_dir / "config_echo.txt", cfg);

  ModelState<T> model = init_model<T>(cfg.net, cfg.master_seed, cfg.use_blur_code());
  TrainerState<T> trainer;
  int start_epoch = 0;
  if (!resume.empty()) {
    LoadedCheckpoint<T> loaded = load_train_checkpoint<T>(resume);
    if (config_hash(loaded.cfg) != config_hash(cfg))
      throw DataError("resume checkpoint was produced with a different config");
    model = std::move(loaded.model);
    trainer = std::move(loaded.trainer);
    start_epoch = loaded.epoch + 1;
  }

  std::unique_ptr<FeatureExtractor<T>> extractor;
  if (cfg.use_perceptual()) {
    if (!cfg.extractor_file.empty())
      extractor = std::make_unique<FileFeatureExtractor<T>>(cfg.extractor_file);
    else
      extractor = make_perceptual_surrogate<T>(cfg.net.image_channels);
  }

  const int iters = cfg.iters_per_epoch > 0
                        ? cfg.iters_per_epoch
                        : static_cast<int>((std::max(sharp.images.size(),
                                                     blurred.images.size()) +
                                            cfg.batch_size - 1) /
                                           cfg.batch_size);

  std::ofstream log(out_dir / "metrics.tsv",
                    start_epoch > 0 ? std::ios::app : std::ios::trunc);
  if (!log) throw DataError("cannot open metrics log");

  TrainOutcome outcome;
  outcome.iters_per_epoch = iters;
  std::filesystem::path last_ckpt;
  for (int epoch = start_epoch; epoch < cfg.total_epochs(); ++epoch) {
    const double lr = lr_at(epoch, cfg);
    for (int iter = 0; iter < iters; ++iter) {
      StepBatches<T> batches;
      for (int k = 0; k < cfg.d_steps_per_g; ++k) {
        Rng rb(derive_seed(cfg.master_seed, "d-batch",
                           static_cast<uint64_t>(epoch),
                           static_cast<uint64_t>(iter), static_cast<uint64_t>(k)));
        batches.d_batches.emplace_back(
            detail::sample_batch(blurred, rb, cfg.batch_size,
                                 cfg.net.crop_size, cfg.allow_flips()),
            detail::sample_batch(sharp, rb, cfg.batch_size, cfg.net.crop_size,
                                 cfg.allow_flips()));
      }
      Rng rg(derive_seed(cfg.master_seed, "g-batch",
                         static_cast<uint64_t>(epoch),
                         static_cast<uint64_t>(iter)));
      batches.g_b = detail::sample_batch(blurred, rg, cfg.batch_size,
                                         cfg.net.crop_size, cfg.allow_flips());
      batches.g_s = detail::sample_batch(sharp, rg, cfg.batch_size,
                                         cfg.net.crop_size, cfg.allow_flips());

      LossBreakdown<T> losses;
      try {
        losses = train_step(model, batches, trainer, cfg, extractor.get(), lr,
                            derive_seed(cfg.master_seed, "step",
                                        static_cast<uint64_t>(epoch),
                                        static_cast<uint64_t>(iter)));
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " iter " +
                           std::to_string(iter) + ": " + e.what());
      }
      if (iter % cfg.log_every == 0)
        log << detail::breakdown_line(epoch, iter, losses, lr) << "\n";
    }
    log.flush();
    if ((epoch + 1) % cfg.checkpoint_every == 0 ||
        epoch == cfg.total_epochs() - 1) {
      last_ckpt = out_dir / detail::checkpoint_name(epoch);
      save_train_checkpoint(last_ckpt, model, trainer, cfg, epoch);
    }
    outcome.epochs_run = epoch - start_epoch + 1;
  }
  outcome.final_checkpoint = last_ckpt;
  return outcome;
}

}  // namespace unblur
