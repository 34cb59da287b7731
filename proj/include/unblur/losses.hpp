#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unblur/features.hpp"
#include "unblur/networks.hpp"

namespace unblur {

struct LossWeights {
  double lambda_adv = 1.0;
  double lambda_kl = 0.01;
  double lambda_cc = 10.0;
  double lambda_p = 0.1;

  void validate() const {
    if (lambda_adv < 0 || lambda_kl < 0 || lambda_cc < 0 || lambda_p < 0)
      throw ParamError("loss weights must be nonnegative");
  }
};

template <typename T>
struct LossBreakdown {
  T kl = 0;
  T adv_ds = 0;      // generator-side sharp-domain adversarial term
  T adv_db = 0;      // generator-side blurred-domain adversarial term
  T cycle = 0;
  T perceptual = 0;
  T total = 0;

  // names the first non-finite component, empty when all are finite
  std::string first_non_finite() const {
    auto bad = [](T v) { return !std::isfinite(static_cast<double>(v)); };
    if (bad(kl)) return "kl";
    if (bad(adv_ds)) return "adv_ds";
    if (bad(adv_db)) return "adv_db";
    if (bad(cycle)) return "cycle";
    if (bad(perceptual)) return "perceptual";
    if (bad(total)) return "total";
    return {};
  }
};

enum class TaskPreset { face, text, generic };

enum class AdvSide { discriminator, generator };

// --------------------------------------------------------------------------
// KL divergence of N(mu, sigma^2) from N(0, I): per-sample
// 0.5 * sum_i(mu_i^2 + sigma_i^2 - log sigma_i^2 - 1), averaged over the
// batch when the posterior is batched.

template <typename T>
T kl_loss(const BlurPosterior<T>& post) {
  if (!post.mu.same_shape(post.log_var))
    throw ShapeError("posterior mu/log_var shape mismatch");
  if (!post.finite()) throw NumericError("non-finite blur posterior");
  const int batch = post.mu.ndim() == 2 ? post.mu.dim(0) : 1;
  double acc = 0;
  for (int64_t i = 0; i < post.mu.numel(); ++i) {
    const double mu = post.mu[i];
    const double lv = post.log_var[i];
    acc += mu * mu + std::exp(lv) - lv - 1.0;
  }
  return static_cast<T>(0.5 * acc / batch);
}

// accumulates scale * d(kl_loss)/d(mu, log_var)
template <typename T>
void kl_loss_grad(const BlurPosterior<T>& post, T scale, Tensor<T>& dmu,
                  Tensor<T>& dlog_var) {
  const int batch = post.mu.ndim() == 2 ? post.mu.dim(0) : 1;
  const T inv_b = scale / static_cast<T>(batch);
  for (int64_t i = 0; i < post.mu.numel(); ++i) {
    dmu[i] += inv_b * post.mu[i];
    dlog_var[i] += inv_b * T(0.5) * (std::exp(post.log_var[i]) - T(1));
  }
}

// --------------------------------------------------------------------------
// Adversarial losses. The public form takes sigmoid scores in (0,1), per
// scale, exactly as the discriminators emit them. The discriminator side is
// the negated log objective; the generator side is the non-saturating
// -log D(fake). Both are per-element means, averaged across scales.

template <typename T>
T adversarial_loss(const std::vector<Tensor<T>>& real_scores,
                   const std::vector<Tensor<T>>& fake_scores, AdvSide side) {
  auto check = [](const std::vector<Tensor<T>>& maps) {
    for (const auto& m : maps)
      for (int64_t i = 0; i < m.numel(); ++i)
        if (!(m[i] > T(0) && m[i] < T(1)))
          throw ParamError("discriminator score outside (0,1)");
  };
  check(fake_scores);
  if (fake_scores.empty()) throw ParamError("no fake score maps");
  double acc = 0;
  if (side == AdvSide::discriminator) {
    check(real_scores);
    if (real_scores.size() != fake_scores.size())
      throw ShapeError("real/fake scale count mismatch");
    for (size_t s = 0; s < fake_scores.size(); ++s) {
      const auto& r = real_scores[s];
      const auto& f = fake_scores[s];
      if (!r.same_shape(f)) throw ShapeError("real/fake score map shape mismatch");
      double m = 0;
      for (int64_t i = 0; i < r.numel(); ++i)
        m += -std::log(static_cast<double>(r[i])) -
             std::log(1.0 - static_cast<double>(f[i]));
      acc += m / r.numel();
    }
  } else {
    for (const auto& f : fake_scores) {
      double m = 0;
      for (int64_t i = 0; i < f.numel(); ++i)
        m += -std::log(static_cast<double>(f[i]));
      acc += m / f.numel();
    }
  }
  return static_cast<T>(acc / fake_scores.size());
}

// Stable training forms on pre-sigmoid logits:
//   D loss = mean softplus(-l_real) + mean softplus(l_fake)
//   G loss = mean softplus(-l_fake)
// identical in value to adversarial_loss(sigmoid(l), ...).

template <typename T>
T adv_d_loss_logits(const std::vector<Tensor<T>>& real_logits,
                    const std::vector<Tensor<T>>& fake_logits,
                    std::vector<Tensor<T>>* dreal = nullptr,
                    std::vector<Tensor<T>>* dfake = nullptr) {
  if (real_logits.size() != fake_logits.size() || fake_logits.empty())
    throw ShapeError("bad adversarial logit scale lists");
  const double ns = static_cast<double>(fake_logits.size());
  double acc = 0;
  if (dreal) dreal->clear();
  if (dfake) dfake->clear();
  for (size_t s = 0; s < fake_logits.size(); ++s) {
    const auto& lr = real_logits[s];
    const auto& lf = fake_logits[s];
    double m = 0;
    Tensor<T> gr(lr.shape()), gf(lf.shape());
    for (int64_t i = 0; i < lr.numel(); ++i) {
      m += nn::softplus(-lr[i]);
      gr[i] = static_cast<T>(-nn::sigmoid(-static_cast<double>(lr[i])) /
                             (lr.numel() * ns));
    }
    for (int64_t i = 0; i < lf.numel(); ++i) {
      m += nn::softplus(lf[i]);
      gf[i] = static_cast<T>(nn::sigmoid(static_cast<double>(lf[i])) /
                             (lf.numel() * ns));
    }
    acc += m / lr.numel();
    if (dreal) dreal->push_back(std::move(gr));
    if (dfake) dfake->push_back(std::move(gf));
  }
  return static_cast<T>(acc / ns);
}

template <typename T>
T adv_g_loss_logits(const std::vector<Tensor<T>>& fake_logits,
                    std::vector<Tensor<T>>* dfake = nullptr) {
  if (fake_logits.empty()) throw ShapeError("no fake logit maps");
  const double ns = static_cast<double>(fake_logits.size());
  double acc = 0;
  if (dfake) dfake->clear();
  for (const auto& lf : fake_logits) {
    double m = 0;
    Tensor<T> gf(lf.shape());
    for (int64_t i = 0; i < lf.numel(); ++i) {
      m += nn::softplus(-lf[i]);
      gf[i] = static_cast<T>(-nn::sigmoid(-static_cast<double>(lf[i])) /
                             (lf.numel() * ns));
    }
    acc += m / lf.numel();
    if (dfake) dfake->push_back(std::move(gf));
  }
  return static_cast<T>(acc / ns);
}

// --------------------------------------------------------------------------
// Cycle consistency: mean |s - s_hat| + mean |b - b_hat|.

template <typename T>
T cycle_loss(const Tensor<T>& s, const Tensor<T>& s_hat, const Tensor<T>& b,
             const Tensor<T>& b_hat) {
  T loss = 0;
  if (!s.empty() || !s_hat.empty()) {
    if (!s.same_shape(s_hat)) throw ShapeError("cycle: s/s_hat shape mismatch");
    loss += static_cast<T>(mean_abs_diff(s, s_hat));
  }
  if (!b.empty() || !b_hat.empty()) {
    if (!b.same_shape(b_hat)) throw ShapeError("cycle: b/b_hat shape mismatch");
    loss += static_cast<T>(mean_abs_diff(b, b_hat));
  }
  return loss;
}

// accumulates scale * d(mean |x - x_hat|)/d(x_hat)
template <typename T>
void l1_grad_wrt_second(const Tensor<T>& x, const Tensor<T>& x_hat, T scale,
                        Tensor<T>& dx_hat) {
  const T g = scale / static_cast<T>(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) {
    if (x_hat[i] > x[i])
      dx_hat[i] += g;
    else if (x_hat[i] < x[i])
      dx_hat[i] -= g;
  }
}

// --------------------------------------------------------------------------
// Perceptual loss: squared feature distance between the deblurred result
// and its *blurred* source, averaged over feature elements.

template <typename T>
T perceptual_loss(const FeatureExtractor<T>& extractor, const Tensor<T>& s_b,
                  const Tensor<T>& b) {
  const Tensor<T> fa = extractor.features(s_b);
  const Tensor<T> fb = extractor.features(b);
  if (!fa.same_shape(fb)) throw ShapeError("perceptual: feature shape mismatch");
  double acc = 0;
  for (int64_t i = 0; i < fa.numel(); ++i) {
    const double d = static_cast<double>(fa[i]) - static_cast<double>(fb[i]);
    acc += d * d;
  }
  return static_cast<T>(acc / fa.numel());
}

// training-path variant: returns the loss and accumulates
// scale * d(loss)/d(s_b)
template <typename T>
T perceptual_loss_grad(const FeatureExtractor<T>& extractor, const Tensor<T>& s_b,
                       const Tensor<T>& b, T scale, Tensor<T>& ds_b) {
  nn::Ctx<T> ctx;
  const Tensor<T> fa = extractor.features(s_b, &ctx);
  const Tensor<T> fb = extractor.features(b);
  if (!fa.same_shape(fb)) throw ShapeError("perceptual: feature shape mismatch");
  double acc = 0;
  Tensor<T> df(fa.shape());
  const T g = T(2) * scale / static_cast<T>(fa.numel());
  for (int64_t i = 0; i < fa.numel(); ++i) {
    const double d = static_cast<double>(fa[i]) - static_cast<double>(fb[i]);
    acc += d * d;
    df[i] = g * static_cast<T>(d);
  }
  Tensor<T> dimg = extractor.backward(std::move(df), ctx);
  ds_b += dimg;
  return static_cast<T>(acc / fa.numel());
}

// --------------------------------------------------------------------------
// Weighted combination. For the text task the perceptual term is dropped.

template <typename T>
LossBreakdown<T> total_loss(T kl, T adv_ds, T adv_db, T cycle, T perceptual,
                            const LossWeights& weights,
                            TaskPreset preset = TaskPreset::generic) {
  weights.validate();
  LossBreakdown<T> out;
  out.kl = kl;
  out.adv_ds = adv_ds;
  out.adv_db = adv_db;
  out.cycle = cycle;
  out.perceptual = preset == TaskPreset::text ? T(0) : perceptual;
  const std::string bad = out.first_non_finite();
  if (!bad.empty()) throw NumericError("non-finite loss component: " + bad);
  out.total = static_cast<T>(weights.lambda_adv * (out.adv_ds + out.adv_db) +
                             weights.lambda_kl * out.kl +
                             weights.lambda_cc * out.cycle +
                             weights.lambda_p * out.perceptual);
  if (!std::isfinite(static_cast<double>(out.total)))
    throw NumericError("non-finite loss component: total");
  return out;
}

}  // namespace unblur
