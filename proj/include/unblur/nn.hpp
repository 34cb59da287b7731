#pragma once

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "unblur/errors.hpp"
#include "unblur/rng.hpp"
#include "unblur/tensor.hpp"

namespace unblur::nn {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

// log(1 + e^x) without overflow
template <typename T>
T softplus(T x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, T(0));
}

// Named parameter storage. Shared layers are realized by registering the
// same canonical name from two owners: the second create() is a no-op, so
// there is a single tensor referenced from both places.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& create(const std::string& name, const std::vector<int>& shape) {
    auto it = values_.find(name);
    if (it != values_.end()) {
      if (it->second.shape() != shape)
        throw ShapeError("parameter '" + name + "' re-registered with a different shape");
      return it->second;
    }
    return values_.emplace(name, Tensor<T>(shape)).first->second;
  }

  bool has(const std::string& name) const { return values_.count(name) > 0; }

  Tensor<T>& get(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ParamError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor<T>& get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ParamError("unknown parameter '" + name + "'");
    return it->second;
  }

  // gradient accumulation target, zero-initialized on first touch
  Tensor<T>& accum(const std::string& name, const std::vector<int>& shape) {
    return create(name, shape);
  }

  std::map<std::string, Tensor<T>>& map() { return values_; }
  const std::map<std::string, Tensor<T>>& map() const { return values_; }
  size_t size() const { return values_.size(); }
  void clear() { values_.clear(); }

 private:
  std::map<std::string, Tensor<T>> values_;
};

// Per-invocation activation cache. forward() pushes, backward() pops in
// exact reverse order, so one module call owns one Ctx.
template <typename T>
struct Ctx {
  std::vector<Tensor<T>> saved;
  void save(Tensor<T> t) { saved.push_back(std::move(t)); }
  Tensor<T> pop() {
    Tensor<T> t = std::move(saved.back());
    saved.pop_back();
    return t;
  }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  // Creates (and initializes) parameters if absent. Must draw from rng
  // only for parameters it actually creates.
  virtual void register_params(ParamStore<T>&, Rng&) {}
  virtual Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x,
                            Ctx<T>* ctx) const = 0;
  // grads may be null: propagate input gradients without accumulating
  // parameter gradients (frozen evaluation).
  virtual Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                             ParamStore<T>* grads) const = 0;
  virtual void param_names(std::vector<std::string>& out) const {}
};

template <typename T>
void init_gaussian(Tensor<T>& t, Rng& rng, double stddev = 0.02) {
  for (int64_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<T>(stddev * rng.normal());
}

// ---------------------------------------------------------------------------
// Conv2d: weight (Cout, Cin, k, k), zero padding, im2col + GEMM.

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, int in_ch, int out_ch, int k, int stride, int pad)
      : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), k_(k),
        stride_(stride), pad_(pad) {}

  void register_params(ParamStore<T>& P, Rng& rng) override {
    const bool fresh = !P.has(name_ + ".w");
    Tensor<T>& w = P.create(name_ + ".w", {out_ch_, in_ch_, k_, k_});
    Tensor<T>& b = P.create(name_ + ".b", {out_ch_});
    if (fresh) {
      init_gaussian(w, rng);
      b.fill(T(0));
    }
  }

  void param_names(std::vector<std::string>& out) const override {
    out.push_back(name_ + ".w");
    out.push_back(name_ + ".b");
  }

  static int out_size(int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    check_input(x);
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = out_size(H, k_, stride_, pad_);
    const int Wo = out_size(W, k_, stride_, pad_);
    if (Ho <= 0 || Wo <= 0) throw ShapeError(name_ + ": input too small");
    const Tensor<T>& w = P.get(name_ + ".w");
    const Tensor<T>& b = P.get(name_ + ".b");

    Tensor<T> y({N, out_ch_, Ho, Wo});
    const int rows = in_ch_ * k_ * k_;
    std::vector<T> cols(static_cast<size_t>(rows) * Ho * Wo);
    ECMap<T> wmat(w.data(), out_ch_, rows);
    for (int n = 0; n < N; ++n) {
      im2col(x, n, Ho, Wo, cols.data());
      ECMap<T> cmat(cols.data(), rows, Ho * Wo);
      EMap<T> ymat(y.data() + static_cast<size_t>(n) * out_ch_ * Ho * Wo,
                   out_ch_, Ho * Wo);
      ymat.noalias() = wmat * cmat;
      for (int co = 0; co < out_ch_; ++co)
        ymat.row(co).array() += static_cast<T>(b[co]);
    }
    if (ctx) ctx->save(std::move(x));
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    Tensor<T> x = ctx.pop();
    const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
    const int Ho = dy.dim(2), Wo = dy.dim(3);
    const Tensor<T>& w = P.get(name_ + ".w");
    const int rows = in_ch_ * k_ * k_;

    Tensor<T> dx({N, in_ch_, H, W});
    std::vector<T> cols(static_cast<size_t>(rows) * Ho * Wo);
    std::vector<T> dcols(static_cast<size_t>(rows) * Ho * Wo);
    ECMap<T> wmat(w.data(), out_ch_, rows);

    Tensor<T>* dw = nullptr;
    Tensor<T>* db = nullptr;
    if (grads) {
      dw = &grads->accum(name_ + ".w", w.shape());
      db = &grads->accum(name_ + ".b", {out_ch_});
    }
    for (int n = 0; n < N; ++n) {
      ECMap<T> dymat(dy.data() + static_cast<size_t>(n) * out_ch_ * Ho * Wo,
                     out_ch_, Ho * Wo);
      if (grads) {
        im2col(x, n, Ho, Wo, cols.data());
        ECMap<T> cmat(cols.data(), rows, Ho * Wo);
        EMap<T> dwmat(dw->data(), out_ch_, rows);
        dwmat.noalias() += dymat * cmat.transpose();
        for (int co = 0; co < out_ch_; ++co) (*db)[co] += dymat.row(co).sum();
      }
      EMap<T> dcmat(dcols.data(), rows, Ho * Wo);
      dcmat.noalias() = wmat.transpose() * dymat;
      col2im(dcols.data(), n, Ho, Wo, dx);
    }
    return dx;
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(1) != in_ch_)
      throw ShapeError(name_ + ": expected (N," + std::to_string(in_ch_) +
                       ",H,W) input, got " + x.shape_str());
  }

  void im2col(const Tensor<T>& x, int n, int Ho, int Wo, T* cols) const {
    const int H = x.dim(2), W = x.dim(3);
    size_t r = 0;
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++r) {
          T* dst = cols + r * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= H) {
              std::fill(dst, dst + Wo, T(0));
              dst += Wo;
              continue;
            }
            const T* src = &x.at(n, ci, iy, 0);
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              *dst++ = (ix >= 0 && ix < W) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const T* cols, int n, int Ho, int Wo, Tensor<T>& dx) const {
    const int H = dx.dim(2), W = dx.dim(3);
    size_t r = 0;
    for (int ci = 0; ci < in_ch_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++r) {
          const T* src = cols + r * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= H) {
              src += Wo;
              continue;
            }
            T* dst = &dx.at(n, ci, iy, 0);
            for (int ox = 0; ox < Wo; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix >= 0 && ix < W) dst[ix] += src[ox];
            }
            src += Wo;
          }
        }
      }
    }
  }

  std::string name_;
  int in_ch_, out_ch_, k_, stride_, pad_;
};

// ---------------------------------------------------------------------------
// ConvTranspose2d: weight (Cin, Cout, k, k); output (H-1)*s - 2p + k.

template <typename T>
class ConvTranspose2d : public Layer<T> {
 public:
  ConvTranspose2d(std::string name, int in_ch, int out_ch, int k, int stride,
                  int pad)
      : name_(std::move(name)), in_ch_(in_ch), out_ch_(out_ch), k_(k),
        stride_(stride), pad_(pad) {}

  void register_params(ParamStore<T>& P, Rng& rng) override {
    const bool fresh = !P.has(name_ + ".w");
    Tensor<T>& w = P.create(name_ + ".w", {in_ch_, out_ch_, k_, k_});
    Tensor<T>& b = P.create(name_ + ".b", {out_ch_});
    if (fresh) {
      init_gaussian(w, rng);
      b.fill(T(0));
    }
  }

  void param_names(std::vector<std::string>& out) const override {
    out.push_back(name_ + ".w");
    out.push_back(name_ + ".b");
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 4 || x.dim(1) != in_ch_)
      throw ShapeError(name_ + ": bad input shape " + x.shape_str());
    const int N = x.dim(0), Hi = x.dim(2), Wi = x.dim(3);
    const int Ho = (Hi - 1) * stride_ - 2 * pad_ + k_;
    const int Wo = (Wi - 1) * stride_ - 2 * pad_ + k_;
    const Tensor<T>& w = P.get(name_ + ".w");
    const Tensor<T>& b = P.get(name_ + ".b");
    const int rows = out_ch_ * k_ * k_;

    Tensor<T> y({N, out_ch_, Ho, Wo});
    std::vector<T> g(static_cast<size_t>(rows) * Hi * Wi);
    ECMap<T> wmat(w.data(), in_ch_, rows);
    for (int n = 0; n < N; ++n) {
      ECMap<T> xmat(x.data() + static_cast<size_t>(n) * in_ch_ * Hi * Wi,
                    in_ch_, Hi * Wi);
      EMap<T> gmat(g.data(), rows, Hi * Wi);
      gmat.noalias() = wmat.transpose() * xmat;
      scatter(g.data(), n, Hi, Wi, y);
      for (int co = 0; co < out_ch_; ++co) {
        T* dst = &y.at(n, co, 0, 0);
        for (int i = 0; i < Ho * Wo; ++i) dst[i] += b[co];
      }
    }
    if (ctx) ctx->save(std::move(x));
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    Tensor<T> x = ctx.pop();
    const int N = x.dim(0), Hi = x.dim(2), Wi = x.dim(3);
    const Tensor<T>& w = P.get(name_ + ".w");
    const int rows = out_ch_ * k_ * k_;

    Tensor<T> dx({N, in_ch_, Hi, Wi});
    std::vector<T> dg(static_cast<size_t>(rows) * Hi * Wi);
    ECMap<T> wmat(w.data(), in_ch_, rows);
    Tensor<T>* dw = nullptr;
    Tensor<T>* db = nullptr;
    if (grads) {
      dw = &grads->accum(name_ + ".w", w.shape());
      db = &grads->accum(name_ + ".b", {out_ch_});
    }
    for (int n = 0; n < N; ++n) {
      gather(dy, n, Hi, Wi, dg.data());
      ECMap<T> dgmat(dg.data(), rows, Hi * Wi);
      EMap<T> dxmat(dx.data() + static_cast<size_t>(n) * in_ch_ * Hi * Wi,
                    in_ch_, Hi * Wi);
      dxmat.noalias() = wmat * dgmat;
      if (grads) {
        ECMap<T> xmat(x.data() + static_cast<size_t>(n) * in_ch_ * Hi * Wi,
                      in_ch_, Hi * Wi);
        EMap<T> dwmat(dw->data(), in_ch_, rows);
        dwmat.noalias() += xmat * dgmat.transpose();
        const int Ho = dy.dim(2), Wo = dy.dim(3);
        for (int co = 0; co < out_ch_; ++co) {
          const T* src = &dy.at(n, co, 0, 0);
          T s = 0;
          for (int i = 0; i < Ho * Wo; ++i) s += src[i];
          (*db)[co] += s;
        }
      }
    }
    return dx;
  }

 private:
  // y[n,co,iy*s-p+ky, ix*s-p+kx] += g[(co*k+ky)*k+kx, iy*Wi+ix]
  void scatter(const T* g, int n, int Hi, int Wi, Tensor<T>& y) const {
    const int Ho = y.dim(2), Wo = y.dim(3);
    size_t r = 0;
    for (int co = 0; co < out_ch_; ++co) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++r) {
          const T* src = g + r * Hi * Wi;
          for (int iy = 0; iy < Hi; ++iy) {
            const int oy = iy * stride_ - pad_ + ky;
            if (oy < 0 || oy >= Ho) {
              src += Wi;
              continue;
            }
            T* dst = &y.at(n, co, oy, 0);
            for (int ix = 0; ix < Wi; ++ix) {
              const int ox = ix * stride_ - pad_ + kx;
              if (ox >= 0 && ox < Wo) dst[ox] += src[ix];
            }
            src += Wi;
          }
        }
      }
    }
  }

  void gather(const Tensor<T>& dy, int n, int Hi, int Wi, T* dg) const {
    const int Ho = dy.dim(2), Wo = dy.dim(3);
    size_t r = 0;
    for (int co = 0; co < out_ch_; ++co) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx, ++r) {
          T* dst = dg + r * Hi * Wi;
          for (int iy = 0; iy < Hi; ++iy) {
            const int oy = iy * stride_ - pad_ + ky;
            if (oy < 0 || oy >= Ho) {
              std::fill(dst, dst + Wi, T(0));
              dst += Wi;
              continue;
            }
            const T* src = &dy.at(n, co, oy, 0);
            for (int ix = 0; ix < Wi; ++ix) {
              const int ox = ix * stride_ - pad_ + kx;
              *dst++ = (ox >= 0 && ox < Wo) ? src[ox] : T(0);
            }
          }
        }
      }
    }
  }

  std::string name_;
  int in_ch_, out_ch_, k_, stride_, pad_;
};

// ---------------------------------------------------------------------------
// InstanceNorm: affine, per-(sample, channel) statistics over H*W.

template <typename T>
class InstanceNorm : public Layer<T> {
 public:
  InstanceNorm(std::string name, int channels, double eps = 1e-5)
      : name_(std::move(name)), channels_(channels), eps_(eps) {}

  void register_params(ParamStore<T>& P, Rng&) override {
    const bool fresh = !P.has(name_ + ".gamma");
    Tensor<T>& g = P.create(name_ + ".gamma", {channels_});
    Tensor<T>& b = P.create(name_ + ".beta", {channels_});
    if (fresh) {
      g.fill(T(1));
      b.fill(T(0));
    }
  }

  void param_names(std::vector<std::string>& out) const override {
    out.push_back(name_ + ".gamma");
    out.push_back(name_ + ".beta");
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 4 || x.dim(1) != channels_)
      throw ShapeError(name_ + ": bad input shape " + x.shape_str());
    const int N = x.dim(0), HW = x.dim(2) * x.dim(3);
    const Tensor<T>& gamma = P.get(name_ + ".gamma");
    const Tensor<T>& beta = P.get(name_ + ".beta");

    Tensor<T> y(x.shape());
    Tensor<T> xhat(x.shape());
    Tensor<T> inv_std({N, channels_});
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < channels_; ++c) {
        const T* px = &x.at(n, c, 0, 0);
        double mean = 0;
        for (int i = 0; i < HW; ++i) mean += px[i];
        mean /= HW;
        double var = 0;
        for (int i = 0; i < HW; ++i) {
          const double d = px[i] - mean;
          var += d * d;
        }
        var /= HW;
        const T inv = static_cast<T>(1.0 / std::sqrt(var + eps_));
        inv_std.at(n, c) = inv;
        T* ph = &xhat.at(n, c, 0, 0);
        T* py = &y.at(n, c, 0, 0);
        const T g = gamma[c], b = beta[c], m = static_cast<T>(mean);
        for (int i = 0; i < HW; ++i) {
          ph[i] = (px[i] - m) * inv;
          py[i] = g * ph[i] + b;
        }
      }
    }
    if (ctx) {
      ctx->save(std::move(xhat));
      ctx->save(std::move(inv_std));
    }
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    Tensor<T> inv_std = ctx.pop();
    Tensor<T> xhat = ctx.pop();
    const int N = dy.dim(0), HW = dy.dim(2) * dy.dim(3);
    const Tensor<T>& gamma = P.get(name_ + ".gamma");

    Tensor<T>* dgamma = nullptr;
    Tensor<T>* dbeta = nullptr;
    if (grads) {
      dgamma = &grads->accum(name_ + ".gamma", {channels_});
      dbeta = &grads->accum(name_ + ".beta", {channels_});
    }
    Tensor<T> dx(dy.shape());
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < channels_; ++c) {
        const T* pdy = &dy.at(n, c, 0, 0);
        const T* ph = &xhat.at(n, c, 0, 0);
        double sum_dy = 0, sum_dy_h = 0;
        for (int i = 0; i < HW; ++i) {
          sum_dy += pdy[i];
          sum_dy_h += static_cast<double>(pdy[i]) * ph[i];
        }
        if (grads) {
          (*dgamma)[c] += static_cast<T>(sum_dy_h);
          (*dbeta)[c] += static_cast<T>(sum_dy);
        }
        const T g = gamma[c];
        const T inv = inv_std.at(n, c);
        const T mean_dy = static_cast<T>(sum_dy / HW);
        const T mean_dy_h = static_cast<T>(sum_dy_h / HW);
        T* pdx = &dx.at(n, c, 0, 0);
        for (int i = 0; i < HW; ++i)
          pdx[i] = g * inv * (pdy[i] - mean_dy - ph[i] * mean_dy_h);
      }
    }
    return dx;
  }

 private:
  std::string name_;
  int channels_;
  double eps_;
};

// ---------------------------------------------------------------------------

enum class Act { relu, lrelu, tanh, sigmoid };

template <typename T>
class Activation : public Layer<T> {
 public:
  explicit Activation(Act kind, double slope = 0.2)
      : kind_(kind), slope_(static_cast<T>(slope)) {}

  Tensor<T> forward(const ParamStore<T>&, Tensor<T> x, Ctx<T>* ctx) const override {
    Tensor<T> y(x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) y[i] = apply(x[i]);
    if (ctx) ctx->save(y);
    return y;
  }

  Tensor<T> backward(const ParamStore<T>&, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>*) const override {
    Tensor<T> y = ctx.pop();
    Tensor<T> dx(dy.shape());
    switch (kind_) {
      case Act::relu:
        for (int64_t i = 0; i < dy.numel(); ++i)
          dx[i] = y[i] > T(0) ? dy[i] : T(0);
        break;
      case Act::lrelu:
        for (int64_t i = 0; i < dy.numel(); ++i)
          dx[i] = y[i] > T(0) ? dy[i] : slope_ * dy[i];
        break;
      case Act::tanh:
        for (int64_t i = 0; i < dy.numel(); ++i)
          dx[i] = dy[i] * (T(1) - y[i] * y[i]);
        break;
      case Act::sigmoid:
        for (int64_t i = 0; i < dy.numel(); ++i)
          dx[i] = dy[i] * y[i] * (T(1) - y[i]);
        break;
    }
    return dx;
  }

 private:
  T apply(T x) const {
    switch (kind_) {
      case Act::relu: return x > T(0) ? x : T(0);
      case Act::lrelu: return x > T(0) ? x : slope_ * x;
      case Act::tanh: return std::tanh(x);
      case Act::sigmoid: return sigmoid(x);
    }
    return x;
  }

  Act kind_;
  T slope_;
};

// ---------------------------------------------------------------------------
// Linear on (N, In) -> (N, Out); weight (Out, In).

template <typename T>
class Linear : public Layer<T> {
 public:
  Linear(std::string name, int in, int out)
      : name_(std::move(name)), in_(in), out_(out) {}

  void register_params(ParamStore<T>& P, Rng& rng) override {
    const bool fresh = !P.has(name_ + ".w");
    Tensor<T>& w = P.create(name_ + ".w", {out_, in_});
    Tensor<T>& b = P.create(name_ + ".b", {out_});
    if (fresh) {
      init_gaussian(w, rng);
      b.fill(T(0));
    }
  }

  void param_names(std::vector<std::string>& out) const override {
    out.push_back(name_ + ".w");
    out.push_back(name_ + ".b");
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 2 || x.dim(1) != in_)
      throw ShapeError(name_ + ": bad input shape " + x.shape_str());
    const int N = x.dim(0);
    const Tensor<T>& w = P.get(name_ + ".w");
    const Tensor<T>& b = P.get(name_ + ".b");
    Tensor<T> y({N, out_});
    ECMap<T> xm(x.data(), N, in_);
    ECMap<T> wm(w.data(), out_, in_);
    EMap<T> ym(y.data(), N, out_);
    ym.noalias() = xm * wm.transpose();
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < out_; ++o) y.at(n, o) += b[o];
    if (ctx) ctx->save(std::move(x));
    return y;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    Tensor<T> x = ctx.pop();
    const int N = x.dim(0);
    const Tensor<T>& w = P.get(name_ + ".w");
    Tensor<T> dx({N, in_});
    ECMap<T> dym(dy.data(), N, out_);
    ECMap<T> xm(x.data(), N, in_);
    ECMap<T> wm(w.data(), out_, in_);
    EMap<T> dxm(dx.data(), N, in_);
    dxm.noalias() = dym * wm;
    if (grads) {
      Tensor<T>& dw = grads->accum(name_ + ".w", w.shape());
      Tensor<T>& db = grads->accum(name_ + ".b", {out_});
      EMap<T> dwm(dw.data(), out_, in_);
      dwm.noalias() += dym.transpose() * xm;
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < out_; ++o) db[o] += dy.at(n, o);
    }
    return dx;
  }

 private:
  std::string name_;
  int in_, out_;
};

// ---------------------------------------------------------------------------
// GlobalAvgPool: (N,C,H,W) -> (N,C)

template <typename T>
class GlobalAvgPool : public Layer<T> {
 public:
  Tensor<T> forward(const ParamStore<T>&, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 4) throw ShapeError("global pool expects (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> y({N, C});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T* p = &x.at(n, c, 0, 0);
        double s = 0;
        for (int i = 0; i < HW; ++i) s += p[i];
        y.at(n, c) = static_cast<T>(s / HW);
      }
    if (ctx) ctx->save(Tensor<T>({0, C, x.dim(2), x.dim(3)}));
    return y;
  }

  Tensor<T> backward(const ParamStore<T>&, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>*) const override {
    Tensor<T> shape_tag = ctx.pop();
    const int C = shape_tag.dim(1), H = shape_tag.dim(2), W = shape_tag.dim(3);
    const int N = dy.dim(0), HW = H * W;
    Tensor<T> dx({N, C, H, W});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T g = dy.at(n, c) / static_cast<T>(HW);
        T* p = &dx.at(n, c, 0, 0);
        for (int i = 0; i < HW; ++i) p[i] = g;
      }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// AvgPool2: 2x2, stride 2 (spatial dims must be even).

template <typename T>
class AvgPool2 : public Layer<T> {
 public:
  Tensor<T> forward(const ParamStore<T>&, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
      throw ShapeError("avgpool2 expects even (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), Ho = x.dim(2) / 2, Wo = x.dim(3) / 2;
    Tensor<T> y({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j)
            y.at(n, c, i, j) =
                (x.at(n, c, 2 * i, 2 * j) + x.at(n, c, 2 * i, 2 * j + 1) +
                 x.at(n, c, 2 * i + 1, 2 * j) + x.at(n, c, 2 * i + 1, 2 * j + 1)) /
                T(4);
    if (ctx) ctx->save(Tensor<T>({0, C, x.dim(2), x.dim(3)}));
    return y;
  }

  Tensor<T> backward(const ParamStore<T>&, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>*) const override {
    Tensor<T> shape_tag = ctx.pop();
    const int C = shape_tag.dim(1), H = shape_tag.dim(2), W = shape_tag.dim(3);
    const int N = dy.dim(0);
    Tensor<T> dx({N, C, H, W});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H / 2; ++i)
          for (int j = 0; j < W / 2; ++j) {
            const T g = dy.at(n, c, i, j) / T(4);
            dx.at(n, c, 2 * i, 2 * j) = g;
            dx.at(n, c, 2 * i, 2 * j + 1) = g;
            dx.at(n, c, 2 * i + 1, 2 * j) = g;
            dx.at(n, c, 2 * i + 1, 2 * j + 1) = g;
          }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// MaxPool2: 2x2, stride 2, argmax cached (used by file-backed extractors).

template <typename T>
class MaxPool2 : public Layer<T> {
 public:
  Tensor<T> forward(const ParamStore<T>&, Tensor<T> x, Ctx<T>* ctx) const override {
    if (x.ndim() != 4 || x.dim(2) % 2 || x.dim(3) % 2)
      throw ShapeError("maxpool2 expects even (N,C,H,W)");
    const int N = x.dim(0), C = x.dim(1), Ho = x.dim(2) / 2, Wo = x.dim(3) / 2;
    Tensor<T> y({N, C, Ho, Wo});
    Tensor<T> arg({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < Ho; ++i)
          for (int j = 0; j < Wo; ++j) {
            T best = x.at(n, c, 2 * i, 2 * j);
            int which = 0;
            const T cands[4] = {best, x.at(n, c, 2 * i, 2 * j + 1),
                                x.at(n, c, 2 * i + 1, 2 * j),
                                x.at(n, c, 2 * i + 1, 2 * j + 1)};
            for (int k = 1; k < 4; ++k)
              if (cands[k] > best) {
                best = cands[k];
                which = k;
              }
            y.at(n, c, i, j) = best;
            arg.at(n, c, i, j) = static_cast<T>(which);
          }
    if (ctx) {
      ctx->save(Tensor<T>({0, C, x.dim(2), x.dim(3)}));
      ctx->save(std::move(arg));
    }
    return y;
  }

  Tensor<T> backward(const ParamStore<T>&, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>*) const override {
    Tensor<T> arg = ctx.pop();
    Tensor<T> shape_tag = ctx.pop();
    const int C = shape_tag.dim(1), H = shape_tag.dim(2), W = shape_tag.dim(3);
    const int N = dy.dim(0);
    Tensor<T> dx({N, C, H, W});
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < H / 2; ++i)
          for (int j = 0; j < W / 2; ++j) {
            const int which = static_cast<int>(arg.at(n, c, i, j));
            const int di = which / 2, dj = which % 2;
            dx.at(n, c, 2 * i + di, 2 * j + dj) = dy.at(n, c, i, j);
          }
    return dx;
  }
};

// ---------------------------------------------------------------------------

template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  Sequential& add(std::unique_ptr<Layer<T>> layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }

  template <typename L, typename... Args>
  Sequential& emplace(Args&&... args) {
    layers_.push_back(std::make_unique<L>(std::forward<Args>(args)...));
    return *this;
  }

  void register_params(ParamStore<T>& P, Rng& rng) override {
    for (auto& l : layers_) l->register_params(P, rng);
  }

  void param_names(std::vector<std::string>& out) const override {
    for (const auto& l : layers_) l->param_names(out);
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    for (const auto& l : layers_) x = l->forward(P, std::move(x), ctx);
    return x;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      dy = (*it)->backward(P, std::move(dy), ctx, grads);
    return dy;
  }

  size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------
// Residual block: x + IN(conv(relu(IN(conv(x)))))

template <typename T>
class ResidualBlock : public Layer<T> {
 public:
  ResidualBlock(const std::string& name, int channels) {
    branch_.template emplace<Conv2d<T>>(name + ".conv1", channels, channels, 3, 1, 1);
    branch_.template emplace<InstanceNorm<T>>(name + ".in1", channels);
    branch_.template emplace<Activation<T>>(Act::relu);
    branch_.template emplace<Conv2d<T>>(name + ".conv2", channels, channels, 3, 1, 1);
    branch_.template emplace<InstanceNorm<T>>(name + ".in2", channels);
  }

  void register_params(ParamStore<T>& P, Rng& rng) override {
    branch_.register_params(P, rng);
  }

  void param_names(std::vector<std::string>& out) const override {
    branch_.param_names(out);
  }

  Tensor<T> forward(const ParamStore<T>& P, Tensor<T> x, Ctx<T>* ctx) const override {
    Tensor<T> f = branch_.forward(P, x, ctx);
    f += x;
    return f;
  }

  Tensor<T> backward(const ParamStore<T>& P, Tensor<T> dy, Ctx<T>& ctx,
                     ParamStore<T>* grads) const override {
    Tensor<T> dx = branch_.backward(P, dy, ctx, grads);
    dx += dy;
    return dx;
  }

 private:
  Sequential<T> branch_;
};

// ---------------------------------------------------------------------------
// Adam with an optional first-moment-only mode (second_moment=false makes a
// single step from zero state move each parameter by exactly -lr * grad).

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool second_moment = true;
  double grad_clip = 0.0;  // global-norm clip threshold; 0 disables
};

template <typename T>
struct AdamState {
  ParamStore<T> m, v;
  int64_t t = 0;
};

template <typename T>
void adam_step(ParamStore<T>& params, ParamStore<T>& grads, AdamState<T>& state,
               const AdamConfig& cfg, const std::vector<std::string>& names) {
  if (cfg.grad_clip > 0) {
    double norm2 = 0;
    for (const auto& name : names) {
      if (!grads.has(name)) continue;
      const Tensor<T>& g = grads.get(name);
      for (int64_t i = 0; i < g.numel(); ++i)
        norm2 += static_cast<double>(g[i]) * g[i];
    }
    const double norm = std::sqrt(norm2);
    if (norm > cfg.grad_clip) {
      const T scale = static_cast<T>(cfg.grad_clip / norm);
      for (const auto& name : names)
        if (grads.has(name)) grads.get(name) *= scale;
    }
  }

  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (const auto& name : names) {
    if (!grads.has(name)) continue;
    Tensor<T>& p = params.get(name);
    const Tensor<T>& g = grads.get(name);
    Tensor<T>& m = state.m.accum(name, p.shape());
    Tensor<T>& v = state.v.accum(name, p.shape());
    for (int64_t i = 0; i < p.numel(); ++i) {
      m[i] = static_cast<T>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i]);
      const double mhat = m[i] / bc1;
      if (cfg.second_moment) {
        v[i] = static_cast<T>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
        const double vhat = v[i] / bc2;
        p[i] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
      } else {
        p[i] -= static_cast<T>(cfg.lr * mhat);
      }
    }
  }
}

}  // namespace unblur::nn
