#pragma once

// Minimal layer library with hand-derived backward passes: convolution
// (im2col + GEMM), batch norm, ReLU, max/global-average pooling, linear and
// residual blocks. Enough to express a small CNN and a ResNet-50 trunk.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "morphquad/common.hpp"

namespace morphquad::nn {

// NCHW tensor of doubles. Fully connected activations use h = w = 1.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_) : n(n_), c(c_), h(h_), w(w_), data(std::size_t(n_) * c_ * h_ * w_, 0.0) {}

  std::size_t plane() const noexcept { return std::size_t(h) * w; }
  std::size_t sample_size() const noexcept { return std::size_t(c) * h * w; }
  double& at(int i, int ch, int y, int x) { return data[((std::size_t(i) * c + ch) * h + y) * w + x]; }
  const double& at(int i, int ch, int y, int x) const { return data[((std::size_t(i) * c + ch) * h + y) * w + x]; }
  bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

struct Param {
  std::vector<double> value;
  std::vector<double> grad;

  explicit Param(std::size_t size = 0) : value(size, 0.0), grad(size, 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  // Consumes dL/dy, accumulates parameter gradients, returns dL/dx.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect_params(std::vector<Param*>&) {}
  // Non-trainable state that is part of a checkpoint (running statistics).
  virtual void collect_buffers(std::vector<std::vector<double>*>&) {}
};

using LayerPtr = std::unique_ptr<Layer>;

inline void he_init(std::vector<double>& w, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w) v = dist(rng);
}

class Conv2d final : public Layer {
 public:
  Conv2d(int in_c, int out_c, int kernel, int stride, int pad, bool bias, std::mt19937_64& rng)
      : in_c_(in_c), out_c_(out_c), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias),
        weight_(std::size_t(out_c) * in_c * kernel * kernel), bias_(bias ? std::size_t(out_c) : 0) {
    he_init(weight_.value, in_c * kernel * kernel, rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    if (x.c != in_c_) throw DimensionError("conv: channel mismatch");
    in_shape_ = {x.n, x.c, x.h, x.w};
    oh_ = (x.h + 2 * pad_ - k_) / stride_ + 1;
    ow_ = (x.w + 2 * pad_ - k_) / stride_ + 1;
    if (oh_ < 1 || ow_ < 1) throw DimensionError("conv: input smaller than kernel");
    const Eigen::Index K = Eigen::Index(in_c_) * k_ * k_;
    const Eigen::Index P = Eigen::Index(oh_) * ow_;
    cols_.setZero(K, P * x.n);
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < in_c_; ++ch)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const Eigen::Index row = (Eigen::Index(ch) * k_ + ky) * k_ + kx;
            for (int oy = 0; oy < oh_; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= x.h) continue;
              for (int ox = 0; ox < ow_; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= x.w) continue;
                cols_(row, Eigen::Index(i) * P + Eigen::Index(oy) * ow_ + ox) = x.at(i, ch, iy, ix);
              }
            }
          }
    const auto W = weights();
    Eigen::MatrixXd out = W * cols_;
    Tensor y(x.n, out_c_, oh_, ow_);
    for (int i = 0; i < x.n; ++i)
      for (int oc = 0; oc < out_c_; ++oc) {
        const double b = has_bias_ ? bias_.value[std::size_t(oc)] : 0.0;
        double* dst = &y.at(i, oc, 0, 0);
        for (Eigen::Index p = 0; p < P; ++p) dst[p] = out(oc, Eigen::Index(i) * P + p) + b;
      }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    const Eigen::Index P = Eigen::Index(oh_) * ow_;
    Eigen::MatrixXd G(out_c_, P * g.n);
    for (int i = 0; i < g.n; ++i)
      for (int oc = 0; oc < out_c_; ++oc) {
        const double* src = &g.at(i, oc, 0, 0);
        for (Eigen::Index p = 0; p < P; ++p) G(oc, Eigen::Index(i) * P + p) = src[p];
      }
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dW(
        weight_.grad.data(), out_c_, Eigen::Index(in_c_) * k_ * k_);
    dW.noalias() += G * cols_.transpose();
    if (has_bias_)
      for (int oc = 0; oc < out_c_; ++oc) bias_.grad[std::size_t(oc)] += G.row(oc).sum();
    const Eigen::MatrixXd dcols = weights().transpose() * G;
    Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (int i = 0; i < dx.n; ++i)
      for (int ch = 0; ch < in_c_; ++ch)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const Eigen::Index row = (Eigen::Index(ch) * k_ + ky) * k_ + kx;
            for (int oy = 0; oy < oh_; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= dx.h) continue;
              for (int ox = 0; ox < ow_; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix < 0 || ix >= dx.w) continue;
                dx.at(i, ch, iy, ix) += dcols(row, Eigen::Index(i) * P + Eigen::Index(oy) * ow_ + ox);
              }
            }
          }
    return dx;
  }

  void collect_params(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

 private:
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> weights() const {
    return {weight_.value.data(), out_c_, Eigen::Index(in_c_) * k_ * k_};
  }

  int in_c_, out_c_, k_, stride_, pad_;
  bool has_bias_;
  Param weight_, bias_;
  Eigen::MatrixXd cols_;
  std::array<int, 4> in_shape_{};
  int oh_ = 0, ow_ = 0;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    Tensor y = x;
    mask_.assign(x.data.size(), 0);
    for (std::size_t i = 0; i < y.data.size(); ++i) {
      if (y.data[i] > 0.0)
        mask_[i] = 1;
      else
        y.data[i] = 0.0;
    }
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.data.size(); ++i)
      if (!mask_[i]) dx.data[i] = 0.0;
    return dx;
  }

 private:
  std::vector<unsigned char> mask_;
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int pad = 0) : k_(kernel), stride_(stride), pad_(pad) {}

  Tensor forward(const Tensor& x, bool) override {
    const int oh = (x.h + 2 * pad_ - k_) / stride_ + 1;
    const int ow = (x.w + 2 * pad_ - k_) / stride_ + 1;
    if (oh < 1 || ow < 1) throw DimensionError("maxpool: input smaller than window");
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y(x.n, x.c, oh, ow);
    argmax_.assign(y.data.size(), 0);
    std::size_t o = 0;
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < x.c; ++ch)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const int iy = oy * stride_ - pad_ + ky, ix = ox * stride_ - pad_ + kx;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                const std::size_t idx = ((std::size_t(i) * x.c + ch) * x.h + iy) * x.w + ix;
                if (x.data[idx] > best) {
                  best = x.data[idx];
                  best_idx = idx;
                }
              }
            y.data[o] = best;
            argmax_[o] = best_idx;
          }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < g.data.size(); ++o) dx.data[argmax_[o]] += g.data[o];
    return dx;
  }

 private:
  int k_, stride_, pad_;
  std::vector<std::size_t> argmax_;
  std::array<int, 4> in_shape_{};
};

// Per-channel batch normalization. Training mode uses batch statistics and
// updates running averages; evaluation mode uses the running averages.
class BatchNorm2d final : public Layer {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : c_(channels), momentum_(momentum), eps_(eps), gamma_(std::size_t(channels)), beta_(std::size_t(channels)),
        running_mean_(std::size_t(channels), 0.0), running_var_(std::size_t(channels), 1.0) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0);
  }

  Tensor forward(const Tensor& x, bool training) override {
    if (x.c != c_) throw DimensionError("batchnorm: channel mismatch");
    training_ = training;
    const std::size_t plane = x.plane();
    const double count = double(x.n) * double(plane);
    Tensor y(x.n, x.c, x.h, x.w);
    xhat_ = Tensor(x.n, x.c, x.h, x.w);
    inv_std_.assign(std::size_t(c_), 0.0);
    for (int ch = 0; ch < c_; ++ch) {
      double mean, var;
      if (training) {
        double s = 0.0;
        for (int i = 0; i < x.n; ++i)
          for (std::size_t p = 0; p < plane; ++p) s += (&x.at(i, ch, 0, 0))[p];
        mean = s / count;
        double ss = 0.0;
        for (int i = 0; i < x.n; ++i)
          for (std::size_t p = 0; p < plane; ++p) {
            const double d = (&x.at(i, ch, 0, 0))[p] - mean;
            ss += d * d;
          }
        var = ss / count;
        const double unbiased = count > 1 ? ss / (count - 1) : var;
        running_mean_[std::size_t(ch)] = (1 - momentum_) * running_mean_[std::size_t(ch)] + momentum_ * mean;
        running_var_[std::size_t(ch)] = (1 - momentum_) * running_var_[std::size_t(ch)] + momentum_ * unbiased;
      } else {
        mean = running_mean_[std::size_t(ch)];
        var = running_var_[std::size_t(ch)];
      }
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[std::size_t(ch)] = inv;
      const double g = gamma_.value[std::size_t(ch)], b = beta_.value[std::size_t(ch)];
      for (int i = 0; i < x.n; ++i) {
        const double* src = &x.at(i, ch, 0, 0);
        double* xh = &xhat_.at(i, ch, 0, 0);
        double* dst = &y.at(i, ch, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) {
          xh[p] = (src[p] - mean) * inv;
          dst[p] = g * xh[p] + b;
        }
      }
    }
    return y;
  }

  Tensor backward(const Tensor& g) override {
    const std::size_t plane = g.plane();
    const double count = double(g.n) * double(plane);
    Tensor dx(g.n, g.c, g.h, g.w);
    for (int ch = 0; ch < c_; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int i = 0; i < g.n; ++i) {
        const double* dy = &g.at(i, ch, 0, 0);
        const double* xh = &xhat_.at(i, ch, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) {
          sum_dy += dy[p];
          sum_dy_xhat += dy[p] * xh[p];
        }
      }
      gamma_.grad[std::size_t(ch)] += sum_dy_xhat;
      beta_.grad[std::size_t(ch)] += sum_dy;
      const double gm = gamma_.value[std::size_t(ch)], inv = inv_std_[std::size_t(ch)];
      for (int i = 0; i < g.n; ++i) {
        const double* dy = &g.at(i, ch, 0, 0);
        const double* xh = &xhat_.at(i, ch, 0, 0);
        double* out = &dx.at(i, ch, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) {
          if (training_)
            out[p] = gm * inv * (dy[p] - sum_dy / count - xh[p] * sum_dy_xhat / count);
          else
            out[p] = gm * inv * dy[p];
        }
      }
    }
    return dx;
  }

  void collect_params(std::vector<Param*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<std::vector<double>*>& out) override {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  int c_;
  double momentum_, eps_;
  Param gamma_, beta_;
  std::vector<double> running_mean_, running_var_;
  Tensor xhat_;
  std::vector<double> inv_std_;
  bool training_ = true;
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y(x.n, x.c, 1, 1);
    const std::size_t plane = x.plane();
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < x.c; ++ch) {
        const double* src = &x.at(i, ch, 0, 0);
        double s = 0.0;
        for (std::size_t p = 0; p < plane; ++p) s += src[p];
        y.at(i, ch, 0, 0) = s / double(plane);
      }
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const std::size_t plane = dx.plane();
    for (int i = 0; i < dx.n; ++i)
      for (int ch = 0; ch < dx.c; ++ch) {
        const double v = g.at(i, ch, 0, 0) / double(plane);
        double* dst = &dx.at(i, ch, 0, 0);
        for (std::size_t p = 0; p < plane; ++p) dst[p] = v;
      }
    return dx;
  }

 private:
  std::array<int, 4> in_shape_{};
};

class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool) override {
    in_shape_ = {x.n, x.c, x.h, x.w};
    Tensor y = x;
    y.c = int(x.sample_size());
    y.h = y.w = 1;
    return y;
  }
  Tensor backward(const Tensor& g) override {
    Tensor dx = g;
    dx.n = in_shape_[0];
    dx.c = in_shape_[1];
    dx.h = in_shape_[2];
    dx.w = in_shape_[3];
    return dx;
  }

 private:
  std::array<int, 4> in_shape_{};
};

class Linear final : public Layer {
 public:
  Linear(int in, int out, std::mt19937_64& rng)
      : in_(in), out_(out), weight_(std::size_t(in) * out), bias_(std::size_t(out)) {
    std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in));
    for (auto& v : weight_.value) v = dist(rng);
  }

  Tensor forward(const Tensor& x, bool) override {
    if (int(x.sample_size()) != in_) throw DimensionError("linear: input size mismatch");
    input_ = x;
    const auto X = as_matrix(input_, in_);
    Tensor y(x.n, out_, 1, 1);
    Eigen::Map<RowMat> Y(y.data.data(), x.n, out_);
    Y.noalias() = X * weights().transpose();
    for (int i = 0; i < x.n; ++i) Y.row(i) += Eigen::Map<const Eigen::RowVectorXd>(bias_.value.data(), out_);
    return y;
  }

  Tensor backward(const Tensor& g) override {
    const auto X = as_matrix(input_, in_);
    Eigen::Map<const RowMat> G(g.data.data(), g.n, out_);
    Eigen::Map<RowMat> dW(weight_.grad.data(), out_, in_);
    dW.noalias() += G.transpose() * X;
    Eigen::Map<Eigen::RowVectorXd>(bias_.grad.data(), out_) += G.colwise().sum();
    Tensor dx(input_.n, input_.c, input_.h, input_.w);
    Eigen::Map<RowMat> DX(dx.data.data(), input_.n, in_);
    DX.noalias() = G * weights();
    return dx;
  }

  void collect_params(std::vector<Param*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  static Eigen::Map<const RowMat> as_matrix(const Tensor& t, int cols) { return {t.data.data(), t.n, cols}; }
  Eigen::Map<const RowMat> weights() const { return {weight_.value.data(), out_, in_}; }

  int in_, out_;
  Param weight_, bias_;
  Tensor input_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential& add(LayerPtr layer) {
    layers_.push_back(std::move(layer));
    return *this;
  }
  template <typename L, typename... Args>
  Sequential& emplace(Args&&... args) {
    return add(std::make_unique<L>(std::forward<Args>(args)...));
  }
  bool empty() const noexcept { return layers_.empty(); }

  Tensor forward(const Tensor& x, bool training) override {
    Tensor cur = x;
    for (auto& l : layers_) cur = l->forward(cur, training);
    return cur;
  }
  Tensor backward(const Tensor& g) override {
    Tensor cur = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = (*it)->backward(cur);
    return cur;
  }
  void collect_params(std::vector<Param*>& out) override {
    for (auto& l : layers_) l->collect_params(out);
  }
  void collect_buffers(std::vector<std::vector<double>*>& out) override {
    for (auto& l : layers_) l->collect_buffers(out);
  }

 private:
  std::vector<LayerPtr> layers_;
};

// relu(main(x) + shortcut(x)); an empty shortcut is the identity.
class Residual final : public Layer {
 public:
  Residual(std::unique_ptr<Sequential> main, std::unique_ptr<Sequential> shortcut)
      : main_(std::move(main)), shortcut_(std::move(shortcut)) {}

  Tensor forward(const Tensor& x, bool training) override {
    Tensor a = main_->forward(x, training);
    const Tensor b = shortcut_->empty() ? x : shortcut_->forward(x, training);
    if (!a.same_shape(b)) throw DimensionError("residual: branch shape mismatch");
    for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
    return relu_.forward(a, training);
  }
  Tensor backward(const Tensor& g) override {
    const Tensor gs = relu_.backward(g);
    Tensor dx = main_->backward(gs);
    const Tensor ds = shortcut_->empty() ? gs : shortcut_->backward(gs);
    for (std::size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += ds.data[i];
    return dx;
  }
  void collect_params(std::vector<Param*>& out) override {
    main_->collect_params(out);
    shortcut_->collect_params(out);
  }
  void collect_buffers(std::vector<std::vector<double>*>& out) override {
    main_->collect_buffers(out);
    shortcut_->collect_buffers(out);
  }

 private:
  std::unique_ptr<Sequential> main_, shortcut_;
  ReLU relu_;
};

// Adam with bias correction.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ValidationError("learning rate must be > 0");
  }

  void step(const std::vector<Param*>& params) {
    if (m_.size() != params.size()) {
      m_.clear();
      v_.clear();
      for (const auto* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1 - b1_) * g;
        v[i] = b2_ * v[i] + (1 - b2_) * g * g;
        p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace morphquad::nn
