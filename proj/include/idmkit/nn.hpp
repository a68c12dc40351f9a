#pragma once

// Small layer library with explicit forward/backward passes. Activations are
// column-major Eigen matrices with one column per spatial position or token.
// Layers hold parameters only; whatever a backward pass needs is written to a
// caller-owned Cache, so a model can serve concurrent inference calls.

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "idmkit/errors.hpp"
#include "idmkit/rng.hpp"

namespace idm::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;
  /// Decoupled weight decay applies to matrices only, never biases or norms.
  bool decay = false;
};

template <class T>
class ParamSet {
 public:
  Param<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, bool decay) {
    for (const auto& p : params_) {
      if (p.name == name) throw ValidationError("duplicate parameter name " + name);
    }
    Param<T>& p = params_.emplace_back();
    p.name = name;
    p.value = Mat<T>::Zero(rows, cols);
    p.grad = Mat<T>::Zero(rows, cols);
    p.decay = decay;
    return p;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  std::deque<Param<T>>& all() { return params_; }
  const std::deque<Param<T>>& all() const { return params_; }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

 private:
  std::deque<Param<T>> params_;  // deque keeps addresses stable
};

template <class T>
void init_uniform(Mat<T>& m, double bound, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
  }
}

template <class T>
void init_normal(Mat<T>& m, double stddev, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * stddev);
}

// tanh-approximated GELU.
template <class T>
Mat<T> gelu(const Mat<T>& x) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  auto a = x.array();
  return (T(0.5) * a * (T(1) + (c * (a + k * a.cube())).tanh())).matrix();
}

template <class T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  const T c = static_cast<T>(0.7978845608028654);
  const T k = static_cast<T>(0.044715);
  auto a = x.array();
  const auto t = (c * (a + k * a.cube())).tanh().eval();
  const auto d = T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * c * (T(1) + T(3) * k * a.square());
  return (dy.array() * d).matrix();
}

template <class T>
class Linear {
 public:
  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, int in, int out, Rng& rng)
      : w_(&ps.add(name + ".weight", out, in, true)), b_(&ps.add(name + ".bias", out, 1, false)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(w_->value, bound, rng);
    init_uniform(b_->value, bound, rng);
  }

  struct Cache {
    Mat<T> x;
  };

  /// `cache` may be null when no backward pass follows.
  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    if (cache) cache->x = x;
    Mat<T> y = w_->value * x;
    y.colwise() += b_->value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) {
    w_->grad.noalias() += dy * cache.x.transpose();
    b_->grad.col(0) += dy.rowwise().sum();
    return w_->value.transpose() * dy;
  }

  const Param<T>& weight() const { return *w_; }

 private:
  Param<T>* w_ = nullptr;
  Param<T>* b_ = nullptr;
};

template <class T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, int dim)
      : g_(&ps.add(name + ".gamma", dim, 1, false)), b_(&ps.add(name + ".beta", dim, 1, false)) {
    g_->value.setOnes();
  }

  struct Cache {
    Mat<T> xhat;
    Vec<T> rstd;
  };

  Mat<T> forward(const Mat<T>& x, Cache* cache) const {
    const Eigen::Index d = x.rows();
    Cache local;
    Cache& c = cache ? *cache : local;
    c.xhat.resize(x.rows(), x.cols());
    c.rstd.resize(x.cols());
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const T mu = x.col(j).mean();
      const T var = (x.col(j).array() - mu).square().sum() / static_cast<T>(d);
      c.rstd(j) = T(1) / std::sqrt(var + static_cast<T>(1e-5));
      c.xhat.col(j) = (x.col(j).array() - mu) * c.rstd(j);
    }
    Mat<T> y = (c.xhat.array().colwise() * g_->value.col(0).array()).matrix();
    y.colwise() += b_->value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& cache) {
    const Mat<T>& xhat_ = cache.xhat;
    const Vec<T>& rstd_ = cache.rstd;
    const T d = static_cast<T>(dy.rows());
    g_->grad.col(0) += (dy.array() * xhat_.array()).rowwise().sum().matrix();
    b_->grad.col(0) += dy.rowwise().sum();
    const Mat<T> dxhat = (dy.array().colwise() * g_->value.col(0).array()).matrix();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index j = 0; j < dy.cols(); ++j) {
      const T s1 = dxhat.col(j).sum();
      const T s2 = dxhat.col(j).dot(xhat_.col(j));
      dx.col(j) = (rstd_(j) / d) * (d * dxhat.col(j).array() - s1 - xhat_.col(j).array() * s2);
    }
    return dx;
  }

 private:
  Param<T>* g_ = nullptr;
  Param<T>* b_ = nullptr;
};

/// 3x3 convolution, padding 1, over a batch of images stored as
/// channels x (H*W*N) with pixels in row-major order inside each image.
template <class T>
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(ParamSet<T>& ps, const std::string& name, int in, int out, int stride, Rng& rng)
      : in_(in), stride_(stride),
        w_(&ps.add(name + ".weight", out, 9 * in, true)),
        b_(&ps.add(name + ".bias", out, 1, false)) {
    init_normal(w_->value, std::sqrt(2.0 / (9.0 * in)), rng);
  }

  struct Cache {
    Mat<T> cols;
    int h = 0, w = 0, n = 0;
  };

  static int out_size(int n, int stride) { return (n - 1) / stride + 1; }
  int stride() const { return stride_; }

  Mat<T> forward(const Mat<T>& x, int h, int w, int n, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.h = h, c.w = w, c.n = n;
    im2col(x, c);
    Mat<T> y = w_->value * c.cols;
    y.colwise() += b_->value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& c, bool need_input_grad = true) {
    w_->grad.noalias() += dy * c.cols.transpose();
    b_->grad.col(0) += dy.rowwise().sum();
    if (!need_input_grad) return {};
    const Mat<T> dcols = w_->value.transpose() * dy;
    const int ho = out_size(c.h, stride_), wo = out_size(c.w, stride_);
    Mat<T> dx = Mat<T>::Zero(in_, static_cast<Eigen::Index>(c.h) * c.w * c.n);
    const Eigen::Index hw = static_cast<Eigen::Index>(c.h) * c.w;
    const Eigen::Index ohw = static_cast<Eigen::Index>(ho) * wo;
    for (int img = 0; img < c.n; ++img) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const T* src = dcols.col(img * ohw + oy * wo + ox).data();
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride_ + ky - 1;
            if (iy < 0 || iy >= c.h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride_ + kx - 1;
              if (ix < 0 || ix >= c.w) continue;
              T* dst = dx.col(img * hw + iy * c.w + ix).data();
              const T* s = src + (ky * 3 + kx) * in_;
              for (int ch = 0; ch < in_; ++ch) dst[ch] += s[ch];
            }
          }
        }
      }
    }
    return dx;
  }

 private:
  void im2col(const Mat<T>& x, Cache& c) const {
    const int ho = out_size(c.h, stride_), wo = out_size(c.w, stride_);
    const Eigen::Index hw = static_cast<Eigen::Index>(c.h) * c.w;
    const Eigen::Index ohw = static_cast<Eigen::Index>(ho) * wo;
    c.cols.resize(9 * in_, ohw * c.n);
    for (int img = 0; img < c.n; ++img) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T* dst = c.cols.col(img * ohw + oy * wo + ox).data();
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride_ + ky - 1;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride_ + kx - 1;
              T* d = dst + (ky * 3 + kx) * in_;
              if (iy < 0 || iy >= c.h || ix < 0 || ix >= c.w) {
                std::fill(d, d + in_, T(0));
              } else {
                const T* s = x.col(img * hw + iy * c.w + ix).data();
                std::copy(s, s + in_, d);
              }
            }
          }
        }
      }
    }
  }

  int in_ = 0, stride_ = 1;
  Param<T>* w_ = nullptr;
  Param<T>* b_ = nullptr;
};

/// Multi-head self-attention over groups of `tokens` consecutive columns.
template <class T>
class SelfAttention {
 public:
  SelfAttention() = default;
  SelfAttention(ParamSet<T>& ps, const std::string& name, int dim, int heads, Rng& rng)
      : dim_(dim), heads_(heads), qkv_(ps, name + ".qkv", dim, 3 * dim, rng),
        out_(ps, name + ".out", dim, dim, rng) {
    if (heads < 1 || dim % heads != 0) {
      throw ValidationError("trunk width must be divisible by the head count");
    }
  }

  struct Cache {
    typename Linear<T>::Cache qkv_in, out_in;
    Mat<T> qkv;
    std::vector<Mat<T>> probs;
    int tokens = 0;
  };

  Mat<T> forward(const Mat<T>& x, int tokens, Cache* cache) const {
    Cache local;
    Cache& c = cache ? *cache : local;
    c.tokens = tokens;
    const int groups = static_cast<int>(x.cols()) / tokens;
    c.qkv = qkv_.forward(x, cache ? &c.qkv_in : nullptr);
    const int dh = dim_ / heads_;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    c.probs.assign(cache ? static_cast<std::size_t>(groups * heads_) : 0, Mat<T>());
    Mat<T> o(dim_, x.cols());
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads_; ++h) {
        const auto q = c.qkv.block(h * dh, g * tokens, dh, tokens);
        const auto k = c.qkv.block(dim_ + h * dh, g * tokens, dh, tokens);
        const auto v = c.qkv.block(2 * dim_ + h * dh, g * tokens, dh, tokens);
        Mat<T> s = (q.transpose() * k) * scale;  // row i: query i over all keys
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
          const T m = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - m).exp();
          s.row(i) /= s.row(i).sum();
        }
        o.block(h * dh, g * tokens, dh, tokens).noalias() = v * s.transpose();
        if (cache) c.probs[static_cast<std::size_t>(g * heads_ + h)] = std::move(s);
      }
    }
    return out_.forward(o, cache ? &c.out_in : nullptr);
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& c) {
    const Mat<T> d_o = out_.backward(dy, c.out_in);
    const int dh = dim_ / heads_;
    const int tokens = c.tokens;
    const int groups = static_cast<int>(dy.cols()) / tokens;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Mat<T> dqkv(3 * dim_, d_o.cols());
    for (int g = 0; g < groups; ++g) {
      for (int h = 0; h < heads_; ++h) {
        const Mat<T>& p = c.probs[static_cast<std::size_t>(g * heads_ + h)];
        const auto q = c.qkv.block(h * dh, g * tokens, dh, tokens);
        const auto k = c.qkv.block(dim_ + h * dh, g * tokens, dh, tokens);
        const auto v = c.qkv.block(2 * dim_ + h * dh, g * tokens, dh, tokens);
        const auto dob = d_o.block(h * dh, g * tokens, dh, tokens);
        dqkv.block(2 * dim_ + h * dh, g * tokens, dh, tokens).noalias() = dob * p;
        const Mat<T> dp = dob.transpose() * v;
        Mat<T> ds = p.cwiseProduct(dp);
        const Vec<T> rs = ds.rowwise().sum();
        ds -= (p.array().colwise() * rs.array()).matrix();
        ds *= scale;
        dqkv.block(h * dh, g * tokens, dh, tokens).noalias() = k * ds.transpose();
        dqkv.block(dim_ + h * dh, g * tokens, dh, tokens).noalias() = q * ds;
      }
    }
    return qkv_.backward(dqkv, c.qkv_in);
  }

 private:
  int dim_ = 0, heads_ = 1;
  Linear<T> qkv_, out_;
};

/// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <class T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParamSet<T>& ps, const std::string& name, int dim, int heads, Rng& rng)
      : ln1_(ps, name + ".ln1", dim), attn_(ps, name + ".attn", dim, heads, rng),
        ln2_(ps, name + ".ln2", dim), fc1_(ps, name + ".fc1", dim, 4 * dim, rng),
        fc2_(ps, name + ".fc2", 4 * dim, dim, rng) {}

  struct Cache {
    typename LayerNorm<T>::Cache ln1, ln2;
    typename SelfAttention<T>::Cache attn;
    typename Linear<T>::Cache fc1, fc2;
    Mat<T> hidden;
  };

  Mat<T> forward(const Mat<T>& x, int tokens, Cache* cache) const {
    const bool keep = cache != nullptr;
    Mat<T> x1 = x + attn_.forward(ln1_.forward(x, keep ? &cache->ln1 : nullptr), tokens,
                                  keep ? &cache->attn : nullptr);
    Mat<T> hidden = fc1_.forward(ln2_.forward(x1, keep ? &cache->ln2 : nullptr),
                                 keep ? &cache->fc1 : nullptr);
    Mat<T> y = x1 + fc2_.forward(gelu(hidden), keep ? &cache->fc2 : nullptr);
    if (keep) cache->hidden = std::move(hidden);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const Cache& c) {
    const Mat<T> dh = gelu_backward(c.hidden, fc2_.backward(dy, c.fc2));
    Mat<T> dx1 = dy + ln2_.backward(fc1_.backward(dh, c.fc1), c.ln2);
    return dx1 + ln1_.backward(attn_.backward(dx1, c.attn), c.ln1);
  }

 private:
  LayerNorm<T> ln1_;
  SelfAttention<T> attn_;
  LayerNorm<T> ln2_;
  Linear<T> fc1_, fc2_;
};

}  // namespace idm::nn
