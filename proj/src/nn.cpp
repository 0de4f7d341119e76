#include "stonefuse/nn.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "stonefuse/common.hpp"

namespace stonefuse::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void Layer::collect_params(const std::string&, std::vector<ParamRef>&) {}

void Layer::collect_layers(const std::string& prefix,
                           std::vector<std::pair<std::string, Layer*>>& out) {
  out.emplace_back(prefix, this);
}

void he_init(Tensor& t, int fan_in, Rng& rng) {
  std::normal_distribution<float> d(0.0f, std::sqrt(2.0f / static_cast<float>(fan_in)));
  for (auto& v : t.vec()) v = d(rng);
}

void xavier_init(Tensor& t, int fan_in, int fan_out, Rng& rng) {
  float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::uniform_real_distribution<float> d(-bound, bound);
  for (auto& v : t.vec()) v = d(rng);
}

// ---------------------------------------------------------------- Conv2d

namespace {

int conv_out(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// col layout: (C*k*k) rows x (Hout*Wout) cols, row-major.
void im2col(const float* img, int C, int H, int W, int k, int stride, int pad,
            int Hout, int Wout, float* col) {
  for (int c = 0; c < C; ++c) {
    for (int kr = 0; kr < k; ++kr) {
      for (int kc = 0; kc < k; ++kc) {
        float* dst = col + static_cast<std::size_t>((c * k + kr) * k + kc) * Hout * Wout;
        for (int r = 0; r < Hout; ++r) {
          int ir = r * stride - pad + kr;
          if (ir < 0 || ir >= H) {
            std::fill(dst, dst + Wout, 0.0f);
            dst += Wout;
            continue;
          }
          const float* src_row = img + (static_cast<std::size_t>(c) * H + ir) * W;
          for (int cc = 0; cc < Wout; ++cc) {
            int ic = cc * stride - pad + kc;
            *dst++ = (ic >= 0 && ic < W) ? src_row[ic] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int C, int H, int W, int k, int stride, int pad,
            int Hout, int Wout, float* img) {
  for (int c = 0; c < C; ++c) {
    for (int kr = 0; kr < k; ++kr) {
      for (int kc = 0; kc < k; ++kc) {
        const float* src = col + static_cast<std::size_t>((c * k + kr) * k + kc) * Hout * Wout;
        for (int r = 0; r < Hout; ++r) {
          int ir = r * stride - pad + kr;
          if (ir < 0 || ir >= H) {
            src += Wout;
            continue;
          }
          float* dst_row = img + (static_cast<std::size_t>(c) * H + ir) * W;
          for (int cc = 0; cc < Wout; ++cc) {
            int ic = cc * stride - pad + kc;
            if (ic >= 0 && ic < W) dst_row[ic] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace

Conv2d::Conv2d(Rng& rng, int in_ch, int out_ch, int ksize, int stride, int pad, bool bias)
    : in_ch_(in_ch), out_ch_(out_ch), k_(ksize), stride_(stride), pad_(pad), has_bias_(bias) {
  weight_ = Tensor({out_ch_, in_ch_, k_, k_});
  wgrad_ = Tensor({out_ch_, in_ch_, k_, k_});
  he_init(weight_, in_ch_ * k_ * k_, rng);
  if (has_bias_) {
    bias_ = Tensor({out_ch_});
    bgrad_ = Tensor({out_ch_});
  }
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  if (x.ndim() != 4 || x.dim(1) != in_ch_) {
    fail("shape_mismatch", "conv input " + x.shape_str() + " expects " +
                               std::to_string(in_ch_) + " channels");
  }
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int Ho = conv_out(H, k_, stride_, pad_), Wo = conv_out(W, k_, stride_, pad_);
  if (Ho <= 0 || Wo <= 0) fail("shape_mismatch", "conv output would be empty");
  cached_input_ = x;
  Tensor y({N, out_ch_, Ho, Wo});
  const int ckk = in_ch_ * k_ * k_;
  std::vector<float> col(static_cast<std::size_t>(ckk) * Ho * Wo);
  CMapRM Wm(weight_.data(), out_ch_, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + static_cast<std::size_t>(n) * in_ch_ * H * W, in_ch_, H, W, k_,
           stride_, pad_, Ho, Wo, col.data());
    CMapRM colm(col.data(), ckk, Ho * Wo);
    MapRM ym(y.data() + static_cast<std::size_t>(n) * out_ch_ * Ho * Wo, out_ch_, Ho * Wo);
    ym.noalias() = Wm * colm;
    if (has_bias_) {
      for (int c = 0; c < out_ch_; ++c) ym.row(c).array() += bias_[c];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& gy) {
  const Tensor& x = cached_input_;
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const int Ho = gy.dim(2), Wo = gy.dim(3);
  const int ckk = in_ch_ * k_ * k_;
  Tensor gx({N, in_ch_, H, W});
  std::vector<float> col(static_cast<std::size_t>(ckk) * Ho * Wo);
  std::vector<float> dcol(col.size());
  CMapRM Wm(weight_.data(), out_ch_, ckk);
  MapRM dWm(wgrad_.data(), out_ch_, ckk);
  for (int n = 0; n < N; ++n) {
    im2col(x.data() + static_cast<std::size_t>(n) * in_ch_ * H * W, in_ch_, H, W, k_,
           stride_, pad_, Ho, Wo, col.data());
    CMapRM colm(col.data(), ckk, Ho * Wo);
    CMapRM gym(gy.data() + static_cast<std::size_t>(n) * out_ch_ * Ho * Wo, out_ch_, Ho * Wo);
    dWm.noalias() += gym * colm.transpose();
    MapRM dcolm(dcol.data(), ckk, Ho * Wo);
    dcolm.noalias() = Wm.transpose() * gym;
    col2im(dcol.data(), in_ch_, H, W, k_, stride_, pad_, Ho, Wo,
           gx.data() + static_cast<std::size_t>(n) * in_ch_ * H * W);
    if (has_bias_) {
      for (int c = 0; c < out_ch_; ++c) bgrad_[c] += gym.row(c).sum();
    }
  }
  return gx;
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight_, &wgrad_, true});
  if (has_bias_) out.push_back({prefix + ".bias", &bias_, &bgrad_, true});
}

// ------------------------------------------------------------ BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, double momentum, double eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_ = Tensor({channels_});
  ggrad_ = Tensor({channels_});
  beta_ = Tensor({channels_});
  bgrad_ = Tensor({channels_});
  running_mean_ = Tensor({channels_});
  running_var_ = Tensor({channels_});
  std::fill(gamma_.vec().begin(), gamma_.vec().end(), 1.0f);
  std::fill(running_var_.vec().begin(), running_var_.vec().end(), 1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  if (x.ndim() != 4 || x.dim(1) != channels_) {
    fail("shape_mismatch", "batchnorm input " + x.shape_str());
  }
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor y(x.shape());
  used_batch_stats_ = train && !frozen_ && N > 0;
  cached_invstd_.assign(channels_, 0.0);
  if (used_batch_stats_) {
    cached_xhat_ = Tensor(x.shape());
    const double count = static_cast<double>(N) * plane;
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0, sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = x.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum += p[i];
          sq += static_cast<double>(p[i]) * p[i];
        }
      }
      const double mean = sum / count;
      const double var = std::max(0.0, sq / count - mean * mean);
      const double invstd = 1.0 / std::sqrt(var + eps_);
      cached_invstd_[c] = invstd;
      running_mean_[c] = static_cast<float>((1.0 - momentum_) * running_mean_[c] +
                                            momentum_ * mean);
      running_var_[c] = static_cast<float>((1.0 - momentum_) * running_var_[c] +
                                           momentum_ * var);
      const float g = gamma_[c], b = beta_[c];
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
        const float* p = x.data() + off;
        float* xh = cached_xhat_.data() + off;
        float* q = y.data() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          const float v = static_cast<float>((p[i] - mean) * invstd);
          xh[i] = v;
          q[i] = g * v + b;
        }
      }
    }
  } else {
    for (int c = 0; c < channels_; ++c) {
      const double invstd = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + eps_);
      cached_invstd_[c] = invstd;
      const float mean = running_mean_[c];
      const float g = gamma_[c], b = beta_[c];
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
        const float* p = x.data() + off;
        float* q = y.data() + off;
        for (std::size_t i = 0; i < plane; ++i) {
          q[i] = static_cast<float>(g * (p[i] - mean) * invstd + b);
        }
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& gy) {
  const int N = gy.dim(0), H = gy.dim(2), W = gy.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor gx(gy.shape());
  if (!used_batch_stats_) {
    // running-statistics mode: pure affine transform per channel
    // frozen layers never train gamma/beta, so only dx is needed here
    for (int c = 0; c < channels_; ++c) {
      const float scale = static_cast<float>(gamma_[c] * cached_invstd_[c]);
      for (int n = 0; n < N; ++n) {
        const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
        const float* g = gy.data() + off;
        float* q = gx.data() + off;
        for (std::size_t i = 0; i < plane; ++i) q[i] = g[i] * scale;
      }
    }
    return gx;
  }
  const double count = static_cast<double>(N) * plane;
  for (int c = 0; c < channels_; ++c) {
    double sum_gy = 0.0, sum_gy_xhat = 0.0;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
      const float* g = gy.data() + off;
      const float* xh = cached_xhat_.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_gy += g[i];
        sum_gy_xhat += static_cast<double>(g[i]) * xh[i];
      }
    }
    ggrad_[c] += static_cast<float>(sum_gy_xhat);
    bgrad_[c] += static_cast<float>(sum_gy);
    const double scale = gamma_[c] * cached_invstd_[c] / count;
    for (int n = 0; n < N; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
      const float* g = gy.data() + off;
      const float* xh = cached_xhat_.data() + off;
      float* q = gx.data() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        q[i] = static_cast<float>(scale * (count * g[i] - sum_gy - xh[i] * sum_gy_xhat));
      }
    }
  }
  return gx;
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma_, &ggrad_, true});
  out.push_back({prefix + ".beta", &beta_, &bgrad_, true});
  out.push_back({prefix + ".running_mean", &running_mean_, nullptr, false});
  out.push_back({prefix + ".running_var", &running_var_, nullptr, false});
}

// ------------------------------------------------------------------ ReLU

Tensor ReLU::forward(const Tensor& x, bool) {
  Tensor y(x.shape());
  mask_.assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0f) {
      y[i] = x[i];
      mask_[i] = 1;
    }
  }
  return y;
}

Tensor ReLU::backward(const Tensor& gy) {
  Tensor gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = mask_[i] ? gy[i] : 0.0f;
  return gx;
}

// -------------------------------------------------------------- MaxPool2d

MaxPool2d::MaxPool2d(int ksize, int stride, int pad) : k_(ksize), stride_(stride), pad_(pad) {}

Tensor MaxPool2d::forward(const Tensor& x, bool) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = conv_out(H, k_, stride_, pad_), Wo = conv_out(W, k_, stride_, pad_);
  in_shape_ = x.shape();
  Tensor y({N, C, Ho, Wo});
  argmax_.assign(y.size(), 0);
  std::size_t oi = 0;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* plane = x.data() + (static_cast<std::size_t>(n) * C + c) *
                                          static_cast<std::size_t>(H) * W;
      const std::size_t base = (static_cast<std::size_t>(n) * C + c) *
                               static_cast<std::size_t>(H) * W;
      for (int r = 0; r < Ho; ++r) {
        for (int cc = 0; cc < Wo; ++cc, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_i = base;
          for (int kr = 0; kr < k_; ++kr) {
            const int ir = r * stride_ - pad_ + kr;
            if (ir < 0 || ir >= H) continue;
            for (int kc = 0; kc < k_; ++kc) {
              const int ic = cc * stride_ - pad_ + kc;
              if (ic < 0 || ic >= W) continue;
              const float v = plane[static_cast<std::size_t>(ir) * W + ic];
              if (v > best) {
                best = v;
                best_i = base + static_cast<std::size_t>(ir) * W + ic;
              }
            }
          }
          y[oi] = best;
          argmax_[oi] = best_i;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& gy) {
  Tensor gx(in_shape_);
  for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax_[i]] += gy[i];
  return gx;
}

// ---------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  in_shape_ = x.shape();
  Tensor y({N, C});
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float* p = x.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      y[static_cast<std::size_t>(n) * C + c] = static_cast<float>(s / plane);
    }
  }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& gy) {
  const int C = in_shape_[1], H = in_shape_[2], W = in_shape_[3];
  const int N = gy.dim(0);
  Tensor gx(in_shape_);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  const float inv = 1.0f / static_cast<float>(plane);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const float g = gy[static_cast<std::size_t>(n) * C + c] * inv;
      float* p = gx.data() + (static_cast<std::size_t>(n) * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = g;
    }
  }
  return gx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(Rng& rng, int in_dim, int out_dim) : in_dim_(in_dim), out_dim_(out_dim) {
  weight_ = Tensor({out_dim_, in_dim_});
  wgrad_ = Tensor({out_dim_, in_dim_});
  bias_ = Tensor({out_dim_});
  bgrad_ = Tensor({out_dim_});
  xavier_init(weight_, in_dim_, out_dim_, rng);
}

Tensor Linear::forward(const Tensor& x, bool) {
  if (x.ndim() != 2 || x.dim(1) != in_dim_) {
    fail("shape_mismatch", "linear input " + x.shape_str() + " expects dim " +
                               std::to_string(in_dim_));
  }
  cached_input_ = x;
  const int N = x.dim(0);
  Tensor y({N, out_dim_});
  CMapRM xm(x.data(), N, in_dim_);
  CMapRM wm(weight_.data(), out_dim_, in_dim_);
  MapRM ym(y.data(), N, out_dim_);
  ym.noalias() = xm * wm.transpose();
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < out_dim_; ++o) y[static_cast<std::size_t>(n) * out_dim_ + o] += bias_[o];
  }
  return y;
}

Tensor Linear::backward(const Tensor& gy) {
  const int N = gy.dim(0);
  Tensor gx({N, in_dim_});
  CMapRM gym(gy.data(), N, out_dim_);
  CMapRM xm(cached_input_.data(), N, in_dim_);
  CMapRM wm(weight_.data(), out_dim_, in_dim_);
  MapRM dwm(wgrad_.data(), out_dim_, in_dim_);
  MapRM gxm(gx.data(), N, in_dim_);
  dwm.noalias() += gym.transpose() * xm;
  gxm.noalias() = gym * wm;
  for (int o = 0; o < out_dim_; ++o) bgrad_[o] += gym.col(o).sum();
  return gx;
}

void Linear::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight_, &wgrad_, true});
  out.push_back({prefix + ".bias", &bias_, &bgrad_, true});
}

// --------------------------------------------------------------- Dropout

Dropout::Dropout(double p, std::uint64_t seed) : p_(p), rng_(seed) {}

Tensor Dropout::forward(const Tensor& x, bool train) {
  if (!train || p_ <= 0.0) {
    mask_.assign(x.size(), 1.0f);
    return x;
  }
  std::bernoulli_distribution keep(1.0 - p_);
  const float scale = static_cast<float>(1.0 / (1.0 - p_));
  mask_.assign(x.size(), 0.0f);
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (keep(rng_)) {
      mask_[i] = scale;
      y[i] = x[i] * scale;
    }
  }
  return y;
}

Tensor Dropout::backward(const Tensor& gy) {
  Tensor gx(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) gx[i] = gy[i] * mask_[i];
  return gx;
}

// ---------------------------------------------------------------- SEGate

SEGate::SEGate(Rng& rng, int channels, int reduction_ratio)
    : channels_(channels), reduced_(std::max(1, channels / reduction_ratio)) {
  w1_ = Tensor({reduced_, channels_});
  w1grad_ = Tensor({reduced_, channels_});
  b1_ = Tensor({reduced_});
  b1grad_ = Tensor({reduced_});
  w2_ = Tensor({channels_, reduced_});
  w2grad_ = Tensor({channels_, reduced_});
  b2_ = Tensor({channels_});
  b2grad_ = Tensor({channels_});
  xavier_init(w1_, channels_, reduced_, rng);
  xavier_init(w2_, reduced_, channels_, rng);
}

Tensor SEGate::forward(const Tensor& x, bool) {
  if (x.ndim() != 4 || x.dim(1) != channels_) {
    fail("channel_mismatch", "attention gate expects " + std::to_string(channels_) +
                                 " channels, got " + x.shape_str());
  }
  if (pinned_) {
    cached_gate_ = Tensor({x.dim(0), channels_});
    std::fill(cached_gate_.vec().begin(), cached_gate_.vec().end(), 1.0f);
    cached_input_ = x;
    return x;
  }
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  cached_input_ = x;
  cached_pooled_ = Tensor({N, channels_});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const float* p = x.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      cached_pooled_[static_cast<std::size_t>(n) * channels_ + c] =
          static_cast<float>(s / plane);
    }
  }
  cached_hidden_ = Tensor({N, reduced_});
  {
    CMapRM zm(cached_pooled_.data(), N, channels_);
    CMapRM w1m(w1_.data(), reduced_, channels_);
    MapRM hm(cached_hidden_.data(), N, reduced_);
    hm.noalias() = zm * w1m.transpose();
    for (int n = 0; n < N; ++n) {
      for (int r = 0; r < reduced_; ++r) {
        float v = cached_hidden_[static_cast<std::size_t>(n) * reduced_ + r] + b1_[r];
        cached_hidden_[static_cast<std::size_t>(n) * reduced_ + r] = v > 0.0f ? v : 0.0f;
      }
    }
  }
  cached_gate_ = Tensor({N, channels_});
  {
    CMapRM hm(cached_hidden_.data(), N, reduced_);
    CMapRM w2m(w2_.data(), channels_, reduced_);
    MapRM gm(cached_gate_.data(), N, channels_);
    gm.noalias() = hm * w2m.transpose();
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < channels_; ++c) {
        const float v = cached_gate_[static_cast<std::size_t>(n) * channels_ + c] + b2_[c];
        cached_gate_[static_cast<std::size_t>(n) * channels_ + c] =
            1.0f / (1.0f + std::exp(-v));
      }
    }
  }
  Tensor y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const float g = cached_gate_[static_cast<std::size_t>(n) * channels_ + c];
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
      const float* p = x.data() + off;
      float* q = y.data() + off;
      for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * g;
    }
  }
  return y;
}

Tensor SEGate::backward(const Tensor& gy) {
  if (pinned_) return gy;
  const Tensor& x = cached_input_;
  const int N = x.dim(0), H = x.dim(2), W = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  Tensor gx(x.shape());
  Tensor dgate({N, channels_});
  // product rule: through the rescale and into the gate
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const std::size_t off = (static_cast<std::size_t>(n) * channels_ + c) * plane;
      const float g = cached_gate_[static_cast<std::size_t>(n) * channels_ + c];
      const float* gyp = gy.data() + off;
      const float* xp = x.data() + off;
      float* gxp = gx.data() + off;
      double dg = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        gxp[i] = gyp[i] * g;
        dg += static_cast<double>(gyp[i]) * xp[i];
      }
      dgate[static_cast<std::size_t>(n) * channels_ + c] = static_cast<float>(dg);
    }
  }
  // sigmoid
  Tensor dpre({N, channels_});
  for (std::size_t i = 0; i < dpre.size(); ++i) {
    const float g = cached_gate_[i];
    dpre[i] = dgate[i] * g * (1.0f - g);
  }
  Tensor dhidden({N, reduced_});
  {
    CMapRM dprem(dpre.data(), N, channels_);
    CMapRM hm(cached_hidden_.data(), N, reduced_);
    CMapRM w2m(w2_.data(), channels_, reduced_);
    MapRM dw2m(w2grad_.data(), channels_, reduced_);
    MapRM dhm(dhidden.data(), N, reduced_);
    dw2m.noalias() += dprem.transpose() * hm;
    dhm.noalias() = dprem * w2m;
    for (int c = 0; c < channels_; ++c) b2grad_[c] += dprem.col(c).sum();
  }
  for (std::size_t i = 0; i < dhidden.size(); ++i) {
    if (cached_hidden_[i] <= 0.0f) dhidden[i] = 0.0f;
  }
  Tensor dpooled({N, channels_});
  {
    CMapRM dhm(dhidden.data(), N, reduced_);
    CMapRM zm(cached_pooled_.data(), N, channels_);
    CMapRM w1m(w1_.data(), reduced_, channels_);
    MapRM dw1m(w1grad_.data(), reduced_, channels_);
    MapRM dzm(dpooled.data(), N, channels_);
    dw1m.noalias() += dhm.transpose() * zm;
    dzm.noalias() = dhm * w1m;
    for (int r = 0; r < reduced_; ++r) b1grad_[r] += dhm.col(r).sum();
  }
  const float inv = 1.0f / static_cast<float>(plane);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < channels_; ++c) {
      const float d = dpooled[static_cast<std::size_t>(n) * channels_ + c] * inv;
      float* gxp = gx.data() + (static_cast<std::size_t>(n) * channels_ + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) gxp[i] += d;
    }
  }
  return gx;
}

void SEGate::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w1", &w1_, &w1grad_, true});
  out.push_back({prefix + ".b1", &b1_, &b1grad_, true});
  out.push_back({prefix + ".w2", &w2_, &w2grad_, true});
  out.push_back({prefix + ".b2", &b2_, &b2grad_, true});
}

// ------------------------------------------------------------- Sequential

Layer* Sequential::add(std::string name, LayerPtr layer) {
  children_.emplace_back(std::move(name), std::move(layer));
  return children_.back().second.get();
}

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor cur = x;
  for (auto& [name, child] : children_) cur = child->forward(cur, train);
  return cur;
}

Tensor Sequential::backward(const Tensor& gy) {
  Tensor cur = gy;
  for (auto it = children_.rbegin(); it != children_.rend(); ++it) {
    cur = it->second->backward(cur);
  }
  return cur;
}

void Sequential::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (auto& [name, child] : children_) {
    child->collect_params(prefix.empty() ? name : prefix + "." + name, out);
  }
}

void Sequential::collect_layers(const std::string& prefix,
                                std::vector<std::pair<std::string, Layer*>>& out) {
  out.emplace_back(prefix, this);
  for (auto& [name, child] : children_) {
    child->collect_layers(prefix.empty() ? name : prefix + "." + name, out);
  }
}

void Sequential::set_frozen(bool f) {
  for (auto& [name, child] : children_) child->set_frozen(f);
}

// ------------------------------------------------------------- Bottleneck

Bottleneck::Bottleneck(Rng& rng, int in_ch, int mid_ch, int out_ch, int stride) {
  main_.add("conv1", std::make_unique<Conv2d>(rng, in_ch, mid_ch, 1, 1, 0, false));
  main_.add("bn1", std::make_unique<BatchNorm2d>(mid_ch));
  main_.add("relu1", std::make_unique<ReLU>());
  main_.add("conv2", std::make_unique<Conv2d>(rng, mid_ch, mid_ch, 3, stride, 1, false));
  main_.add("bn2", std::make_unique<BatchNorm2d>(mid_ch));
  main_.add("relu2", std::make_unique<ReLU>());
  main_.add("conv3", std::make_unique<Conv2d>(rng, mid_ch, out_ch, 1, 1, 0, false));
  main_.add("bn3", std::make_unique<BatchNorm2d>(out_ch));
  if (stride != 1 || in_ch != out_ch) {
    down_ = std::make_unique<Sequential>();
    down_->add("conv", std::make_unique<Conv2d>(rng, in_ch, out_ch, 1, stride, 0, false));
    down_->add("bn", std::make_unique<BatchNorm2d>(out_ch));
  }
}

Tensor Bottleneck::forward(const Tensor& x, bool train) {
  cached_input_ = x;
  Tensor y = main_.forward(x, train);
  Tensor skip = down_ ? down_->forward(x, train) : x;
  relu_mask_.assign(y.size(), 0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const float v = y[i] + skip[i];
    if (v > 0.0f) {
      y[i] = v;
      relu_mask_[i] = 1;
    } else {
      y[i] = 0.0f;
    }
  }
  return y;
}

Tensor Bottleneck::backward(const Tensor& gy) {
  Tensor g(gy.shape());
  for (std::size_t i = 0; i < gy.size(); ++i) g[i] = relu_mask_[i] ? gy[i] : 0.0f;
  Tensor gx = main_.backward(g);
  if (down_) {
    Tensor gskip = down_->backward(g);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gskip[i];
  } else {
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  }
  return gx;
}

void Bottleneck::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  main_.collect_params(prefix, out);
  if (down_) down_->collect_params(prefix + ".down", out);
}

void Bottleneck::collect_layers(const std::string& prefix,
                                std::vector<std::pair<std::string, Layer*>>& out) {
  out.emplace_back(prefix, this);
  main_.collect_layers(prefix, out);
  if (down_) down_->collect_layers(prefix + ".down", out);
}

void Bottleneck::set_frozen(bool f) {
  main_.set_frozen(f);
  if (down_) down_->set_frozen(f);
}

// ------------------------------------------------------------------ loss

Tensor softmax(const Tensor& logits) {
  const int N = logits.dim(0), K = logits.dim(1);
  Tensor p({N, K});
  for (int n = 0; n < N; ++n) {
    const float* l = logits.data() + static_cast<std::size_t>(n) * K;
    float* q = p.data() + static_cast<std::size_t>(n) * K;
    float mx = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, l[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(l[k]) - mx);
    for (int k = 0; k < K; ++k) {
      q[k] = static_cast<float>(std::exp(static_cast<double>(l[k]) - mx) / z);
    }
  }
  return p;
}

double softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             Tensor* dlogits, Tensor* probs) {
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    fail("shape_mismatch", "label count does not match batch size");
  }
  Tensor p = softmax(logits);
  double loss = 0.0;
  for (int n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= K) fail("bad_label", "label out of range");
    loss -= std::log(std::max(1e-12, static_cast<double>(p[static_cast<std::size_t>(n) * K + y])));
  }
  loss /= std::max(1, N);
  if (dlogits) {
    *dlogits = p;
    for (int n = 0; n < N; ++n) {
      (*dlogits)[static_cast<std::size_t>(n) * K + labels[n]] -= 1.0f;
    }
    const float inv = 1.0f / static_cast<float>(std::max(1, N));
    for (auto& v : dlogits->vec()) v *= inv;
  }
  if (probs) *probs = std::move(p);
  return loss;
}

// ------------------------------------------------------------------- SGD

SGD::SGD(std::vector<ParamRef> params, double lr, double momentum)
    : lr_(lr), momentum_(momentum) {
  for (auto& p : params) {
    if (p.trainable && p.grad != nullptr) params_.push_back(p);
  }
  velocity_.reserve(params_.size());
  for (auto& p : params_) velocity_.emplace_back(p.value->shape());
}

void SGD::zero_grad() {
  for (auto& p : params_) {
    std::fill(p.grad->vec().begin(), p.grad->vec().end(), 0.0f);
  }
}

void SGD::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& v = velocity_[i];
    Tensor& w = *params_[i].value;
    const Tensor& g = *params_[i].grad;
    const float lr = static_cast<float>(lr_);
    const float mu = static_cast<float>(momentum_);
    for (std::size_t j = 0; j < w.size(); ++j) {
      v[j] = mu * v[j] + g[j];
      w[j] -= lr * v[j];
    }
  }
}

// -------------------------------------------------------- serialization

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) fail("corrupt_weights", "truncated weight blob");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_params(const std::vector<ParamRef>& refs) {
  std::vector<std::uint8_t> out;
  put<std::uint32_t>(out, 0x53464e31u);  // "SFN1"
  put<std::uint32_t>(out, static_cast<std::uint32_t>(refs.size()));
  for (const auto& r : refs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(r.value->ndim()));
    for (int d : r.value->shape()) put<std::int32_t>(out, d);
    const auto* p = reinterpret_cast<const std::uint8_t*>(r.value->data());
    out.insert(out.end(), p, p + r.value->size() * sizeof(float));
  }
  return out;
}

void deserialize_params(const std::vector<std::uint8_t>& bytes,
                        const std::vector<ParamRef>& refs) {
  std::size_t pos = 0;
  if (get<std::uint32_t>(bytes, pos) != 0x53464e31u) {
    fail("corrupt_weights", "bad weight blob magic");
  }
  const auto count = get<std::uint32_t>(bytes, pos);
  std::vector<std::pair<std::string, std::pair<std::vector<int>, std::size_t>>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(bytes, pos);
    if (pos + name_len > bytes.size()) fail("corrupt_weights", "truncated name");
    std::string name(reinterpret_cast<const char*>(bytes.data() + pos), name_len);
    pos += name_len;
    const auto ndim = get<std::uint32_t>(bytes, pos);
    std::vector<int> shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(get<std::int32_t>(bytes, pos));
    const std::size_t n = Tensor::numel(shape);
    entries.emplace_back(std::move(name), std::make_pair(std::move(shape), pos));
    pos += n * sizeof(float);
    if (pos > bytes.size()) fail("corrupt_weights", "truncated tensor data");
  }
  for (const auto& r : refs) {
    bool found = false;
    for (const auto& [name, loc] : entries) {
      if (name != r.name) continue;
      if (loc.first != r.value->shape()) {
        fail("shape_mismatch", "checkpoint tensor " + name + " has wrong shape");
      }
      std::memcpy(r.value->data(), bytes.data() + loc.second,
                  r.value->size() * sizeof(float));
      found = true;
      break;
    }
    if (!found) fail("corrupt_weights", "checkpoint missing tensor " + r.name);
  }
}

}  // namespace stonefuse::nn
