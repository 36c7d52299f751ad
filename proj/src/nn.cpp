#include "cpsseg/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace cpsseg::nn {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void he_normal(FTensor& t, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : t.values()) v = static_cast<float>(dist(rng));
}

Param make_param(const std::string& name, Shape4 shape) {
  return Param{name, FTensor(shape), FTensor(shape)};
}

// Source coordinate and weights for bilinear upsampling along one axis.
struct Tap {
  std::size_t i0, i1;
  float w0, w1;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(src);
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    const auto frac = static_cast<float>(src - static_cast<double>(i0));
    taps[o] = {i0, i1, 1.0f - frac, frac};
  }
  return taps;
}

}  // namespace

void accumulate(FTensor& dst, const FTensor& src) {
  require_same_shape(dst.shape(), src.shape(), "accumulate");
  float* d = dst.data();
  const float* s = src.data();
  for (std::size_t i = 0; i < dst.numel(); ++i) d[i] += s[i];
}

FTensor concat_channels(const FTensor& a, const FTensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  require(sa.n == sb.n && sa.h == sb.h && sa.w == sb.w, ErrorCode::ShapeMismatch,
          "concat: " + sa.str() + " vs " + sb.str());
  FTensor out(sa.n, sa.c + sb.c, sa.h, sa.w);
  const std::size_t na = sa.c * sa.plane(), nb = sb.c * sb.plane();
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy(a.sample(n), a.sample(n) + na, out.sample(n));
    std::copy(b.sample(n), b.sample(n) + nb, out.sample(n) + na);
  }
  return out;
}

void split_channels(const FTensor& g, std::size_t ca, FTensor& ga, FTensor& gb) {
  const auto& s = g.shape();
  ga = FTensor(s.n, ca, s.h, s.w);
  gb = FTensor(s.n, s.c - ca, s.h, s.w);
  const std::size_t na = ca * s.plane(), nb = (s.c - ca) * s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy(g.sample(n), g.sample(n) + na, ga.sample(n));
    std::copy(g.sample(n) + na, g.sample(n) + na + nb, gb.sample(n));
  }
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in, int out, int kernel, int stride, int padding,
               int dilation, std::mt19937_64& rng, bool bias)
    : Module(std::move(name)),
      in_(in), out_(out), k_(kernel), stride_(stride), pad_(padding), dil_(dilation),
      has_bias_(bias) {
  const auto uin = static_cast<std::size_t>(in), uout = static_cast<std::size_t>(out);
  const auto uk = static_cast<std::size_t>(kernel);
  weight_ = make_param(this->name() + ".weight", {uout, uin, uk, uk});
  he_normal(weight_.value, uin * uk * uk, rng);
  if (has_bias_) bias_ = make_param(this->name() + ".bias", {1, uout, 1, 1});
}

std::size_t Conv2d::out_dim(std::size_t in) const {
  const long v = (static_cast<long>(in) + 2L * pad_ - static_cast<long>(dil_) * (k_ - 1) - 1) /
                     stride_ + 1;
  require(v > 0, ErrorCode::BadSpatialDims, name() + ": input too small");
  return static_cast<std::size_t>(v);
}

void Conv2d::im2col(const float* x, std::size_t h, std::size_t w, float* col) const {
  const std::size_t ho = out_dim(h), wo = out_dim(w);
  const auto k = static_cast<std::size_t>(k_);
  for (std::size_t ci = 0; ci < static_cast<std::size_t>(in_); ++ci) {
    const float* xp = x + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        float* dst = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride_ - pad_ + static_cast<long>(ky) * dil_;
          float* row = dst + oy * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(row, row + wo, 0.0f);
            continue;
          }
          const float* src = xp + static_cast<std::size_t>(iy) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride_ - pad_ + static_cast<long>(kx) * dil_;
            row[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? 0.0f : src[ix];
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const float* col, std::size_t h, std::size_t w, float* dx) const {
  const std::size_t ho = out_dim(h), wo = out_dim(w);
  const auto k = static_cast<std::size_t>(k_);
  for (std::size_t ci = 0; ci < static_cast<std::size_t>(in_); ++ci) {
    float* xp = dx + ci * h * w;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const float* src = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy) * stride_ - pad_ + static_cast<long>(ky) * dil_;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          float* row = xp + static_cast<std::size_t>(iy) * w;
          const float* g = src + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox) * stride_ - pad_ + static_cast<long>(kx) * dil_;
            if (ix >= 0 && ix < static_cast<long>(w)) row[ix] += g[ox];
          }
        }
      }
    }
  }
}

FTensor Conv2d::forward(const FTensor& x) {
  cache_ = x;
  return infer(x);
}

FTensor Conv2d::infer(const FTensor& x) const {
  const auto& s = x.shape();
  require(s.c == static_cast<std::size_t>(in_), ErrorCode::ShapeMismatch,
          name() + ": expected " + std::to_string(in_) + " channels, got " + s.str());
  const std::size_t ho = out_dim(s.h), wo = out_dim(s.w);
  const std::size_t kk = static_cast<std::size_t>(in_ * k_ * k_);
  FTensor out(s.n, static_cast<std::size_t>(out_), ho, wo);
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  AlignedVector<float> col(pointwise ? 0 : kk * ho * wo);
  ConstMapMat W(weight_.value.data(), out_, static_cast<Eigen::Index>(kk));
  for (std::size_t n = 0; n < s.n; ++n) {
    const float* src = x.sample(n);
    if (!pointwise) {
      im2col(src, s.h, s.w, col.data());
      src = col.data();
    }
    ConstMapMat C(src, static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(ho * wo));
    MapMat O(out.sample(n), out_, static_cast<Eigen::Index>(ho * wo));
    O.noalias() = W * C;
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) O.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
    }
  }
  return out;
}

FTensor Conv2d::backward(const FTensor& grad_out) {
  const auto& s = cache_.shape();
  const std::size_t ho = out_dim(s.h), wo = out_dim(s.w);
  const std::size_t kk = static_cast<std::size_t>(in_ * k_ * k_);
  const auto hw = static_cast<Eigen::Index>(ho * wo);
  FTensor dx(s);
  const bool pointwise = k_ == 1 && stride_ == 1 && pad_ == 0;
  AlignedVector<float> col(pointwise ? 0 : kk * ho * wo);
  AlignedVector<float> dcol(pointwise ? 0 : kk * ho * wo);
  ConstMapMat W(weight_.value.data(), out_, static_cast<Eigen::Index>(kk));
  MapMat dW(weight_.grad.data(), out_, static_cast<Eigen::Index>(kk));
  for (std::size_t n = 0; n < s.n; ++n) {
    ConstMapMat G(grad_out.sample(n), out_, hw);
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += G.row(o).sum();
    }
    if (pointwise) {
      ConstMapMat C(cache_.sample(n), static_cast<Eigen::Index>(kk), hw);
      dW.noalias() += G * C.transpose();
      MapMat DX(dx.sample(n), static_cast<Eigen::Index>(kk), hw);
      DX.noalias() = W.transpose() * G;
    } else {
      im2col(cache_.sample(n), s.h, s.w, col.data());
      ConstMapMat C(col.data(), static_cast<Eigen::Index>(kk), hw);
      dW.noalias() += G * C.transpose();
      MapMat DC(dcol.data(), static_cast<Eigen::Index>(kk), hw);
      DC.noalias() = W.transpose() * G;
      col2im(dcol.data(), s.h, s.w, dx.sample(n));
    }
  }
  return dx;
}

void Conv2d::collect(std::vector<Param*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

void Conv2d::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "conv2d", in_, out_, k_, stride_, dil_});
}

// ------------------------------------------------------- DepthwiseConv2d

DepthwiseConv2d::DepthwiseConv2d(std::string name, int channels, int kernel, int stride,
                                 int padding, int dilation, std::mt19937_64& rng)
    : Module(std::move(name)), ch_(channels), k_(kernel), stride_(stride), pad_(padding),
      dil_(dilation) {
  const auto uc = static_cast<std::size_t>(channels), uk = static_cast<std::size_t>(kernel);
  weight_ = make_param(this->name() + ".weight", {uc, 1, uk, uk});
  he_normal(weight_.value, uk * uk, rng);
  bias_ = make_param(this->name() + ".bias", {1, uc, 1, 1});
}

std::size_t DepthwiseConv2d::out_dim(std::size_t in) const {
  const long v = (static_cast<long>(in) + 2L * pad_ - static_cast<long>(dil_) * (k_ - 1) - 1) /
                     stride_ + 1;
  require(v > 0, ErrorCode::BadSpatialDims, name() + ": input too small");
  return static_cast<std::size_t>(v);
}

FTensor DepthwiseConv2d::forward(const FTensor& x) {
  cache_ = x;
  return infer(x);
}

FTensor DepthwiseConv2d::infer(const FTensor& x) const {
  const auto& s = x.shape();
  require(s.c == static_cast<std::size_t>(ch_), ErrorCode::ShapeMismatch,
          name() + ": channel mismatch " + s.str());
  const std::size_t ho = out_dim(s.h), wo = out_dim(s.w);
  FTensor out(s.n, s.c, ho, wo);
  const auto k = static_cast<std::size_t>(k_);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* xp = x.plane(n, c);
      const float* wp = weight_.value.plane(c, 0);
      float* op = out.plane(n, c);
      std::fill(op, op + ho * wo, bias_.value[c]);
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const float wv = wp[ky * k + kx];
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride_ - pad_ + static_cast<long>(ky) * dil_;
            if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
            const float* row = xp + static_cast<std::size_t>(iy) * s.w;
            float* orow = op + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix =
                  static_cast<long>(ox) * stride_ - pad_ + static_cast<long>(kx) * dil_;
              if (ix >= 0 && ix < static_cast<long>(s.w)) orow[ox] += wv * row[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

FTensor DepthwiseConv2d::backward(const FTensor& grad_out) {
  const auto& s = cache_.shape();
  const std::size_t ho = out_dim(s.h), wo = out_dim(s.w);
  const auto k = static_cast<std::size_t>(k_);
  FTensor dx(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* xp = cache_.plane(n, c);
      const float* gp = grad_out.plane(n, c);
      const float* wp = weight_.value.plane(c, 0);
      float* dwp = weight_.grad.plane(c, 0);
      float* dxp = dx.plane(n, c);
      float gsum = 0.0f;
      for (std::size_t i = 0; i < ho * wo; ++i) gsum += gp[i];
      bias_.grad[c] += gsum;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const float wv = wp[ky * k + kx];
          float acc = 0.0f;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride_ - pad_ + static_cast<long>(ky) * dil_;
            if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
            const float* row = xp + static_cast<std::size_t>(iy) * s.w;
            float* drow = dxp + static_cast<std::size_t>(iy) * s.w;
            const float* grow = gp + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const long ix =
                  static_cast<long>(ox) * stride_ - pad_ + static_cast<long>(kx) * dil_;
              if (ix >= 0 && ix < static_cast<long>(s.w)) {
                acc += grow[ox] * row[ix];
                drow[ix] += grow[ox] * wv;
              }
            }
          }
          dwp[ky * k + kx] += acc;
        }
      }
    }
  }
  return dx;
}

void DepthwiseConv2d::collect(std::vector<Param*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

void DepthwiseConv2d::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "depthwise_conv2d", ch_, ch_, k_, stride_, dil_});
}

// ------------------------------------------------------------------ ReLU

FTensor ReLU::forward(const FTensor& x) {
  FTensor y = infer(x);
  cache_ = y;
  return y;
}

FTensor ReLU::infer(const FTensor& x) const {
  FTensor y = x;
  for (auto& v : y.values()) v = v > 0.0f ? v : 0.0f;
  return y;
}

FTensor ReLU::backward(const FTensor& grad_out) {
  FTensor dx = grad_out;
  const float* y = cache_.data();
  float* d = dx.data();
  for (std::size_t i = 0; i < dx.numel(); ++i) {
    if (!(y[i] > 0.0f)) d[i] = 0.0f;
  }
  return dx;
}

// ------------------------------------------------------------- GroupNorm

namespace {

// Sum of f(i) over [0, n) in double, split over four lanes so it vectorizes.
template <typename F>
double lane_sum(std::size_t n, F&& f) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t j = 0; j < 4; ++j) acc[j] += f(i + j);
  }
  for (; i < n; ++i) acc[0] += f(i);
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// Largest group count up to 8 that leaves at least two channels per group.
int default_groups(int channels) {
  for (int g = std::min(8, channels / 2); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

constexpr double kNormEps = 1e-5;

}  // namespace

GroupNorm::GroupNorm(std::string name, int channels, int groups)
    : Module(name),
      ch_(channels),
      groups_(groups > 0 ? groups : default_groups(channels)),
      gamma_(make_param(name + ".gamma", {1, static_cast<std::size_t>(channels), 1, 1})),
      beta_(make_param(name + ".beta", {1, static_cast<std::size_t>(channels), 1, 1})) {
  if (channels % groups_ != 0) throw std::invalid_argument("GroupNorm: channels % groups != 0");
  gamma_.value.fill(1.0f);
}

FTensor GroupNorm::normalize(const FTensor& x, FTensor* xhat, std::vector<double>* inv_std) const {
  const auto& s = x.shape();
  const std::size_t cg = s.c / static_cast<std::size_t>(groups_);
  const std::size_t m = cg * s.plane();
  FTensor y(s);
  if (xhat) *xhat = FTensor(s);
  if (inv_std) inv_std->assign(s.n * static_cast<std::size_t>(groups_), 0.0);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(groups_); ++g) {
      const float* p = x.plane(n, g * cg);
      const double mean = lane_sum(m, [p](std::size_t i) { return double{p[i]}; }) / static_cast<double>(m);
      const double sq = lane_sum(m, [p, mean](std::size_t i) { return (p[i] - mean) * (p[i] - mean); });
      const double inv = 1.0 / std::sqrt(sq / static_cast<double>(m) + kNormEps);
      if (inv_std) (*inv_std)[n * groups_ + g] = inv;
      for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
        const float* xp = x.plane(n, c);
        float* yp = y.plane(n, c);
        float* hp = xhat ? xhat->plane(n, c) : nullptr;
        const float ga = gamma_.value[c], be = beta_.value[c];
        for (std::size_t i = 0; i < s.plane(); ++i) {
          const auto h = static_cast<float>((xp[i] - mean) * inv);
          if (hp) hp[i] = h;
          yp[i] = ga * h + be;
        }
      }
    }
  }
  return y;
}

FTensor GroupNorm::forward(const FTensor& x) { return normalize(x, &xhat_, &inv_std_); }

FTensor GroupNorm::infer(const FTensor& x) const { return normalize(x, nullptr, nullptr); }

FTensor GroupNorm::backward(const FTensor& grad_out) {
  const auto& s = grad_out.shape();
  const std::size_t cg = s.c / static_cast<std::size_t>(groups_);
  const double m = static_cast<double>(cg * s.plane());
  FTensor dx(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t g = 0; g < static_cast<std::size_t>(groups_); ++g) {
      double sum_d = 0.0, sum_dh = 0.0;
      for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
        const float* gp = grad_out.plane(n, c);
        const float* hp = xhat_.plane(n, c);
        const double dg = lane_sum(s.plane(), [gp, hp](std::size_t i) { return double{gp[i]} * hp[i]; });
        const double db = lane_sum(s.plane(), [gp](std::size_t i) { return double{gp[i]}; });
        gamma_.grad[c] += static_cast<float>(dg);
        beta_.grad[c] += static_cast<float>(db);
        sum_d += gamma_.value[c] * db;
        sum_dh += gamma_.value[c] * dg;
      }
      const double inv = inv_std_[n * groups_ + g];
      for (std::size_t c = g * cg; c < (g + 1) * cg; ++c) {
        const float* gp = grad_out.plane(n, c);
        const float* hp = xhat_.plane(n, c);
        float* dp = dx.plane(n, c);
        const double ga = gamma_.value[c];
        for (std::size_t i = 0; i < s.plane(); ++i) {
          dp[i] = static_cast<float>(inv / m * (m * ga * gp[i] - sum_d - hp[i] * sum_dh));
        }
      }
    }
  }
  return dx;
}

void GroupNorm::collect(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void GroupNorm::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "group_norm", ch_, ch_, 0, 1, 1});
}

// -------------------------------------------------------------- MaxPool2

FTensor MaxPool2::forward(const FTensor& x) {
  const auto& s = x.shape();
  in_shape_ = s;
  const std::size_t ho = s.h / 2, wo = s.w / 2;
  FTensor out(s.n, s.c, ho, wo);
  argmax_.assign(out.numel(), 0);
  std::size_t o = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = x.plane(n, c);
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xx = 0; xx < wo; ++xx, ++o) {
          std::size_t best = (2 * y) * s.w + 2 * xx;
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t idx = (2 * y + dy) * s.w + 2 * xx + dx;
              if (p[idx] > p[best]) best = idx;
            }
          }
          out[o] = p[best];
          argmax_[o] = static_cast<std::uint32_t>(best);
        }
      }
    }
  }
  return out;
}

FTensor MaxPool2::infer(const FTensor& x) const {
  const auto& s = x.shape();
  const std::size_t ho = s.h / 2, wo = s.w / 2;
  FTensor out(s.n, s.c, ho, wo);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = x.plane(n, c);
      float* op = out.plane(n, c);
      for (std::size_t y = 0; y < ho; ++y) {
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const float* r0 = p + 2 * y * s.w + 2 * xx;
          const float* r1 = r0 + s.w;
          op[y * wo + xx] = std::max(std::max(r0[0], r0[1]), std::max(r1[0], r1[1]));
        }
      }
    }
  }
  return out;
}

FTensor MaxPool2::backward(const FTensor& grad_out) {
  FTensor dx(in_shape_);
  const std::size_t per_plane = grad_out.shape().plane();
  for (std::size_t o = 0; o < grad_out.numel(); ++o) {
    const std::size_t plane = o / per_plane;
    dx.data()[plane * in_shape_.plane() + argmax_[o]] += grad_out[o];
  }
  return dx;
}

void MaxPool2::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "maxpool", 0, 0, 2, 2, 1});
}

// -------------------------------------------------------------- Upsample

FTensor Upsample::forward(const FTensor& x) {
  in_shape_ = x.shape();
  return infer(x);
}

FTensor Upsample::infer(const FTensor& x) const {
  const auto& s = x.shape();
  const std::size_t f = static_cast<std::size_t>(factor_);
  const std::size_t ho = s.h * f, wo = s.w * f;
  const auto ty = bilinear_taps(s.h, ho);
  const auto tx = bilinear_taps(s.w, wo);
  FTensor out(s.n, s.c, ho, wo);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = x.plane(n, c);
      float* op = out.plane(n, c);
      for (std::size_t y = 0; y < ho; ++y) {
        const Tap& a = ty[y];
        const float* r0 = p + a.i0 * s.w;
        const float* r1 = p + a.i1 * s.w;
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const Tap& b = tx[xx];
          op[y * wo + xx] = a.w0 * (b.w0 * r0[b.i0] + b.w1 * r0[b.i1]) +
                            a.w1 * (b.w0 * r1[b.i0] + b.w1 * r1[b.i1]);
        }
      }
    }
  }
  return out;
}

FTensor Upsample::backward(const FTensor& grad_out) {
  const auto& s = in_shape_;
  const std::size_t ho = grad_out.shape().h, wo = grad_out.shape().w;
  const auto ty = bilinear_taps(s.h, ho);
  const auto tx = bilinear_taps(s.w, wo);
  FTensor dx(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* g = grad_out.plane(n, c);
      float* d = dx.plane(n, c);
      for (std::size_t y = 0; y < ho; ++y) {
        const Tap& a = ty[y];
        float* r0 = d + a.i0 * s.w;
        float* r1 = d + a.i1 * s.w;
        for (std::size_t xx = 0; xx < wo; ++xx) {
          const Tap& b = tx[xx];
          const float v = g[y * wo + xx];
          r0[b.i0] += a.w0 * b.w0 * v;
          r0[b.i1] += a.w0 * b.w1 * v;
          r1[b.i0] += a.w1 * b.w0 * v;
          r1[b.i1] += a.w1 * b.w1 * v;
        }
      }
    }
  }
  return dx;
}

void Upsample::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "upsample_bilinear", 0, 0, 0, factor_, 1});
}

// ------------------------------------------------------------ Sequential

Sequential& Sequential::add(ModulePtr m) {
  layers_.push_back(std::move(m));
  return *this;
}

FTensor Sequential::forward(const FTensor& x) {
  FTensor h = x;
  for (auto& l : layers_) h = l->forward(h);
  return h;
}

FTensor Sequential::infer(const FTensor& x) const {
  FTensor h = x;
  for (const auto& l : layers_) h = l->infer(h);
  return h;
}

FTensor Sequential::backward(const FTensor& grad_out) {
  FTensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::collect(std::vector<Param*>& out) {
  for (auto& l : layers_) l->collect(out);
}

void Sequential::describe(std::vector<LayerInfo>& out) const {
  for (const auto& l : layers_) l->describe(out);
}

// ------------------------------------------------------ InvertedResidual

InvertedResidual::InvertedResidual(std::string name, int in, int out, int expand, int stride,
                                   int dilation, std::mt19937_64& rng)
    : Module(name), residual_(stride == 1 && in == out), body_(name + ".body") {
  const int hidden = in * expand;
  body_.add(std::make_unique<Conv2d>(name + ".expand", in, hidden, 1, 1, 0, 1, rng, false));
  body_.add(std::make_unique<GroupNorm>(name + ".expand_norm", hidden));
  body_.add(std::make_unique<ReLU>(name + ".expand_act"));
  body_.add(std::make_unique<DepthwiseConv2d>(name + ".depthwise", hidden, 3, stride, dilation,
                                              dilation, rng));
  body_.add(std::make_unique<GroupNorm>(name + ".depthwise_norm", hidden));
  body_.add(std::make_unique<ReLU>(name + ".depthwise_act"));
  body_.add(std::make_unique<Conv2d>(name + ".project", hidden, out, 1, 1, 0, 1, rng, false));
  body_.add(std::make_unique<GroupNorm>(name + ".project_norm", out));
}

FTensor InvertedResidual::forward(const FTensor& x) {
  FTensor y = body_.forward(x);
  if (residual_) accumulate(y, x);
  return y;
}

FTensor InvertedResidual::infer(const FTensor& x) const {
  FTensor y = body_.infer(x);
  if (residual_) accumulate(y, x);
  return y;
}

FTensor InvertedResidual::backward(const FTensor& grad_out) {
  FTensor dx = body_.backward(grad_out);
  if (residual_) accumulate(dx, grad_out);
  return dx;
}

void InvertedResidual::collect(std::vector<Param*>& out) { body_.collect(out); }

void InvertedResidual::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "inverted_residual", 0, 0, 0, 1, 1});
  body_.describe(out);
}

// ------------------------------------------------------------------ Aspp

Aspp::Aspp(std::string name, int in, int out, const std::vector<int>& rates,
           std::mt19937_64& rng)
    : Module(name), out_(out), rates_(rates), pool_branch_(name + ".pool"),
      project_(name + ".project") {
  auto b0 = std::make_unique<Sequential>(name + ".b0");
  b0->add(std::make_unique<Conv2d>(name + ".b0.conv", in, out, 1, 1, 0, 1, rng, false));
  b0->add(std::make_unique<GroupNorm>(name + ".b0.norm", out));
  b0->add(std::make_unique<ReLU>(name + ".b0.act"));
  branches_.push_back(std::move(b0));
  for (std::size_t i = 0; i < rates.size(); ++i) {
    const std::string bn = name + ".b" + std::to_string(i + 1);
    auto b = std::make_unique<Sequential>(bn);
    b->add(std::make_unique<Conv2d>(bn + ".conv", in, out, 3, 1, rates[i], rates[i], rng, false));
    b->add(std::make_unique<GroupNorm>(bn + ".norm", out));
    b->add(std::make_unique<ReLU>(bn + ".act"));
    branches_.push_back(std::move(b));
  }
  pool_branch_.add(std::make_unique<Conv2d>(name + ".pool.conv", in, out, 1, 1, 0, 1, rng));
  pool_branch_.add(std::make_unique<ReLU>(name + ".pool.act"));
  const int cat = out * static_cast<int>(branches_.size() + 1);
  project_.add(std::make_unique<Conv2d>(name + ".project.conv", cat, out, 1, 1, 0, 1, rng, false));
  project_.add(std::make_unique<GroupNorm>(name + ".project.norm", out));
  project_.add(std::make_unique<ReLU>(name + ".project.act"));
}

namespace {

FTensor global_average(const FTensor& x) {
  const auto& s = x.shape();
  FTensor out(s.n, s.c, 1, 1);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = x.plane(n, c);
      double acc = 0.0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      out(n, c, 0, 0) = static_cast<float>(acc / static_cast<double>(s.plane()));
    }
  }
  return out;
}

FTensor broadcast(const FTensor& x, std::size_t h, std::size_t w) {
  const auto& s = x.shape();
  FTensor out(s.n, s.c, h, w);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) std::fill_n(out.plane(n, c), h * w, x(n, c, 0, 0));
  }
  return out;
}

}  // namespace

FTensor Aspp::forward(const FTensor& x) {
  in_shape_ = x.shape();
  FTensor cat = branches_[0]->forward(x);
  for (std::size_t i = 1; i < branches_.size(); ++i) {
    cat = concat_channels(cat, branches_[i]->forward(x));
  }
  const FTensor pooled = pool_branch_.forward(global_average(x));
  cat = concat_channels(cat, broadcast(pooled, x.shape().h, x.shape().w));
  return project_.forward(cat);
}

FTensor Aspp::infer(const FTensor& x) const {
  FTensor cat = branches_[0]->infer(x);
  for (std::size_t i = 1; i < branches_.size(); ++i) {
    cat = concat_channels(cat, branches_[i]->infer(x));
  }
  const FTensor pooled = pool_branch_.infer(global_average(x));
  cat = concat_channels(cat, broadcast(pooled, x.shape().h, x.shape().w));
  return project_.infer(cat);
}

FTensor Aspp::backward(const FTensor& grad_out) {
  FTensor g = project_.backward(grad_out);
  const auto uo = static_cast<std::size_t>(out_);
  FTensor dx(in_shape_);
  FTensor rest = std::move(g);
  for (auto& b : branches_) {
    FTensor gb, tail;
    split_channels(rest, uo, gb, tail);
    accumulate(dx, b->backward(gb));
    rest = std::move(tail);
  }
  // rest now holds the broadcast pool branch gradient.
  const auto& s = rest.shape();
  FTensor gpool(s.n, s.c, 1, 1);
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const float* p = rest.plane(n, c);
      float acc = 0.0f;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      gpool(n, c, 0, 0) = acc;
    }
  }
  const FTensor gavg = pool_branch_.backward(gpool);
  const float inv = 1.0f / static_cast<float>(in_shape_.plane());
  for (std::size_t n = 0; n < in_shape_.n; ++n) {
    for (std::size_t c = 0; c < in_shape_.c; ++c) {
      const float v = gavg(n, c, 0, 0) * inv;
      float* d = dx.plane(n, c);
      for (std::size_t i = 0; i < in_shape_.plane(); ++i) d[i] += v;
    }
  }
  return dx;
}

void Aspp::collect(std::vector<Param*>& out) {
  for (auto& b : branches_) b->collect(out);
  pool_branch_.collect(out);
  project_.collect(out);
}

void Aspp::describe(std::vector<LayerInfo>& out) const {
  out.push_back({name(), "aspp", 0, out_, 0, 1, 1});
  for (const auto& b : branches_) b->describe(out);
  pool_branch_.describe(out);
  project_.describe(out);
}

}  // namespace cpsseg::nn
