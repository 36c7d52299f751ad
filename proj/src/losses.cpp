#include "cpsseg/losses.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace cpsseg {
namespace {

void check_logits(const Logits& logits) {
  require(logits.shape().c == static_cast<std::size_t>(kNumClasses), ErrorCode::ShapeMismatch,
          "logits must have 5 classes, got shape " + logits.shape().str());
}

void check_labels(const Logits& logits, std::span<const std::uint8_t> labels) {
  check_logits(logits);
  const auto& s = logits.shape();
  require(labels.size() == s.n * s.h * s.w, ErrorCode::ShapeMismatch,
          "label batch has " + std::to_string(labels.size()) + " pixels, logits " + s.str());
  for (std::uint8_t v : labels) {
    if (v >= kNumClasses) throw Error(ErrorCode::InvalidClassValue, "label " + std::to_string(v));
  }
}

// dL/dz from dL/dp through the softmax, in place over grad (holding dL/dp).
void softmax_backward(const Logits& probs, Logits& grad) {
  const auto& s = probs.shape();
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double dot = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) dot += grad.plane(n, c)[i] * probs.plane(n, c)[i];
      for (std::size_t c = 0; c < s.c; ++c) {
        double& g = grad.plane(n, c)[i];
        g = probs.plane(n, c)[i] * (g - dot);
      }
    }
  }
}

// One row of the zero-padded correlation with the cross kernel
// {center, N, S, E, W} / 5; up or down is null at the plane border.
// The kernel is symmetric, so this is also its own adjoint.
void cross_row(const double* up, const double* mid, const double* down, std::size_t w,
               double* out) {
  constexpr double k = 1.0 / 5.0;
  for (std::size_t c = 0; c < w; ++c) {
    double acc = mid[c];
    if (up) acc += up[c];
    if (down) acc += down[c];
    out[c] = acc;
  }
  if (w == 1) {
    out[0] *= k;
    return;
  }
  out[0] = (out[0] + mid[1]) * k;
  for (std::size_t c = 1; c + 1 < w; ++c) out[c] = (out[c] + mid[c - 1] + mid[c + 1]) * k;
  out[w - 1] = (out[w - 1] + mid[w - 2]) * k;
}

// Row r of a plane as (up, mid, down) pointers.
struct RowView {
  const double* up;
  const double* mid;
  const double* down;
};

RowView rows_of(const double* plane, std::size_t r, std::size_t h, std::size_t w) {
  const double* mid = plane + r * w;
  return {r > 0 ? mid - w : nullptr, mid, r + 1 < h ? mid + w : nullptr};
}

double sum_row(const double* x, std::size_t n) {
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t j = 0; j < 4; ++j) acc[j] += x[i + j];
  }
  for (; i < n; ++i) acc[0] += x[i];
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

// Cross entropy against a class index per pixel.
LossValue ce_against_classes(const Logits& logits, std::span<const std::uint8_t> classes,
                             const ClassWeights& alpha, double K) {
  require(K > 0.0, ErrorCode::InvalidArgument, "normalization constant must be positive");
  const auto& s = logits.shape();
  const std::size_t hw = s.plane();
  LossValue out{0.0, Logits(s)};
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits.plane(n, c)[i]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) z += std::exp(logits.plane(n, c)[i] - mx);
      const std::size_t t = classes[n * hw + i];
      const double a = alpha.alpha[t];
      const double log_p = logits.plane(n, t)[i] - mx - std::log(z);
      total += -a * log_p;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double p = std::exp(logits.plane(n, c)[i] - mx) / z;
        out.grad.plane(n, c)[i] = a * (p - (c == t ? 1.0 : 0.0)) / K;
      }
    }
  }
  out.value = total / K;
  return out;
}

}  // namespace

void ClassWeights::validate() const {
  for (double a : alpha) {
    require(std::isfinite(a) && a > 0.0, ErrorCode::InvalidArgument,
            "class weights must be positive and finite");
  }
}

std::vector<std::uint8_t> PseudoLabel::classes() const {
  const auto& s = onehot.shape();
  std::vector<std::uint8_t> out(s.n * s.h * s.w, 0);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const std::uint8_t* p = onehot.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        if (p[i]) out[n * hw + i] = static_cast<std::uint8_t>(c);
      }
    }
  }
  return out;
}

void HausdorffParams::validate() const {
  require(erosions >= 1, ErrorCode::InvalidArgument, "erosions must be >= 1");
  require(exponent >= 0.0 && std::isfinite(exponent), ErrorCode::InvalidArgument,
          "erosion exponent must be >= 0");
}

void RampUpSchedule::validate() const {
  require(total_epochs >= 1, ErrorCode::InvalidArgument, "total epochs must be >= 1");
  require(rampup_length >= 0 && rampup_length <= total_epochs, ErrorCode::InvalidArgument,
          "ramp-up length must lie in [0, T]");
  require(lambda_max > 0.0 && std::isfinite(lambda_max), ErrorCode::InvalidArgument,
          "lambda_max must be positive");
}

double RampUpSchedule::at(int epoch) const {
  return rampup(rampup_length, epoch, total_epochs, lambda_max, convention);
}

ClassWeights class_weights_from_counts(std::span<const std::uint64_t, kNumClasses> counts,
                                       double cap) {
  require(cap >= 1.0 && std::isfinite(cap), ErrorCode::InvalidArgument, "weight cap must be >= 1");
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  require(total > 0, ErrorCode::EmptyDataset, "no labelled pixels");
  ClassWeights w;
  for (int c = 0; c < kNumClasses; ++c) {
    if (counts[c] == 0) {
      w.alpha[c] = cap;
      continue;
    }
    const double raw = static_cast<double>(total) /
                       (static_cast<double>(kNumClasses) * static_cast<double>(counts[c]));
    w.alpha[c] = std::clamp(raw, 1.0 / cap, cap);
  }
  return w;
}

ClassWeights class_weights_from_dataset(const ChipDataset& ds, double cap) {
  require(!ds.empty(), ErrorCode::EmptyDataset, "cannot weight classes of an empty dataset");
  std::array<std::uint64_t, kNumClasses> counts{};
  for (const auto& rec : ds.records) {
    for (std::uint8_t v : rec.label) {
      if (v >= kNumClasses) throw Error(ErrorCode::InvalidClassValue, "label " + std::to_string(v));
      ++counts[v];
    }
  }
  return class_weights_from_counts(counts, cap);
}

double normalization_constant(std::size_t ds_size, std::size_t width, std::size_t height) {
  require(ds_size >= 1 && width >= 1 && height >= 1, ErrorCode::InvalidArgument,
          "normalization arguments must be >= 1");
  return static_cast<double>(ds_size) * static_cast<double>(width) * static_cast<double>(height);
}

Logits softmax(const Logits& logits) {
  const auto& s = logits.shape();
  Logits out(s);
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits.plane(n, c)[i]);
      double z = 0.0;
      for (std::size_t c = 0; c < s.c; ++c) {
        const double e = std::exp(logits.plane(n, c)[i] - mx);
        out.plane(n, c)[i] = e;
        z += e;
      }
      for (std::size_t c = 0; c < s.c; ++c) out.plane(n, c)[i] /= z;
    }
  }
  return out;
}

LossValue weighted_ce(const Logits& logits, std::span<const std::uint8_t> labels,
                      const ClassWeights& alpha, double K) {
  check_labels(logits, labels);
  return ce_against_classes(logits, labels, alpha, K);
}

LossValue weighted_ce(const Logits& logits, const PseudoLabel& target, const ClassWeights& alpha,
                      double K) {
  check_logits(logits);
  require_same_shape(logits.shape(), target.onehot.shape(), "weighted_ce pseudo-label");
  const auto classes = target.classes();
  return ce_against_classes(logits, classes, alpha, K);
}

LossValue hausdorff_erosion(const Logits& logits, std::span<const std::uint8_t> labels,
                            const ClassWeights& alpha, const HausdorffParams& params, double K) {
  check_labels(logits, labels);
  params.validate();
  require(K > 0.0, ErrorCode::InvalidArgument, "normalization constant must be positive");
  const auto& s = logits.shape();
  const std::size_t hw = s.plane();
  const auto E = static_cast<std::size_t>(params.erosions);
  const Logits probs = softmax(logits);
  Logits dprob(s);  // dL/dp

  std::vector<double> iter_weight(E + 1, 0.0);
  for (std::size_t k = 1; k <= E; ++k) {
    iter_weight[k] = std::pow(static_cast<double>(k), params.exponent);
  }

  // maps[k] holds e^k for one (sample, class) plane.
  std::vector<std::vector<double>> maps(E + 1, std::vector<double>(hw));
  std::vector<double> grad(hw), scratch(hw), gp(3 * s.w), row(s.w);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::uint8_t* lbl = labels.data() + n * hw;
    for (std::size_t c = 0; c < s.c; ++c) {
      const double a = alpha.alpha[c];
      const double* p = probs.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const double d = p[i] - (lbl[i] == c ? 1.0 : 0.0);
        maps[0][i] = d * d;
      }
      double plane_sum = 0.0;
      for (std::size_t k = 1; k <= E; ++k) {
        const double* prev = maps[k - 1].data();
        double sk = 0.0;
        for (std::size_t r = 0; r < s.h; ++r) {
          double* cur = maps[k].data() + r * s.w;
          const double* p_row = prev + r * s.w;
          const RowView v = rows_of(prev, r, s.h, s.w);
          cross_row(v.up, v.mid, v.down, s.w, cur);
          for (std::size_t j = 0; j < s.w; ++j) cur[j] *= p_row[j];
          sk += sum_row(cur, s.w);
        }
        plane_sum += iter_weight[k] * sk;
      }
      total += a * plane_sum;

      // Reverse pass: grad holds dL/de^k.
      // e^k = F(prev) * prev  =>  d prev = F^T(g * prev) + g * F(prev)
      const double scale = a / K;
      std::fill(grad.begin(), grad.end(), scale * iter_weight[E]);
      for (std::size_t k = E; k >= 1; --k) {
        const double* prev = maps[k - 1].data();
        const double direct = scale * iter_weight[k - 1];
        // g * prev for rows r-1, r, r+1, kept in a rolling three-row buffer.
        auto gp_row = [&](std::size_t r) {
          double* dst = gp.data() + (r % 3) * s.w;
          for (std::size_t j = 0; j < s.w; ++j) dst[j] = grad[r * s.w + j] * prev[r * s.w + j];
          return dst;
        };
        gp_row(0);
        for (std::size_t r = 0; r < s.h; ++r) {
          if (r + 1 < s.h) gp_row(r + 1);  // reuses the slot of row r - 2
          const double* g_up = r > 0 ? gp.data() + ((r - 1) % 3) * s.w : nullptr;
          const double* g_down = r + 1 < s.h ? gp.data() + ((r + 1) % 3) * s.w : nullptr;
          double* next = scratch.data() + r * s.w;
          cross_row(g_up, gp.data() + (r % 3) * s.w, g_down, s.w, next);
          const RowView v = rows_of(prev, r, s.h, s.w);
          cross_row(v.up, v.mid, v.down, s.w, row.data());
          const double* g = grad.data() + r * s.w;
          for (std::size_t j = 0; j < s.w; ++j) next[j] += g[j] * row[j] + direct;
        }
        grad.swap(scratch);
      }
      double* dp = dprob.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        dp[i] = grad[i] * 2.0 * (p[i] - (lbl[i] == c ? 1.0 : 0.0));
      }
    }
  }
  softmax_backward(probs, dprob);
  return {total / K, std::move(dprob)};
}

SupervisedLoss supervised_loss(const Logits& p1, const Logits& p2,
                               std::span<const std::uint8_t> labels, const ClassWeights& alpha,
                               const HausdorffParams& params, double K) {
  require_same_shape(p1.shape(), p2.shape(), "supervised_loss");
  const LossValue hd1 = hausdorff_erosion(p1, labels, alpha, params, K);
  const LossValue hd2 = hausdorff_erosion(p2, labels, alpha, params, K);
  const LossValue ce1 = weighted_ce(p1, labels, alpha, K);
  const LossValue ce2 = weighted_ce(p2, labels, alpha, K);
  SupervisedLoss out;
  out.hausdorff = hd1.value + hd2.value;
  out.wce = ce1.value + ce2.value;
  out.total = out.hausdorff + kSupervisedCeFactor * out.wce;
  out.grad1 = Logits(p1.shape());
  out.grad2 = Logits(p2.shape());
  for (std::size_t i = 0; i < p1.numel(); ++i) {
    out.grad1[i] = hd1.grad[i] + kSupervisedCeFactor * ce1.grad[i];
    out.grad2[i] = hd2.grad[i] + kSupervisedCeFactor * ce2.grad[i];
  }
  return out;
}

PseudoLabel one_hot_pseudo(const Logits& logits) {
  check_logits(logits);
  const auto& s = logits.shape();
  PseudoLabel out{Tensor<std::uint8_t>(s, 0)};
  const std::size_t hw = s.plane();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < s.c; ++c) {
        if (logits.plane(n, c)[i] > logits.plane(n, best)[i]) best = c;
      }
      out.onehot.plane(n, best)[i] = 1;
    }
  }
  return out;
}

PairLossValue cps_loss(const Logits& p1, const Logits& p2, const ClassWeights& alpha, double K) {
  check_logits(p1);
  require_same_shape(p1.shape(), p2.shape(), "cps_loss");
  const PseudoLabel y1 = one_hot_pseudo(p1);
  const PseudoLabel y2 = one_hot_pseudo(p2);
  LossValue l1 = weighted_ce(p1, y2, alpha, K);
  LossValue l2 = weighted_ce(p2, y1, alpha, K);
  return {l1.value + l2.value, std::move(l1.grad), std::move(l2.grad)};
}

double rampup(int r, int t, int T, double lambda_max, RampConvention convention) {
  require(T >= 0 && t >= 0 && t <= T && r >= 0 && r <= T, ErrorCode::InvalidArgument,
          "rampup requires 0 <= t <= T and 0 <= r <= T");
  if (t == 0) return 0.0;
  if (t <= r) {
    const double denom = convention == RampConvention::RampLength ? r : T;
    const double x = 1.0 - static_cast<double>(t) / denom;
    return lambda_max * std::exp(-5.0 * x * x);
  }
  return lambda_max;
}

double total_loss(double supervised, double cps, double lambda) {
  require(lambda >= 0.0, ErrorCode::InvalidArgument, "lambda must be >= 0");
  return supervised + lambda * cps;
}

LossValue tversky_loss(const Logits& logits, std::span<const std::uint8_t> labels, double a,
                       double b, double smooth) {
  check_labels(logits, labels);
  require(a > 0.0 && b > 0.0, ErrorCode::InvalidArgument, "Tversky weights must be positive");
  const auto& s = logits.shape();
  const std::size_t hw = s.plane();
  const Logits probs = softmax(logits);
  std::array<double, kNumClasses> tp{}, fp{}, fn{};
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::uint8_t* lbl = labels.data() + n * hw;
    for (std::size_t c = 0; c < s.c; ++c) {
      const double* p = probs.plane(n, c);
      for (std::size_t i = 0; i < hw; ++i) {
        const double y = lbl[i] == c ? 1.0 : 0.0;
        tp[c] += p[i] * y;
        fp[c] += p[i] * (1.0 - y);
        fn[c] += (1.0 - p[i]) * y;
      }
    }
  }
  double loss = 0.0;
  std::array<double, kNumClasses> num{}, den{};
  for (int c = 0; c < kNumClasses; ++c) {
    num[c] = tp[c] + smooth;
    den[c] = tp[c] + a * fp[c] + b * fn[c] + smooth;
    loss += 1.0 - num[c] / den[c];
  }
  loss /= kNumClasses;

  Logits dprob(s);
  for (std::size_t n = 0; n < s.n; ++n) {
    const std::uint8_t* lbl = labels.data() + n * hw;
    for (std::size_t c = 0; c < s.c; ++c) {
      double* g = dprob.plane(n, c);
      const double d2 = den[c] * den[c];
      for (std::size_t i = 0; i < hw; ++i) {
        const double y = lbl[i] == c ? 1.0 : 0.0;
        const double dden = y + a * (1.0 - y) - b * y;
        const double dti = (y * den[c] - num[c] * dden) / d2;
        g[i] = -dti / kNumClasses;
      }
    }
  }
  softmax_backward(probs, dprob);
  return {loss, std::move(dprob)};
}

}  // namespace cpsseg
