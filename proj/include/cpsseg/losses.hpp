#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "cpsseg/chipper.hpp"
#include "cpsseg/geo_core.hpp"
#include "cpsseg/tensor.hpp"

namespace cpsseg {

// Logits [batch, 5, H, W]; the double-precision view the losses work on.
using Logits = Tensor<double>;

struct ClassWeights {
  std::array<double, kNumClasses> alpha{1.0, 1.0, 1.0, 1.0, 1.0};

  static ClassWeights uniform() { return {}; }
  // Throws InvalidArgument unless every weight is positive and finite.
  void validate() const;
};

// One-hot [batch, 5, H, W] with exactly one 1 per pixel.
struct PseudoLabel {
  Tensor<std::uint8_t> onehot;

  // Per-pixel class index, [batch, H, W].
  std::vector<std::uint8_t> classes() const;
};

struct HausdorffParams {
  int erosions = 10;
  double exponent = 2.0;

  void validate() const;
};

// How the exponent argument of the ramp-up is normalized.
enum class RampConvention {
  RampLength,   // exp(-5 (1 - t/r)^2); continuous at t = r
  TotalEpochs,  // exp(-5 (1 - t/T)^2) as literally printed
};

struct RampUpSchedule {
  int rampup_length = 0;  // r
  int total_epochs = 1;   // T
  double lambda_max = 0.1;
  RampConvention convention = RampConvention::RampLength;

  void validate() const;
  double at(int epoch) const;
};

// A scalar loss and its gradient with respect to the logits it was given.
struct LossValue {
  double value = 0.0;
  Logits grad;
};

struct PairLossValue {
  double value = 0.0;
  Logits grad1;
  Logits grad2;
};

struct SupervisedLoss {
  double total = 0.0;      // L_HF + 0.5 * L_WCE
  double hausdorff = 0.0;  // L_HF, summed over both models
  double wce = 0.0;        // L_WCE, summed over both models
  Logits grad1;
  Logits grad2;
};

inline constexpr double kSupervisedCeFactor = 0.5;

ClassWeights class_weights_from_counts(std::span<const std::uint64_t, kNumClasses> counts,
                                       double cap = 50.0);
ClassWeights class_weights_from_dataset(const ChipDataset& ds, double cap = 50.0);

// K = |D| * W * H.
double normalization_constant(std::size_t ds_size, std::size_t width, std::size_t height);

// Sum over samples and pixels of alpha_t * -log softmax(P)_t, divided by K.
// labels are class indices laid out [batch, H, W].
LossValue weighted_ce(const Logits& logits, std::span<const std::uint8_t> labels,
                      const ClassWeights& alpha, double K);
LossValue weighted_ce(const Logits& logits, const PseudoLabel& target, const ClassWeights& alpha,
                      double K);

// Erosion-based Hausdorff loss: per class the squared soft error map is
// repeatedly eroded with a normalized 3x3 cross kernel (convolve, then
// multiply by the previous map); iteration k contributes k^exponent times the
// surviving error, weighted by alpha and divided by K.
LossValue hausdorff_erosion(const Logits& logits, std::span<const std::uint8_t> labels,
                            const ClassWeights& alpha, const HausdorffParams& params, double K);

SupervisedLoss supervised_loss(const Logits& p1, const Logits& p2,
                               std::span<const std::uint8_t> labels, const ClassWeights& alpha,
                               const HausdorffParams& params, double K);

// Per-pixel argmax (lowest index wins ties) as a one-hot constant.
PseudoLabel one_hot_pseudo(const Logits& logits);

// Cross pseudo supervision: each model is trained against the other's
// one-hot argmax. Pseudo-labels carry no gradient.
PairLossValue cps_loss(const Logits& p1, const Logits& p2, const ClassWeights& alpha, double K);

double rampup(int r, int t, int T, double lambda_max = 0.1,
              RampConvention convention = RampConvention::RampLength);

double total_loss(double supervised, double cps, double lambda);

// Soft Tversky loss, mean over classes of 1 - TI.
LossValue tversky_loss(const Logits& logits, std::span<const std::uint8_t> labels,
                       double a = 0.3, double b = 0.7, double smooth = 1.0);

// Row-wise softmax over the class axis.
Logits softmax(const Logits& logits);

}  // namespace cpsseg
