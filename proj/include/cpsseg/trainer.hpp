#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cpsseg/chipper.hpp"
#include "cpsseg/losses.hpp"
#include "cpsseg/models.hpp"
#include "json.hpp"

namespace cpsseg {

enum class Regime { Cps, UnetWce, DeeplabTversky };
enum class OptimizerKind { SgdMomentum, Adam };

std::string_view to_string(Regime r);
Regime parse_regime(std::string_view s);
std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view s);

struct TrainConfig {
  Regime regime = Regime::Cps;
  int epochs = 50;         // T
  int rampup_length = 10;  // r
  double lambda_max = 0.1;
  RampConvention ramp_convention = RampConvention::RampLength;
  int batch_size = 4;
  double learning_rate = 0.01;
  OptimizerKind optimizer = OptimizerKind::SgdMomentum;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  HausdorffParams hausdorff;
  double class_weight_cap = 50.0;
  double tversky_alpha = 0.3;
  double tversky_beta = 0.7;
  double width_multiplier = 1.0;
  std::vector<int> aspp_rates{2, 4, 6};
  std::array<std::uint64_t, 2> seed_pair{1, 2};
  std::filesystem::path checkpoint_dir;  // empty: nothing persisted

  void validate() const;
  RampUpSchedule schedule() const;
  // Architecture and seed of model `which` (0 or 1).
  ModelConfig model_config(int which) const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys throw ConfigValidationError.
  static TrainConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  int epoch = 0;
  double lambda = 0.0;
  double hausdorff = 0.0;  // L_HF, both models
  double wce = 0.0;        // supervised L_WCE (both models) or the unet_wce loss
  double cps = 0.0;
  double tversky = 0.0;
  double total = 0.0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  static EpochRecord from_json(const nlohmann::json& j);
  // Equality on everything except wall time.
  bool same_losses(const EpochRecord& o) const;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  std::string to_jsonl() const;
  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
  static TrainHistory read(const std::filesystem::path& path);
  bool same_losses(const TrainHistory& o) const;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::span<nn::Param* const> params) = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg);

// Deterministic permutation of [0, n) for (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

struct CpsResult {
  SegmentationModel model1;
  SegmentationModel model2;
  TrainHistory history;
};

struct SupervisedResult {
  SegmentationModel model;
  TrainHistory history;
};

// Gradients of one CPS step, exposed for inspection.
struct CpsStep {
  SupervisedLoss supervised;
  PairLossValue cps;
  double lambda = 0.0;
  double total = 0.0;
};

// Runs forward on both models, computes the losses and back-propagates
// sup.grad + lambda * cps.grad into each model. Parameters are not updated.
CpsStep cps_backward(SegmentationModel& m1, SegmentationModel& m2, const Tensor<float>& images,
                     std::span<const std::uint8_t> labels, const ClassWeights& alpha,
                     const HausdorffParams& hausdorff, double K, double lambda);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Checkpoints land in <checkpoint_dir>/model1 and model2, history in
// <checkpoint_dir>/history.jsonl.
CpsResult train_cps(const TrainConfig& cfg, const ChipDataset& ds,
                    const EpochCallback& on_epoch = {});
// Checkpoint lands in <checkpoint_dir>/model.
SupervisedResult train_supervised(const TrainConfig& cfg, const ChipDataset& ds,
                                  const EpochCallback& on_epoch = {});

}  // namespace cpsseg
