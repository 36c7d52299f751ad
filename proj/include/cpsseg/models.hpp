#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cpsseg/nn.hpp"
#include "json.hpp"

namespace cpsseg {

enum class Architecture { UNet, DeepLab };

std::string_view to_string(Architecture a);
// Throws UnknownArchitecture.
Architecture parse_architecture(std::string_view name);

struct ModelConfig {
  Architecture architecture = Architecture::DeepLab;
  double width_multiplier = 1.0;
  int in_channels = 4;
  int num_classes = 5;
  std::uint64_t seed = 1;
  std::vector<int> aspp_rates{2, 4, 6};

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Encoder-decoder segmentation network with output [B, 5, H, W].
class SegmentationModel {
 public:
  explicit SegmentationModel(const ModelConfig& cfg);
  SegmentationModel(SegmentationModel&&) noexcept;
  SegmentationModel& operator=(SegmentationModel&&) noexcept;
  ~SegmentationModel();

  const ModelConfig& config() const { return config_; }

  // Training pass; caches activations for backward().
  Tensor<float> forward(const Tensor<float>& batch);
  // Inference pass; read-only, safe to call concurrently.
  Tensor<float> infer(const Tensor<float>& batch) const;
  // Accumulates parameter gradients from dL/dlogits.
  void backward(const Tensor<float>& grad_logits);

  void zero_grad();
  std::vector<nn::Param*> parameters();
  std::vector<const nn::Param*> parameters() const;
  std::size_t parameter_count() const;
  std::vector<nn::LayerInfo> describe() const;

  // Spatial dims must be a multiple of this.
  static constexpr int kDownsampling = 16;

 private:
  void check_input(const Tensor<float>& batch) const;

  ModelConfig config_;
  std::unique_ptr<nn::Module> net_;
};

SegmentationModel build_model(const ModelConfig& cfg);

// Checkpoint directory: descriptor.json (config, epoch, metric history and
// the tensor manifest) plus params.bin (little-endian float32 blob).
struct CheckpointInfo {
  int epoch = 0;
  nlohmann::json history = nlohmann::json::array();
};

void save_checkpoint(const std::filesystem::path& dir, const SegmentationModel& model,
                     const CheckpointInfo& info);
SegmentationModel load_checkpoint(const std::filesystem::path& dir,
                                  CheckpointInfo* info = nullptr);

// Copies parameter values between structurally identical models.
void copy_parameters(const SegmentationModel& from, SegmentationModel& to);

}  // namespace cpsseg
