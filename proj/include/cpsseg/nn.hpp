#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cpsseg/tensor.hpp"

// Minimal layer library for the segmentation networks. Every module offers a
// caching forward() paired with backward() for training, and a const infer()
// that touches no state so inference can run concurrently.
namespace cpsseg::nn {

using FTensor = Tensor<float>;

struct Param {
  std::string name;
  FTensor value;
  FTensor grad;
};

struct LayerInfo {
  std::string name;
  std::string kind;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int dilation = 1;
};

class Module {
 public:
  explicit Module(std::string name) : name_(std::move(name)) {}
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  virtual FTensor forward(const FTensor& x) = 0;
  virtual FTensor infer(const FTensor& x) const = 0;
  // Accumulates parameter gradients and returns dL/dx.
  virtual FTensor backward(const FTensor& grad_out) = 0;
  virtual void collect(std::vector<Param*>& out) { (void)out; }
  virtual void describe(std::vector<LayerInfo>& out) const { (void)out; }

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

using ModulePtr = std::unique_ptr<Module>;

class Conv2d final : public Module {
 public:
  Conv2d(std::string name, int in, int out, int kernel, int stride, int padding, int dilation,
         std::mt19937_64& rng, bool bias = true);

  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  std::size_t out_dim(std::size_t in) const;
  void im2col(const float* x, std::size_t h, std::size_t w, float* col) const;
  void col2im(const float* col, std::size_t h, std::size_t w, float* dx) const;

  int in_, out_, k_, stride_, pad_, dil_;
  bool has_bias_;
  Param weight_;  // [out, in, k, k]
  Param bias_;    // [1, out, 1, 1]
  FTensor cache_;
};

class DepthwiseConv2d final : public Module {
 public:
  DepthwiseConv2d(std::string name, int channels, int kernel, int stride, int padding,
                  int dilation, std::mt19937_64& rng);

  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  std::size_t out_dim(std::size_t in) const;

  int ch_, k_, stride_, pad_, dil_;
  Param weight_;  // [channels, 1, k, k]
  Param bias_;
  FTensor cache_;
};

class ReLU final : public Module {
 public:
  explicit ReLU(std::string name) : Module(std::move(name)) {}
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;

 private:
  FTensor cache_;
};

// Group normalization with a per-channel affine. Statistics are per sample,
// so training and inference compute the same function.
class GroupNorm final : public Module {
 public:
  GroupNorm(std::string name, int channels, int groups = 0);
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

  int groups() const { return groups_; }

 private:
  FTensor normalize(const FTensor& x, FTensor* xhat, std::vector<double>* inv_std) const;

  int ch_, groups_;
  Param gamma_;
  Param beta_;
  FTensor xhat_;
  std::vector<double> inv_std_;
};

class MaxPool2 final : public Module {
 public:
  explicit MaxPool2(std::string name) : Module(std::move(name)) {}
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  Shape4 in_shape_;
  std::vector<std::uint32_t> argmax_;
};

// Bilinear resize by an integer factor, half-pixel centers (align_corners=false).
class Upsample final : public Module {
 public:
  Upsample(std::string name, int factor) : Module(std::move(name)), factor_(factor) {}
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  int factor_;
  Shape4 in_shape_;
};

class Sequential final : public Module {
 public:
  explicit Sequential(std::string name) : Module(std::move(name)) {}
  Sequential& add(ModulePtr m);
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  std::vector<ModulePtr> layers_;
};

// 1x1 expand, depthwise 3x3, 1x1 linear projection; identity shortcut when
// the shape is preserved.
class InvertedResidual final : public Module {
 public:
  InvertedResidual(std::string name, int in, int out, int expand, int stride, int dilation,
                   std::mt19937_64& rng);
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

 private:
  bool residual_;
  Sequential body_;
};

// Atrous spatial pyramid pooling: a 1x1 branch, one dilated 3x3 branch per
// rate and an image-pooling branch, concatenated and projected.
class Aspp final : public Module {
 public:
  Aspp(std::string name, int in, int out, const std::vector<int>& rates, std::mt19937_64& rng);
  FTensor forward(const FTensor& x) override;
  FTensor infer(const FTensor& x) const override;
  FTensor backward(const FTensor& grad_out) override;
  void collect(std::vector<Param*>& out) override;
  void describe(std::vector<LayerInfo>& out) const override;

  const std::vector<int>& rates() const { return rates_; }

 private:
  int out_;
  std::vector<int> rates_;
  std::vector<std::unique_ptr<Sequential>> branches_;
  Sequential pool_branch_;
  Sequential project_;
  Shape4 in_shape_;
};

// Channel concatenation helpers.
FTensor concat_channels(const FTensor& a, const FTensor& b);
void split_channels(const FTensor& g, std::size_t ca, FTensor& ga, FTensor& gb);

// Adds src into dst elementwise.
void accumulate(FTensor& dst, const FTensor& src);

}  // namespace cpsseg::nn
