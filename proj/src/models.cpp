#include "cpsseg/models.hpp"

#include <bit>
#include <cmath>
#include <fstream>

namespace cpsseg {
namespace {

using nn::FTensor;
using nn::Module;
using nn::Sequential;

int scaled(int base, double width) {
  return std::max(4, static_cast<int>(std::lround(base * width)));
}

std::unique_ptr<Sequential> conv_relu(const std::string& name, int in, int out, int k, int stride,
                                      int dilation, std::mt19937_64& rng) {
  auto s = std::make_unique<Sequential>(name);
  s->add(std::make_unique<nn::Conv2d>(name + ".conv", in, out, k, stride, dilation * (k / 2),
                                      dilation, rng, false));
  s->add(std::make_unique<nn::GroupNorm>(name + ".norm", out));
  s->add(std::make_unique<nn::ReLU>(name + ".act"));
  return s;
}

std::unique_ptr<Sequential> double_conv(const std::string& name, int in, int out,
                                        std::mt19937_64& rng) {
  auto s = std::make_unique<Sequential>(name);
  s->add(std::make_unique<nn::Conv2d>(name + ".conv1", in, out, 3, 1, 1, 1, rng, false));
  s->add(std::make_unique<nn::GroupNorm>(name + ".norm1", out));
  s->add(std::make_unique<nn::ReLU>(name + ".act1"));
  s->add(std::make_unique<nn::Conv2d>(name + ".conv2", out, out, 3, 1, 1, 1, rng, false));
  s->add(std::make_unique<nn::GroupNorm>(name + ".norm2", out));
  s->add(std::make_unique<nn::ReLU>(name + ".act2"));
  return s;
}

// DeepLabv3+-style network over a width-scalable inverted-residual encoder.
// Output stride 16; the decoder fuses stride-4 low-level features.
class DeepLabNet final : public Module {
 public:
  DeepLabNet(const ModelConfig& cfg, std::mt19937_64& rng)
      : Module("deeplab"),
        low_("encoder.low"),
        high_("encoder.high"),
        up_aspp_("decoder.upsample_aspp", 4),
        up_out_("head.upsample", 4) {
    const double w = cfg.width_multiplier;
    const int c_stem = scaled(32, w), c_low = scaled(24, w), c_mid = scaled(32, w);
    const int c_deep = scaled(64, w), c_aspp = scaled(64, w), c_proj = scaled(48, w);
    const int c_dec = scaled(64, w);
    aspp_channels_ = c_aspp;
    low_.add(conv_relu("encoder.stem", cfg.in_channels, c_stem, 3, 2, 1, rng));
    low_.add(std::make_unique<nn::InvertedResidual>("encoder.block1", c_stem, c_low, 4, 2, 1, rng));
    high_.add(std::make_unique<nn::InvertedResidual>("encoder.block2", c_low, c_mid, 4, 2, 1, rng));
    high_.add(std::make_unique<nn::InvertedResidual>("encoder.block3", c_mid, c_deep, 4, 2, 1, rng));
    high_.add(std::make_unique<nn::InvertedResidual>("encoder.block4", c_deep, c_deep, 4, 1, 1, rng));
    aspp_ = std::make_unique<nn::Aspp>("aspp", c_deep, c_aspp, cfg.aspp_rates, rng);
    low_proj_ = conv_relu("decoder.low_proj", c_low, c_proj, 1, 1, 1, rng);
    decoder_ = std::make_unique<Sequential>("decoder");
    decoder_->add(conv_relu("decoder.fuse", c_aspp + c_proj, c_dec, 3, 1, 1, rng));
    decoder_->add(std::make_unique<nn::Conv2d>("head.classifier", c_dec, cfg.num_classes, 1, 1, 0,
                                               1, rng));
  }

  FTensor forward(const FTensor& x) override {
    const FTensor low = low_.forward(x);
    const FTensor deep = aspp_->forward(high_.forward(low));
    const FTensor fused = nn::concat_channels(up_aspp_.forward(deep), low_proj_->forward(low));
    return up_out_.forward(decoder_->forward(fused));
  }

  FTensor infer(const FTensor& x) const override {
    const FTensor low = low_.infer(x);
    const FTensor deep = aspp_->infer(high_.infer(low));
    const FTensor fused = nn::concat_channels(up_aspp_.infer(deep), low_proj_->infer(low));
    return up_out_.infer(decoder_->infer(fused));
  }

  FTensor backward(const FTensor& g) override {
    const FTensor gf = decoder_->backward(up_out_.backward(g));
    FTensor g_deep, g_proj;
    nn::split_channels(gf, static_cast<std::size_t>(aspp_channels_), g_deep, g_proj);
    FTensor g_low = high_.backward(aspp_->backward(up_aspp_.backward(g_deep)));
    nn::accumulate(g_low, low_proj_->backward(g_proj));
    return low_.backward(g_low);
  }

  void collect(std::vector<nn::Param*>& out) override {
    low_.collect(out);
    high_.collect(out);
    aspp_->collect(out);
    low_proj_->collect(out);
    decoder_->collect(out);
  }

  void describe(std::vector<nn::LayerInfo>& out) const override {
    low_.describe(out);
    high_.describe(out);
    aspp_->describe(out);
    up_aspp_.describe(out);
    low_proj_->describe(out);
    decoder_->describe(out);
    up_out_.describe(out);
  }

 private:
  int aspp_channels_ = 0;
  Sequential low_;
  Sequential high_;
  std::unique_ptr<nn::Aspp> aspp_;
  nn::Upsample up_aspp_;
  std::unique_ptr<Sequential> low_proj_;
  std::unique_ptr<Sequential> decoder_;
  nn::Upsample up_out_;
};

// Four-level U-Net (total downsampling 16) with bilinear upsampling.
class UNetNet final : public Module {
 public:
  static constexpr int kDepth = 4;

  UNetNet(const ModelConfig& cfg, std::mt19937_64& rng) : Module("unet") {
    const double w = cfg.width_multiplier;
    const int base[kDepth + 1] = {16, 32, 64, 128, 256};
    for (int i = 0; i <= kDepth; ++i) ch_[i] = scaled(base[i], w);
    int in = cfg.in_channels;
    for (int i = 0; i <= kDepth; ++i) {
      enc_.push_back(double_conv("encoder.level" + std::to_string(i), in, ch_[i], rng));
      in = ch_[i];
      if (i < kDepth) pools_.push_back(std::make_unique<nn::MaxPool2>("encoder.pool" + std::to_string(i)));
    }
    for (int i = kDepth - 1; i >= 0; --i) {
      ups_.push_back(std::make_unique<nn::Upsample>("decoder.upsample" + std::to_string(i), 2));
      dec_.push_back(double_conv("decoder.level" + std::to_string(i), ch_[i + 1] + ch_[i], ch_[i], rng));
    }
    head_ = std::make_unique<nn::Conv2d>("head.classifier", ch_[0], cfg.num_classes, 1, 1, 0, 1, rng);
  }

  FTensor forward(const FTensor& x) override { return run<true>(x); }
  FTensor infer(const FTensor& x) const override {
    return const_cast<UNetNet*>(this)->run<false>(x);
  }

  FTensor backward(const FTensor& g) override {
    FTensor gh = head_->backward(g);
    std::vector<FTensor> skip_grads(kDepth);
    // Undo the decoder shallowest-first: level 0 ran last.
    for (int level = 0; level < kDepth; ++level) {
      FTensor gcat = dec_[static_cast<std::size_t>(level_index(level))]->backward(gh);
      FTensor g_up, g_skip;
      nn::split_channels(gcat, static_cast<std::size_t>(ch_[level + 1]), g_up, g_skip);
      skip_grads[static_cast<std::size_t>(level)] = std::move(g_skip);
      gh = ups_[static_cast<std::size_t>(level_index(level))]->backward(g_up);
    }
    // gh is now the gradient at the bottleneck output.
    for (int i = kDepth; i >= 0; --i) {
      FTensor gin = enc_[static_cast<std::size_t>(i)]->backward(gh);
      if (i == 0) return gin;
      gh = pools_[static_cast<std::size_t>(i - 1)]->backward(gin);
      nn::accumulate(gh, skip_grads[static_cast<std::size_t>(i - 1)]);
    }
    return gh;
  }

  void collect(std::vector<nn::Param*>& out) override {
    for (auto& e : enc_) e->collect(out);
    for (auto& d : dec_) d->collect(out);
    head_->collect(out);
  }

  void describe(std::vector<nn::LayerInfo>& out) const override {
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      enc_[i]->describe(out);
      if (i < pools_.size()) pools_[i]->describe(out);
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      ups_[i]->describe(out);
      dec_[i]->describe(out);
    }
    head_->describe(out);
  }

 private:
  // Decoder vectors are stored deepest-first.
  static int level_index(int level) { return kDepth - 1 - level; }

  template <bool Train>
  FTensor run(const FTensor& x) {
    auto step = [](Module& m, const FTensor& in) { return Train ? m.forward(in) : m.infer(in); };
    std::vector<FTensor> skips;
    FTensor h = x;
    for (int i = 0; i <= kDepth; ++i) {
      h = step(*enc_[static_cast<std::size_t>(i)], h);
      if (i < kDepth) {
        skips.push_back(h);
        h = step(*pools_[static_cast<std::size_t>(i)], h);
      }
    }
    for (int level = kDepth - 1; level >= 0; --level) {
      const auto idx = static_cast<std::size_t>(level_index(level));
      h = nn::concat_channels(step(*ups_[idx], h), skips[static_cast<std::size_t>(level)]);
      h = step(*dec_[idx], h);
    }
    return step(*head_, h);
  }

  int ch_[kDepth + 1]{};
  std::vector<std::unique_ptr<Sequential>> enc_;
  std::vector<std::unique_ptr<nn::MaxPool2>> pools_;
  std::vector<std::unique_ptr<nn::Upsample>> ups_;
  std::vector<std::unique_ptr<Sequential>> dec_;
  std::unique_ptr<nn::Conv2d> head_;
};

}  // namespace

std::string_view to_string(Architecture a) {
  return a == Architecture::UNet ? "unet" : "deeplab";
}

Architecture parse_architecture(std::string_view name) {
  if (name == "unet") return Architecture::UNet;
  if (name == "deeplab") return Architecture::DeepLab;
  throw Error(ErrorCode::UnknownArchitecture, "unknown architecture '" + std::string(name) + "'");
}

void ModelConfig::validate() const {
  require(in_channels == 4, ErrorCode::InvalidArgument, "in_channels must be 4 (NIR, R, G, B)");
  require(num_classes == 5, ErrorCode::InvalidArgument, "num_classes must be 5");
  require(width_multiplier > 0.0 && std::isfinite(width_multiplier), ErrorCode::InvalidArgument,
          "width_multiplier must be positive");
  if (architecture == Architecture::DeepLab) {
    require(aspp_rates.size() >= 3, ErrorCode::InvalidArgument, "ASPP needs at least 3 rates");
    for (int r : aspp_rates) require(r >= 1, ErrorCode::InvalidArgument, "ASPP rates must be >= 1");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {{"architecture", std::string(to_string(architecture))},
          {"width_multiplier", width_multiplier},
          {"in_channels", in_channels},
          {"num_classes", num_classes},
          {"seed", seed},
          {"aspp_rates", aspp_rates}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.architecture = parse_architecture(j.at("architecture").get<std::string>());
  c.width_multiplier = j.at("width_multiplier").get<double>();
  c.in_channels = j.at("in_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.aspp_rates = j.at("aspp_rates").get<std::vector<int>>();
  return c;
}

SegmentationModel::SegmentationModel(const ModelConfig& cfg) : config_(cfg) {
  config_.validate();
  std::mt19937_64 rng(cfg.seed);
  if (cfg.architecture == Architecture::DeepLab) {
    net_ = std::make_unique<DeepLabNet>(cfg, rng);
  } else {
    net_ = std::make_unique<UNetNet>(cfg, rng);
  }
}

SegmentationModel::SegmentationModel(SegmentationModel&&) noexcept = default;
SegmentationModel& SegmentationModel::operator=(SegmentationModel&&) noexcept = default;
SegmentationModel::~SegmentationModel() = default;

void SegmentationModel::check_input(const Tensor<float>& batch) const {
  const auto& s = batch.shape();
  require(s.c == static_cast<std::size_t>(config_.in_channels), ErrorCode::ShapeMismatch,
          "expected 4 input channels, got " + s.str());
  require(s.n >= 1 && s.h >= kDownsampling && s.w >= kDownsampling && s.h % kDownsampling == 0 &&
              s.w % kDownsampling == 0,
          ErrorCode::BadSpatialDims,
          "spatial dims must be positive multiples of 16, got " + s.str());
}

Tensor<float> SegmentationModel::forward(const Tensor<float>& batch) {
  check_input(batch);
  return net_->forward(batch);
}

Tensor<float> SegmentationModel::infer(const Tensor<float>& batch) const {
  check_input(batch);
  return net_->infer(batch);
}

void SegmentationModel::backward(const Tensor<float>& grad_logits) { net_->backward(grad_logits); }

void SegmentationModel::zero_grad() {
  for (auto* p : parameters()) p->grad.fill(0.0f);
}

std::vector<nn::Param*> SegmentationModel::parameters() {
  std::vector<nn::Param*> out;
  net_->collect(out);
  return out;
}

std::vector<const nn::Param*> SegmentationModel::parameters() const {
  std::vector<nn::Param*> tmp;
  net_->collect(tmp);
  return {tmp.begin(), tmp.end()};
}

std::size_t SegmentationModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.numel();
  return n;
}

std::vector<nn::LayerInfo> SegmentationModel::describe() const {
  std::vector<nn::LayerInfo> out;
  net_->describe(out);
  return out;
}

SegmentationModel build_model(const ModelConfig& cfg) { return SegmentationModel(cfg); }

void copy_parameters(const SegmentationModel& from, SegmentationModel& to) {
  const auto src = from.parameters();
  auto dst = to.parameters();
  require(src.size() == dst.size(), ErrorCode::ShapeMismatch, "parameter lists differ");
  for (std::size_t i = 0; i < src.size(); ++i) {
    require_same_shape(src[i]->value.shape(), dst[i]->value.shape(), "copy_parameters");
    dst[i]->value = src[i]->value;
  }
}

void save_checkpoint(const std::filesystem::path& dir, const SegmentationModel& model,
                     const CheckpointInfo& info) {
  static_assert(std::endian::native == std::endian::little, "checkpoint blob is little-endian");
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  std::ofstream blob(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!blob) throw Error(ErrorCode::IoError, "cannot write " + (dir / "params.bin").string());
  std::size_t offset = 0;
  for (const auto* p : model.parameters()) {
    const auto& s = p->value.shape();
    const std::size_t bytes = p->value.numel() * sizeof(float);
    blob.write(reinterpret_cast<const char*>(p->value.data()), static_cast<std::streamsize>(bytes));
    manifest.push_back({{"name", p->name},
                        {"shape", {s.n, s.c, s.h, s.w}},
                        {"offset", offset},
                        {"bytes", bytes}});
    offset += bytes;
  }
  if (!blob) throw Error(ErrorCode::IoError, "short write on params.bin");
  const nlohmann::json descriptor = {{"format", "cpsseg-checkpoint/1"},
                                     {"config", model.config().to_json()},
                                     {"epoch", info.epoch},
                                     {"history", info.history},
                                     {"dtype", "float32-le"},
                                     {"tensors", manifest}};
  std::ofstream out(dir / "descriptor.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write checkpoint descriptor");
  out << descriptor.dump(2) << '\n';
}

SegmentationModel load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info) {
  std::ifstream in(dir / "descriptor.json");
  if (!in) throw Error(ErrorCode::IoError, "no checkpoint descriptor in " + dir.string());
  nlohmann::json d;
  try {
    d = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::FormatError, std::string("bad checkpoint descriptor: ") + e.what());
  }
  SegmentationModel model(ModelConfig::from_json(d.at("config")));
  std::ifstream blob(dir / "params.bin", std::ios::binary);
  if (!blob) throw Error(ErrorCode::IoError, "missing params.bin in " + dir.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());
  auto params = model.parameters();
  const auto& tensors = d.at("tensors");
  require(tensors.size() == params.size(), ErrorCode::FormatError,
          "checkpoint tensor count does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    require(t.at("name").get<std::string>() == params[i]->name, ErrorCode::FormatError,
            "checkpoint tensor name mismatch at " + params[i]->name);
    const auto shape = t.at("shape").get<std::vector<std::size_t>>();
    const Shape4 s{shape.at(0), shape.at(1), shape.at(2), shape.at(3)};
    require(s == params[i]->value.shape(), ErrorCode::FormatError,
            "checkpoint shape mismatch at " + params[i]->name);
    const auto offset = t.at("offset").get<std::size_t>();
    const std::size_t n = params[i]->value.numel() * sizeof(float);
    require(offset + n <= bytes.size(), ErrorCode::FormatError, "params.bin truncated");
    std::memcpy(params[i]->value.data(), bytes.data() + offset, n);
  }
  if (info) {
    info->epoch = d.at("epoch").get<int>();
    info->history = d.at("history");
  }
  return model;
}

}  // namespace cpsseg
