#include "cpsseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace cpsseg {
namespace {

using Clock = std::chrono::steady_clock;

Tensor<float> to_float(const Logits& g) { return g.cast<float>(); }

Logits combine(const Logits& a, const Logits& b, double lambda) {
  Logits out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += lambda * b[i];
  return out;
}

class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(std::span<nn::Param* const> params) override {
    if (velocity_.empty()) {
      for (const auto* p : params) velocity_.emplace_back(p->value.numel(), 0.0f);
    }
    require(velocity_.size() == params.size(), ErrorCode::InvalidArgument,
            "optimizer bound to a different parameter list");
    const auto lr = static_cast<float>(lr_), mu = static_cast<float>(momentum_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& v = velocity_[k];
      float* w = params[k]->value.data();
      const float* g = params[k]->grad.data();
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        w[i] -= lr * v[i];
      }
    }
  }

 private:
  double lr_, momentum_;
  std::vector<std::vector<float>> velocity_;
};

class Adam final : public Optimizer {
 public:
  Adam(double lr, double b1, double b2, double eps) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

  void step(std::span<nn::Param* const> params) override {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.numel(), 0.0f);
        v_.emplace_back(p->value.numel(), 0.0f);
      }
    }
    require(m_.size() == params.size(), ErrorCode::InvalidArgument,
            "optimizer bound to a different parameter list");
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    const auto step = static_cast<float>(lr_ * std::sqrt(c2) / c1);
    const auto eps = static_cast<float>(eps_ * std::sqrt(c2));
    const auto b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    for (std::size_t k = 0; k < params.size(); ++k) {
      float* w = params[k]->value.data();
      const float* g = params[k]->grad.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = b1 * m[i] + (1.0f - b1) * g[i];
        v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
        w[i] -= step * m[i] / (std::sqrt(v[i]) + eps);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

void check_dataset(const ChipDataset& ds) {
  require(!ds.empty(), ErrorCode::EmptyDataset, "training dataset has no chips");
  require(ds.mode == DatasetMode::Train, ErrorCode::InvalidArgument,
          "training needs a dataset built in train mode");
}

std::vector<std::vector<std::size_t>> batches_for(const TrainConfig& cfg, std::size_t n, int epoch) {
  const auto order = epoch_order(n, cfg.seed_pair[0], epoch);
  std::vector<std::vector<std::size_t>> out;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t i = 0; i < n; i += bs) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + bs)));
  }
  return out;
}

void persist(const std::filesystem::path& dir, const std::string& sub,
             const SegmentationModel& m, int epoch, const TrainHistory& h) {
  if (dir.empty()) return;
  save_checkpoint(dir / sub, m, CheckpointInfo{epoch, h.to_json()});
}

void persist_history(const std::filesystem::path& dir, const TrainHistory& h) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  h.write(dir / "history.jsonl");
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename T>
void read_into(const nlohmann::json& j, T& out) {
  out = j.get<T>();
}

}  // namespace

std::string_view to_string(Regime r) {
  switch (r) {
    case Regime::Cps: return "cps";
    case Regime::UnetWce: return "unet_wce";
    case Regime::DeeplabTversky: return "deeplab_tversky";
  }
  return "cps";
}

Regime parse_regime(std::string_view s) {
  if (s == "cps") return Regime::Cps;
  if (s == "unet_wce") return Regime::UnetWce;
  if (s == "deeplab_tversky") return Regime::DeeplabTversky;
  throw Error(ErrorCode::ConfigValidationError, "unknown regime '" + std::string(s) + "'");
}

std::string_view to_string(OptimizerKind k) {
  return k == OptimizerKind::Adam ? "adam" : "sgd_momentum";
}

OptimizerKind parse_optimizer(std::string_view s) {
  if (s == "sgd_momentum") return OptimizerKind::SgdMomentum;
  if (s == "adam") return OptimizerKind::Adam;
  throw Error(ErrorCode::ConfigValidationError, "unknown optimizer '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  const auto bad = ErrorCode::ConfigValidationError;
  require(epochs >= 1, bad, "epochs must be >= 1");
  require(rampup_length >= 0 && rampup_length <= epochs, bad, "rampup_length must lie in [0, epochs]");
  require(lambda_max > 0.0 && std::isfinite(lambda_max), bad, "lambda_max must be positive");
  require(batch_size >= 1, bad, "batch_size must be >= 1");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), bad, "learning_rate must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, bad, "momentum must lie in [0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0, bad,
          "adam betas must lie in [0, 1)");
  require(adam_eps > 0.0, bad, "adam_eps must be > 0");
  require(class_weight_cap >= 1.0, bad, "class_weight_cap must be >= 1");
  require(tversky_alpha >= 0.0 && tversky_beta >= 0.0, bad, "tversky weights must be >= 0");
  require(width_multiplier > 0.0, bad, "width_multiplier must be > 0");
  try {
    hausdorff.validate();
  } catch (const Error& e) {
    throw Error(bad, e.what());
  }
}

RampUpSchedule TrainConfig::schedule() const {
  return RampUpSchedule{rampup_length, epochs, lambda_max, ramp_convention};
}

ModelConfig TrainConfig::model_config(int which) const {
  ModelConfig m;
  m.architecture = regime == Regime::UnetWce ? Architecture::UNet : Architecture::DeepLab;
  m.width_multiplier = width_multiplier;
  m.aspp_rates = aspp_rates;
  m.seed = seed_pair.at(static_cast<std::size_t>(which));
  return m;
}

nlohmann::json TrainConfig::to_json() const {
  return {{"regime", std::string(to_string(regime))},
          {"epochs", epochs},
          {"rampup_length", rampup_length},
          {"lambda_max", lambda_max},
          {"ramp_convention", ramp_convention == RampConvention::RampLength ? "rampup_length"
                                                                            : "total_epochs"},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"optimizer", std::string(to_string(optimizer))},
          {"momentum", momentum},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"hausdorff", {{"erosions", hausdorff.erosions}, {"exponent", hausdorff.exponent}}},
          {"class_weight_cap", class_weight_cap},
          {"tversky_alpha", tversky_alpha},
          {"tversky_beta", tversky_beta},
          {"width_multiplier", width_multiplier},
          {"aspp_rates", aspp_rates},
          {"seed_pair", seed_pair},
          {"checkpoint_dir", checkpoint_dir.string()}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  require(j.is_object(), ErrorCode::ConfigValidationError, "train config must be an object");
  TrainConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "regime") c.regime = parse_regime(v.get<std::string>());
      else if (key == "epochs") read_into(v, c.epochs);
      else if (key == "rampup_length") read_into(v, c.rampup_length);
      else if (key == "lambda_max") read_into(v, c.lambda_max);
      else if (key == "ramp_convention") {
        const auto s = v.get<std::string>();
        if (s == "rampup_length") c.ramp_convention = RampConvention::RampLength;
        else if (s == "total_epochs") c.ramp_convention = RampConvention::TotalEpochs;
        else throw Error(ErrorCode::ConfigValidationError, "unknown ramp_convention '" + s + "'");
      }
      else if (key == "batch_size") read_into(v, c.batch_size);
      else if (key == "learning_rate") read_into(v, c.learning_rate);
      else if (key == "optimizer") c.optimizer = parse_optimizer(v.get<std::string>());
      else if (key == "momentum") read_into(v, c.momentum);
      else if (key == "adam_beta1") read_into(v, c.adam_beta1);
      else if (key == "adam_beta2") read_into(v, c.adam_beta2);
      else if (key == "adam_eps") read_into(v, c.adam_eps);
      else if (key == "hausdorff") {
        for (const auto& [hk, hv] : v.items()) {
          if (hk == "erosions") read_into(hv, c.hausdorff.erosions);
          else if (hk == "exponent") read_into(hv, c.hausdorff.exponent);
          else throw Error(ErrorCode::ConfigValidationError, "unknown key train.hausdorff." + hk);
        }
      }
      else if (key == "class_weight_cap") read_into(v, c.class_weight_cap);
      else if (key == "tversky_alpha") read_into(v, c.tversky_alpha);
      else if (key == "tversky_beta") read_into(v, c.tversky_beta);
      else if (key == "width_multiplier") read_into(v, c.width_multiplier);
      else if (key == "aspp_rates") read_into(v, c.aspp_rates);
      else if (key == "seed_pair") read_into(v, c.seed_pair);
      else if (key == "checkpoint_dir") c.checkpoint_dir = v.get<std::string>();
      else throw Error(ErrorCode::ConfigValidationError, "unknown key train." + key);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigValidationError, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch},         {"lambda", lambda},   {"hausdorff", hausdorff},
          {"wce", wce},             {"cps", cps},         {"tversky", tversky},
          {"total", total},         {"wall_seconds", wall_seconds}};
}

EpochRecord EpochRecord::from_json(const nlohmann::json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.lambda = j.at("lambda").get<double>();
  r.hausdorff = j.at("hausdorff").get<double>();
  r.wce = j.at("wce").get<double>();
  r.cps = j.at("cps").get<double>();
  r.tversky = j.at("tversky").get<double>();
  r.total = j.at("total").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

bool EpochRecord::same_losses(const EpochRecord& o) const {
  return epoch == o.epoch && lambda == o.lambda && hausdorff == o.hausdorff && wce == o.wce &&
         cps == o.cps && tversky == o.tversky && total == o.total;
}

std::string TrainHistory::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) out += e.to_json().dump() + "\n";
  return out;
}

nlohmann::json TrainHistory::to_json() const {
  auto arr = nlohmann::json::array();
  for (const auto& e : epochs) arr.push_back(e.to_json());
  return arr;
}

void TrainHistory::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << to_jsonl();
}

TrainHistory TrainHistory::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot read " + path.string());
  TrainHistory h;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      h.epochs.push_back(EpochRecord::from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::FormatError, "bad history line: " + std::string(e.what()));
    }
  }
  return h;
}

bool TrainHistory::same_losses(const TrainHistory& o) const {
  if (epochs.size() != o.epochs.size()) return false;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (!epochs[i].same_losses(o.epochs[i])) return false;
  }
  return true;
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& cfg) {
  if (cfg.optimizer == OptimizerKind::Adam) {
    return std::make_unique<Adam>(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  }
  return std::make_unique<SgdMomentum>(cfg.learning_rate, cfg.momentum);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  // Explicit Fisher-Yates so the order does not depend on the standard
  // library's distribution implementations.
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

CpsStep cps_backward(SegmentationModel& m1, SegmentationModel& m2, const Tensor<float>& images,
                     std::span<const std::uint8_t> labels, const ClassWeights& alpha,
                     const HausdorffParams& hausdorff, double K, double lambda) {
  const Logits p1 = m1.forward(images).cast<double>();
  const Logits p2 = m2.forward(images).cast<double>();
  CpsStep s;
  s.supervised = supervised_loss(p1, p2, labels, alpha, hausdorff, K);
  s.cps = cps_loss(p1, p2, alpha, K);
  s.lambda = lambda;
  s.total = total_loss(s.supervised.total, s.cps.value, lambda);
  if (!std::isfinite(s.total)) return s;
  m1.backward(to_float(combine(s.supervised.grad1, s.cps.grad1, lambda)));
  m2.backward(to_float(combine(s.supervised.grad2, s.cps.grad2, lambda)));
  return s;
}

namespace {

// Parameter values as of the last epoch that ended with everything finite.
class GoodState {
 public:
  explicit GoodState(std::vector<nn::Param*> params) : params_(std::move(params)) { capture(); }

  bool finite() const {
    for (const auto* p : params_) {
      for (float v : p->value.values()) {
        if (!std::isfinite(v)) return false;
      }
    }
    return true;
  }
  void capture() {
    saved_.clear();
    for (const auto* p : params_) saved_.push_back(p->value);
  }
  void restore() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = saved_[i];
  }

 private:
  std::vector<nn::Param*> params_;
  std::vector<nn::FTensor> saved_;
};

std::vector<nn::Param*> concat(std::vector<nn::Param*> a, const std::vector<nn::Param*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

CpsResult train_cps(const TrainConfig& cfg, const ChipDataset& ds, const EpochCallback& on_epoch) {
  cfg.validate();
  require(cfg.regime == Regime::Cps, ErrorCode::InvalidArgument, "train_cps needs regime cps");
  check_dataset(ds);
  const auto schedule = cfg.schedule();
  const ClassWeights alpha = class_weights_from_dataset(ds, cfg.class_weight_cap);
  const double K = normalization_constant(ds.size(), ds.chip_size, ds.chip_size);

  CpsResult res{build_model(cfg.model_config(0)), build_model(cfg.model_config(1)), {}};
  auto opt1 = make_optimizer(cfg);
  auto opt2 = make_optimizer(cfg);
  auto params1 = res.model1.parameters();
  auto params2 = res.model2.parameters();
  GoodState good(concat(params1, params2));
  auto diverged = [&](int t) {
    good.restore();
    const int done = static_cast<int>(res.history.epochs.size());
    persist(cfg.checkpoint_dir, "model1", res.model1, done, res.history);
    persist(cfg.checkpoint_dir, "model2", res.model2, done, res.history);
    persist_history(cfg.checkpoint_dir, res.history);
    throw Error(ErrorCode::DivergedLoss, "non-finite loss or parameters at epoch " + std::to_string(t) +
                                             "; last good parameters saved");
  };

  for (int t = 0; t < cfg.epochs; ++t) {
    const auto t0 = Clock::now();
    EpochRecord rec;
    rec.epoch = t;
    rec.lambda = schedule.at(t);
    for (const auto& batch : batches_for(cfg, ds.size(), t)) {
      const auto images = stack_images(ds, batch);
      const auto labels = stack_labels(ds, batch);
      res.model1.zero_grad();
      res.model2.zero_grad();
      const CpsStep s = cps_backward(res.model1, res.model2, images, labels, alpha, cfg.hausdorff,
                                     K, rec.lambda);
      if (!std::isfinite(s.total)) diverged(t);
      opt1->step(params1);
      opt2->step(params2);
      rec.hausdorff += s.supervised.hausdorff;
      rec.wce += s.supervised.wce;
      rec.cps += s.cps.value;
      rec.total += s.total;
    }
    if (!good.finite()) diverged(t);
    good.capture();
    rec.wall_seconds = seconds_since(t0);
    res.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  persist(cfg.checkpoint_dir, "model1", res.model1, cfg.epochs, res.history);
  persist(cfg.checkpoint_dir, "model2", res.model2, cfg.epochs, res.history);
  persist_history(cfg.checkpoint_dir, res.history);
  return res;
}

SupervisedResult train_supervised(const TrainConfig& cfg, const ChipDataset& ds,
                                  const EpochCallback& on_epoch) {
  cfg.validate();
  require(cfg.regime != Regime::Cps, ErrorCode::InvalidArgument,
          "train_supervised needs regime unet_wce or deeplab_tversky");
  check_dataset(ds);
  const ClassWeights alpha = class_weights_from_dataset(ds, cfg.class_weight_cap);
  const double K = normalization_constant(ds.size(), ds.chip_size, ds.chip_size);

  SupervisedResult res{build_model(cfg.model_config(0)), {}};
  auto opt = make_optimizer(cfg);
  auto params = res.model.parameters();
  GoodState good(params);
  auto diverged = [&](int t) {
    good.restore();
    persist(cfg.checkpoint_dir, "model", res.model, static_cast<int>(res.history.epochs.size()),
            res.history);
    persist_history(cfg.checkpoint_dir, res.history);
    throw Error(ErrorCode::DivergedLoss, "non-finite loss or parameters at epoch " + std::to_string(t) +
                                             "; last good parameters saved");
  };

  for (int t = 0; t < cfg.epochs; ++t) {
    const auto t0 = Clock::now();
    EpochRecord rec;
    rec.epoch = t;
    const auto batches = batches_for(cfg, ds.size(), t);
    for (const auto& batch : batches) {
      const auto images = stack_images(ds, batch);
      const auto labels = stack_labels(ds, batch);
      res.model.zero_grad();
      const Logits p = res.model.forward(images).cast<double>();
      const LossValue loss = cfg.regime == Regime::UnetWce
                                 ? weighted_ce(p, labels, alpha, K)
                                 : tversky_loss(p, labels, cfg.tversky_alpha, cfg.tversky_beta);
      if (!std::isfinite(loss.value)) diverged(t);
      res.model.backward(to_float(loss.grad));
      opt->step(params);
      if (cfg.regime == Regime::UnetWce) {
        rec.wce += loss.value;
        rec.total += loss.value;
      } else {
        // Tversky is a per-batch ratio; the epoch value is its batch mean.
        rec.tversky += loss.value / static_cast<double>(batches.size());
        rec.total = rec.tversky;
      }
    }
    if (!good.finite()) diverged(t);
    good.capture();
    rec.wall_seconds = seconds_since(t0);
    res.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  persist(cfg.checkpoint_dir, "model", res.model, cfg.epochs, res.history);
  persist_history(cfg.checkpoint_dir, res.history);
  return res;
}

}  // namespace cpsseg
