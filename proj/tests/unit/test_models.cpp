#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <random>

#include "cpsseg/models.hpp"
#include "cpsseg/nn.hpp"

using namespace cpsseg;
using nn::FTensor;

namespace {

FTensor random_tensor(std::mt19937_64& rng, Shape4 s, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  FTensor t(s);
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = d(rng);
  return t;
}

double dot(const FTensor& a, const FTensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

// For a layer linear in its input (bias removed by differencing with a zero
// input), <g, L(x) - L(0)> must equal <L^T g, x>.
void check_input_adjoint(nn::Module& layer, Shape4 in, std::mt19937_64& rng) {
  const FTensor x = random_tensor(rng, in);
  const FTensor y0 = layer.forward(FTensor(in, 0.0f));
  const FTensor y = layer.forward(x);
  const FTensor g = random_tensor(rng, y.shape());
  const FTensor dx = layer.backward(g);
  double lhs = 0.0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += static_cast<double>(g[i]) * (y[i] - y0[i]);
  CHECK(lhs == doctest::Approx(dot(dx, x)).epsilon(1e-4));
}

// Central difference of <g, f(x)> in one parameter entry over a ladder of
// steps. Norm + ReLU stacks leave some pre-activations within 1e-5 of zero, so
// larger steps can straddle a kink; smaller ones lose float precision.
template <typename Net>
bool entry_agrees(const Net& net, nn::Param& p, std::size_t i, const FTensor& x, const FTensor& g) {
  const float orig = p.value[i];
  for (float h : {3e-3f, 1e-3f, 3e-4f, 1e-4f, 3e-5f}) {
    p.value[i] = orig + h;
    const double up = dot(g, net.infer(x));
    p.value[i] = orig - h;
    const double down = dot(g, net.infer(x));
    p.value[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    if (std::abs(p.grad[i] - numeric) <= 2e-2 * std::max(0.1, std::abs(numeric))) return true;
  }
  return false;
}

// At least 95% of the sampled parameter entries must agree.
void check_param_grads(nn::Module& layer, Shape4 in, std::mt19937_64& rng) {
  const FTensor x = random_tensor(rng, in);
  std::vector<nn::Param*> params;
  layer.collect(params);
  const FTensor y = layer.forward(x);
  const FTensor g = random_tensor(rng, y.shape());
  for (auto* p : params) p->grad.fill(0.0f);
  layer.backward(g);
  int total = 0, agree = 0;
  for (auto* p : params) {
    for (std::size_t k = 0; k < std::min<std::size_t>(p->value.numel(), 6); ++k) {
      ++total;
      agree += entry_agrees(layer, *p, (k * 7919) % p->value.numel(), x, g);
    }
  }
  CHECK(agree * 100 >= total * 95);
}

ModelConfig config(Architecture a, double w = 0.25, std::uint64_t seed = 1) {
  ModelConfig c;
  c.architecture = a;
  c.width_multiplier = w;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("conv2d backward is the adjoint of forward") {
  std::mt19937_64 rng(1);
  for (auto [k, stride, dil] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{3, 1, 2},
                                std::tuple{1, 1, 1}}) {
    nn::Conv2d conv("c", 3, 4, k, stride, dil * (k / 2), dil, rng);
    check_input_adjoint(conv, {2, 3, 8, 8}, rng);
    check_param_grads(conv, {2, 3, 8, 8}, rng);
  }
}

TEST_CASE("depthwise conv, upsample and max pool backward") {
  std::mt19937_64 rng(2);
  nn::DepthwiseConv2d dw("dw", 3, 3, 2, 1, 1, rng);
  check_input_adjoint(dw, {2, 3, 8, 8}, rng);
  check_param_grads(dw, {2, 3, 8, 8}, rng);
  nn::DepthwiseConv2d dil("dw2", 3, 3, 1, 2, 2, rng);
  check_input_adjoint(dil, {1, 3, 8, 8}, rng);
  for (int f : {2, 4}) {
    nn::Upsample up("up", f);
    check_input_adjoint(up, {1, 2, 4, 4}, rng);
  }
  nn::MaxPool2 pool("p");
  const FTensor x = random_tensor(rng, {1, 1, 4, 4});
  const FTensor y = pool.forward(x);
  CHECK(y.shape() == Shape4{1, 1, 2, 2});
  const FTensor dx = pool.backward(FTensor(y.shape(), 1.0f));
  double s = 0.0;
  for (std::size_t i = 0; i < dx.numel(); ++i) s += dx[i];
  CHECK(s == 4.0);
}

TEST_CASE("upsample of a constant stays constant") {
  nn::Upsample up("up", 4);
  const FTensor y = up.infer(FTensor({1, 1, 3, 5}, 0.25f));
  CHECK(y.shape() == Shape4{1, 1, 12, 20});
  for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(0.25f));
}

TEST_CASE("composite blocks have correct parameter gradients") {
  std::mt19937_64 rng(3);
  nn::InvertedResidual ir("ir", 4, 4, 2, 1, 1, rng);
  check_param_grads(ir, {1, 4, 8, 8}, rng);
  nn::Aspp aspp("aspp", 4, 4, {1, 2, 3}, rng);
  check_param_grads(aspp, {1, 4, 8, 8}, rng);
}

TEST_CASE("build_model output shapes") {
  for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
    auto m = build_model(config(a));
    std::mt19937_64 rng(4);
    const auto y = m.infer(random_tensor(rng, {2, 4, 64, 48}, 0.0f, 1.0f));
    CHECK(y.shape() == Shape4{2, 5, 64, 48});
  }
}

TEST_CASE("build_model is deterministic in its seed") {
  for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
    const auto m1 = build_model(config(a, 0.25, 7));
    const auto m2 = build_model(config(a, 0.25, 7));
    const auto m3 = build_model(config(a, 0.25, 8));
    const auto p1 = m1.parameters(), p2 = m2.parameters(), p3 = m3.parameters();
    REQUIRE(p1.size() == p2.size());
    bool any_diff = false;
    for (std::size_t i = 0; i < p1.size(); ++i) {
      CHECK(p1[i]->value == p2[i]->value);
      any_diff = any_diff || !(p1[i]->value == p3[i]->value);
    }
    CHECK(any_diff);
  }
}

TEST_CASE("width multiplier scales the parameter count") {
  for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
    CHECK(build_model(config(a, 0.25)).parameter_count() < build_model(config(a, 1.0)).parameter_count());
  }
}

TEST_CASE("model errors") {
  CHECK_THROWS_AS(parse_architecture("segformer"), Error);
  try {
    parse_architecture("segformer");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::UnknownArchitecture);
  }
  auto m = build_model(config(Architecture::DeepLab));
  try {
    m.infer(FTensor(Shape4{1, 4, 40, 32}));
    FAIL("expected BadSpatialDims");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::BadSpatialDims);
  }
  CHECK_THROWS_AS(m.infer(FTensor(Shape4{1, 3, 32, 32})), Error);
}

TEST_CASE("deeplab description has an ASPP stage with at least three rates") {
  const auto m = build_model(config(Architecture::DeepLab));
  int aspp = 0;
  std::vector<int> dilations;
  for (const auto& l : m.describe()) {
    if (l.kind == "aspp") ++aspp;
    if (l.name.rfind("aspp.", 0) == 0 && l.dilation > 1) dilations.push_back(l.dilation);
  }
  CHECK(aspp == 1);
  CHECK(dilations.size() >= 3);
}

TEST_CASE("forward is finite for inputs in [0,1] over many seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
      const auto m = build_model(config(a, 0.25, seed));
      std::mt19937_64 rng(seed);
      const auto y = m.infer(random_tensor(rng, {1, 4, 32, 32}, 0.0f, 1.0f));
      bool finite = true;
      for (float v : y.values()) finite = finite && std::isfinite(v);
      CHECK(finite);
    }
  }
}

TEST_CASE("zeroed classifier gives uniform softmax") {
  for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
    auto m = build_model(config(a));
    for (auto* p : m.parameters()) {
      if (p->name.rfind("head.classifier", 0) == 0) p->value.fill(0.0f);
    }
    std::mt19937_64 rng(5);
    const auto y = m.infer(random_tensor(rng, {1, 4, 32, 32}, 0.0f, 1.0f));
    for (float v : y.values()) CHECK(v == 0.0f);
  }
}

TEST_CASE("training forward matches inference forward and is repeatable") {
  auto m = build_model(config(Architecture::DeepLab));
  std::mt19937_64 rng(6);
  const auto x = random_tensor(rng, {2, 4, 32, 32}, 0.0f, 1.0f);
  const auto a = m.infer(x);
  CHECK(m.infer(x) == a);
  CHECK(m.forward(x) == a);
}

TEST_CASE("whole-network gradient agrees with finite differences") {
  for (auto arch : {Architecture::DeepLab, Architecture::UNet}) {
    auto m = build_model(config(arch, 0.25, 3));
    std::mt19937_64 rng(9);
    const auto x = random_tensor(rng, {1, 4, 32, 32}, 0.0f, 1.0f);
    const auto y = m.forward(x);
    const auto g = random_tensor(rng, y.shape());
    m.zero_grad();
    m.backward(g);
    const auto params = m.parameters();
    int agree = 0;
    for (auto* p : params) agree += entry_agrees(m, *p, p->value.numel() / 2, x, g);
    // A wiring error breaks most entries. Deep stacks add max-pool switches and
    // float noise on small gradients, so a few stragglers are expected here;
    // the per-block checks above hold the tighter bar.
    const int total = static_cast<int>(params.size());
    CHECK(agree * 100 >= total * 90);
  }
}

TEST_CASE("checkpoint roundtrip reproduces outputs bit-exact") {
  const auto dir = std::filesystem::temp_directory_path() / "cpsseg_ckpt_test";
  std::filesystem::remove_all(dir);
  for (auto a : {Architecture::DeepLab, Architecture::UNet}) {
    auto m = build_model(config(a, 0.25, 12));
    CheckpointInfo info{7, nlohmann::json::array({{{"epoch", 0}}})};
    save_checkpoint(dir, m, info);
    CheckpointInfo back;
    const auto loaded = load_checkpoint(dir, &back);
    CHECK(back.epoch == 7);
    CHECK(back.history == info.history);
    std::mt19937_64 rng(1);
    const auto x = random_tensor(rng, {1, 4, 32, 32}, 0.0f, 1.0f);
    CHECK(loaded.infer(x) == m.infer(x));
    CHECK(loaded.config().to_json() == m.config().to_json());
  }
  std::filesystem::remove(dir / "params.bin");
  CHECK_THROWS_AS(load_checkpoint(dir), Error);
  std::filesystem::remove_all(dir);
}
