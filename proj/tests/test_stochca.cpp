#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stochca/analysis.hpp"
#include "stochca/checkpoint.hpp"

using namespace stochca;

namespace {

ViTConfig tiny() {
  ViTConfig c;
  c.image_size = 6;
  c.patch_size = 3;
  c.depth = 2;
  c.dim = 8;
  c.heads = 2;
  c.num_classes = 2;
  return c;
}

void scramble(ViTModel& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (Parameter* p : m.parameters())
    for (double& v : p->value.values()) v += n(rng);
}

std::vector<Tensor> random_images(std::mt19937_64& rng, const ViTConfig& c, std::size_t n) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_tensor(rng, {c.channels, c.image_size, c.image_size}));
  return out;
}

ImageBatch view(const std::vector<Tensor>& xs) {
  ImageBatch b;
  for (const Tensor& x : xs) b.push_back(&x);
  return b;
}

struct Models {
  ViTModel frozen, target;
};

// A frozen reference and a target that has drifted away from it.
Models drifted(std::uint64_t seed) {
  ViTModel base = ViTModel::create(tiny(), seed);
  scramble(base, seed);
  Models m{frozen_copy(base), trainable_copy(base)};
  scramble(m.target, seed + 1000, 0.2);
  return m;
}

// Two bright-vs-dark classes: separable from the mean pixel alone.
std::vector<Tensor> separable_images(std::mt19937_64& rng, const ViTConfig& c, std::size_t n, std::vector<int>& labels) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 2);
    out.push_back(oracle::random_tensor(rng, {c.channels, c.image_size, c.image_size}, y ? 0.5 : -1.0, y ? 1.0 : -0.5));
    labels.push_back(y);
  }
  return out;
}

OptimizerConfig small_opt() {
  OptimizerConfig o;
  o.lr = 1e-2;
  o.warmup_steps = 2;
  o.total_steps = 50;
  o.batch_size = 4;
  return o;
}

}  // namespace

TEST(Gates, Extremes) {
  Rng rng = make_rng(1);
  for (int rep = 0; rep < 100; ++rep) {
    EXPECT_EQ(draw_gates(0.0, 5, rng), Gates(5, 0));
    EXPECT_EQ(draw_gates(1.0, 5, rng), Gates(5, 1));
  }
  EXPECT_THROW(draw_gates(-0.01, 3, rng), ContractError);
  EXPECT_THROW(draw_gates(1.5, 3, rng), ContractError);
  EXPECT_THROW(draw_gates(std::nan(""), 3, rng), ContractError);
  EXPECT_THROW(GateSchedule(2.0, 0), ContractError);
}

TEST(Gates, FrequencyWithinThreeSigma) {
  for (double p : {0.1, 0.3, 0.5, 0.7}) {
    GateSchedule s(p, 17);
    const std::size_t layers = 4, steps = 2500;
    std::size_t ca = 0;
    for (std::size_t i = 0; i < steps; ++i)
      for (auto g : s.next(layers)) ca += g;
    const double n = double(layers * steps), f = double(ca) / n;
    EXPECT_LE(std::abs(f - p), 3.0 * std::sqrt(p * (1 - p) / n)) << "p=" << p << " f=" << f;
  }
}

TEST(Gates, ReproducibleFromSeed) {
  GateSchedule a(0.4, 5), b(0.4, 5), c(0.4, 6);
  for (int i = 0; i < 50; ++i) {
    a.next(3);
    b.next(3);
    c.next(3);
  }
  EXPECT_EQ(a.draws(), b.draws());
  EXPECT_NE(a.draws(), c.draws());
}

TEST(Gates, PerSampleLayout) {
  GateSchedule s(0.5, 9);
  const auto by_layer = s.next_per_sample(3, 4);
  ASSERT_EQ(by_layer.size(), 3u);
  ASSERT_EQ(s.draws().size(), 4u);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(by_layer[l][b], s.draws()[b][l]);
}

TEST(ExtractKv, ReplaysFrozenForward) {
  std::mt19937_64 rng(2);
  const Models m = drifted(2);
  const auto imgs = random_images(rng, tiny(), 3);
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  ASSERT_EQ(cache.layers.size(), 2u);
  EXPECT_EQ(cache.batch, 3u);
  EXPECT_EQ(cache.tokens, tiny().tokens());

  // Manual replay: walk the blocks and project each layer's normalized input.
  Tape t(Tape::Mode::inference);
  Var h = patch_embed(t, m.frozen, view(imgs));
  for (std::size_t l = 0; l < 2; ++l) {
    const Block& b = m.frozen.blocks[l];
    const Tensor a = ops::layer_norm(h, t.param(b.norm1_gain), t.param(b.norm1_bias), m.frozen.config.ln_eps).value();
    const auto am = oracle::to_matrix(a);
    EXPECT_LE(oracle::max_abs_diff(oracle::to_matrix(cache.layers[l].keys), oracle::matmul(am, oracle::to_matrix(b.attn.w_k.value))),
              1e-12);
    EXPECT_LE(oracle::max_abs_diff(oracle::to_matrix(cache.layers[l].values), oracle::matmul(am, oracle::to_matrix(b.attn.w_v.value))),
              1e-12);
    const std::size_t n = tiny().tokens();
    h = block_forward(h, b, [&](Var x) { return multi_head_attention(x, b.attn, n); }, m.frozen.config.ln_eps);
  }

  const KVCache again = extract_kv(m.frozen, view(imgs));
  for (std::size_t l = 0; l < 2; ++l) {
    EXPECT_EQ(again.layers[l].keys, cache.layers[l].keys);
    EXPECT_EQ(again.layers[l].values, cache.layers[l].values);
  }
}

TEST(ExtractKv, ArchitectureMismatch) {
  std::mt19937_64 rng(3);
  const Models m = drifted(3);
  ViTConfig other = tiny();
  other.depth = 3;
  const auto imgs = random_images(rng, tiny(), 1);
  EXPECT_THROW(extract_kv(m.frozen, other, view(imgs)), ConfigError);
  ViTConfig relabeled = tiny();
  relabeled.num_classes = 7;
  EXPECT_NO_THROW(extract_kv(m.frozen, relabeled, view(imgs)));
}

TEST(StochcaForward, AllSelfAttentionIsPlainForward) {
  std::mt19937_64 rng(4);
  const Models m = drifted(4);
  const auto imgs = random_images(rng, tiny(), 3);
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  const Tensor sa = forward(m.target, view(imgs));
  EXPECT_EQ(stochca_forward(m.target, cache, Gates{0, 0}, view(imgs)), sa);
  EXPECT_EQ(infer(m.target, view(imgs)), sa);
}

TEST(StochcaForward, InitializationIdentity) {
  std::mt19937_64 rng(5);
  ViTModel base = ViTModel::create(tiny(), 5);
  scramble(base, 5);
  const ViTModel frozen = frozen_copy(base);
  const ViTModel target = trainable_copy(base);
  const auto imgs = random_images(rng, tiny(), 3);
  const KVCache cache = extract_kv(frozen, view(imgs));
  const Tensor sa = forward(target, view(imgs));
  for (const Gates& g : {Gates{1, 1}, Gates{1, 0}, Gates{0, 1}}) EXPECT_EQ(stochca_forward(target, cache, g, view(imgs)), sa);
}

TEST(StochcaForward, SingleGateMatchesHandSplice) {
  std::mt19937_64 rng(6);
  for (int rep = 0; rep < 10; ++rep) {
    const Models m = drifted(60 + rep);
    const auto imgs = random_images(rng, tiny(), 2);
    const KVCache cache = extract_kv(m.frozen, view(imgs));
    const Tensor got = stochca_forward(m.target, cache, Gates{0, 1}, view(imgs));

    // Layer 0 attends to itself; layer 1 takes the frozen keys/values.
    const std::size_t n = tiny().tokens();
    Tape t(Tape::Mode::inference);
    Var h = patch_embed(t, m.target, view(imgs));
    const Block& b0 = m.target.blocks[0];
    const Block& b1 = m.target.blocks[1];
    h = block_forward(h, b0, [&](Var x) { return multi_head_attention(x, b0.attn, n); }, 1e-6);
    h = block_forward(h, b1, [&](Var x) { return multi_head_attention(x, b1.attn, n, &cache.layers[1]); }, 1e-6);
    const Tensor want = classify(m.target, h, 2).value();
    EXPECT_LE(oracle::max_abs_diff(oracle::to_matrix(got), oracle::to_matrix(want)), 1e-12);
    EXPECT_GT(oracle::max_abs_diff(oracle::to_matrix(got), oracle::to_matrix(forward(m.target, view(imgs)))), 1e-9);
  }
}

TEST(StochcaForward, PerSampleGatesMatchSeparateForwards) {
  std::mt19937_64 rng(7);
  const Models m = drifted(7);
  const auto imgs = random_images(rng, tiny(), 3);
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  const std::vector<Gates> by_layer{{1, 0, 1}, {0, 0, 1}};
  Tape t(Tape::Mode::inference);
  const Tensor got = stochca_forward(t, m.target, cache, by_layer, view(imgs)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    const KVCache one = extract_kv(m.frozen, {&imgs[i]});
    const Tensor want = stochca_forward(m.target, one, Gates{by_layer[0][i], by_layer[1][i]}, {&imgs[i]});
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(got(i, c), want(0, c));
  }
}

TEST(StochcaForward, RejectsBadGatesAndCaches) {
  std::mt19937_64 rng(8);
  const Models m = drifted(8);
  const auto imgs = random_images(rng, tiny(), 2);
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  EXPECT_THROW(stochca_forward(m.target, cache, Gates{1}, view(imgs)), ContractError);
  EXPECT_THROW(stochca_forward(m.target, cache, Gates{1, 0, 0}, view(imgs)), ContractError);
  EXPECT_THROW(stochca_forward(m.target, cache, Gates{1, 0}, {&imgs[0]}), DimensionError);
}

TEST(TrainStep, ZeroProbabilityIsFineTuning) {
  std::mt19937_64 rng(9);
  const Models m = drifted(9);
  ViTModel a = m.target, b = m.target;
  AdamW oa(small_opt(), a.parameters()), ob(small_opt(), b.parameters());
  GateSchedule gates(0.0, 3);
  for (int step = 0; step < 20; ++step) {
    std::vector<int> labels;
    const auto imgs = separable_images(rng, tiny(), 4, labels);
    const Batch batch{view(imgs), labels};
    instrument::Scope scope;
    const double la = train_step(a, m.frozen, batch, 0.0, oa, gates).loss;
    EXPECT_EQ(scope.counts().frozen_forwards, 0u);
    const double lb = ft_train_step(b, batch, ob);
    EXPECT_EQ(la, lb);
  }
  EXPECT_EQ(parameter_hash(a), parameter_hash(b));
}

TEST(TrainStep, FrozenModelUntouched) {
  std::mt19937_64 rng(10);
  const Models m = drifted(10);
  const std::string before = parameter_hash(m.frozen);
  ViTModel target = m.target;
  OptimizerConfig o = small_opt();
  o.total_steps = 100;
  AdamW opt(o, target.parameters());
  GateSchedule gates(0.5, 1);
  for (int step = 0; step < 100; ++step) {
    std::vector<int> labels;
    const auto imgs = separable_images(rng, tiny(), 4, labels);
    train_step(target, m.frozen, Batch{view(imgs), labels}, 0.5, opt, gates);
  }
  EXPECT_EQ(parameter_hash(m.frozen), before);
  EXPECT_NE(parameter_hash(target), parameter_hash(m.target));
  for (const Parameter* p : m.frozen.parameters()) EXPECT_FALSE(p->grad) << p->name;
}

TEST(TrainStep, FrozenTargetIsRejected) {
  std::mt19937_64 rng(11);
  const Models m = drifted(11);
  ViTModel frozen_target = m.frozen;
  AdamW opt(small_opt(), frozen_target.parameters());
  GateSchedule gates(0.5, 1);
  std::vector<int> labels;
  const auto imgs = separable_images(rng, tiny(), 2, labels);
  EXPECT_THROW(train_step(frozen_target, m.frozen, Batch{view(imgs), labels}, 0.5, opt, gates), ContractError);
  Tape t;
  EXPECT_THROW(forward(t, m.frozen, view(imgs)), InvariantViolation);
}

TEST(TrainStep, LossDecreasesOnSeparableData) {
  std::mt19937_64 rng(12);
  const Models m = drifted(12);
  ViTModel target = m.target;
  AdamW opt(small_opt(), target.parameters());
  GateSchedule gates(0.1, 2);
  std::vector<int> labels;
  const auto imgs = separable_images(rng, tiny(), 8, labels);
  const Batch batch{view(imgs), labels};
  std::vector<double> losses;
  for (int step = 0; step < 50; ++step) losses.push_back(train_step(target, m.frozen, batch, 0.1, opt, gates).loss);
  const double first = (losses[0] + losses[1] + losses[2]) / 3, last = (losses[47] + losses[48] + losses[49]) / 3;
  EXPECT_LT(last, 0.5 * first);
}

TEST(TrainStep, GradientFlowAtCrossAttentionLayer) {
  std::mt19937_64 rng(13);
  const Models m = drifted(13);
  const auto imgs = random_images(rng, tiny(), 3);
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  ViTModel target = m.target;
  Tape t;
  t.backward(ops::cross_entropy(stochca_forward(t, target, cache, Gates{1, 0}, view(imgs)), std::vector<int>{0, 1, 1}));
  auto nonzero = [](const Parameter& p) {
    if (!p.grad) return false;
    for (double g : p.grad->values())
      if (g != 0.0) return true;
    return false;
  };
  const Block& ca = target.blocks[0];
  EXPECT_TRUE(nonzero(ca.attn.w_q));
  EXPECT_TRUE(nonzero(ca.attn.w_o));
  EXPECT_TRUE(nonzero(ca.mlp_w1));
  EXPECT_TRUE(nonzero(ca.mlp_w2));
  EXPECT_FALSE(nonzero(ca.attn.w_k));
  EXPECT_FALSE(nonzero(ca.attn.w_v));
  EXPECT_TRUE(nonzero(target.blocks[1].attn.w_k));
  EXPECT_TRUE(nonzero(target.blocks[1].attn.w_v));
}

TEST(GradCheck, FixedMixedGatePatterns) {
  std::mt19937_64 rng(14);
  const Models m = drifted(14);
  const auto imgs = random_images(rng, tiny(), 2);
  const Batch batch{view(imgs), {0, 1}};
  const KVCache cache = extract_kv(m.frozen, view(imgs));
  for (const Gates& g : {Gates{0, 0}, Gates{1, 0}, Gates{0, 1}, Gates{1, 1}}) {
    const GradCheckResult r = grad_check(m.target, batch, &cache, g);
    EXPECT_LE(r.max_rel_error, 1e-5) << r.worst_parameter;
  }
}

TEST(Inference, NeverTouchesFrozenModel) {
  std::mt19937_64 rng(15);
  const Models m = drifted(15);
  const auto imgs = random_images(rng, tiny(), 4);
  instrument::Scope scope;
  infer(m.target, view(imgs));
  EXPECT_EQ(scope.counts().frozen_forwards, 0u);
  EXPECT_EQ(scope.counts().frozen_attention, 0u);
  EXPECT_EQ(scope.counts().target_attention, 2u * 4u);
}
