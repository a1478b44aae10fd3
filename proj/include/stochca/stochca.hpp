#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "stochca/optim.hpp"
#include "stochca/vit.hpp"

namespace stochca {

/// Per-layer keys and values of the frozen model for one batch; carries no gradient.
struct KVCache {
  std::vector<KeyValue> layers;
  std::size_t batch = 0;
  std::size_t tokens = 0;
};

/// Per-layer projections of a pure self-attention pass (plain values).
struct LayerActivations {
  std::vector<Tensor> q, k, v;
};

/// Pure self-attention pass recording each layer's Q, K, V; builds no gradient tape.
inline LayerActivations extract_activations(const ViTModel& m, const ImageBatch& images) {
  Tape tape(Tape::Mode::inference);
  std::vector<AttentionTaps> taps(m.blocks.size());
  encode(tape, m, images, self_attention_route(m, taps.data()));
  LayerActivations out;
  for (const AttentionTaps& t : taps) {
    out.q.push_back(t.q.value());
    out.k.push_back(t.k.value());
    out.v.push_back(t.v.value());
  }
  return out;
}

/// Keys/values of `frozen` on `images`, checked against the architecture of `target`.
inline KVCache extract_kv(const ViTModel& frozen, const ViTConfig& target, const ImageBatch& images) {
  if (!frozen.config.same_architecture(target))
    throw ConfigError("extract_kv: frozen and target models do not share an architecture");
  LayerActivations acts = extract_activations(frozen, images);
  KVCache cache;
  cache.batch = images.size();
  cache.tokens = frozen.config.tokens();
  for (std::size_t l = 0; l < acts.k.size(); ++l) cache.layers.push_back({std::move(acts.k[l]), std::move(acts.v[l])});
  return cache;
}

inline KVCache extract_kv(const ViTModel& frozen, const ImageBatch& images) {
  return extract_kv(frozen, frozen.config, images);
}

using Gates = std::vector<std::uint8_t>;  // one flag per layer, 1 = cross-attention

/// Independent Bernoulli(p) draw per layer.
inline Gates draw_gates(double p, std::size_t layers, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ContractError("draw_gates: probability " + std::to_string(p) + " outside [0, 1]");
  std::bernoulli_distribution coin(p);
  Gates g(layers);
  for (auto& b : g) b = coin(rng) ? 1 : 0;
  return g;
}

/// Reproducible stream of gate draws, one vector per training step.
class GateSchedule {
 public:
  GateSchedule(double p, std::uint64_t seed) : p_(p), seed_(seed), rng_(make_rng(seed, {0x6761'7465ULL})) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("GateSchedule: probability outside [0, 1]");
  }

  double p() const { return p_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<Gates>& draws() const { return draws_; }

  const Gates& next(std::size_t layers) {
    draws_.push_back(draw_gates(p_, layers, rng_));
    return draws_.back();
  }

  /// Per-sample variant: one gate vector per image, returned layer-major (layers x batch).
  std::vector<Gates> next_per_sample(std::size_t layers, std::size_t batch) {
    std::vector<Gates> by_layer(layers, Gates(batch));
    for (std::size_t b = 0; b < batch; ++b) {
      Gates g = draw_gates(p_, layers, rng_);
      for (std::size_t l = 0; l < layers; ++l) by_layer[l][b] = g[l];
      draws_.push_back(std::move(g));
    }
    return by_layer;
  }

 private:
  double p_;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<Gates> draws_;
};

/**
 * Attention route mixing self- and cross-attention. `by_layer[l]` holds
 * either one flag (whole batch) or one flag per sequence.
 */
inline LayerAttention gated_route(const ViTModel& target, const KVCache* cache, std::vector<Gates> by_layer,
                                  AttentionTaps* taps = nullptr) {
  const std::size_t n = target.config.tokens();
  return [n, cache, by_layer = std::move(by_layer), taps](std::size_t l, const Block& b, Var x) {
    const Gates& g = by_layer[l];
    AttentionTaps* tap = taps ? &taps[l] : nullptr;
    const bool any = std::any_of(g.begin(), g.end(), [](auto v) { return v != 0; });
    if (!any) return multi_head_attention(x, b.attn, n, nullptr, {}, tap);
    if (!cache) throw ContractError("gated forward: cross-attention requested without a key/value cache");
    const bool all = std::all_of(g.begin(), g.end(), [](auto v) { return v != 0; });
    if (all || g.size() == 1) return multi_head_attention(x, b.attn, n, &cache->layers[l], {}, tap);
    return multi_head_attention(x, b.attn, n, &cache->layers[l], g, tap);
  };
}

namespace detail {
inline void check_cache(const ViTModel& target, const KVCache& cache, std::size_t batch) {
  if (cache.layers.size() != target.blocks.size())
    throw ContractError("key/value cache has " + std::to_string(cache.layers.size()) + " layers, model has " +
                        std::to_string(target.blocks.size()));
  if (cache.batch != batch || cache.tokens != target.config.tokens())
    throw DimensionError("key/value cache was extracted for a different batch or token count");
}
}  // namespace detail

/// Logits with layer l cross-attending to the cache where gates[l] is set.
inline Var stochca_forward(Tape& tape, const ViTModel& target, const KVCache& cache, std::span<const std::uint8_t> gates,
                           const ImageBatch& images) {
  if (gates.size() != target.blocks.size())
    throw ContractError("stochca_forward: " + std::to_string(gates.size()) + " gates for " +
                        std::to_string(target.blocks.size()) + " layers");
  detail::check_cache(target, cache, images.size());
  std::vector<Gates> by_layer;
  for (auto g : gates) by_layer.push_back(Gates{g});
  return classify(target, encode(tape, target, images, gated_route(target, &cache, std::move(by_layer))),
                  images.size());
}

/// Per-sample gating: gates_by_layer is layers x batch.
inline Var stochca_forward(Tape& tape, const ViTModel& target, const KVCache& cache,
                           const std::vector<Gates>& gates_by_layer, const ImageBatch& images) {
  if (gates_by_layer.size() != target.blocks.size())
    throw ContractError("stochca_forward: gate rows do not match layer count");
  for (const Gates& g : gates_by_layer)
    if (g.size() != images.size()) throw ContractError("stochca_forward: gate columns do not match batch size");
  detail::check_cache(target, cache, images.size());
  return classify(target, encode(tape, target, images, gated_route(target, &cache, gates_by_layer)), images.size());
}

inline Tensor stochca_forward(const ViTModel& target, const KVCache& cache, std::span<const std::uint8_t> gates,
                              const ImageBatch& images) {
  Tape tape(Tape::Mode::inference);
  return stochca_forward(tape, target, cache, gates, images).value();
}

/// Deployed prediction path: pure self-attention, no frozen model involved.
inline Tensor infer(const ViTModel& target, const ImageBatch& images) { return forward(target, images); }

struct Batch {
  ImageBatch images;
  std::vector<int> labels;
};

enum class GateMode { batch, sample };

struct StepResult {
  double loss = 0.0;
  std::vector<Gates> gates;  // layer-major; one column per gate draw
};

/**
 * One training step: draw gates, extract the frozen keys/values (when p > 0),
 * run the gated forward, take cross-entropy, and update the target only.
 */
inline StepResult train_step(ViTModel& target, const ViTModel& frozen, const Batch& batch, double p, AdamW& opt,
                             GateSchedule& gates, GateMode mode = GateMode::batch) {
  if (!frozen.frozen()) throw ContractError("train_step: the reference model must be frozen");
  if (target.frozen()) throw ContractError("train_step: the target model is frozen");
  if (p != gates.p()) throw ContractError("train_step: gate schedule probability differs from p");
  const std::size_t layers = target.blocks.size();
  StepResult res;
  if (mode == GateMode::batch) {
    for (auto g : gates.next(layers)) res.gates.push_back(Gates{g});
  } else {
    res.gates = gates.next_per_sample(layers, batch.images.size());
  }
  std::optional<KVCache> cache;
  if (p > 0.0) cache = extract_kv(frozen, target.config, batch.images);

  Tape tape;
  Var logits = classify(target, encode(tape, target, batch.images, gated_route(target, cache ? &*cache : nullptr, res.gates)),
                        batch.images.size());
  Var loss = ops::cross_entropy(logits, batch.labels);
  res.loss = loss.value().item();
  tape.backward(loss);
  for (const Parameter* fp : frozen.parameters())
    if (fp->grad) throw InvariantViolation("frozen parameter '" + fp->name + "' received a gradient");
  opt.step();
  return res;
}

}  // namespace stochca
