#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "stochca/baselines.hpp"

namespace stochca {

/// Per-layer mean cosine similarity of Q, K, V between two models.
struct SimilarityReport {
  std::vector<double> q, k, v;  // one entry per layer
  double q_avg = 0.0, k_avg = 0.0, v_avg = 0.0;
  std::size_t zero_norm_vectors = 0;  // token pairs counted as similarity 0
  std::size_t images = 0;
};

namespace detail {

// Adds the per-token cosine similarities of `a` vs `b`, averaged per sequence, into acc.
inline void accumulate_cosine(const Tensor& a, const Tensor& b, std::size_t seq_len, double& acc, std::size_t& zeros) {
  const std::size_t rows = a.rows(), d = a.cols();
  for (std::size_t s = 0; s < rows / seq_len; ++s) {
    double seq_sum = 0.0;
    for (std::size_t i = s * seq_len; i < (s + 1) * seq_len; ++i) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += a(i, j) * b(i, j);
        na += a(i, j) * a(i, j);
        nb += b(i, j) * b(i, j);
      }
      if (na == 0.0 || nb == 0.0) {
        ++zeros;
        continue;
      }
      // sqrt(x * x) == x in binary floating point, so identical rows give exactly 1.
      seq_sum += std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
    }
    acc += seq_sum / static_cast<double>(seq_len);
  }
}

inline double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

}  // namespace detail

/// Accumulator over batches of paired activations.
class SimilarityAccumulator {
 public:
  SimilarityAccumulator(std::size_t layers, std::size_t seq_len)
      : seq_len_(seq_len), q_(layers, 0.0), k_(layers, 0.0), v_(layers, 0.0) {}

  void add(const LayerActivations& a, const LayerActivations& b) {
    if (a.q.size() != q_.size() || b.q.size() != q_.size()) throw ContractError("similarity: layer count mismatch");
    for (std::size_t l = 0; l < q_.size(); ++l) {
      if (a.q[l].shape() != b.q[l].shape()) throw DimensionError("similarity: activation shapes differ");
      detail::accumulate_cosine(a.q[l], b.q[l], seq_len_, q_[l], zeros_);
      detail::accumulate_cosine(a.k[l], b.k[l], seq_len_, k_[l], zeros_);
      detail::accumulate_cosine(a.v[l], b.v[l], seq_len_, v_[l], zeros_);
    }
    images_ += a.q.front().rows() / seq_len_;
  }

  SimilarityReport report() const {
    if (images_ == 0) throw ContractError("similarity: no images evaluated");
    SimilarityReport r;
    const double n = static_cast<double>(images_);
    for (std::size_t l = 0; l < q_.size(); ++l) {
      r.q.push_back(q_[l] / n);
      r.k.push_back(k_[l] / n);
      r.v.push_back(v_[l] / n);
    }
    r.q_avg = detail::mean(r.q);
    r.k_avg = detail::mean(r.k);
    r.v_avg = detail::mean(r.v);
    r.zero_norm_vectors = zeros_;
    r.images = images_;
    return r;
  }

 private:
  std::size_t seq_len_;
  std::vector<double> q_, k_, v_;
  std::size_t zeros_ = 0;
  std::size_t images_ = 0;
};

/**
 * Cosine similarity of per-token Q/K/V between `target` and `frozen`, both
 * run with pure self-attention; averaged over tokens, then over images.
 */
inline SimilarityReport cosine_similarity_report(const ViTModel& target, const ViTModel& frozen,
                                                 const std::vector<const Tensor*>& images, std::size_t batch = 32) {
  if (!target.config.same_architecture(frozen.config))
    throw ConfigError("cosine_similarity_report: models do not share an architecture");
  SimilarityAccumulator acc(target.blocks.size(), target.config.tokens());
  for (std::size_t i = 0; i < images.size(); i += batch) {
    ImageBatch chunk(images.begin() + static_cast<std::ptrdiff_t>(i),
                     images.begin() + static_cast<std::ptrdiff_t>(std::min(images.size(), i + batch)));
    acc.add(extract_activations(target, chunk), extract_activations(frozen, chunk));
  }
  return acc.report();
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  std::set<std::string> parameters_checked;

  bool passed(double tol) const { return max_rel_error <= tol; }
};

struct GradCheckOptions {
  double step = 1e-6;
  std::size_t min_entries = 200;
  std::size_t per_tensor = 6;   // entries sampled from every parameter tensor first
  double denom_floor = 1e-4;    // |a - n| / max(|a|, |n|, floor)
  std::uint64_t seed = 0;
};

/**
 * Central finite differences of the cross-entropy loss against analytic
 * gradients, over a random subset of parameter entries covering every
 * parameter tensor of `model`. With a cache, `gates` fixes the per-layer
 * routing; the frozen model that produced the cache is never perturbed.
 */
inline GradCheckResult grad_check(ViTModel model, const Batch& batch, const KVCache* cache = nullptr,
                                  Gates gates = {}, GradCheckOptions opt = {}) {
  if (model.frozen()) throw ContractError("grad_check: model is frozen");
  if (gates.empty()) gates.assign(model.blocks.size(), 0);
  std::vector<Gates> by_layer;
  for (auto g : gates) by_layer.push_back(Gates{g});

  auto loss_on = [&](Tape& tape) {
    Var logits = classify(model, encode(tape, model, batch.images, gated_route(model, cache, by_layer)),
                          batch.images.size());
    return ops::cross_entropy(logits, batch.labels);
  };

  model.zero_grad();
  {
    Tape tape;
    tape.backward(loss_on(tape));
  }

  Rng rng = make_rng(opt.seed, {0x6763'6b00ULL});
  auto params = model.parameters();
  std::vector<std::pair<std::size_t, std::size_t>> picks;  // (parameter, entry)
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<std::size_t> idx(params[pi]->value.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t j = 0; j < std::min(opt.per_tensor, idx.size()); ++j) picks.emplace_back(pi, idx[j]);
  }
  std::uniform_int_distribution<std::size_t> any_param(0, params.size() - 1);
  while (picks.size() < opt.min_entries) {
    const std::size_t pi = any_param(rng);
    std::uniform_int_distribution<std::size_t> entry(0, params[pi]->value.size() - 1);
    picks.emplace_back(pi, entry(rng));
  }

  auto eval = [&]() {
    Tape tape(Tape::Mode::inference);
    return loss_on(tape).value().item();
  };

  GradCheckResult res;
  for (auto [pi, j] : picks) {
    Parameter& p = *params[pi];
    const double analytic = p.grad ? (*p.grad)[j] : 0.0;
    const double orig = p.value[j];
    p.value[j] = orig + opt.step;
    const double up = eval();
    p.value[j] = orig - opt.step;
    const double down = eval();
    p.value[j] = orig;
    const double numeric = (up - down) / (2.0 * opt.step);
    const double rel =
        std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), opt.denom_floor});
    if (res.checked == 0 || rel > res.max_rel_error) {
      res.max_rel_error = rel;
      res.worst_parameter = p.name;
      res.worst_index = j;
    }
    ++res.checked;
    res.parameters_checked.insert(p.name);
  }
  return res;
}

/// Attention/frozen-model cost of one training step and one inference pass for a method.
struct MethodCost {
  OpCounts train_step;
  OpCounts inference;
};

inline MethodCost measure_cost(BaselineKind kind, const ViTModel& target, const ViTModel& frozen, const Batch& batch,
                               double p = 0.5, double lambda = 1.0, std::uint64_t seed = 0) {
  ViTModel model = trainable_copy(target);
  AdamW opt(OptimizerConfig{}, model.parameters());
  MethodCost cost;
  {
    instrument::Scope scope;
    switch (training_method(kind)) {
      case BaselineKind::FT: ft_train_step(model, batch, opt); break;
      case BaselineKind::L2Reg: l2reg_train_step(model, frozen, batch, lambda, opt); break;
      case BaselineKind::FTCA: ftca_train_step(model, frozen, batch, opt); break;
      case BaselineKind::StochCA: {
        GateSchedule gates(p, seed);
        train_step(model, frozen, batch, p, opt, gates);
        break;
      }
      case BaselineKind::FTCA_onlySA: break;
    }
    cost.train_step = scope.counts();
  }
  {
    instrument::Scope scope;
    if (kind == BaselineKind::FTCA)
      ftca_forward(model, frozen, batch.images);
    else if (kind == BaselineKind::FTCA_onlySA)
      ftca_onlysa_infer(model, batch.images);
    else
      infer(model, batch.images);
    cost.inference = scope.counts();
  }
  return cost;
}

}  // namespace stochca
