#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "stochca/baselines.hpp"
#include "stochca/datagen.hpp"

namespace stochca {

/// Stage of a protocol in which data is read.
enum class Phase : std::uint8_t { train = 0, select = 1, retrain = 2, test = 3 };

inline const char* phase_name(Phase p) {
  switch (p) {
    case Phase::train: return "train";
    case Phase::select: return "select";
    case Phase::retrain: return "retrain";
    case Phase::test: return "test";
  }
  return "?";
}

/// Counts of sample reads keyed by (domain, phase).
class AccessLog {
 public:
  void record(int domain, Phase phase, std::size_t n = 1) { counts_[{domain, phase}] += n; }

  std::size_t count(int domain, Phase phase) const {
    auto it = counts_.find({domain, phase});
    return it == counts_.end() ? 0 : it->second;
  }

  std::size_t count(int domain) const {
    std::size_t n = 0;
    for (const auto& [key, c] : counts_)
      if (key.first == domain) n += c;
    return n;
  }

  const std::map<std::pair<int, Phase>, std::size_t>& entries() const { return counts_; }

 private:
  std::map<std::pair<int, Phase>, std::size_t> counts_;
};

/// A list of samples read under one phase; every batch drawn from it is logged.
class SampleSet {
 public:
  SampleSet() = default;
  SampleSet(std::vector<const Sample*> samples, Phase phase, AccessLog* log = nullptr)
      : samples_(std::move(samples)), phase_(phase), log_(log) {}

  static SampleSet of(const LabeledDataset& ds, std::initializer_list<Split> splits, Phase phase,
                      AccessLog* log = nullptr) {
    std::vector<const Sample*> out;
    for (const Sample& s : ds.samples)
      if (std::find(splits.begin(), splits.end(), s.split) != splits.end()) out.push_back(&s);
    return SampleSet(std::move(out), phase, log);
  }

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  Phase phase() const { return phase_; }
  const std::vector<const Sample*>& samples() const { return samples_; }

  SampleSet with_phase(Phase phase) const { return SampleSet(samples_, phase, log_); }

  Batch batch(std::span<const std::size_t> idx) const {
    Batch b;
    for (std::size_t i : idx) {
      const Sample& s = *samples_.at(i);
      if (log_) log_->record(s.domain, phase_);
      b.images.push_back(&s.image);
      b.labels.push_back(s.label);
    }
    return b;
  }

 private:
  std::vector<const Sample*> samples_;
  Phase phase_ = Phase::train;
  AccessLog* log_ = nullptr;
};

/// Epoch-wise shuffled mini-batches; the last partial batch of an epoch is dropped
/// unless the set is smaller than one batch.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed)
      : n_(n), batch_(std::min(batch, n)), rng_(make_rng(seed, {0x6261'7463ULL})), order_(n) {
    if (n == 0 || batch == 0) throw ContractError("BatchSampler: empty data or zero batch size");
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > n_) reshuffle();
    std::vector<std::size_t> out(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::size_t n_, batch_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Everything a training run needs besides the models and the data.
struct TrainSpec {
  BaselineKind method = BaselineKind::FT;
  double p = 0.0;       // StochCA
  double lambda = 0.0;  // L2Reg
  OptimizerConfig optimizer;
  GateMode gate_mode = GateMode::batch;
  FtcaLoss ftca_loss = FtcaLoss::average_logits;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> losses;
  OpCounts counts;
};

/**
 * Trains `target` in place with the method of `spec` for
 * spec.optimizer.total_steps steps. The frozen model is only consulted by
 * methods that need it. `on_step` sees the model after every update.
 */
inline TrainLog train(ViTModel& target, const ViTModel& frozen, const SampleSet& data, const TrainSpec& spec,
                      const std::function<void(std::size_t, const ViTModel&)>& on_step = {}) {
  if (target.frozen()) throw ContractError("train: the target model is frozen");
  AdamW opt(spec.optimizer, target.parameters());
  BatchSampler sampler(data.size(), spec.optimizer.batch_size, spec.seed);
  const BaselineKind kind = training_method(spec.method);
  const double p = kind == BaselineKind::StochCA ? spec.p : 0.0;
  GateSchedule gates(p, spec.seed);
  TrainLog log;
  instrument::Scope scope;
  for (std::size_t step = 0; step < spec.optimizer.total_steps; ++step) {
    const auto idx = sampler.next();
    const Batch batch = data.batch(idx);
    double loss = 0.0;
    switch (kind) {
      case BaselineKind::FT: loss = ft_train_step(target, batch, opt); break;
      case BaselineKind::StochCA: loss = train_step(target, frozen, batch, p, opt, gates, spec.gate_mode).loss; break;
      case BaselineKind::L2Reg: loss = l2reg_train_step(target, frozen, batch, spec.lambda, opt); break;
      case BaselineKind::FTCA: loss = ftca_train_step(target, frozen, batch, opt, spec.ftca_loss); break;
      case BaselineKind::FTCA_onlySA: break;
    }
    log.losses.push_back(loss);
    if (on_step) on_step(step + 1, target);
  }
  log.counts = scope.counts();
  return log;
}

/// Logits of the deployed prediction path of `kind`.
inline Tensor predict(BaselineKind kind, const ViTModel& target, const ViTModel& frozen, const ImageBatch& images) {
  return kind == BaselineKind::FTCA ? ftca_forward(target, frozen, images) : infer(target, images);
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c)
      if (logits(r, c) > logits(r, best)) best = c;
    out[r] = static_cast<int>(best);
  }
  return out;
}

/// Fraction of correctly classified samples.
inline double accuracy(BaselineKind kind, const ViTModel& target, const ViTModel& frozen, const SampleSet& data,
                       std::size_t batch = 64) {
  if (data.empty()) throw ContractError("accuracy: empty evaluation set");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); i += batch) {
    idx.resize(std::min(batch, data.size() - i));
    std::iota(idx.begin(), idx.end(), i);
    const Batch b = data.batch(idx);
    const auto pred = argmax_rows(predict(kind, target, frozen, b.images));
    for (std::size_t j = 0; j < pred.size(); ++j) correct += pred[j] == b.labels[j];
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double accuracy(const ViTModel& model, const SampleSet& data) {
  return accuracy(BaselineKind::FT, model, model, data);
}

inline OptimizerConfig default_pretrain_optimizer() {
  OptimizerConfig c;
  c.lr = 4e-3;
  c.weight_decay = 0.05;
  c.warmup_steps = 50;
  c.total_steps = 1500;
  c.batch_size = 32;
  return c;
}

/**
 * Trains a fresh ViT with pure self-attention on the source task and returns
 * it frozen. `opt.total_steps` is replaced by `steps`.
 */
inline ViTModel pretrain_toy(const ViTConfig& config, const LabeledDataset& source, std::size_t steps,
                             std::uint64_t seed, OptimizerConfig opt = default_pretrain_optimizer()) {
  if (source.num_classes != config.num_classes)
    throw ContractError("pretrain_toy: source has " + std::to_string(source.num_classes) + " classes, config has " +
                        std::to_string(config.num_classes));
  ViTModel model = ViTModel::create(config, seed);
  opt.total_steps = steps;
  TrainSpec spec;
  spec.optimizer = opt;
  spec.seed = seed;
  train(model, model, SampleSet::of(source, {Split::train}, Phase::train), spec);
  model.set_frozen(true);
  return model;
}

}  // namespace stochca
