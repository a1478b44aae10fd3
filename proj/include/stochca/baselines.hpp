#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "stochca/stochca.hpp"

namespace stochca {

enum class BaselineKind { FT, L2Reg, FTCA, FTCA_onlySA, StochCA };

inline constexpr BaselineKind kAllMethods[] = {BaselineKind::FT, BaselineKind::StochCA, BaselineKind::L2Reg,
                                               BaselineKind::FTCA, BaselineKind::FTCA_onlySA};

inline std::string_view method_name(BaselineKind k) {
  switch (k) {
    case BaselineKind::FT: return "FT";
    case BaselineKind::L2Reg: return "L2Reg";
    case BaselineKind::FTCA: return "FTCA";
    case BaselineKind::FTCA_onlySA: return "FTCA_onlySA";
    case BaselineKind::StochCA: return "StochCA";
  }
  return "?";
}

/// Case-insensitive parse of a method tag ("stochca", "FT+CA", "ftca_onlysa", ...).
inline BaselineKind parse_method(std::string_view s) {
  std::string k;
  for (char c : s)
    if (c != '_' && c != '-' && c != '+' && c != ' ' && c != '(' && c != ')')
      k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (k == "ft") return BaselineKind::FT;
  if (k == "l2reg") return BaselineKind::L2Reg;
  if (k == "ftca") return BaselineKind::FTCA;
  if (k == "ftcaonlysa") return BaselineKind::FTCA_onlySA;
  if (k == "stochca") return BaselineKind::StochCA;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

/// Method used to train a model for a given reporting tag.
inline BaselineKind training_method(BaselineKind k) {
  return k == BaselineKind::FTCA_onlySA ? BaselineKind::FTCA : k;
}

/// Vanilla fine-tuning step: pure self-attention, cross-entropy, update everything.
inline double ft_train_step(ViTModel& target, const Batch& batch, AdamW& opt) {
  if (target.frozen()) throw ContractError("ft_train_step: the target model is frozen");
  Tape tape;
  Var loss = ops::cross_entropy(forward(tape, target, batch.images), batch.labels);
  const double value = loss.value().item();
  tape.backward(loss);
  opt.step();
  return value;
}

/// Mean over layers and tokens of the squared distance between target and
/// frozen Q, K and V (summed over the three).
inline Var l2_penalty(const std::vector<AttentionTaps>& target, const LayerActivations& frozen) {
  if (target.empty() || target.size() != frozen.q.size()) throw ContractError("l2_penalty: layer counts differ");
  Tape& t = *target.front().q.tape;
  std::vector<Var> terms;
  for (std::size_t l = 0; l < target.size(); ++l) {
    Var dq = ops::squared_distance(target[l].q, t.constant(frozen.q[l]));
    Var dk = ops::squared_distance(target[l].k, t.constant(frozen.k[l]));
    Var dv = ops::squared_distance(target[l].v, t.constant(frozen.v[l]));
    terms.push_back(ops::add(ops::add(dq, dk), dv));
  }
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ops::add(total, terms[i]);
  const double tokens = static_cast<double>(target.front().q.value().rows());
  return ops::scale(total, 1.0 / (static_cast<double>(target.size()) * tokens));
}

struct L2RegLoss {
  Var total;
  double task = 0.0;
  double penalty = 0.0;
};

/// Cross-entropy plus lambda times the activation-discrepancy penalty.
inline L2RegLoss l2reg_loss(Tape& tape, const ViTModel& target, const ViTModel& frozen, const Batch& batch, double lambda) {
  if (!frozen.config.same_architecture(target.config))
    throw ConfigError("l2reg_loss: frozen and target models do not share an architecture");
  const LayerActivations ref = extract_activations(frozen, batch.images);
  std::vector<AttentionTaps> taps(target.blocks.size());
  Var logits = classify(target, encode(tape, target, batch.images, self_attention_route(target, taps.data())),
                        batch.images.size());
  Var task = ops::cross_entropy(logits, batch.labels);
  Var penalty = l2_penalty(taps, ref);
  L2RegLoss out;
  out.task = task.value().item();
  out.penalty = penalty.value().item();
  out.total = lambda == 0.0 ? task : ops::add(task, ops::scale(penalty, lambda));
  return out;
}

inline double l2reg_train_step(ViTModel& target, const ViTModel& frozen, const Batch& batch, double lambda, AdamW& opt) {
  Tape tape;
  L2RegLoss loss = l2reg_loss(tape, target, frozen, batch, lambda);
  const double value = loss.total.value().item();
  tape.backward(loss.total);
  opt.step();
  return value;
}

/// Two full passes through the target (all self-attention, all cross-attention), logits averaged.
inline Var ftca_forward(Tape& tape, const ViTModel& target, const KVCache& cache, const ImageBatch& images) {
  const std::size_t layers = target.blocks.size();
  Var sa = stochca_forward(tape, target, cache, Gates(layers, 0), images);
  Var ca = stochca_forward(tape, target, cache, Gates(layers, 1), images);
  return ops::scale(ops::add(sa, ca), 0.5);
}

inline Tensor ftca_forward(const ViTModel& target, const ViTModel& frozen, const ImageBatch& images) {
  Tape tape(Tape::Mode::inference);
  const KVCache cache = extract_kv(frozen, target.config, images);
  return ftca_forward(tape, target, cache, images).value();
}

/// Training objective of the two-path ensemble.
enum class FtcaLoss { average_logits, average_losses };

inline double ftca_train_step(ViTModel& target, const ViTModel& frozen, const Batch& batch, AdamW& opt,
                              FtcaLoss mode = FtcaLoss::average_logits) {
  const KVCache cache = extract_kv(frozen, target.config, batch.images);
  Tape tape;
  Var loss;
  if (mode == FtcaLoss::average_logits) {
    loss = ops::cross_entropy(ftca_forward(tape, target, cache, batch.images), batch.labels);
  } else {
    const std::size_t layers = target.blocks.size();
    Var sa = ops::cross_entropy(stochca_forward(tape, target, cache, Gates(layers, 0), batch.images), batch.labels);
    Var ca = ops::cross_entropy(stochca_forward(tape, target, cache, Gates(layers, 1), batch.images), batch.labels);
    loss = ops::scale(ops::add(sa, ca), 0.5);
  }
  const double value = loss.value().item();
  tape.backward(loss);
  opt.step();
  return value;
}

/// FT+CA (only SA): the ensemble-trained weights evaluated on the self-attention path alone.
inline Tensor ftca_onlysa_infer(const ViTModel& target, const ImageBatch& images) { return forward(target, images); }

}  // namespace stochca
