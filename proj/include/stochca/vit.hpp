#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "stochca/attention.hpp"
#include "stochca/instrument.hpp"
#include "stochca/rng.hpp"

namespace stochca {

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 3;
  std::size_t dim = 16;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 4;
  double init_scale = 0.02;  // std of the truncated normal used for weights
  double ln_eps = 1e-6;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t mlp_dim() const { return dim * mlp_ratio; }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) + " is not a multiple of patch_size " +
                        std::to_string(patch_size));
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw ConfigError("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
    if (depth < 1) throw ConfigError("depth must be at least 1");
    if (channels < 1 || mlp_ratio < 1 || num_classes < 1) throw ConfigError("channels, mlp_ratio and num_classes must be positive");
    if (!(init_scale > 0.0) || !(ln_eps > 0.0)) throw ConfigError("init_scale and ln_eps must be positive");
  }

  /// Everything except the label space must agree for two models to exchange keys/values.
  bool same_architecture(const ViTConfig& o) const {
    return image_size == o.image_size && patch_size == o.patch_size && channels == o.channels && depth == o.depth &&
           dim == o.dim && heads == o.heads && mlp_ratio == o.mlp_ratio;
  }
};

struct Block {
  Parameter norm1_gain, norm1_bias;
  AttentionParams attn;
  Parameter norm2_gain, norm2_bias;
  Parameter mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

/// Pre-norm Vision Transformer with a CLS token and learned 1-D positions.
struct ViTModel {
  ViTConfig config;
  Parameter embed_w, embed_b, cls, pos;
  std::vector<Block> blocks;
  Parameter norm_gain, norm_bias;
  Parameter head_w, head_b;

  static ViTModel create(const ViTConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng = make_rng(seed, {0x5649'54ULL});
    const std::size_t d = cfg.dim;
    auto weight = [&](std::string name, Shape shape) {
      Tensor t(std::move(shape));
      for (double& v : t.values()) v = truncated_normal(rng, cfg.init_scale);
      return Parameter{std::move(name), std::move(t), std::nullopt};
    };
    auto constant = [](std::string name, std::size_t n, double v) {
      return Parameter{std::move(name), Tensor({n}, v), std::nullopt, false};
    };

    ViTModel m;
    m.config = cfg;
    m.embed_w = weight("embed.weight", {cfg.patch_dim(), d});
    m.embed_b = constant("embed.bias", d, 0.0);
    m.cls = weight("cls", {d});
    m.cls.decay = false;
    m.pos = weight("pos", {cfg.tokens(), d});
    m.pos.decay = false;
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string pre = "blocks." + std::to_string(l) + ".";
      Block b;
      b.norm1_gain = constant(pre + "norm1.gain", d, 1.0);
      b.norm1_bias = constant(pre + "norm1.bias", d, 0.0);
      b.attn.w_q = weight(pre + "attn.w_q", {d, d});
      b.attn.w_k = weight(pre + "attn.w_k", {d, d});
      b.attn.w_v = weight(pre + "attn.w_v", {d, d});
      b.attn.w_o = weight(pre + "attn.w_o", {d, d});
      b.attn.heads = cfg.heads;
      b.norm2_gain = constant(pre + "norm2.gain", d, 1.0);
      b.norm2_bias = constant(pre + "norm2.bias", d, 0.0);
      b.mlp_w1 = weight(pre + "mlp.w1", {d, cfg.mlp_dim()});
      b.mlp_b1 = constant(pre + "mlp.b1", cfg.mlp_dim(), 0.0);
      b.mlp_w2 = weight(pre + "mlp.w2", {cfg.mlp_dim(), d});
      b.mlp_b2 = constant(pre + "mlp.b2", d, 0.0);
      m.blocks.push_back(std::move(b));
    }
    m.norm_gain = constant("norm.gain", d, 1.0);
    m.norm_bias = constant("norm.bias", d, 0.0);
    m.init_head(cfg.num_classes, rng);
    return m;
  }

  /// Fixed-order view of every parameter; checkpoints and optimizers rely on the order.
  std::vector<const Parameter*> parameters() const {
    std::vector<const Parameter*> ps{&embed_w, &embed_b, &cls, &pos};
    for (const Block& b : blocks)
      for (const Parameter* p : {&b.norm1_gain, &b.norm1_bias, &b.attn.w_q, &b.attn.w_k, &b.attn.w_v, &b.attn.w_o,
                                 &b.norm2_gain, &b.norm2_bias, &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2})
        ps.push_back(p);
    for (const Parameter* p : {&norm_gain, &norm_bias, &head_w, &head_b}) ps.push_back(p);
    return ps;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (const Parameter* p : std::as_const(*this).parameters()) out.push_back(const_cast<Parameter*>(p));
    return out;
  }

  bool frozen() const { return embed_w.frozen; }

  void set_frozen(bool f) {
    for (Parameter* p : parameters()) {
      p->frozen = f;
      p->zero_grad();
    }
  }

  void zero_grad() const {
    for (const Parameter* p : parameters()) p->zero_grad();
  }

  void init_head(std::size_t classes, Rng& rng) {
    config.num_classes = classes;
    Tensor w({config.dim, classes});
    for (double& v : w.values()) v = truncated_normal(rng, config.init_scale);
    head_w = Parameter{"head.weight", std::move(w), std::nullopt};
    head_b = Parameter{"head.bias", Tensor({classes}, 0.0), std::nullopt, false};
    head_w.frozen = head_b.frozen = embed_w.frozen;
  }
};

using ImageBatch = std::vector<const Tensor*>;

/// Non-overlapping patches, one row per patch; images are channels x H x W.
inline Tensor patchify(const ImageBatch& images, const ViTConfig& cfg) {
  const std::size_t ps = cfg.patch_size, g = cfg.grid(), hw = cfg.image_size;
  Tensor out({images.size() * cfg.num_patches(), cfg.patch_dim()});
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Tensor& img = *images[b];
    if (img.shape() != Shape{cfg.channels, hw, hw})
      throw DimensionError("image of shape " + shape_str(img.shape()) + " for model expecting " +
                           shape_str({cfg.channels, hw, hw}));
    for (std::size_t pr = 0; pr < g; ++pr)
      for (std::size_t pc = 0; pc < g; ++pc) {
        double* row = out.data() + ((b * g + pr) * g + pc) * cfg.patch_dim();
        for (std::size_t c = 0; c < cfg.channels; ++c)
          for (std::size_t i = 0; i < ps; ++i)
            for (std::size_t j = 0; j < ps; ++j)
              *row++ = img[(c * hw + pr * ps + i) * hw + pc * ps + j];
      }
  }
  return out;
}

/// Projected patches with the CLS token prepended and positions added: (batch * tokens) x dim.
inline Var patch_embed(Tape& tape, const ViTModel& m, const ImageBatch& images) {
  const ViTConfig& cfg = m.config;
  Var patches = tape.constant(patchify(images, cfg));
  Var proj = ops::add_row_bias(ops::matmul(patches, tape.param(m.embed_w)), tape.param(m.embed_b));
  Var cls = tape.param(m.cls);
  Var pos = tape.param(m.pos);
  const std::size_t batch = images.size(), n = cfg.tokens(), np = cfg.num_patches(), d = cfg.dim;
  const Tensor& pv = proj.value();
  const Tensor& cv = cls.value();
  const Tensor& posv = pos.value();
  Tensor tokens({batch * n, d});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j)
        tokens(b * n + r, j) = (r == 0 ? cv[j] : pv(b * np + r - 1, j)) + posv(r, j);
  return tape.record("assemble_tokens", std::move(tokens), {proj, cls, pos},
                     [proj, cls, pos, batch, n, np, d](Tape& t, const Tensor& g) {
                       Tensor* gp = t.needs_grad(proj) ? &t.grad(proj) : nullptr;
                       Tensor* gc = t.needs_grad(cls) ? &t.grad(cls) : nullptr;
                       Tensor* gpos = t.needs_grad(pos) ? &t.grad(pos) : nullptr;
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t r = 0; r < n; ++r)
                           for (std::size_t j = 0; j < d; ++j) {
                             const double v = g(b * n + r, j);
                             if (gpos) (*gpos)(r, j) += v;
                             if (r == 0) {
                               if (gc) (*gc)[j] += v;
                             } else if (gp) {
                               (*gp)(b * np + r - 1, j) += v;
                             }
                           }
                     });
}

inline Var mlp_forward(Var x, const Block& b) {
  Tape& t = *x.tape;
  Var hidden = ops::gelu(ops::add_row_bias(ops::matmul(x, t.param(b.mlp_w1)), t.param(b.mlp_b1)));
  return ops::add_row_bias(ops::matmul(hidden, t.param(b.mlp_w2)), t.param(b.mlp_b2));
}

using AttentionFn = std::function<Var(Var normed)>;

/// u = h + attn(norm1(h)); out = u + mlp(norm2(u)). The attention route is injected.
inline Var block_forward(Var h, const Block& b, const AttentionFn& attn, double eps) {
  Tape& t = *h.tape;
  Var u = ops::add(h, attn(ops::layer_norm(h, t.param(b.norm1_gain), t.param(b.norm1_bias), eps)));
  return ops::add(u, mlp_forward(ops::layer_norm(u, t.param(b.norm2_gain), t.param(b.norm2_bias), eps), b));
}

/// Chooses the attention computation of layer `layer` given its normalized input.
using LayerAttention = std::function<Var(std::size_t layer, const Block& block, Var normed)>;

inline LayerAttention self_attention_route(const ViTModel& m, AttentionTaps* taps_per_layer = nullptr) {
  const std::size_t n = m.config.tokens();
  return [n, taps_per_layer](std::size_t l, const Block& b, Var x) {
    return multi_head_attention(x, b.attn, n, nullptr, {}, taps_per_layer ? &taps_per_layer[l] : nullptr);
  };
}

/// Token states after the last block, (batch * tokens) x dim.
inline Var encode(Tape& tape, const ViTModel& m, const ImageBatch& images, const LayerAttention& route) {
  if (images.empty()) throw ContractError("encode: empty batch");
  if (m.frozen()) instrument::Scope::frozen_forward();
  Var h = patch_embed(tape, m, images);
  for (std::size_t l = 0; l < m.blocks.size(); ++l) {
    const Block& b = m.blocks[l];
    h = block_forward(h, b, [&](Var x) { return route(l, b, x); }, m.config.ln_eps);
    instrument::Scope::attention(m.frozen(), images.size());
  }
  return h;
}

/// Final-norm CLS rows, batch x dim.
inline Var cls_features(const ViTModel& m, Var hidden, std::size_t batch) {
  Tape& t = *hidden.tape;
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * m.config.tokens();
  return ops::layer_norm(ops::gather_rows(hidden, std::move(rows)), t.param(m.norm_gain), t.param(m.norm_bias),
                         m.config.ln_eps);
}

inline Var classify(const ViTModel& m, Var hidden, std::size_t batch) {
  Tape& t = *hidden.tape;
  return ops::add_row_bias(ops::matmul(cls_features(m, hidden, batch), t.param(m.head_w)), t.param(m.head_b));
}

/// Pure self-attention logits on a tape (training path).
inline Var forward(Tape& tape, const ViTModel& m, const ImageBatch& images) {
  return classify(m, encode(tape, m, images, self_attention_route(m)), images.size());
}

/// Pure self-attention logits, batch x classes.
inline Tensor forward(const ViTModel& m, const ImageBatch& images) {
  Tape tape(Tape::Mode::inference);
  return forward(tape, m, images).value();
}

/// Pre-head CLS features under pure self-attention.
inline Tensor features(const ViTModel& m, const ImageBatch& images) {
  Tape tape(Tape::Mode::inference);
  return cls_features(m, encode(tape, m, images, self_attention_route(m)), images.size()).value();
}

/// Copy of `m` with a freshly initialized classifier for `new_classes` labels.
inline ViTModel replace_classifier(const ViTModel& m, std::size_t new_classes, std::uint64_t seed) {
  if (new_classes < 1) throw ContractError("replace_classifier: need at least one class");
  ViTModel out = m;
  Rng rng = make_rng(seed, {0x4845'4144ULL});
  out.init_head(new_classes, rng);
  return out;
}

/// Trainable copy of a (possibly frozen) model.
inline ViTModel trainable_copy(const ViTModel& m) {
  ViTModel out = m;
  out.set_frozen(false);
  return out;
}

inline ViTModel frozen_copy(const ViTModel& m) {
  ViTModel out = m;
  out.set_frozen(true);
  return out;
}

}  // namespace stochca
