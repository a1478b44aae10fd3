#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "stochca/ops.hpp"

namespace stochca {

/// Projection weights of one attention sublayer. Keys and values may be
/// replaced by an external source (cross-attention); queries never are.
struct AttentionParams {
  Parameter w_q, w_k, w_v, w_o;
  std::size_t heads = 1;

  std::size_t dim() const { return w_q.value.rows(); }
  std::size_t head_dim() const { return dim() / heads; }

  void validate() const {
    const std::size_t d = dim();
    for (const Parameter* p : {&w_q, &w_k, &w_v, &w_o})
      if (p->value.rank() != 2 || p->value.rows() != d || p->value.cols() != d)
        throw DimensionError("attention weight '" + p->name + "' must be " + std::to_string(d) + "x" +
                             std::to_string(d) + ", got " + shape_str(p->value.shape()));
    if (heads == 0 || d % heads != 0)
      throw DimensionError("width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
};

/// Keys and values supplied from outside the attending model, rows aligned with the queries.
struct KeyValue {
  Tensor keys;
  Tensor values;
};

struct QKV {
  Var q, k, v;
};

inline QKV project_qkv(Var x, const AttentionParams& p) {
  Tape& t = *x.tape;
  if (x.value().rank() != 2 || x.value().cols() != p.dim())
    throw DimensionError("project_qkv: input " + shape_str(x.shape()) + " for width " + std::to_string(p.dim()));
  return {ops::matmul(x, t.param(p.w_q)), ops::matmul(x, t.param(p.w_k)), ops::matmul(x, t.param(p.w_v))};
}

namespace kernels {

/// Attention weights softmax(q_s k_s^T * scale) for one (sequence, head) block.
inline Tensor attention_probs(const Tensor& q, const Tensor& k, std::size_t q_row0, std::size_t k_row0,
                              std::size_t q_len, std::size_t kv_len, std::size_t col0, std::size_t width,
                              double scale) {
  Tensor s({q_len, kv_len});
  const std::size_t d = q.cols();
  for (std::size_t i = 0; i < q_len; ++i) {
    const double* qi = q.data() + (q_row0 + i) * d + col0;
    for (std::size_t j = 0; j < kv_len; ++j) {
      const double* kj = k.data() + (k_row0 + j) * d + col0;
      double acc = 0.0;
      for (std::size_t c = 0; c < width; ++c) acc += qi[c] * kj[c];
      s(i, j) = acc * scale;
    }
  }
  return softmax_rows(s);
}

}  // namespace kernels

namespace ops {

/**
 * Scaled dot-product attention over independent sequences and heads.
 *
 * Rows of q are grouped into sequences of q_len, rows of k/v into sequences
 * of kv_len; columns are split into `heads` equal blocks. Each block computes
 * softmax(q k^T / sqrt(d_head)) v and the results are laid out like q.
 */
inline Var attention(Var q, Var k, Var v, std::size_t q_len, std::size_t kv_len, std::size_t heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2)
    throw DimensionError("attention: operands must be matrices");
  if (qv.cols() != kv.cols())
    throw DimensionError("attention: query width " + shape_str(qv.shape()) + " vs key width " + shape_str(kv.shape()));
  if (kv.shape() != vv.shape())
    throw DimensionError("attention: keys " + shape_str(kv.shape()) + " vs values " + shape_str(vv.shape()));
  if (q_len == 0 || kv_len == 0 || qv.rows() % q_len != 0 || kv.rows() % kv_len != 0 ||
      qv.rows() / q_len != kv.rows() / kv_len)
    throw DimensionError("attention: rows do not split into matching sequences");
  const std::size_t d = qv.cols();
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t seqs = qv.rows() / q_len;
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out({qv.rows(), d});
  std::vector<Tensor> probs;
  probs.reserve(seqs * heads);
  for (std::size_t s = 0; s < seqs; ++s)
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor p = kernels::attention_probs(qv, kv, s * q_len, s * kv_len, q_len, kv_len, h * dh, dh, scale);
      for (std::size_t i = 0; i < q_len; ++i) {
        double* o = out.data() + (s * q_len + i) * d + h * dh;
        for (std::size_t j = 0; j < kv_len; ++j) {
          const double w = p(i, j);
          const double* vj = vv.data() + (s * kv_len + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) o[c] += w * vj[c];
        }
      }
      probs.push_back(std::move(p));
    }

  return q.tape->record(
      "attention", std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), seqs, heads, q_len, kv_len, d, dh, scale](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        Tensor* gq = t.needs_grad(q) ? &t.grad(q) : nullptr;
        Tensor* gk = t.needs_grad(k) ? &t.grad(k) : nullptr;
        Tensor* gv = t.needs_grad(v) ? &t.grad(v) : nullptr;
        Tensor dp({q_len, kv_len});
        for (std::size_t s = 0; s < seqs; ++s)
          for (std::size_t h = 0; h < heads; ++h) {
            const Tensor& p = probs[s * heads + h];
            const std::size_t qr = s * q_len, kr = s * kv_len, c0 = h * dh;
            for (std::size_t i = 0; i < q_len; ++i) {
              const double* gi = g.data() + (qr + i) * d + c0;
              for (std::size_t j = 0; j < kv_len; ++j) {
                const double* vj = vv.data() + (kr + j) * d + c0;
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                dp(i, j) = acc;
                if (gv) {
                  double* gvj = gv->data() + (kr + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += p(i, j) * gi[c];
                }
              }
            }
            if (!gq && !gk) continue;
            for (std::size_t i = 0; i < q_len; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < kv_len; ++j) dot += p(i, j) * dp(i, j);
              for (std::size_t j = 0; j < kv_len; ++j) {
                const double ds = p(i, j) * (dp(i, j) - dot) * scale;
                if (gq) {
                  double* gqi = gq->data() + (qr + i) * d + c0;
                  const double* kj = kv.data() + (kr + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk->data() + (kr + j) * d + c0;
                  const double* qi = qv.data() + (qr + i) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
      });
}

/// Rows of sequence s come from `ext` when use_ext[s] is set, otherwise from `self`.
inline Var splice_sequences(Var self, Var ext, std::size_t seq_len, std::vector<std::uint8_t> use_ext) {
  const Tensor& sv = self.value();
  const Tensor& ev = ext.value();
  if (sv.shape() != ev.shape())
    throw DimensionError("splice_sequences: " + shape_str(sv.shape()) + " vs " + shape_str(ev.shape()));
  if (seq_len == 0 || sv.rows() != seq_len * use_ext.size())
    throw DimensionError("splice_sequences: mask length does not match sequence count");
  const std::size_t block = seq_len * sv.cols();
  Tensor out(sv.shape());
  for (std::size_t s = 0; s < use_ext.size(); ++s) {
    const Tensor& src = use_ext[s] ? ev : sv;
    std::copy(src.data() + s * block, src.data() + (s + 1) * block, out.data() + s * block);
  }
  return self.tape->record("splice_sequences", std::move(out), {self, ext},
                           [self, ext, block, use_ext = std::move(use_ext)](Tape& t, const Tensor& g) {
                             for (std::size_t s = 0; s < use_ext.size(); ++s) {
                               const Var dst = use_ext[s] ? ext : self;
                               if (!t.needs_grad(dst)) continue;
                               double* gd = t.grad(dst).data() + s * block;
                               for (std::size_t i = 0; i < block; ++i) gd[i] += g[s * block + i];
                             }
                           });
}

}  // namespace ops

/// Single-head attention of one sequence: Softmax(Q K^T / sqrt(d)) V.
inline Var scaled_dot_attention(Var q, Var k, Var v) {
  if (q.value().rank() != 2 || k.value().rank() != 2) throw DimensionError("scaled_dot_attention: operands must be matrices");
  return ops::attention(q, k, v, q.value().rows(), k.value().rows(), 1);
}

/// Projections observed while evaluating an attention sublayer.
struct AttentionTaps {
  Var q, k, v;
};

/**
 * Multi-head attention over a batch of sequences stacked row-wise.
 *
 * Queries always come from `x`. Without `external`, keys and values come
 * from `x` too (self-attention). With `external` and an empty `use_external`,
 * every sequence attends to the external keys/values (cross-attention); a
 * non-empty `use_external` selects cross-attention per sequence.
 */
inline Var multi_head_attention(Var x, const AttentionParams& p, std::size_t seq_len,
                                const KeyValue* external = nullptr,
                                std::span<const std::uint8_t> use_external = {},
                                AttentionTaps* taps = nullptr) {
  Tape& t = *x.tape;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != p.dim())
    throw DimensionError("multi_head_attention: input " + shape_str(xv.shape()) + " for width " +
                         std::to_string(p.dim()));
  if (seq_len == 0 || xv.rows() % seq_len != 0)
    throw DimensionError("multi_head_attention: " + std::to_string(xv.rows()) + " rows do not split into sequences of " +
                         std::to_string(seq_len));
  const std::size_t seqs = xv.rows() / seq_len;

  Var q = ops::matmul(x, t.param(p.w_q));
  Var k, v;
  if (!external) {
    k = ops::matmul(x, t.param(p.w_k));
    v = ops::matmul(x, t.param(p.w_v));
  } else {
    if (external->keys.shape() != xv.shape() || external->values.shape() != xv.shape())
      throw DimensionError("multi_head_attention: external keys " + shape_str(external->keys.shape()) + " / values " +
                           shape_str(external->values.shape()) + " for input " + shape_str(xv.shape()));
    Var ek = t.constant_ref(external->keys);
    Var ev = t.constant_ref(external->values);
    if (use_external.empty()) {
      k = ek;
      v = ev;
    } else {
      if (use_external.size() != seqs)
        throw DimensionError("multi_head_attention: " + std::to_string(use_external.size()) + " routing flags for " +
                             std::to_string(seqs) + " sequences");
      std::vector<std::uint8_t> mask(use_external.begin(), use_external.end());
      k = ops::splice_sequences(ops::matmul(x, t.param(p.w_k)), ek, seq_len, mask);
      v = ops::splice_sequences(ops::matmul(x, t.param(p.w_v)), ev, seq_len, std::move(mask));
    }
  }
  if (taps) *taps = {q, k, v};
  Var heads_out = ops::attention(q, k, v, seq_len, seq_len, p.heads);
  return ops::matmul(heads_out, t.param(p.w_o));
}

}  // namespace stochca
