#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maskanneal/autodiff.hpp"
#include "maskanneal/importance.hpp"
#include "maskanneal/mask.hpp"
#include "maskanneal/pattern.hpp"
#include "maskanneal/rng.hpp"

namespace maskanneal {

using ad::TapeD;
using ad::TensorD;

/// Fixed random projection P (orthonormal rows) with a learnable low-rank
/// factor B, adding X P^T B^T to a masked layer's output to recover capacity
/// lost to pruning. B starts at zero so the branch is an exact no-op.
struct SlorbBranch {
  int rank = 0;
  std::uint64_t p_seed = 0;
  TensorD p;  // [r x C], constant
  TensorD b;  // [D x r], learnable

  static Mat orthonormal_rows(int rank, std::size_t cols, std::uint64_t seed) {
    RngStream rng(seed, "slorb-p");
    Mat p(std::size_t(rank), cols);
    for (int r = 0; r < rank; ++r) {
      for (std::size_t c = 0; c < cols; ++c) p(std::size_t(r), c) = rng.normal();
      // Gram-Schmidt against earlier rows
      for (int q = 0; q < r; ++q) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += p(std::size_t(r), c) * p(std::size_t(q), c);
        for (std::size_t c = 0; c < cols; ++c) p(std::size_t(r), c) -= dot * p(std::size_t(q), c);
      }
      double norm = 0.0;
      for (std::size_t c = 0; c < cols; ++c) norm += p(std::size_t(r), c) * p(std::size_t(r), c);
      norm = std::sqrt(norm);
      require(norm > 1e-12, "slorb init: degenerate projection row");
      for (std::size_t c = 0; c < cols; ++c) p(std::size_t(r), c) /= norm;
    }
    return p;
  }

  static SlorbBranch init(std::size_t out_dim, std::size_t in_dim, int rank,
                          std::uint64_t seed) {
    require(rank >= 1 && std::size_t(rank) < std::min(out_dim, in_dim),
            "slorb rank must satisfy 1 <= r < min(D, C)");
    SlorbBranch s;
    s.rank = rank;
    s.p_seed = seed;
    s.p = TensorD::constant(orthonormal_rows(rank, in_dim, seed));
    s.b = TensorD::param(Mat(out_dim, std::size_t(rank), 0.0));
    return s;
  }
};

/// Linear layer y = x (m_eff .* W)^T + x P^T B^T + bias with a soft mask on
/// W. The mask never receives autograd gradients; with STE enabled the
/// weight gradient skips the mask factor.
struct MaskedLinear {
  std::string name;
  TensorD w;     // [D x C]
  TensorD bias;  // [1 x D] or undefined
  SoftMask mask;
  HessianDiagState hess;
  std::optional<SlorbBranch> slorb;
  bool ste = true;
  bool mask_enabled = true;

  std::size_t out_dim() const { return w.rows(); }
  std::size_t in_dim() const { return w.cols(); }

  const Mat& effective_mask_cached() const {
    if (cache_version_ != mask.version || cache_x_ != mask.hardening_x) {
      m_eff_cache_ = effective_mask(mask);
      cache_version_ = mask.version;
      cache_x_ = mask.hardening_x;
    }
    return m_eff_cache_;
  }

  TensorD forward(TapeD& t, const TensorD& x) const {
    TensorD y;
    if (mask_enabled) {
      const Mat& me = effective_mask_cached();
      TensorD wm = ste ? t.ste_mask(w, me) : t.const_mul(w, me);
      y = t.matmul_nt(x, wm);
    } else {
      y = t.matmul_nt(x, w);
    }
    if (slorb) y = t.add(y, t.matmul_nt(t.matmul_nt(x, slorb->p), slorb->b));
    if (bias.defined()) y = t.add(y, t.bcast_row(bias, x.rows()));
    return y;
  }

 private:
  mutable Mat m_eff_cache_;
  mutable long cache_version_ = -1;
  mutable double cache_x_ = -1.0;
};

struct MaskDefaults {
  double ema_alpha = 0.15;
  double eta_pen = 1.0;
  double hard_threshold = 0.5;
  double hess_decay = 0.9;
  double hess_epsilon = 1e-8;
};

inline MaskedLinear make_masked_linear(std::string name, std::size_t out_dim, std::size_t in_dim,
                                       const SparsityPattern& pattern, bool with_bias,
                                       bool with_slorb, int slorb_rank_divisor,
                                       const MaskDefaults& md, RngStream& init_rng,
                                       std::uint64_t slorb_seed, double weight_scale) {
  pattern.check_shape(out_dim, in_dim);
  MaskedLinear l;
  l.name = std::move(name);
  Mat w(out_dim, in_dim);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = weight_scale * init_rng.normal();
  l.w = TensorD::param(w);
  if (with_bias) l.bias = TensorD::param(Mat(1, out_dim, 0.0));
  l.mask = SoftMask(out_dim, in_dim, pattern);
  l.mask.ema_alpha = md.ema_alpha;
  l.mask.pen_step = md.eta_pen;
  l.mask.hard_threshold = md.hard_threshold;
  l.hess = HessianDiagState(out_dim, in_dim, md.hess_decay, md.hess_epsilon);
  if (with_slorb) {
    const int rank = std::max(1, int(in_dim) / slorb_rank_divisor);
    l.slorb = SlorbBranch::init(out_dim, in_dim, rank, slorb_seed);
  }
  return l;
}

// ---------------------------------------------------------------------------
// MLP student (synthetic classification task)
// ---------------------------------------------------------------------------

struct MlpConfig {
  std::vector<long> dims = {784, 256, 256, 10};  // hidden layers masked, head dense
};

struct MlpModel {
  MlpConfig cfg;
  std::vector<MaskedLinear> hidden;
  TensorD head_w, head_b;

  TensorD forward(TapeD& t, const TensorD& x) const {
    TensorD h = x;
    for (const auto& layer : hidden) h = t.tanh(layer.forward(t, h));
    return t.add(t.matmul_nt(h, head_w), t.bcast_row(head_b, h.rows()));
  }

  std::vector<MaskedLinear*> masked_layers() {
    std::vector<MaskedLinear*> out;
    for (auto& l : hidden) out.push_back(&l);
    return out;
  }

  void visit_params(const std::function<void(const std::string&, TensorD&)>& fn) {
    for (auto& l : hidden) {
      fn(l.name + ".w", l.w);
      if (l.bias.defined()) fn(l.name + ".bias", l.bias);
      if (l.slorb) fn(l.name + ".slorb_b", l.slorb->b);
    }
    fn("head.w", head_w);
    fn("head.bias", head_b);
  }

  std::vector<TensorD> parameters() {
    std::vector<TensorD> out;
    visit_params([&](const std::string&, TensorD& p) { out.push_back(p); });
    return out;
  }

  void set_dense_mode() {
    for (auto& l : hidden) l.mask_enabled = false;
  }
  void freeze_all() {
    visit_params([](const std::string&, TensorD& p) { p.d_->requires_grad = p.d_->needs_grad = false; });
  }
};

inline MlpModel build_mlp_model(const MlpConfig& cfg, const SparsityPattern& pattern,
                                bool with_slorb, int slorb_rank_divisor, const MaskDefaults& md,
                                RngStream& init_rng, std::uint64_t slorb_seed_base) {
  require(cfg.dims.size() >= 2, "mlp: need at least input and output dims");
  MlpModel m;
  m.cfg = cfg;
  for (std::size_t i = 0; i + 2 < cfg.dims.size(); ++i) {
    const auto in = std::size_t(cfg.dims[i]), out = std::size_t(cfg.dims[i + 1]);
    m.hidden.push_back(make_masked_linear(
        "fc" + std::to_string(i), out, in, pattern, true, with_slorb, slorb_rank_divisor, md,
        init_rng, slorb_seed_base + i, 1.0 / std::sqrt(double(in))));
  }
  const auto last_hidden = std::size_t(cfg.dims[cfg.dims.size() - 2]);
  const auto classes = std::size_t(cfg.dims.back());
  Mat hw(classes, last_hidden);
  for (std::size_t i = 0; i < hw.size(); ++i)
    hw[i] = init_rng.normal() / std::sqrt(double(last_hidden));
  m.head_w = TensorD::param(hw);
  m.head_b = TensorD::param(Mat(1, classes, 0.0));
  return m;
}

// ---------------------------------------------------------------------------
// Decoder-only transformer student (toy LM)
// ---------------------------------------------------------------------------

struct LmConfig {
  long dim = 128;
  long layers = 4;
  long heads = 4;
  long mlp_ratio = 4;
  long vocab = 32;
  long seq_len = 32;
};

struct TransformerBlock {
  TensorD ln1_g, ln1_b, ln2_g, ln2_b;
  MaskedLinear wq, wk, wv, wo;  // [d x d], no bias
  MaskedLinear w_in;            // [rd x d]
  MaskedLinear w_out;           // [d x rd]
};

struct LmModel {
  LmConfig cfg;
  TensorD embed;  // [V x d]
  std::vector<TransformerBlock> blocks;
  TensorD lnf_g, lnf_b;
  TensorD head;  // [V x d]
  TensorD causal_bias;  // [S x S] constant, 0 below diagonal, -1e9 above

  /// Logits [S x V] for one token sequence.
  TensorD forward(TapeD& t, const std::vector<int>& ids) const {
    const std::size_t S = ids.size();
    const std::size_t d = std::size_t(cfg.dim);
    const std::size_t dh = d / std::size_t(cfg.heads);
    require(S <= std::size_t(cfg.seq_len), "sequence longer than model context");
    TensorD x = t.embedding(embed, ids);
    for (const auto& blk : blocks) {
      TensorD a_in = ad::layer_norm(t, x, blk.ln1_g, blk.ln1_b);
      TensorD q = blk.wq.forward(t, a_in);
      TensorD k = blk.wk.forward(t, a_in);
      TensorD v = blk.wv.forward(t, a_in);
      TensorD attn_out;
      for (long h = 0; h < cfg.heads; ++h) {
        const std::size_t c0 = std::size_t(h) * dh, c1 = c0 + dh;
        TensorD qh = t.slice_cols(q, c0, c1);
        TensorD kh = t.slice_cols(k, c0, c1);
        TensorD vh = t.slice_cols(v, c0, c1);
        TensorD scores = t.scale(t.matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
        scores = t.add(scores, slice_bias(t, S));
        TensorD mix = t.matmul(t.softmax_rows(scores), vh);  // [S x dh]
        TensorD placed = t.pad_cols(mix, c0, d);
        attn_out = h == 0 ? placed : t.add(attn_out, placed);
      }
      x = t.add(x, blk.wo.forward(t, attn_out));
      TensorD m_in = ad::layer_norm(t, x, blk.ln2_g, blk.ln2_b);
      x = t.add(x, blk.w_out.forward(t, ad::gelu(t, blk.w_in.forward(t, m_in))));
    }
    TensorD hfin = ad::layer_norm(t, x, lnf_g, lnf_b);
    return t.matmul_nt(hfin, head);
  }

  std::vector<MaskedLinear*> masked_layers() {
    std::vector<MaskedLinear*> out;
    for (auto& b : blocks)
      for (MaskedLinear* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out}) out.push_back(l);
    return out;
  }

  void visit_params(const std::function<void(const std::string&, TensorD&)>& fn) {
    fn("embed", embed);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto& b = blocks[i];
      const std::string pre = "blk" + std::to_string(i) + ".";
      fn(pre + "ln1_g", b.ln1_g);
      fn(pre + "ln1_b", b.ln1_b);
      for (MaskedLinear* l : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_in, &b.w_out}) {
        fn(pre + l->name + ".w", l->w);
        if (l->bias.defined()) fn(pre + l->name + ".bias", l->bias);
        if (l->slorb) fn(pre + l->name + ".slorb_b", l->slorb->b);
      }
      fn(pre + "ln2_g", b.ln2_g);
      fn(pre + "ln2_b", b.ln2_b);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("head", head);
  }

  std::vector<TensorD> parameters() {
    std::vector<TensorD> out;
    visit_params([&](const std::string&, TensorD& p) { out.push_back(p); });
    return out;
  }

  void set_dense_mode() {
    for (auto* l : masked_layers()) l->mask_enabled = false;
  }
  void freeze_all() {
    visit_params([](const std::string&, TensorD& p) { p.d_->requires_grad = p.d_->needs_grad = false; });
  }

 private:
  TensorD slice_bias(TapeD& t, std::size_t S) const {
    if (S == std::size_t(cfg.seq_len)) return causal_bias;
    Mat b(S, S, 0.0);
    for (std::size_t i = 0; i < S; ++i)
      for (std::size_t j = i + 1; j < S; ++j) b(i, j) = -1e9;
    (void)t;
    return TensorD::constant(b);
  }
};

inline LmModel build_lm_model(const LmConfig& cfg, const SparsityPattern& pattern,
                              bool with_slorb, int slorb_rank_divisor, const MaskDefaults& md,
                              RngStream& init_rng, std::uint64_t slorb_seed_base) {
  const std::size_t d = std::size_t(cfg.dim);
  require(cfg.dim % cfg.heads == 0, "model dim must divide evenly into heads");
  LmModel m;
  m.cfg = cfg;

  Mat emb(std::size_t(cfg.vocab), d);
  for (std::size_t i = 0; i < emb.size(); ++i) emb[i] = 0.08 * init_rng.normal();
  m.embed = TensorD::param(emb);

  const double w_scale = 1.0 / std::sqrt(double(d));
  const double resid_scale = w_scale / std::sqrt(2.0 * double(cfg.layers));
  std::uint64_t slorb_seed = slorb_seed_base;
  for (long i = 0; i < cfg.layers; ++i) {
    TransformerBlock b;
    b.ln1_g = TensorD::param(Mat(1, d, 1.0));
    b.ln1_b = TensorD::param(Mat(1, d, 0.0));
    b.ln2_g = TensorD::param(Mat(1, d, 1.0));
    b.ln2_b = TensorD::param(Mat(1, d, 0.0));
    auto mk = [&](const char* nm, std::size_t out, std::size_t in, double scale) {
      return make_masked_linear(nm, out, in, pattern, false, with_slorb, slorb_rank_divisor, md,
                                init_rng, ++slorb_seed, scale);
    };
    b.wq = mk("wq", d, d, w_scale);
    b.wk = mk("wk", d, d, w_scale);
    b.wv = mk("wv", d, d, w_scale);
    b.wo = mk("wo", d, d, resid_scale);
    b.w_in = mk("w_in", d * std::size_t(cfg.mlp_ratio), d, w_scale);
    b.w_out = mk("w_out", d, d * std::size_t(cfg.mlp_ratio),
                 1.0 / std::sqrt(double(d) * double(cfg.mlp_ratio) * 2.0 * double(cfg.layers)));
    m.blocks.push_back(std::move(b));
  }
  m.lnf_g = TensorD::param(Mat(1, d, 1.0));
  m.lnf_b = TensorD::param(Mat(1, d, 0.0));
  Mat head(std::size_t(cfg.vocab), d);
  for (std::size_t i = 0; i < head.size(); ++i) head[i] = init_rng.normal() / std::sqrt(double(d));
  m.head = TensorD::param(head);

  Mat bias(std::size_t(cfg.seq_len), std::size_t(cfg.seq_len), 0.0);
  for (std::size_t i = 0; i < bias.rows(); ++i)
    for (std::size_t j = i + 1; j < bias.cols(); ++j) bias(i, j) = -1e9;
  m.causal_bias = TensorD::constant(bias);
  return m;
}

/// Frozen dense copy for distillation: same architecture, current weight
/// values, masks bypassed, no gradients. The struct copy shares tensor
/// handles, so every parameter is re-pointed at a constant deep copy.
template <class Model>
Model clone_as_teacher(Model teacher) {
  teacher.visit_params([&](const std::string&, TensorD& p) { p = TensorD::constant(p.to_mat()); });
  teacher.set_dense_mode();
  return teacher;
}

}  // namespace maskanneal
