#pragma once

// Forward pass, manual backprop, and the Adam step for ModelT. Templated on
// the scalar so the float production path and the double gradient-check path
// share one implementation.
//
// Activations live in row-major matrices (one row per token) so the per-token
// operations (layer norm, softmax rows, bias broadcasts) touch contiguous
// memory; parameter matrices stay column-major as stored in the model.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "cakelab/fact_world.hpp"
#include "cakelab/model.hpp"

namespace cakelab {

constexpr double kLnEps = 1e-5;

template <typename S>
struct HiddenTraceT {
  // states[0] = post-embedding; states[i] = output of block i-1 (the residual
  // fed to block i, or to the final norm for i == n_layers).
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>> states;  // T x d each
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> logits;               // T x V
};

using HiddenTrace = HiddenTraceT<float>;

// WISE-style routed side weight for one layer's FFN down-projection.
// Per position: if ||(w2_prime - w2) g|| > eps the row uses w2_prime.
template <typename S>
struct WiseRouteT {
  int layer = 0;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> w2_prime;  // (d_model, d_ffn)
  double eps = 0.0;
  bool force_on = false;  // training path: route every position through w2_prime
};

template <typename S>
struct EvalOverridesT {
  // Replace trace slot (layer, pos) before it feeds the next block.
  struct ResidualSub {
    int layer;
    int pos;
    Eigen::Matrix<S, Eigen::Dynamic, 1> value;
  };
  std::vector<ResidualSub> residual_subs;
  const WiseRouteT<S>* wise = nullptr;
  // Capture the post-activation FFN hidden (T x d_ffn) at this layer.
  int capture_ffn_layer = -1;
};

template <typename S>
struct EvalResultT {
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> logits;  // T x V
  std::optional<HiddenTraceT<S>> trace;
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> ffn_hidden;  // when requested
};

namespace detail {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
void layer_norm(const MatR<S>& x, const VecX<S>& g, const VecX<S>& b, MatR<S>& xhat,
                VecX<S>& istd, MatR<S>& out) {
  const int n = int(x.rows()), d = int(x.cols());
  xhat.resize(n, d);
  istd.resize(n);
  out.resize(n, d);
  for (int i = 0; i < n; ++i) {
    S mu = x.row(i).mean();
    S var = (x.row(i).array() - mu).square().sum() / S(d);
    S is = S(1) / std::sqrt(var + S(kLnEps));
    istd[i] = is;
    xhat.row(i) = (x.row(i).array() - mu) * is;
    out.row(i).array() = xhat.row(i).array() * g.transpose().array() + b.transpose().array();
  }
}

// dX for y = LN(x) given dY; accumulates dg/db.
template <typename S>
void layer_norm_backward(const MatR<S>& dy, const MatR<S>& xhat, const VecX<S>& istd,
                         const VecX<S>& g, MatR<S>& dx, VecX<S>& dg, VecX<S>& db) {
  const int n = int(dy.rows()), d = int(dy.cols());
  dx.resize(n, d);
  for (int i = 0; i < n; ++i) {
    Eigen::Array<S, 1, Eigen::Dynamic> dxhat =
        dy.row(i).array() * g.transpose().array();
    S m1 = dxhat.mean();
    S m2 = (dxhat * xhat.row(i).array()).mean();
    dx.row(i) = (istd[i] * (dxhat - m1 - xhat.row(i).array() * m2)).matrix();
    dg.array() += (dy.row(i).array() * xhat.row(i).array()).transpose();
    db += dy.row(i).transpose();
  }
}

template <typename S>
S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865475)));
}

template <typename S>
S gelu_grad(S x) {
  S phi = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
  S Phi = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865475)));
  return Phi + x * phi;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation forward: one sequence, full logits, optional trace / patches.
// ---------------------------------------------------------------------------

template <typename S>
EvalResultT<S> forward_eval(const ModelT<S>& m, std::span<const int> tokens, bool capture,
                            const EvalOverridesT<S>* ov = nullptr) {
  using Mat = detail::MatR<S>;
  using Vec = detail::VecX<S>;
  const auto& cfg = m.cfg;
  const int T = int(tokens.size());
  if (T < 1 || T > cfg.max_seq) throw std::invalid_argument("forward_eval: bad length");
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw std::invalid_argument("forward_eval: token out of vocabulary");

  const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh;
  EvalResultT<S> res;
  HiddenTraceT<S> trace;

  Mat x(T, d);
  for (int i = 0; i < T; ++i) x.row(i) = m.tok_emb.row(tokens[i]) + m.pos_emb.row(i);

  auto apply_subs = [&](int slot, Mat& resid) {
    if (!ov) return;
    for (const auto& s : ov->residual_subs)
      if (s.layer == slot) {
        if (s.pos < 0 || s.pos >= T) throw std::invalid_argument("patch pos out of range");
        resid.row(s.pos) = s.value.transpose();
      }
  };

  apply_subs(0, x);
  trace.states.push_back(x);

  Mat xhat, out, ctx(T, d);
  Vec istd;
  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& l = m.layers[li];
    detail::layer_norm<S>(x, l.ln1_g, l.ln1_b, xhat, istd, out);
    Mat q = out * l.wq.transpose();
    q.rowwise() += l.bq.transpose();
    Mat k = out * l.wk.transpose();
    k.rowwise() += l.bk.transpose();
    Mat v = out * l.wv.transpose();
    v.rowwise() += l.bv.transpose();
    const S scale = S(1) / std::sqrt(S(dh));
    for (int h = 0; h < nh; ++h) {
      auto qh = q.middleCols(h * dh, dh);
      auto kh = k.middleCols(h * dh, dh);
      auto vh = v.middleCols(h * dh, dh);
      Mat att = qh * kh.transpose() * scale;
      for (int i = 0; i < T; ++i) {
        // causal: position i attends to <= i
        S mx = att.row(i).head(i + 1).maxCoeff();
        Eigen::Array<S, 1, Eigen::Dynamic> e =
            (att.row(i).head(i + 1).array() - mx).exp();
        e /= e.sum();
        ctx.block(i, h * dh, 1, dh) = e.matrix() * vh.topRows(i + 1);
      }
    }
    Mat attn_out = ctx * l.wo.transpose();
    attn_out.rowwise() += l.bo.transpose();
    x += attn_out;

    detail::layer_norm<S>(x, l.ln2_g, l.ln2_b, xhat, istd, out);
    Mat hpre = out * l.w1.transpose();
    hpre.rowwise() += l.b1.transpose();
    Mat hact = hpre.unaryExpr([](S a) { return detail::gelu(a); });
    if (ov && ov->capture_ffn_layer == li) res.ffn_hidden = hact;
    Mat fout = hact * l.w2.transpose();
    if (ov && ov->wise && ov->wise->layer == li) {
      const auto& wr = *ov->wise;
      detail::MatX<S> delta = wr.w2_prime - l.w2;
      for (int i = 0; i < T; ++i) {
        Vec resp = delta * hact.row(i).transpose();
        if (wr.force_on || double(resp.norm()) > wr.eps)
          fout.row(i) = (wr.w2_prime * hact.row(i).transpose()).transpose();
      }
    }
    fout.rowwise() += l.b2.transpose();
    x += fout;
    apply_subs(li + 1, x);
    trace.states.push_back(x);
  }

  detail::layer_norm<S>(x, m.lnf_g, m.lnf_b, xhat, istd, out);
  res.logits = out * m.unembed.transpose();
  if (capture) {
    trace.logits = res.logits;
    res.trace = std::move(trace);
  }
  return res;
}

// Argmax of final-position logits; ties break to the lowest token id.
template <typename S>
int argmax_lowest(const Eigen::Matrix<S, Eigen::Dynamic, 1>& logits) {
  int best = 0;
  for (int i = 1; i < int(logits.size()); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

template <typename S>
int greedy_decode(const ModelT<S>& m, std::span<const int> tokens,
                  const EvalOverridesT<S>* ov = nullptr) {
  auto res = forward_eval(m, tokens, false, ov);
  Eigen::Matrix<S, Eigen::Dynamic, 1> last = res.logits.row(res.logits.rows() - 1);
  return argmax_lowest<S>(last);
}

// ---------------------------------------------------------------------------
// Training path: batched forward + backward over concatenated sequences.
// ---------------------------------------------------------------------------

// Replace the pre-bias FFN down-projection product (w2 * hidden) for one
// sequence position. Used by the rank-one editor's target-value solve.
template <typename S>
struct FfnOutOverrideT {
  int layer = 0;
  int seq = 0;  // batch index
  int pos = 0;
  Eigen::Matrix<S, Eigen::Dynamic, 1> value;
  Eigen::Matrix<S, Eigen::Dynamic, 1> grad;  // filled by backward
};

template <typename S>
struct BatchStatsT {
  double loss = 0.0;     // mean cross-entropy over supervised positions
  int n_targets = 0;
  // softmax probability of the gold token, per sequence
  std::vector<double> gold_prob;
};

// Computes mean cross-entropy at each sequence's supervised position and, when
// grads != nullptr, accumulates parameter gradients of that mean into *grads.
template <typename S>
BatchStatsT<S> forward_backward(const ModelT<S>& m,
                                const std::vector<const TokenSequence*>& batch,
                                ModelT<S>* grads,
                                FfnOutOverrideT<S>* ffn_override = nullptr) {
  using Mat = detail::MatR<S>;
  using Vec = detail::VecX<S>;
  const auto& cfg = m.cfg;
  const int d = cfg.d_model, nh = cfg.n_heads, dh = d / nh, dff = cfg.d_ffn;
  const int B = int(batch.size());
  if (B == 0) throw std::invalid_argument("forward_backward: empty batch");

  std::vector<int> offset(B + 1, 0);
  for (int b = 0; b < B; ++b) {
    const auto& s = *batch[b];
    const int T = int(s.tokens.size());
    if (T < 1 || T > cfg.max_seq) throw std::invalid_argument("sequence too long");
    if (s.t2 != T - 1) throw std::invalid_argument("t2 must be the final index");
    if (s.gold < 0 || s.gold >= cfg.vocab_size)
      throw std::invalid_argument("gold token out of vocabulary");
    for (int t : s.tokens)
      if (t < 0 || t >= cfg.vocab_size)
        throw std::invalid_argument("token out of vocabulary");
    offset[b + 1] = offset[b] + T;
  }
  const int N = offset[B];

  struct LayerCache {
    Mat x_in, xhat1, q, k, v, ctx, x_mid, xhat2, hpre, hact;
    Vec istd1, istd2;
    std::vector<Mat> probs;  // per (seq, head): T x T lower-triangular softmax
  };
  std::vector<LayerCache> cache(cfg.n_layers);

  Mat x(N, d);
  for (int b = 0; b < B; ++b)
    for (int i = 0; i < offset[b + 1] - offset[b]; ++i)
      x.row(offset[b] + i) = m.tok_emb.row(batch[b]->tokens[i]) + m.pos_emb.row(i);

  Mat out;
  const S scale = S(1) / std::sqrt(S(dh));
  int override_row = -1;
  if (ffn_override)
    override_row = offset[ffn_override->seq] + ffn_override->pos;

  for (int li = 0; li < cfg.n_layers; ++li) {
    const auto& l = m.layers[li];
    auto& c = cache[li];
    c.x_in = x;
    detail::layer_norm<S>(x, l.ln1_g, l.ln1_b, c.xhat1, c.istd1, out);
    c.q.noalias() = out * l.wq.transpose();
    c.q.rowwise() += l.bq.transpose();
    c.k.noalias() = out * l.wk.transpose();
    c.k.rowwise() += l.bk.transpose();
    c.v.noalias() = out * l.wv.transpose();
    c.v.rowwise() += l.bv.transpose();
    c.ctx.resize(N, d);
    c.probs.assign(size_t(B) * nh, {});
    for (int b = 0; b < B; ++b) {
      const int o = offset[b], T = offset[b + 1] - o;
      for (int h = 0; h < nh; ++h) {
        auto qh = c.q.block(o, h * dh, T, dh);
        auto kh = c.k.block(o, h * dh, T, dh);
        auto vh = c.v.block(o, h * dh, T, dh);
        Mat att = (qh * kh.transpose()) * scale;
        Mat& p = c.probs[size_t(b) * nh + h];
        p.setZero(T, T);
        for (int i = 0; i < T; ++i) {
          S mx = att.row(i).head(i + 1).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> e =
              (att.row(i).head(i + 1).array() - mx).exp();
          p.row(i).head(i + 1) = (e / e.sum()).matrix();
        }
        c.ctx.block(o, h * dh, T, dh).noalias() = p * vh;
      }
    }
    x.noalias() += c.ctx * l.wo.transpose();
    x.rowwise() += l.bo.transpose();
    c.x_mid = x;
    detail::layer_norm<S>(x, l.ln2_g, l.ln2_b, c.xhat2, c.istd2, out);
    c.hpre.noalias() = out * l.w1.transpose();
    c.hpre.rowwise() += l.b1.transpose();
    c.hact = c.hpre.unaryExpr([](S a) { return detail::gelu(a); });
    Mat fout = c.hact * l.w2.transpose();
    if (ffn_override && ffn_override->layer == li)
      fout.row(override_row) = ffn_override->value.transpose();
    fout.rowwise() += l.b2.transpose();
    x += fout;
  }

  Mat xhatf;
  Vec istdf;
  detail::layer_norm<S>(x, m.lnf_g, m.lnf_b, xhatf, istdf, out);

  // Logits only at supervised rows.
  BatchStatsT<S> stats;
  stats.n_targets = B;
  stats.gold_prob.resize(B);
  Mat y_rows(B, d);
  for (int b = 0; b < B; ++b) y_rows.row(b) = out.row(offset[b + 1] - 1);
  Mat logits = y_rows * m.unembed.transpose();  // B x V
  Mat dlogits(B, cfg.vocab_size);
  double loss_sum = 0.0;
  for (int b = 0; b < B; ++b) {
    S mx = logits.row(b).maxCoeff();
    Eigen::Array<S, 1, Eigen::Dynamic> e = (logits.row(b).array() - mx).exp();
    S z = e.sum();
    double p = double(e[batch[b]->gold] / z);
    stats.gold_prob[b] = p;
    loss_sum += -std::log(std::max(p, 1e-300));
    dlogits.row(b) = (e / z).matrix();
    dlogits(b, batch[b]->gold) -= S(1);
    dlogits.row(b) *= S(1.0 / B);
  }
  stats.loss = loss_sum / B;
  if (!std::isfinite(stats.loss))
    throw std::runtime_error("forward_backward: non-finite loss");
  if (!grads && !ffn_override) return stats;

  ModelT<S> local;
  ModelT<S>* g = grads;
  if (!g) {
    local.resize(cfg);
    g = &local;
  }

  // ---- backward ----
  Mat dy_rows = dlogits * m.unembed;  // B x d
  g->unembed.noalias() += dlogits.transpose() * y_rows;
  Mat dout = Mat::Zero(N, d);
  for (int b = 0; b < B; ++b) dout.row(offset[b + 1] - 1) = dy_rows.row(b);
  Mat dx;
  detail::layer_norm_backward<S>(dout, xhatf, istdf, m.lnf_g, dx, g->lnf_g, g->lnf_b);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& l = m.layers[li];
    auto& c = cache[li];
    auto& gl = g->layers[li];

    // FFN
    Mat dfout = dx;  // residual add
    gl.b2 += dfout.colwise().sum().transpose();
    if (ffn_override && ffn_override->layer == li) {
      ffn_override->grad = dfout.row(override_row).transpose();
      dfout.row(override_row).setZero();
    }
    Mat dhact = dfout * l.w2;
    gl.w2.noalias() += dfout.transpose() * c.hact;
    Mat dhpre =
        dhact.array() * c.hpre.unaryExpr([](S a) { return detail::gelu_grad(a); }).array();
    gl.b1 += dhpre.colwise().sum().transpose();
    Mat ln2_out(c.xhat2.rows(), d);
    for (int i = 0; i < int(ln2_out.rows()); ++i)
      ln2_out.row(i).array() =
          c.xhat2.row(i).array() * l.ln2_g.transpose().array() + l.ln2_b.transpose().array();
    gl.w1.noalias() += dhpre.transpose() * ln2_out;
    Mat dln2 = dhpre * l.w1;
    Mat dx_mid;
    detail::layer_norm_backward<S>(dln2, c.xhat2, c.istd2, l.ln2_g, dx_mid, gl.ln2_g,
                                   gl.ln2_b);
    dx_mid += dx;  // residual

    // attention
    Mat dattn = dx_mid;
    gl.bo += dattn.colwise().sum().transpose();
    Mat dctx = dattn * l.wo;
    gl.wo.noalias() += dattn.transpose() * c.ctx;
    Mat dq = Mat::Zero(N, d), dk = Mat::Zero(N, d), dv = Mat::Zero(N, d);
    for (int b = 0; b < B; ++b) {
      const int o = offset[b], T = offset[b + 1] - o;
      for (int h = 0; h < nh; ++h) {
        const Mat& p = c.probs[size_t(b) * nh + h];
        auto qh = c.q.block(o, h * dh, T, dh);
        auto kh = c.k.block(o, h * dh, T, dh);
        auto vh = c.v.block(o, h * dh, T, dh);
        auto dch = dctx.block(o, h * dh, T, dh);
        Mat dp = dch * vh.transpose();
        dv.block(o, h * dh, T, dh).noalias() += p.transpose() * dch;
        Mat datt(T, T);
        datt.setZero();
        for (int i = 0; i < T; ++i) {
          auto pi = p.row(i).head(i + 1).array();
          auto dpi = dp.row(i).head(i + 1).array();
          S dot = (pi * dpi).sum();
          datt.row(i).head(i + 1) = (pi * (dpi - dot)).matrix();
        }
        dq.block(o, h * dh, T, dh).noalias() += datt * kh * scale;
        dk.block(o, h * dh, T, dh).noalias() += datt.transpose() * qh * scale;
      }
    }
    Mat ln1_out(c.xhat1.rows(), d);
    for (int i = 0; i < int(ln1_out.rows()); ++i)
      ln1_out.row(i).array() =
          c.xhat1.row(i).array() * l.ln1_g.transpose().array() + l.ln1_b.transpose().array();
    gl.bq += dq.colwise().sum().transpose();
    gl.bk += dk.colwise().sum().transpose();
    gl.bv += dv.colwise().sum().transpose();
    gl.wq.noalias() += dq.transpose() * ln1_out;
    gl.wk.noalias() += dk.transpose() * ln1_out;
    gl.wv.noalias() += dv.transpose() * ln1_out;
    Mat dln1 = dq * l.wq;
    dln1.noalias() += dk * l.wk;
    dln1.noalias() += dv * l.wv;
    Mat dx_in;
    detail::layer_norm_backward<S>(dln1, c.xhat1, c.istd1, l.ln1_g, dx_in, gl.ln1_g,
                                   gl.ln1_b);
    dx = dx_in + dx_mid;  // residual into previous block
  }

  for (int b = 0; b < B; ++b)
    for (int i = 0; i < offset[b + 1] - offset[b]; ++i) {
      g->tok_emb.row(batch[b]->tokens[i]) += dx.row(offset[b] + i);
      g->pos_emb.row(i) += dx.row(offset[b] + i);
    }
  return stats;
}

// ---------------------------------------------------------------------------
// Adam with bias correction and global-norm clipping.
// ---------------------------------------------------------------------------

template <typename S>
class AdamOpt {
 public:
  struct Param {
    S* value;
    const S* grad;
    size_t n;
  };

  void init(std::vector<Param> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (const auto& p : params_) {
      m_.emplace_back(p.n, S(0));
      v_.emplace_back(p.n, S(0));
    }
    t_ = 0;
  }

  // Returns the pre-clip global gradient norm.
  double step(double lr, double beta1, double beta2, double eps, double clip_norm) {
    using Arr = Eigen::Array<S, Eigen::Dynamic, 1>;
    double sq = 0.0;
    for (const auto& p : params_) {
      Eigen::Map<const Arr> gm(p.grad, Eigen::Index(p.n));
      sq += double(gm.square().sum());
    }
    double norm = std::sqrt(sq);
    double cs = (clip_norm > 0 && norm > clip_norm) ? clip_norm / norm : 1.0;
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, double(t_));
    double bc2 = 1.0 - std::pow(beta2, double(t_));
    const S b1 = S(beta1), b2 = S(beta2), csS = S(cs);
    const S step_scale = S(lr / bc1), vc = S(1.0 / bc2), epsS = S(eps);
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      Eigen::Map<const Arr> gm(p.grad, Eigen::Index(p.n));
      Eigen::Map<Arr> mm(m_[k].data(), Eigen::Index(p.n));
      Eigen::Map<Arr> vm(v_[k].data(), Eigen::Index(p.n));
      Eigen::Map<Arr> pv(p.value, Eigen::Index(p.n));
      mm = b1 * mm + (S(1) - b1) * (gm * csS);
      vm = b2 * vm + (S(1) - b2) * (gm * csS).square();
      pv -= step_scale * mm / ((vm * vc).sqrt() + epsS);
    }
    return norm;
  }

 private:
  std::vector<Param> params_;
  std::vector<std::vector<S>> m_, v_;
  long t_ = 0;
};

}  // namespace cakelab
