#include "hypa/backbone.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace hypa {
namespace {

constexpr double kLnEps = 1e-5;
constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCubic = 0.044715;
constexpr std::uint32_t kBackboneVersion = 1;

struct LnTape {
  Mat xhat;  // R x d
  Vec rstd;  // R
};

// Row-wise layer norm. out = gamma .* (x - mu) / sqrt(var + eps) + beta.
void ln_forward(const Mat& x, const Vec& gamma, const Vec& beta, Mat* out,
                LnTape* tape) {
  const auto d = x.cols();
  Vec mu = x.rowwise().mean();
  Mat c = x.array().colwise() - mu.array();
  Vec var = c.array().square().rowwise().sum() / static_cast<double>(d);
  tape->rstd = (var.array() + kLnEps).rsqrt();
  tape->xhat = c.array().colwise() * tape->rstd.array();
  *out = (tape->xhat.array().rowwise() * gamma.transpose().array()).rowwise() +
         beta.transpose().array();
}

// Reverse rule through layer norm. Optionally accumulates dgamma/dbeta.
Mat ln_backward(const Mat& g, const Vec& gamma, const LnTape& tape,
                Vec* dgamma, Vec* dbeta) {
  const auto d = g.cols();
  if (dgamma != nullptr) {
    dgamma->noalias() += (g.array() * tape.xhat.array()).colwise().sum().matrix().transpose();
    dbeta->noalias() += g.colwise().sum().transpose();
  }
  Mat ghat = g.array().rowwise() * gamma.transpose().array();
  Vec m1 = ghat.rowwise().mean();
  Vec m2 = (ghat.array() * tape.xhat.array()).rowwise().sum() /
           static_cast<double>(d);
  Mat dx = ((ghat.array().colwise() - m1.array()) -
            (tape.xhat.array().colwise() * m2.array()))
               .colwise() *
           tape.rstd.array();
  return dx;
}

// Forward-mode rule: computes the primal out/terms and the tangent jointly.
void ln_jvp(const Mat& x, const Mat& dx, const Vec& gamma, const Vec& beta,
            Mat* out, Mat* dout) {
  const auto d = x.cols();
  Vec mu = x.rowwise().mean();
  Mat c = x.array().colwise() - mu.array();
  Vec var = c.array().square().rowwise().sum() / static_cast<double>(d);
  Vec rstd = (var.array() + kLnEps).rsqrt();
  Mat xhat = c.array().colwise() * rstd.array();
  *out = (xhat.array().rowwise() * gamma.transpose().array()).rowwise() +
         beta.transpose().array();

  Vec dmu = dx.rowwise().mean();
  Mat dc = dx.array().colwise() - dmu.array();
  Vec ds = (xhat.array() * dx.array()).rowwise().sum() /
           static_cast<double>(d);  // tangent of sigma, scaled by rstd
  Mat dxhat = (dc.array() - (xhat.array().colwise() * ds.array())).colwise() *
              rstd.array();
  *dout = dxhat.array().rowwise() * gamma.transpose().array();
}

// tanh-form GELU (the GPT-2 variant), vectorized through exp.
Mat gelu_tanh_inner(const Mat& x) {
  Mat u = kSqrt2OverPi * (x.array() + kGeluCubic * x.array().cube());
  Mat uc = u.array().min(20.0).max(-20.0);
  Mat e = (2.0 * uc.array()).exp();
  return (1.0 - 2.0 / (e.array() + 1.0)).matrix();
}

Mat gelu_forward(const Mat& x) {
  Mat t = gelu_tanh_inner(x);
  return (0.5 * x.array() * (1.0 + t.array())).matrix();
}

Mat gelu_derivative(const Mat& x) {
  Mat t = gelu_tanh_inner(x);
  Mat sech2 = 1.0 - t.array().square().matrix().array();
  Mat du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x.array().square());
  return (0.5 * (1.0 + t.array()) +
          0.5 * x.array() * sech2.array() * du.array())
      .matrix();
}

// Row-wise causal softmax over the leading i+1 entries of row i; the rest of
// each row is zeroed so dense products over the full matrix stay exact.
void causal_softmax_inplace(Mat* scores) {
  const auto s = scores->rows();
  for (Eigen::Index i = 0; i < s; ++i) {
    auto row = scores->row(i).head(i + 1);
    const double mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
    if (i + 1 < s) scores->row(i).tail(s - i - 1).setZero();
  }
}

// d softmax: out_i = p_i .* (g_i - <p_i, g_i>) on the causal support.
// Shared by the forward-mode rule (g = score tangent) and the reverse rule
// (g = prob cotangent).
Mat softmax_pullback(const Mat& probs, const Mat& g) {
  const auto s = probs.rows();
  Mat out = Mat::Zero(s, s);
  for (Eigen::Index i = 0; i < s; ++i) {
    auto p = probs.row(i).head(i + 1);
    auto gi = g.row(i).head(i + 1);
    const double inner = p.dot(gi);
    out.row(i).head(i + 1) = p.array() * (gi.array() - inner);
  }
  return out;
}

Mat fixed_causal_mix(Eigen::Index s) {
  Mat p = Mat::Zero(s, s);
  for (Eigen::Index i = 0; i < s; ++i) {
    p.row(i).head(i + 1).setConstant(1.0 / static_cast<double>(i + 1));
  }
  return p;
}

struct LayerTape {
  LnTape ln1;
  Mat q, k, v;             // R x d
  std::vector<Mat> probs;  // B*H matrices of S x S (standard mode)
  Mat attn_concat;         // R x d (head outputs before the output projection)
  LnTape ln2;
  Mat h1;                  // R x d_ff (pre-activation)
  Mat act;                 // R x d_ff
};

struct EngineTape {
  const FrozenBackbone* bb = nullptr;
  int batch = 0;
  int seq = 0;
  int prompt_len = 0;
  std::vector<LayerTape> layers;
  LnTape lnf;
  Mat xf;  // R x d
  Mat fixed_probs;  // linear-test mode only
  std::vector<ClassReadout> readouts;
};

// Identity layer norm used by kLinearTest.
void ln_identity(const Mat& x, Mat* out) { *out = x; }

void forward_engine(const FrozenBackbone& bb, const Mat& x0, int batch,
                    int seq, int prompt_len, EngineTape* tape) {
  const auto& cfg = bb.config();
  const int heads = cfg.n_heads;
  const int dh = cfg.head_dim();
  const bool linear = bb.mode() == BackboneMode::kLinearTest;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  tape->bb = &bb;
  tape->batch = batch;
  tape->seq = seq;
  tape->prompt_len = prompt_len;
  tape->layers.resize(static_cast<std::size_t>(cfg.n_layers));
  if (linear) tape->fixed_probs = fixed_causal_mix(seq);

  Mat x = x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = bb.layers()[static_cast<std::size_t>(l)];
    auto& lt = tape->layers[static_cast<std::size_t>(l)];

    Mat n1;
    if (linear) {
      ln_identity(x, &n1);
    } else {
      ln_forward(x, w.ln1_gamma, w.ln1_beta, &n1, &lt.ln1);
    }
    lt.q.noalias() = n1 * w.wq;
    lt.k.noalias() = n1 * w.wk;
    lt.v.noalias() = n1 * w.wv;

    lt.attn_concat.resize(x.rows(), x.cols());
    if (!linear) lt.probs.resize(static_cast<std::size_t>(batch * heads));
    for (int b = 0; b < batch; ++b) {
      const int r0 = b * seq;
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * dh;
        auto qb = lt.q.block(r0, c0, seq, dh);
        auto kb = lt.k.block(r0, c0, seq, dh);
        auto vb = lt.v.block(r0, c0, seq, dh);
        if (linear) {
          lt.attn_concat.block(r0, c0, seq, dh).noalias() =
              tape->fixed_probs * vb;
        } else {
          Mat scores = (qb * kb.transpose()) * inv_sqrt_dh;
          causal_softmax_inplace(&scores);
          lt.attn_concat.block(r0, c0, seq, dh).noalias() = scores * vb;
          lt.probs[static_cast<std::size_t>(b * heads + h)] =
              std::move(scores);
        }
      }
    }
    x.noalias() += lt.attn_concat * w.wo;

    Mat n2;
    if (linear) {
      ln_identity(x, &n2);
    } else {
      ln_forward(x, w.ln2_gamma, w.ln2_beta, &n2, &lt.ln2);
    }
    lt.h1.noalias() = n2 * w.w1;
    lt.act = linear ? lt.h1 : gelu_forward(lt.h1);
    x.noalias() += lt.act * w.w2;
  }

  if (linear) {
    tape->xf = x;
  } else {
    ln_forward(x, bb.final_norm_gamma(), bb.final_norm_beta(), &tape->xf,
               &tape->lnf);
  }

  tape->readouts.resize(static_cast<std::size_t>(batch));
  const auto wu1 = bb.unembedding().row(cfg.class1);
  const auto wu2 = bb.unembedding().row(cfg.class2);
  for (int b = 0; b < batch; ++b) {
    const auto h = tape->xf.row(b * seq + seq - 1);
    auto& r = tape->readouts[static_cast<std::size_t>(b)];
    r.logit_class1 = h.dot(wu1);
    r.logit_class2 = h.dot(wu2);
    r.hidden = h.transpose();
  }
}

struct ParamGrads {
  Mat tok_emb, pos_emb;
  std::vector<LayerWeights> layers;
  Vec lnf_gamma, lnf_beta;
  Mat unembed;

  explicit ParamGrads(const FrozenBackbone& bb) {
    const auto& cfg = bb.config();
    tok_emb = Mat::Zero(cfg.vocab_size, cfg.d_model);
    pos_emb = Mat::Zero(cfg.max_seq, cfg.d_model);
    layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : layers) {
      l.ln1_gamma = Vec::Zero(cfg.d_model);
      l.ln1_beta = Vec::Zero(cfg.d_model);
      l.wq = Mat::Zero(cfg.d_model, cfg.d_model);
      l.wk = Mat::Zero(cfg.d_model, cfg.d_model);
      l.wv = Mat::Zero(cfg.d_model, cfg.d_model);
      l.wo = Mat::Zero(cfg.d_model, cfg.d_model);
      l.ln2_gamma = Vec::Zero(cfg.d_model);
      l.ln2_beta = Vec::Zero(cfg.d_model);
      l.w1 = Mat::Zero(cfg.d_model, cfg.d_ff());
      l.w2 = Mat::Zero(cfg.d_ff(), cfg.d_model);
    }
    lnf_gamma = Vec::Zero(cfg.d_model);
    lnf_beta = Vec::Zero(cfg.d_model);
    unembed = Mat::Zero(cfg.vocab_size, cfg.d_model);
  }
};

// Reverse pass from a cotangent on xf down to the embedded input. When pg is
// non-null, parameter gradients are accumulated as well (pretraining); the
// backbone itself is never written to.
Mat backward_engine(const EngineTape& tape, const Mat& dxf, ParamGrads* pg) {
  const FrozenBackbone& bb = *tape.bb;
  const auto& cfg = bb.config();
  const int heads = cfg.n_heads;
  const int dh = cfg.head_dim();
  const int batch = tape.batch;
  const int seq = tape.seq;
  const bool linear = bb.mode() == BackboneMode::kLinearTest;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dx;
  if (linear) {
    dx = dxf;
  } else {
    dx = ln_backward(dxf, bb.final_norm_gamma(), tape.lnf,
                     pg != nullptr ? &pg->lnf_gamma : nullptr,
                     pg != nullptr ? &pg->lnf_beta : nullptr);
  }

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& w = bb.layers()[static_cast<std::size_t>(l)];
    const auto& lt = tape.layers[static_cast<std::size_t>(l)];
    LayerWeights* gw = pg != nullptr ? &pg->layers[static_cast<std::size_t>(l)]
                                     : nullptr;

    // FFN block: x_c = x_b + act * w2, act = gelu(n2 * w1), n2 = LN2(x_b).
    Mat dact = dx * w.w2.transpose();
    if (gw != nullptr) gw->w2.noalias() += lt.act.transpose() * dx;
    Mat dh1 = linear ? std::move(dact)
                     : (dact.array() * gelu_derivative(lt.h1).array()).matrix();
    Mat dn2 = dh1 * w.w1.transpose();
    if (gw != nullptr) {
      Mat n2 = (lt.ln2.xhat.array().rowwise() *
                w.ln2_gamma.transpose().array())
                   .rowwise() +
               w.ln2_beta.transpose().array();
      gw->w1.noalias() += n2.transpose() * dh1;
    }
    if (linear) {
      dx += dn2;
    } else {
      dx += ln_backward(dn2, w.ln2_gamma, lt.ln2,
                        gw != nullptr ? &gw->ln2_gamma : nullptr,
                        gw != nullptr ? &gw->ln2_beta : nullptr);
    }

    // Attention block: x_b = x_a + concat(heads) * wo.
    Mat dconcat = dx * w.wo.transpose();
    if (gw != nullptr) gw->wo.noalias() += lt.attn_concat.transpose() * dx;

    Mat dq = Mat::Zero(dx.rows(), dx.cols());
    Mat dk = Mat::Zero(dx.rows(), dx.cols());
    Mat dv = Mat::Zero(dx.rows(), dx.cols());
    for (int b = 0; b < batch; ++b) {
      const int r0 = b * seq;
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * dh;
        auto dob = dconcat.block(r0, c0, seq, dh);
        auto vb = lt.v.block(r0, c0, seq, dh);
        const Mat& probs =
            linear ? tape.fixed_probs
                   : lt.probs[static_cast<std::size_t>(b * heads + h)];
        dv.block(r0, c0, seq, dh).noalias() = probs.transpose() * dob;
        if (!linear) {
          Mat dprobs = dob * vb.transpose();
          Mat dscores = softmax_pullback(probs, dprobs);
          auto qb = lt.q.block(r0, c0, seq, dh);
          auto kb = lt.k.block(r0, c0, seq, dh);
          dq.block(r0, c0, seq, dh).noalias() = dscores * kb * inv_sqrt_dh;
          dk.block(r0, c0, seq, dh).noalias() =
              dscores.transpose() * qb * inv_sqrt_dh;
        }
      }
    }

    Mat dn1 = dq * w.wq.transpose();
    dn1.noalias() += dk * w.wk.transpose();
    dn1.noalias() += dv * w.wv.transpose();
    if (gw != nullptr) {
      Mat n1 = (lt.ln1.xhat.array().rowwise() *
                w.ln1_gamma.transpose().array())
                   .rowwise() +
               w.ln1_beta.transpose().array();
      gw->wq.noalias() += n1.transpose() * dq;
      gw->wk.noalias() += n1.transpose() * dk;
      gw->wv.noalias() += n1.transpose() * dv;
    }
    if (linear) {
      dx += dn1;
    } else {
      dx += ln_backward(dn1, w.ln1_gamma, lt.ln1,
                        gw != nullptr ? &gw->ln1_gamma : nullptr,
                        gw != nullptr ? &gw->ln1_beta : nullptr);
    }
  }
  return dx;  // gradient w.r.t. the embedded input x0
}

// Joint primal+tangent propagation; tangent enters through the prompt rows of
// the embedded input only.
Mat jvp_engine(const FrozenBackbone& bb, const Mat& x0, const Mat& dx0,
               int batch, int seq) {
  const auto& cfg = bb.config();
  const int heads = cfg.n_heads;
  const int dh = cfg.head_dim();
  const bool linear = bb.mode() == BackboneMode::kLinearTest;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat fixed;
  if (linear) fixed = fixed_causal_mix(seq);

  Mat x = x0;
  Mat dx = dx0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = bb.layers()[static_cast<std::size_t>(l)];

    Mat n1, dn1;
    if (linear) {
      n1 = x;
      dn1 = dx;
    } else {
      ln_jvp(x, dx, w.ln1_gamma, w.ln1_beta, &n1, &dn1);
    }
    Mat q = n1 * w.wq, k = n1 * w.wk, v = n1 * w.wv;
    Mat dq = dn1 * w.wq, dk = dn1 * w.wk, dv = dn1 * w.wv;

    Mat concat(x.rows(), x.cols());
    Mat dconcat(x.rows(), x.cols());
    for (int b = 0; b < batch; ++b) {
      const int r0 = b * seq;
      for (int h = 0; h < heads; ++h) {
        const int c0 = h * dh;
        auto qb = q.block(r0, c0, seq, dh);
        auto kb = k.block(r0, c0, seq, dh);
        auto vb = v.block(r0, c0, seq, dh);
        auto dqb = dq.block(r0, c0, seq, dh);
        auto dkb = dk.block(r0, c0, seq, dh);
        auto dvb = dv.block(r0, c0, seq, dh);
        if (linear) {
          concat.block(r0, c0, seq, dh).noalias() = fixed * vb;
          dconcat.block(r0, c0, seq, dh).noalias() = fixed * dvb;
        } else {
          Mat probs = (qb * kb.transpose()) * inv_sqrt_dh;
          causal_softmax_inplace(&probs);
          Mat dscores =
              (dqb * kb.transpose() + qb * dkb.transpose()) * inv_sqrt_dh;
          Mat dprobs = softmax_pullback(probs, dscores);
          concat.block(r0, c0, seq, dh).noalias() = probs * vb;
          dconcat.block(r0, c0, seq, dh).noalias() = dprobs * vb;
          dconcat.block(r0, c0, seq, dh).noalias() += probs * dvb;
        }
      }
    }
    x.noalias() += concat * w.wo;
    dx.noalias() += dconcat * w.wo;

    Mat n2, dn2;
    if (linear) {
      n2 = x;
      dn2 = dx;
    } else {
      ln_jvp(x, dx, w.ln2_gamma, w.ln2_beta, &n2, &dn2);
    }
    Mat h1 = n2 * w.w1;
    Mat dh1 = dn2 * w.w1;
    Mat act, dact;
    if (linear) {
      act = h1;
      dact = dh1;
    } else {
      act = gelu_forward(h1);
      dact = (gelu_derivative(h1).array() * dh1.array()).matrix();
    }
    x.noalias() += act * w.w2;
    dx.noalias() += dact * w.w2;
  }

  Mat dxf;
  if (linear) {
    dxf = dx;
  } else {
    Mat xf;
    ln_jvp(x, dx, bb.final_norm_gamma(), bb.final_norm_beta(), &xf, &dxf);
  }
  return dxf;
}

void validate_prompt(const FrozenBackbone& bb, const SoftPrompt& prompt) {
  require(prompt.dim() == bb.config().d_model, Err::kShapeMismatch,
          "prompt dimension does not match backbone d_model");
  require(prompt.values.allFinite(), Err::kBadArgument,
          "prompt contains non-finite entries");
}

void validate_tokens(const FrozenBackbone& bb, const SoftPrompt& prompt,
                     const TokenSequence& tokens) {
  require(!tokens.empty(), Err::kBadArgument, "token sequence is empty");
  const int total = prompt.length() + static_cast<int>(tokens.size());
  require(total <= bb.config().max_seq, Err::kSequenceOverflow,
          "prompt + tokens exceed max_seq");
  for (TokenId t : tokens) {
    require(t >= 0 && t < bb.config().vocab_size, Err::kUnknownToken,
            "token id outside vocabulary: " + std::to_string(t));
  }
}

Mat embed_batch(const FrozenBackbone& bb, const SoftPrompt& prompt,
                const std::vector<TokenSequence>& batch, int seq) {
  const int m = prompt.length();
  const int b_count = static_cast<int>(batch.size());
  Mat x0(static_cast<Eigen::Index>(b_count) * seq, bb.config().d_model);
  for (int b = 0; b < b_count; ++b) {
    const int r0 = b * seq;
    if (m > 0) {
      x0.middleRows(r0, m) = prompt.values + bb.position_embeddings().topRows(m);
    }
    const auto& tokens = batch[static_cast<std::size_t>(b)];
    for (std::size_t j = 0; j < tokens.size(); ++j) {
      x0.row(r0 + m + static_cast<int>(j)) =
          bb.token_embeddings().row(tokens[j]) +
          bb.position_embeddings().row(m + static_cast<Eigen::Index>(j));
    }
  }
  return x0;
}

}  // namespace

void BackboneConfig::validate() const {
  require(vocab_size >= 4, Err::kBadArgument, "vocab_size too small");
  require(d_model >= 2, Err::kBadArgument, "d_model too small");
  require(n_heads >= 1 && d_model % n_heads == 0, Err::kBadArgument,
          "d_model must be divisible by n_heads");
  require(n_layers >= 1, Err::kBadArgument, "n_layers must be >= 1");
  require(max_seq >= 2, Err::kBadArgument, "max_seq too small");
  require(class1 != class2, Err::kBadArgument, "class tokens must differ");
  require(class1 >= 0 && class1 < vocab_size && class2 >= 0 &&
              class2 < vocab_size,
          Err::kBadArgument, "class token ids outside vocabulary");
}

BackboneBuilder::BackboneBuilder(const BackboneConfig& config,
                                 BackboneMode mode) {
  config.validate();
  b_.config_ = config;
  b_.mode_ = mode;
  b_.tok_emb_.resize(config.vocab_size, config.d_model);
  b_.pos_emb_.resize(config.max_seq, config.d_model);
  b_.layers_.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& l : b_.layers_) {
    l.ln1_gamma = Vec::Ones(config.d_model);
    l.ln1_beta = Vec::Zero(config.d_model);
    l.wq.resize(config.d_model, config.d_model);
    l.wk.resize(config.d_model, config.d_model);
    l.wv.resize(config.d_model, config.d_model);
    l.wo.resize(config.d_model, config.d_model);
    l.ln2_gamma = Vec::Ones(config.d_model);
    l.ln2_beta = Vec::Zero(config.d_model);
    l.w1.resize(config.d_model, config.d_ff());
    l.w2.resize(config.d_ff(), config.d_model);
  }
  b_.lnf_gamma_ = Vec::Ones(config.d_model);
  b_.lnf_beta_ = Vec::Zero(config.d_model);
  b_.unembed_.resize(config.vocab_size, config.d_model);
}

FrozenBackbone FrozenBackbone::random_init(const BackboneConfig& config,
                                           std::uint64_t seed,
                                           BackboneMode mode) {
  BackboneBuilder builder(config, mode);
  Rng rng(seed);
  auto fill = [&rng](Mat& m, double sigma) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = sigma * rng.normal();
    }
  };
  const double d = static_cast<double>(config.d_model);
  fill(builder.tok_emb(), 0.1);
  fill(builder.pos_emb(), 0.1);
  for (auto& l : builder.layers()) {
    fill(l.wq, 1.0 / std::sqrt(d));
    fill(l.wk, 1.0 / std::sqrt(d));
    fill(l.wv, 1.0 / std::sqrt(d));
    fill(l.wo, 1.0 / std::sqrt(d));
    fill(l.w1, 1.0 / std::sqrt(d));
    fill(l.w2, 1.0 / std::sqrt(static_cast<double>(config.d_ff())));
  }
  fill(builder.unembed(), 1.0 / std::sqrt(d));
  return builder.freeze();
}

ClassReadout forward(const FrozenBackbone& bb, const SoftPrompt& prompt,
                     const TokenSequence& tokens) {
  return forward_batch(bb, prompt, {tokens}).front();
}

double class_probability(const ClassReadout& readout) {
  require(std::isfinite(readout.logit_class1) &&
              std::isfinite(readout.logit_class2),
          Err::kBadArgument, "non-finite class logits");
  const double mx = std::max(readout.logit_class1, readout.logit_class2);
  const double e1 = std::exp(readout.logit_class1 - mx);
  const double e2 = std::exp(readout.logit_class2 - mx);
  return e1 / (e1 + e2);
}

std::vector<ClassReadout> forward_batch(const FrozenBackbone& bb,
                                        const SoftPrompt& prompt,
                                        const std::vector<TokenSequence>& batch) {
  return forward_batch_taped(bb, prompt, batch).readouts();
}

PromptTangent prompt_gradient(const FrozenBackbone& bb,
                              const SoftPrompt& prompt,
                              const TokenSequence& tokens,
                              std::pair<double, double> upstream) {
  auto tape = forward_batch_taped(bb, prompt, {tokens});
  return PromptTangent{tape.prompt_gradient_sum({upstream})};
}

std::pair<double, double> prompt_jvp(const FrozenBackbone& bb,
                                     const SoftPrompt& prompt,
                                     const TokenSequence& tokens,
                                     const PromptTangent& tangent) {
  return prompt_jvp_batch(bb, prompt, {tokens}, tangent).front();
}

std::vector<std::pair<double, double>> prompt_jvp_batch(
    const FrozenBackbone& bb, const SoftPrompt& prompt,
    const std::vector<TokenSequence>& batch, const PromptTangent& tangent) {
  validate_prompt(bb, prompt);
  require(tangent.values.rows() == prompt.values.rows() &&
              tangent.values.cols() == prompt.values.cols(),
          Err::kShapeMismatch, "tangent shape does not match prompt");
  require(!batch.empty(), Err::kBadArgument, "empty batch");
  const int seq_tokens = static_cast<int>(batch.front().size());
  for (const auto& t : batch) {
    require(static_cast<int>(t.size()) == seq_tokens, Err::kBadArgument,
            "batch sequences must share one length");
    validate_tokens(bb, prompt, t);
  }
  const int m = prompt.length();
  const int seq = m + seq_tokens;
  const int b_count = static_cast<int>(batch.size());

  Mat x0 = embed_batch(bb, prompt, batch, seq);
  Mat dx0 = Mat::Zero(x0.rows(), x0.cols());
  for (int b = 0; b < b_count; ++b) {
    if (m > 0) dx0.middleRows(b * seq, m) = tangent.values;
  }
  Mat dxf = jvp_engine(bb, x0, dx0, b_count, seq);

  const auto& cfg = bb.config();
  const auto wu1 = bb.unembedding().row(cfg.class1);
  const auto wu2 = bb.unembedding().row(cfg.class2);
  std::vector<std::pair<double, double>> out(
      static_cast<std::size_t>(b_count));
  for (int b = 0; b < b_count; ++b) {
    const auto dh = dxf.row(b * seq + seq - 1);
    out[static_cast<std::size_t>(b)] = {dh.dot(wu1), dh.dot(wu2)};
  }
  return out;
}

struct ForwardTape::Impl {
  EngineTape tape;
};

ForwardTape::ForwardTape() : impl_(new Impl) {}
ForwardTape::ForwardTape(ForwardTape&&) noexcept = default;
ForwardTape& ForwardTape::operator=(ForwardTape&&) noexcept = default;
ForwardTape::~ForwardTape() = default;

const std::vector<ClassReadout>& ForwardTape::readouts() const {
  return impl_->tape.readouts;
}

Mat ForwardTape::prompt_gradient_sum(
    const std::vector<std::pair<double, double>>& upstreams) const {
  const EngineTape& tape = impl_->tape;
  const FrozenBackbone& bb = *tape.bb;
  const auto& cfg = bb.config();
  require(static_cast<int>(upstreams.size()) == tape.batch,
          Err::kShapeMismatch, "one upstream pair per batch example required");

  Mat dxf = Mat::Zero(static_cast<Eigen::Index>(tape.batch) * tape.seq,
                      cfg.d_model);
  const auto wu1 = bb.unembedding().row(cfg.class1);
  const auto wu2 = bb.unembedding().row(cfg.class2);
  for (int b = 0; b < tape.batch; ++b) {
    const auto& u = upstreams[static_cast<std::size_t>(b)];
    dxf.row(b * tape.seq + tape.seq - 1) = u.first * wu1 + u.second * wu2;
  }
  Mat dx0 = backward_engine(tape, dxf, nullptr);

  Mat grad = Mat::Zero(tape.prompt_len, cfg.d_model);
  for (int b = 0; b < tape.batch; ++b) {
    grad += dx0.middleRows(b * tape.seq, tape.prompt_len);
  }
  return grad;
}

ForwardTape forward_batch_taped(const FrozenBackbone& bb,
                                const SoftPrompt& prompt,
                                const std::vector<TokenSequence>& batch) {
  validate_prompt(bb, prompt);
  require(!batch.empty(), Err::kBadArgument, "empty batch");
  const int seq_tokens = static_cast<int>(batch.front().size());
  for (const auto& t : batch) {
    require(static_cast<int>(t.size()) == seq_tokens, Err::kBadArgument,
            "batch sequences must share one length");
    validate_tokens(bb, prompt, t);
  }
  const int seq = prompt.length() + seq_tokens;
  Mat x0 = embed_batch(bb, prompt, batch, seq);

  ForwardTape tape;
  forward_engine(bb, x0, static_cast<int>(batch.size()), seq, prompt.length(),
                 &tape.impl_->tape);
  return tape;
}

// --- Pretraining -------------------------------------------------------------

namespace {

// Flat views over every trainable tensor, in serialization order.
std::vector<Eigen::Map<Eigen::ArrayXd>> parameter_views(BackboneBuilder& b) {
  std::vector<Eigen::Map<Eigen::ArrayXd>> views;
  auto add_mat = [&views](Mat& m) {
    views.emplace_back(m.data(), m.size());
  };
  auto add_vec = [&views](Vec& v) {
    views.emplace_back(v.data(), v.size());
  };
  add_mat(b.tok_emb());
  add_mat(b.pos_emb());
  for (auto& l : b.layers()) {
    add_vec(l.ln1_gamma);
    add_vec(l.ln1_beta);
    add_mat(l.wq);
    add_mat(l.wk);
    add_mat(l.wv);
    add_mat(l.wo);
    add_vec(l.ln2_gamma);
    add_vec(l.ln2_beta);
    add_mat(l.w1);
    add_mat(l.w2);
  }
  add_vec(b.lnf_gamma());
  add_vec(b.lnf_beta());
  add_mat(b.unembed());
  return views;
}

std::vector<Eigen::Map<const Eigen::ArrayXd>> gradient_views(
    const ParamGrads& g) {
  std::vector<Eigen::Map<const Eigen::ArrayXd>> views;
  auto add_mat = [&views](const Mat& m) {
    views.emplace_back(m.data(), m.size());
  };
  auto add_vec = [&views](const Vec& v) {
    views.emplace_back(v.data(), v.size());
  };
  add_mat(g.tok_emb);
  add_mat(g.pos_emb);
  for (const auto& l : g.layers) {
    add_vec(l.ln1_gamma);
    add_vec(l.ln1_beta);
    add_mat(l.wq);
    add_mat(l.wk);
    add_mat(l.wv);
    add_mat(l.wo);
    add_vec(l.ln2_gamma);
    add_vec(l.ln2_beta);
    add_mat(l.w1);
    add_mat(l.w2);
  }
  add_vec(g.lnf_gamma);
  add_vec(g.lnf_beta);
  add_mat(g.unembed);
  return views;
}

}  // namespace

FrozenBackbone pretrain_backbone(
    const ConfoundedDataset& corpus, const PretrainConfig& config,
    std::uint64_t seed, std::vector<std::pair<int, double>>* loss_history) {
  const BackboneConfig& arch = config.arch;
  arch.validate();
  require(corpus.gen_params.vocab_size == arch.vocab_size, Err::kBadArgument,
          "vocabulary mismatch between corpus and backbone config");
  require(!corpus.examples.empty(), Err::kBadArgument, "empty corpus");
  const int seq = static_cast<int>(corpus.examples.front().tokens.size());
  require(seq <= arch.max_seq, Err::kSequenceOverflow,
          "corpus sequences exceed max_seq");
  require(config.steps >= 1 && config.batch_size >= 1, Err::kBadArgument,
          "pretraining needs steps >= 1 and batch_size >= 1");

  // Init, working copy, and Adam state.
  FrozenBackbone init =
      FrozenBackbone::random_init(arch, mix_seed(seed, 0xB0D1));
  BackboneBuilder work(arch);
  {
    // Copy initial parameters into the mutable builder.
    work.tok_emb() = init.token_embeddings();
    work.pos_emb() = init.position_embeddings();
    for (int l = 0; l < arch.n_layers; ++l) {
      work.layers()[static_cast<std::size_t>(l)] =
          init.layers()[static_cast<std::size_t>(l)];
    }
    work.lnf_gamma() = init.final_norm_gamma();
    work.lnf_beta() = init.final_norm_beta();
    work.unembed() = init.unembedding();
  }
  auto params = parameter_views(work);
  std::vector<Eigen::ArrayXd> adam_m, adam_v;
  for (const auto& p : params) {
    adam_m.emplace_back(Eigen::ArrayXd::Zero(p.size()));
    adam_v.emplace_back(Eigen::ArrayXd::Zero(p.size()));
  }

  Rng rng(mix_seed(seed, 0xB0D2));
  const int n = static_cast<int>(corpus.examples.size());
  const int batch = config.batch_size;
  const SoftPrompt no_prompt = SoftPrompt::empty(arch.d_model);
  const int warm = std::max(1, config.warmup_steps);

  for (int step = 0; step < config.steps; ++step) {
    std::vector<const ConfoundedExample*> chosen(
        static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      chosen[static_cast<std::size_t>(b)] =
          &corpus.examples[rng.below(static_cast<std::uint32_t>(n))];
    }

    // Embed and run the forward pass on a frozen snapshot of the builder.
    // The snapshot shares no storage mutated during the backward pass.
    FrozenBackbone snapshot = [&] {
      BackboneBuilder copy(arch);
      copy.tok_emb() = work.tok_emb();
      copy.pos_emb() = work.pos_emb();
      copy.layers() = work.layers();
      copy.lnf_gamma() = work.lnf_gamma();
      copy.lnf_beta() = work.lnf_beta();
      copy.unembed() = work.unembed();
      return copy.freeze();
    }();

    std::vector<TokenSequence> token_batch(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
      token_batch[static_cast<std::size_t>(b)] =
          chosen[static_cast<std::size_t>(b)]->tokens;
    }
    Mat x0 = embed_batch(snapshot, no_prompt, token_batch, seq);
    EngineTape tape;
    forward_engine(snapshot, x0, batch, seq, 0, &tape);

    // Next-token cross-entropy; final target is the class token of y.
    const Eigen::Index rows = tape.xf.rows();
    Mat logits = tape.xf * snapshot.unembedding().transpose();
    Mat probs(rows, arch.vocab_size);
    double loss = 0.0;
    std::vector<int> targets(static_cast<std::size_t>(rows));
    for (int b = 0; b < batch; ++b) {
      const auto& ex = *chosen[static_cast<std::size_t>(b)];
      for (int j = 0; j < seq; ++j) {
        const int r = b * seq + j;
        targets[static_cast<std::size_t>(r)] =
            j + 1 < seq ? ex.tokens[static_cast<std::size_t>(j + 1)]
                        : (ex.y == 1 ? arch.class1 : arch.class2);
      }
    }
    for (Eigen::Index r = 0; r < rows; ++r) {
      const double mx = logits.row(r).maxCoeff();
      probs.row(r) = (logits.row(r).array() - mx).exp();
      const double z = probs.row(r).sum();
      probs.row(r) /= z;
      loss -= std::log(
          probs(r, targets[static_cast<std::size_t>(r)]));
    }
    loss /= static_cast<double>(rows);
    if (loss_history != nullptr) loss_history->emplace_back(step, loss);
    require(std::isfinite(loss), Err::kDivergence,
            "pretraining loss became non-finite at step " +
                std::to_string(step));

    // dL/dlogits = (softmax - onehot) / rows.
    Mat glogits = probs / static_cast<double>(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      glogits(r, targets[static_cast<std::size_t>(r)]) -=
          1.0 / static_cast<double>(rows);
    }
    ParamGrads grads(snapshot);
    grads.unembed.noalias() += glogits.transpose() * tape.xf;
    Mat dxf = glogits * snapshot.unembedding();
    Mat dx0 = backward_engine(tape, dxf, &grads);
    for (int b = 0; b < batch; ++b) {
      const auto& ex = *chosen[static_cast<std::size_t>(b)];
      for (int j = 0; j < seq; ++j) {
        grads.tok_emb.row(ex.tokens[static_cast<std::size_t>(j)]) +=
            dx0.row(b * seq + j);
        grads.pos_emb.row(j) += dx0.row(b * seq + j);
      }
    }

    // AdamW-free Adam with linear warmup then linear decay.
    const double lr =
        config.learning_rate *
        std::min(static_cast<double>(step + 1) / warm,
                 static_cast<double>(config.steps - step) /
                     std::max(1, config.steps - config.warmup_steps));
    const double bc1 = 1.0 - std::pow(config.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(config.beta2, step + 1);
    auto gviews = gradient_views(grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam_m[i] = config.beta1 * adam_m[i] + (1.0 - config.beta1) * gviews[i];
      adam_v[i] =
          config.beta2 * adam_v[i] + (1.0 - config.beta2) * gviews[i].square();
      params[i] -=
          lr * (adam_m[i] / bc1) / ((adam_v[i] / bc2).sqrt() + config.adam_eps);
    }
  }
  return work.freeze();
}

// --- Serialization -----------------------------------------------------------

namespace {

void put_u32(std::vector<std::uint8_t>* out, std::uint32_t v) {
  out->push_back(static_cast<std::uint8_t>(v & 0xff));
  out->push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
  out->push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
  out->push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void put_f64(std::vector<std::uint8_t>* out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out->push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
  }
}

void put_mat(std::vector<std::uint8_t>* out, const Mat& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
  }
}

void put_vec(std::vector<std::uint8_t>* out, const Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) put_f64(out, v(i));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t len)
      : data_(data), len_(len) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(data_[pos_ + static_cast<std::size_t>(i)])
           << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(data_[pos_ + static_cast<std::size_t>(i)])
              << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
  }

  void mat(Mat* m) {
    for (Eigen::Index r = 0; r < m->rows(); ++r) {
      for (Eigen::Index c = 0; c < m->cols(); ++c) (*m)(r, c) = f64();
    }
  }

  void vec(Vec* v) {
    for (Eigen::Index i = 0; i < v->size(); ++i) (*v)(i) = f64();
  }

  std::size_t remaining() const { return len_ - pos_; }

 private:
  void need(std::size_t n) {
    require(pos_ + n <= len_, Err::kCorruptFile,
            "backbone checkpoint truncated");
  }
  const std::uint8_t* data_;
  std::size_t len_;
  std::size_t pos_ = 0;
};

// Payload: seven u32 dims, then tensors in fixed order.
std::vector<std::uint8_t> backbone_payload(const FrozenBackbone& bb) {
  const auto& cfg = bb.config();
  std::vector<std::uint8_t> payload;
  put_u32(&payload, static_cast<std::uint32_t>(cfg.vocab_size));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.d_model));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.n_layers));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.n_heads));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.max_seq));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.class1));
  put_u32(&payload, static_cast<std::uint32_t>(cfg.class2));
  put_mat(&payload, bb.token_embeddings());
  put_mat(&payload, bb.position_embeddings());
  for (const auto& l : bb.layers()) {
    put_vec(&payload, l.ln1_gamma);
    put_vec(&payload, l.ln1_beta);
    put_mat(&payload, l.wq);
    put_mat(&payload, l.wk);
    put_mat(&payload, l.wv);
    put_mat(&payload, l.wo);
    put_vec(&payload, l.ln2_gamma);
    put_vec(&payload, l.ln2_beta);
    put_mat(&payload, l.w1);
    put_mat(&payload, l.w2);
  }
  put_vec(&payload, bb.final_norm_gamma());
  put_vec(&payload, bb.final_norm_beta());
  put_mat(&payload, bb.unembedding());
  return payload;
}

}  // namespace

std::uint32_t FrozenBackbone::parameter_checksum() const {
  const auto payload = backbone_payload(*this);
  return crc32_bytes(payload.data(), payload.size());
}

void save_backbone(const FrozenBackbone& bb, const std::string& path) {
  const auto payload = backbone_payload(bb);
  std::vector<std::uint8_t> file;
  file.reserve(payload.size() + 12);
  file.push_back('H');
  file.push_back('Y');
  file.push_back('P');
  file.push_back('B');
  put_u32(&file, kBackboneVersion);
  file.insert(file.end(), payload.begin(), payload.end());
  put_u32(&file, crc32_bytes(payload.data(), payload.size()));

  std::ofstream out(path, std::ios::binary);
  require(out.good(), Err::kIo, "cannot open for write: " + path);
  out.write(reinterpret_cast<const char*>(file.data()),
            static_cast<std::streamsize>(file.size()));
  require(out.good(), Err::kIo, "write failed: " + path);
}

FrozenBackbone load_backbone(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), Err::kIo, "cannot open: " + path);
  std::vector<std::uint8_t> file((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  require(file.size() >= 12, Err::kCorruptFile,
          "backbone checkpoint too short");
  require(file[0] == 'H' && file[1] == 'Y' && file[2] == 'P' &&
              file[3] == 'B',
          Err::kVersionMismatch, "bad magic bytes in " + path);
  ByteReader header(file.data() + 4, 4);
  const std::uint32_t version = header.u32();
  require(version == kBackboneVersion, Err::kVersionMismatch,
          "unsupported backbone checkpoint version " + std::to_string(version));

  const std::size_t payload_len = file.size() - 12;
  const std::uint8_t* payload = file.data() + 8;
  ByteReader trailer(file.data() + file.size() - 4, 4);
  const std::uint32_t stored_crc = trailer.u32();
  require(crc32_bytes(payload, payload_len) == stored_crc, Err::kCorruptFile,
          "checksum failure in " + path);

  ByteReader r(payload, payload_len);
  BackboneConfig cfg;
  cfg.vocab_size = static_cast<int>(r.u32());
  cfg.d_model = static_cast<int>(r.u32());
  cfg.n_layers = static_cast<int>(r.u32());
  cfg.n_heads = static_cast<int>(r.u32());
  cfg.max_seq = static_cast<int>(r.u32());
  cfg.class1 = static_cast<int>(r.u32());
  cfg.class2 = static_cast<int>(r.u32());
  cfg.validate();

  BackboneBuilder b(cfg);
  r.mat(&b.tok_emb());
  r.mat(&b.pos_emb());
  for (auto& l : b.layers()) {
    r.vec(&l.ln1_gamma);
    r.vec(&l.ln1_beta);
    r.mat(&l.wq);
    r.mat(&l.wk);
    r.mat(&l.wv);
    r.mat(&l.wo);
    r.vec(&l.ln2_gamma);
    r.vec(&l.ln2_beta);
    r.mat(&l.w1);
    r.mat(&l.w2);
  }
  r.vec(&b.lnf_gamma());
  r.vec(&b.lnf_beta());
  r.mat(&b.unembed());
  require(r.remaining() == 0, Err::kCorruptFile,
          "trailing bytes in backbone checkpoint " + path);
  return b.freeze();
}

}  // namespace hypa
