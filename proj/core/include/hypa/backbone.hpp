#pragma once

#include "hypa/common.hpp"
#include "hypa/datagen.hpp"

#include <memory>
#include <utility>
#include <vector>

namespace hypa {

struct BackboneConfig {
  int vocab_size = 64;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int max_seq = 160;
  // Class tokens are the last two vocabulary ids; they are reserved and never
  // appear inside example sequences, only as readout/pretraining targets.
  int class1 = 62;
  int class2 = 63;

  int d_ff() const { return 4 * d_model; }
  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

// kLinearTest replaces every nonlinear sublayer with a linear stand-in
// (layer norms and the activation become identity, attention mixing becomes a
// fixed causal average), making the logits exactly affine in the prompt.
// Test-only; never serialized.
enum class BackboneMode { kStandard, kLinearTest };

struct LayerWeights {
  Vec ln1_gamma, ln1_beta;
  Mat wq, wk, wv, wo;  // d x d, applied on the right: Y = X * W
  Vec ln2_gamma, ln2_beta;
  Mat w1;  // d x d_ff
  Mat w2;  // d_ff x d
};

// Decoder-only transformer with pre-norm residual blocks, GELU feed-forward,
// learned absolute position embeddings, a final layer norm, and an
// unembedding matrix whose two class rows form the readout. Parameters are
// immutable after construction.
class FrozenBackbone {
 public:
  static FrozenBackbone random_init(const BackboneConfig& config,
                                    std::uint64_t seed,
                                    BackboneMode mode = BackboneMode::kStandard);

  const BackboneConfig& config() const { return config_; }
  BackboneMode mode() const { return mode_; }
  const Mat& token_embeddings() const { return tok_emb_; }
  const Mat& position_embeddings() const { return pos_emb_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  const Vec& final_norm_gamma() const { return lnf_gamma_; }
  const Vec& final_norm_beta() const { return lnf_beta_; }
  const Mat& unembedding() const { return unembed_; }

  // CRC32 over the full serialized parameter payload.
  std::uint32_t parameter_checksum() const;

 private:
  FrozenBackbone() = default;
  friend class BackboneBuilder;

  BackboneConfig config_;
  BackboneMode mode_ = BackboneMode::kStandard;
  Mat tok_emb_;   // vocab x d
  Mat pos_emb_;   // max_seq x d
  std::vector<LayerWeights> layers_;
  Vec lnf_gamma_, lnf_beta_;
  Mat unembed_;   // vocab x d
};

// Mutable access used only by construction paths (random init, pretraining,
// checkpoint loading). Not part of the public evaluation surface.
class BackboneBuilder {
 public:
  explicit BackboneBuilder(const BackboneConfig& config,
                           BackboneMode mode = BackboneMode::kStandard);
  Mat& tok_emb() { return b_.tok_emb_; }
  Mat& pos_emb() { return b_.pos_emb_; }
  std::vector<LayerWeights>& layers() { return b_.layers_; }
  Vec& lnf_gamma() { return b_.lnf_gamma_; }
  Vec& lnf_beta() { return b_.lnf_beta_; }
  Mat& unembed() { return b_.unembed_; }
  FrozenBackbone freeze() { return std::move(b_); }

 private:
  FrozenBackbone b_;
};

struct SoftPrompt {
  Mat values;  // m x d; m may be 0 (empty prompt) for plain token evaluation

  int length() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
  static SoftPrompt zeros(int m, int d) {
    return SoftPrompt{Mat::Zero(m, d)};
  }
  static SoftPrompt empty(int d) { return SoftPrompt{Mat(0, d)}; }
};

// Same shape as the prompt it perturbs; used for gradients and tangents.
struct PromptTangent {
  Mat values;  // m x d
};

struct ClassReadout {
  double logit_class1 = 0.0;
  double logit_class2 = 0.0;
  Vec hidden;  // readout-position state before unembedding
};

// --- Core evaluation (single example) ---------------------------------------

ClassReadout forward(const FrozenBackbone& bb, const SoftPrompt& prompt,
                     const TokenSequence& tokens);

// exp(s1) / (exp(s1) + exp(s2)), computed with max subtraction.
double class_probability(const ClassReadout& readout);

// Exact reverse-mode gradient of (upstream . class_logits) w.r.t. the prompt.
PromptTangent prompt_gradient(const FrozenBackbone& bb, const SoftPrompt& prompt,
                              const TokenSequence& tokens,
                              std::pair<double, double> upstream);

// Forward-mode directional derivative of the two class logits along `tangent`.
std::pair<double, double> prompt_jvp(const FrozenBackbone& bb,
                                     const SoftPrompt& prompt,
                                     const TokenSequence& tokens,
                                     const PromptTangent& tangent);

// --- Batched evaluation ------------------------------------------------------
// All sequences in a batch share one prompt and one length.

std::vector<ClassReadout> forward_batch(const FrozenBackbone& bb,
                                        const SoftPrompt& prompt,
                                        const std::vector<TokenSequence>& batch);

std::vector<std::pair<double, double>> prompt_jvp_batch(
    const FrozenBackbone& bb, const SoftPrompt& prompt,
    const std::vector<TokenSequence>& batch, const PromptTangent& tangent);

// Forward pass that retains activations so gradients can be taken afterwards.
// The tape borrows the backbone; keep it alive while the tape is in use.
class ForwardTape {
 public:
  ForwardTape(ForwardTape&&) noexcept;
  ForwardTape& operator=(ForwardTape&&) noexcept;
  ~ForwardTape();

  const std::vector<ClassReadout>& readouts() const;

  // Sum over the batch of per-example prompt gradients, one upstream
  // (d loss / d class logits) pair per example.
  Mat prompt_gradient_sum(
      const std::vector<std::pair<double, double>>& upstreams) const;

 private:
  ForwardTape();
  struct Impl;
  std::unique_ptr<Impl> impl_;
  friend ForwardTape forward_batch_taped(const FrozenBackbone&,
                                         const SoftPrompt&,
                                         const std::vector<TokenSequence>&);
};

ForwardTape forward_batch_taped(const FrozenBackbone& bb,
                                const SoftPrompt& prompt,
                                const std::vector<TokenSequence>& batch);

// --- Pretraining and persistence ---------------------------------------------

struct PretrainConfig {
  BackboneConfig arch;
  int steps = 1500;
  int batch_size = 32;
  double learning_rate = 3e-3;
  int warmup_steps = 20;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
};

// Trains all parameters with next-token cross-entropy where the target of the
// final position is the example's class token, then freezes. The corpus must
// be balanced (generated at alpha = 1).
FrozenBackbone pretrain_backbone(
    const ConfoundedDataset& corpus, const PretrainConfig& config,
    std::uint64_t seed,
    std::vector<std::pair<int, double>>* loss_history = nullptr);

// Checkpoint format: "HYPB", u32 version, seven u32 dims (vocab, d_model,
// layers, heads, max_seq, class1, class2), all matrices row-major f64 LE in a
// fixed order, then a CRC32 of everything after magic+version.
void save_backbone(const FrozenBackbone& bb, const std::string& path);
FrozenBackbone load_backbone(const std::string& path);

}  // namespace hypa
