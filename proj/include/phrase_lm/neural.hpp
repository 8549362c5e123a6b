#pragma once

// Dual encoder: a causal prefix encoder (trainable), a bidirectional phrase
// encoder (frozen after seeded init) and trainable token output embeddings.
// Forward and backward passes are written out by hand.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "phrase_lm/corpus.hpp"

namespace phrase_lm::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

enum class Precision : std::uint32_t { kFloat32 = 0, kFloat64 = 1 };

struct ModelConfig {
  std::size_t vocab_size = 0;
  std::size_t d_model = 128;
  std::size_t index_dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_mult = 4;
  /// Prefix window including BOS.
  std::size_t max_prefix_len = 256;
  std::uint64_t seed = 0;
  /// Storage precision. In float32 mode every parameter is kept exactly
  /// representable as a float, so checkpoints round-trip losslessly.
  Precision precision = Precision::kFloat32;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Mat ln1_g, ln1_b;
  Mat w_qkv, b_qkv;
  Mat w_o, b_o;
  Mat ln2_g, ln2_b;
  Mat w_ff1, b_ff1;
  Mat w_ff2, b_ff2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "ln1_g", ln1_g); f(prefix + "ln1_b", ln1_b);
    f(prefix + "w_qkv", w_qkv); f(prefix + "b_qkv", b_qkv);
    f(prefix + "w_o", w_o);     f(prefix + "b_o", b_o);
    f(prefix + "ln2_g", ln2_g); f(prefix + "ln2_b", ln2_b);
    f(prefix + "w_ff1", w_ff1); f(prefix + "b_ff1", b_ff1);
    f(prefix + "w_ff2", w_ff2); f(prefix + "b_ff2", b_ff2);
  }
};

struct EncoderWeights {
  Mat tok_embed;  // V x D
  std::vector<LayerWeights> layers;
  Mat lnf_g, lnf_b;
  /// Output projection: D -> d (prefix) or 2D -> d (phrase).
  Mat proj;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "tok_embed", tok_embed);
    for (std::size_t l = 0; l < layers.size(); ++l) layers[l].visit(prefix + "layer" + std::to_string(l) + ".", f);
    f(prefix + "lnf_g", lnf_g);
    f(prefix + "lnf_b", lnf_b);
    f(prefix + "proj", proj);
  }
};

/// Everything training updates: the prefix encoder and the token embeddings.
/// Gradients and optimizer moments use the same layout.
struct TrainableParams {
  EncoderWeights prefix;
  Mat token_embed;  // V x d

  template <typename F>
  void visit(F&& f) {
    prefix.visit("prefix.", f);
    f("token_embed", token_embed);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<TrainableParams*>(this)->visit([&](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
  }

  /// Same shapes, all zeros.
  TrainableParams zeros_like() const;
  void set_zero();
  /// this += scale * other
  void add_scaled(const TrainableParams& other, double scale);
  std::size_t parameter_count() const;
};

/// Intermediate activations of one encoder forward pass, kept for backward.
struct EncoderCache {
  struct Layer {
    Mat x_in, xhat1, a, qkv, att_out, x_mid, xhat2, m, ff_pre, ff_act;
    Vec rstd1, rstd2;
    std::vector<Mat> probs;  // per head, T x T
  };
  std::vector<TokenId> tokens;
  bool causal = true;
  std::vector<Layer> layers;
  Mat x_final, xhat_f;
  Vec rstd_f;
  Mat hidden;  // T x D after the final layer norm
};

/// Key/value cache for incremental causal decoding.
struct PrefixState {
  std::vector<TokenId> window;  // tokens currently encoded, BOS first
  std::vector<Mat> keys, values;  // per layer, T x D
  Vec query;                      // projection of the final position
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  TrainableParams& trainable() { return trainable_; }
  const TrainableParams& trainable() const { return trainable_; }
  const EncoderWeights& phrase_encoder() const { return phrase_; }

  // ---- prefix side ----

  /// Encodes [BOS] + the most recent max_prefix_len - 1 tokens.
  Vec encode_prefix(std::span<const TokenId> tokens) const;

  /// Row t is the encoding of tokens[0, t) for t = 0..n. One causal pass when
  /// n + 1 fits the window, otherwise rows past the window are encoded one by
  /// one with a sliding window.
  Mat encode_prefixes(std::span<const TokenId> tokens) const;

  /// Forward over an explicit sequence (BOS must already be present);
  /// row t of the result is W_p applied to the state at position t.
  Mat prefix_forward(std::span<const TokenId> seq, EncoderCache& cache) const;
  /// Accumulates parameter gradients given dLoss/dQuery (T x d).
  void prefix_backward(const EncoderCache& cache, const Mat& d_query, TrainableParams& grads) const;

  /// Hidden states (T x D) of the prefix encoder, for causality probes.
  Mat prefix_hidden(std::span<const TokenId> seq) const;

  PrefixState start_prefix(std::span<const TokenId> tokens) const;
  /// Appends tokens, re-encoding from scratch when the window slides.
  void extend_prefix(PrefixState& state, std::span<const TokenId> tokens) const;

  // ---- phrase side (frozen) ----

  /// Bidirectional last-layer states of a block.
  Mat encode_block(std::span<const TokenId> block_tokens) const;
  /// W_c [h_start ; h_{end-1}] given the states of the enclosing block.
  Vec phrase_from_states(const Mat& block_states, std::size_t start, std::size_t end) const;
  /// Embeds doc.tokens[start, end), which must lie inside one block.
  Vec encode_phrase(const Document& doc, std::size_t start, std::size_t end) const;

  std::uint64_t phrase_encoder_checksum() const;
  std::uint64_t checksum() const;

  /// Rounds every parameter to float when precision is float32.
  void quantize();

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  Model() = default;
  void init_encoder(EncoderWeights& w, std::size_t proj_in, std::uint64_t seed, double embed_std) const;

  ModelConfig cfg_;
  TrainableParams trainable_;
  EncoderWeights phrase_;
};

/// Sinusoidal position encoding for `t`, written into `out` (length D).
void position_encoding(std::size_t t, Eigen::Ref<Eigen::RowVectorXd> out);

/// Plain encoder forward (shared by both sides). `causal` masks future keys.
Mat encoder_forward(const EncoderWeights& w, std::size_t heads, std::span<const TokenId> tokens, bool causal,
                    EncoderCache* cache);
/// Backward through the encoder stack (not the projection). Accumulates into
/// `grads` and returns nothing; d_hidden is T x D.
void encoder_backward(const EncoderWeights& w, std::size_t heads, const EncoderCache& cache, const Mat& d_hidden,
                      EncoderWeights& grads);

// ---- gradient checking ----

struct GradCheckOptions {
  double step = 1e-5;
  /// Coordinates sampled per tensor (all when the tensor is smaller).
  std::size_t coords_per_tensor = 16;
  /// Floor on the relative-error denominator.
  double abs_floor = 1e-6;
  std::uint64_t seed = 1;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::size_t checked = 0;
};

/// A named parameter tensor together with its analytic gradient.
struct ParamGrad {
  std::string name;
  Mat* value;
  const Mat* grad;
};

/// Compares analytic gradients against central finite differences of `loss`.
/// Throws Error when the loss is non-finite.
GradCheckResult grad_check(const std::vector<ParamGrad>& params, const std::function<double()>& loss,
                           const GradCheckOptions& opts = {});

}  // namespace phrase_lm::nn
