#pragma once

#include <cstdint>
#include <vector>

#include "ssp/backbone.hpp"

namespace ssp {

struct ToyConfig {
  std::size_t dim = 32;
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t max_context = 128;
  std::uint64_t seed = 0;
};

/// Small pre-norm decoder-only transformer with learned positional
/// embeddings, tied input/output embeddings and GELU MLPs. Weights are drawn
/// once from the seed and never change.
class ToyBackbone final : public Backbone {
 public:
  explicit ToyBackbone(ToyConfig config = {});

  BackboneMeta meta() const override;
  EmbeddingSeq embed(std::span<const TokenId> tokens) const override;
  Vec forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const override;
  Mat vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const override;
  Vec next_token_logprobs(std::span<const TokenId> tokens) const override;
  Tokens generate(std::span<const TokenId> tokens, std::size_t max_new, DecodeStrategy strategy) const override;
  bool supports_vjp() const override { return true; }
  bool supports_token_ops() const override { return true; }

  /// Last-position residual stream after every block (index 0 is block 1).
  std::vector<Vec> hidden_states(const EmbeddingSeq& seq) const;
  /// Last-position residual after the top block, the input to the final norm
  /// that feeds the logits.
  Vec final_hidden(std::span<const TokenId> tokens) const;

  /// FNV-1a over the raw weight bytes.
  std::uint64_t weights_hash() const;

  const ToyConfig& config() const { return config_; }

 private:
  struct Block {
    Vec ln1_gain, ln1_bias;
    Mat wq, wk, wv, wo;
    Vec ln2_gain, ln2_bias;
    Mat w_fc;
    Vec b_fc;
    Mat w_proj;
    Vec b_proj;
  };

  struct NormCache {
    Mat xhat;
    Vec rstd;
  };

  struct BlockCache {
    NormCache ln1;
    Mat u, q, k, v;
    std::vector<Mat> probs;  // per head, T x T (causal)
    Mat attn;                // concatenated head outputs
    NormCache ln2;
    Mat u2, pre_fc, act_fc;
  };

  void validate(const EmbeddingSeq& seq) const;
  Mat input_rows(const EmbeddingSeq& seq) const;
  Mat run_block(const Block& block, const Mat& x, BlockCache* cache) const;
  Mat block_backward(const Block& block, const BlockCache& cache, const Mat& dy) const;

  ToyConfig config_;
  Mat token_embedding_;  // vocab x dim
  Mat position_embedding_;
  std::vector<Block> blocks_;
  Vec final_gain_, final_bias_;
};

}  // namespace ssp
