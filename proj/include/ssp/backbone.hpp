#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ssp/numerics.hpp"

namespace ssp {

using TokenId = std::int32_t;
using Tokens = std::vector<TokenId>;

struct BackboneMeta {
  std::size_t dim = 0;
  std::size_t layers = 0;
  std::size_t vocab = 0;
  std::size_t max_context = 0;
  std::string name;

  bool operator==(const BackboneMeta&) const = default;
};

/// Rows of the sequence that hold the noise prompt.
struct InjectSpan {
  std::size_t start = 0;
  std::size_t length = 0;

  bool operator==(const InjectSpan&) const = default;
};

/// Input embeddings (token rows only; positions are added inside the network).
struct EmbeddingSeq {
  Mat matrix;
  std::optional<InjectSpan> inject;

  std::size_t length() const { return matrix.rows; }
};

struct DecodeStrategy {
  enum class Kind { greedy, beam };
  Kind kind = Kind::greedy;
  std::size_t beams = 1;

  static DecodeStrategy greedy() { return {}; }
  static DecodeStrategy beam(std::size_t k) { return {Kind::beam, k}; }
};

/// A frozen language model seen through the handful of operations the
/// detector needs. Implementations never mutate their weights.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual BackboneMeta meta() const = 0;
  virtual EmbeddingSeq embed(std::span<const TokenId> tokens) const = 0;
  /// Residual-stream output of block `layer` (1-based) at the last position.
  virtual Vec forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const = 0;
  /// Gradient of <cotangent, forward_hidden(seq, layer)> with respect to the
  /// rows in seq.inject.
  virtual Mat vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const = 0;
  virtual Vec next_token_logprobs(std::span<const TokenId> tokens) const = 0;
  virtual Tokens generate(std::span<const TokenId> tokens, std::size_t max_new,
                          DecodeStrategy strategy) const = 0;

  virtual bool supports_vjp() const = 0;
  virtual bool supports_token_ops() const = 0;
};

/// Byte-level tokenization used with the toy backbone.
Tokens byte_tokenize(std::string_view text);
std::string byte_detokenize(std::span<const TokenId> tokens);

/// Greedy and beam decoding on top of next_token_logprobs. Ties go to the
/// lowest token id.
Tokens decode(const Backbone& backbone, std::span<const TokenId> tokens, std::size_t max_new,
              DecodeStrategy strategy);

void check_layer(const BackboneMeta& meta, std::size_t layer);
void check_tokens(const BackboneMeta& meta, std::span<const TokenId> tokens);

}  // namespace ssp
