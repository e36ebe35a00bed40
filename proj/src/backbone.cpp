#include "ssp/backbone.hpp"

#include <algorithm>
#include <string>

#include "ssp/error.hpp"

namespace ssp {

Tokens byte_tokenize(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<TokenId>(c));
  return out;
}

std::string byte_detokenize(std::span<const TokenId> tokens) {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
  return out;
}

void check_layer(const BackboneMeta& meta, std::size_t layer) {
  if (layer < 1 || layer > meta.layers) {
    throw Error(ErrorCode::LayerOutOfRange,
                "layer " + std::to_string(layer) + " outside [1, " + std::to_string(meta.layers) + "]");
  }
}

void check_tokens(const BackboneMeta& meta, std::span<const TokenId> tokens) {
  if (tokens.empty()) throw Error(ErrorCode::EmptyInput, "empty token sequence");
  if (tokens.size() > meta.max_context) {
    throw Error(ErrorCode::ContextOverflow, std::to_string(tokens.size()) + " tokens exceed context of " +
                                                std::to_string(meta.max_context));
  }
  for (TokenId t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= meta.vocab) {
      throw Error(ErrorCode::TokenOutOfRange, "token id " + std::to_string(t));
    }
  }
}

namespace {

struct Beam {
  Tokens tokens;
  double score = 0.0;
};

}  // namespace

Tokens decode(const Backbone& backbone, std::span<const TokenId> tokens, std::size_t max_new,
              DecodeStrategy strategy) {
  const auto meta = backbone.meta();
  if (tokens.size() + max_new > meta.max_context) {
    throw Error(ErrorCode::ContextOverflow, "generation would exceed the context window");
  }
  Tokens prefix(tokens.begin(), tokens.end());
  if (max_new == 0) return prefix;

  const std::size_t width = strategy.kind == DecodeStrategy::Kind::greedy ? 1 : std::max<std::size_t>(1, strategy.beams);
  std::vector<Beam> beams{{prefix, 0.0}};
  for (std::size_t step = 0; step < max_new; ++step) {
    std::vector<Beam> candidates;
    candidates.reserve(beams.size() * meta.vocab);
    for (const auto& beam : beams) {
      const Vec lp = backbone.next_token_logprobs(beam.tokens);
      for (std::size_t t = 0; t < lp.size(); ++t) {
        Beam next{beam.tokens, beam.score + lp[t]};
        next.tokens.push_back(static_cast<TokenId>(t));
        candidates.push_back(std::move(next));
      }
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Beam& a, const Beam& b) {
                        if (a.score != b.score) return a.score > b.score;
                        return a.tokens < b.tokens;
                      });
    candidates.resize(keep);
    beams = std::move(candidates);
  }
  return beams.front().tokens;
}

}  // namespace ssp
