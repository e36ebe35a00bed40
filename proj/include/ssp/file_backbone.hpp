#pragma once

#include <filesystem>
#include <map>
#include <vector>

#include "ssp/backbone.hpp"
#include "ssp/data.hpp"

namespace ssp {

/// Precomputed hidden-state pairs, one file per layer. Token operations and
/// gradients are unavailable; training on it is encoder-only.
class FileBackbone final : public Backbone {
 public:
  explicit FileBackbone(std::vector<HiddenFile> files);
  /// A single file, or every *.jsonl file of a directory in name order.
  static FileBackbone load(const std::filesystem::path& path);

  BackboneMeta meta() const override;
  EmbeddingSeq embed(std::span<const TokenId> tokens) const override;
  Vec forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const override;
  Mat vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const override;
  Vec next_token_logprobs(std::span<const TokenId> tokens) const override;
  Tokens generate(std::span<const TokenId> tokens, std::size_t max_new, DecodeStrategy strategy) const override;

  bool supports_vjp() const override { return false; }
  bool supports_token_ops() const override { return false; }

  bool has_layer(std::size_t layer) const { return files_.count(layer) != 0; }
  std::vector<std::size_t> layers() const;
  const HiddenFile& file(std::size_t layer) const;
  const std::vector<HiddenRecord>& records(std::size_t layer) const { return file(layer).records; }

 private:
  std::map<std::size_t, HiddenFile> files_;
  std::size_t dim_ = 0;
  std::string name_;
};

}  // namespace ssp
