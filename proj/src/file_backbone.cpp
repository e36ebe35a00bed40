#include "ssp/file_backbone.hpp"

#include <algorithm>

#include "ssp/error.hpp"

namespace ssp {

FileBackbone::FileBackbone(std::vector<HiddenFile> files) {
  if (files.empty()) throw Error(ErrorCode::EmptyDataset, "no hidden-state files");
  dim_ = files.front().dim;
  name_ = files.front().model;
  for (auto& f : files) {
    if (f.dim != dim_) {
      throw Error(ErrorCode::DimMismatch,
                  "hidden files disagree on width: " + std::to_string(dim_) + " vs " + std::to_string(f.dim));
    }
    if (f.layer == 0) throw Error(ErrorCode::SchemaError, "hidden file has layer 0");
    const std::size_t layer = f.layer;
    if (!files_.emplace(layer, std::move(f)).second) {
      throw Error(ErrorCode::SchemaError, "two hidden files for layer " + std::to_string(layer));
    }
  }
}

FileBackbone FileBackbone::load(const std::filesystem::path& path) {
  std::vector<HiddenFile> files;
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> paths;
    for (const auto& entry : std::filesystem::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".jsonl") paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) files.push_back(read_hidden(p));
  } else {
    files.push_back(read_hidden(path));
  }
  return FileBackbone(std::move(files));
}

BackboneMeta FileBackbone::meta() const {
  return {dim_, files_.rbegin()->first, 1, 1, name_};
}

std::vector<std::size_t> FileBackbone::layers() const {
  std::vector<std::size_t> out;
  for (const auto& [layer, _] : files_) out.push_back(layer);
  return out;
}

const HiddenFile& FileBackbone::file(std::size_t layer) const {
  const auto it = files_.find(layer);
  if (it == files_.end()) throw Error(ErrorCode::LayerOutOfRange, "no hidden file for layer " + std::to_string(layer));
  return it->second;
}

EmbeddingSeq FileBackbone::embed(std::span<const TokenId>) const {
  throw Error(ErrorCode::UnsupportedCapability, "file-backed backbone has no token embeddings");
}

Vec FileBackbone::forward_hidden(const EmbeddingSeq&, std::size_t layer) const {
  file(layer);
  throw Error(ErrorCode::UnsupportedInput, "file-backed backbone only serves precomputed records");
}

Mat FileBackbone::vjp_inject(const EmbeddingSeq&, std::size_t, ConstSpan) const {
  throw Error(ErrorCode::UnsupportedCapability, "file-backed backbone has no gradients");
}

Vec FileBackbone::next_token_logprobs(std::span<const TokenId>) const {
  throw Error(ErrorCode::UnsupportedCapability, "file-backed backbone has no language-model head");
}

Tokens FileBackbone::generate(std::span<const TokenId>, std::size_t, DecodeStrategy) const {
  throw Error(ErrorCode::UnsupportedCapability, "file-backed backbone cannot generate");
}

}  // namespace ssp
