#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/eval.hpp"

namespace ssp {

enum class BackboneKind { toy, file, remote };

std::string_view to_string(BackboneKind kind);
BackboneKind parse_backbone_kind(std::string_view name);

/// Everything a command needs, read from one JSON document and then
/// overridden by flags.
struct RunConfig {
  BackboneKind backbone = BackboneKind::toy;
  std::uint64_t toy_seed = 0;
  /// "host:port" or "stdio:<command>".
  std::string remote;

  ExperimentConfig experiment;
  /// Unset means half the backbone depth, rounded down.
  std::optional<std::size_t> layer;
  std::size_t train_cap = kDefaultTrainCap;
  TokenId choice_token = kDefaultChoiceToken;

  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> hidden;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> source;
  std::optional<std::filesystem::path> target;
  std::filesystem::path out = "out";

  std::string method = "ssp";
  /// Empty means the full method for train and every variant for ablate.
  std::string variant;
  std::vector<std::size_t> layers;
  bool with_reversed = false;
};

/// Reads recognized keys; unknown keys and wrong types are ConfigErrors that
/// name the key.
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Every path the config names must exist; the message names the key.
void check_paths(const RunConfig& cfg);

}  // namespace ssp
