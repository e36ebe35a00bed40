#include "ssp/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ssp/error.hpp"

namespace ssp {

using json = nlohmann::json;

std::string_view to_string(BackboneKind kind) {
  switch (kind) {
    case BackboneKind::toy: return "toy";
    case BackboneKind::file: return "file";
    case BackboneKind::remote: return "remote";
  }
  return "toy";
}

BackboneKind parse_backbone_kind(std::string_view name) {
  if (name == "toy") return BackboneKind::toy;
  if (name == "file") return BackboneKind::file;
  if (name == "remote") return BackboneKind::remote;
  throw Error(ErrorCode::ConfigError, "backbone: unknown kind '" + std::string(name) + "'");
}

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "backbone", "toy_seed",      "remote",   "layer",          "metric",        "metric_objective",
      "tau_T",    "tau_H",         "lr",       "epochs",         "batch",         "mode",
      "reversed", "noise_mode",    "prompt_length", "d_out",     "broadcast",     "seed",
      "include_suffix", "suffix_text", "train_cap", "choice_token", "dataset",    "hidden",
      "checkpoint", "source",      "target",   "out",            "method",        "variant",
      "layers",   "with_reversed"};
  return keys;
}

template <typename T>
T get(const json& doc, const std::string& key) {
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::ConfigError, key + ": invalid value " + doc.at(key).dump());
  }
}

std::size_t get_count(const json& doc, const std::string& key) {
  if (!doc.at(key).is_number_unsigned()) {
    throw Error(ErrorCode::ConfigError, key + ": expected a non-negative integer, got " + doc.at(key).dump());
  }
  return doc.at(key).get<std::size_t>();
}

}  // namespace

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) throw Error(ErrorCode::ConfigError, "config must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (!known_keys().count(key)) throw Error(ErrorCode::ConfigError, key + ": unknown config key");
  }
  RunConfig c;
  auto has = [&](const char* key) { return doc.contains(key) && !doc.at(key).is_null(); };
  auto path = [&](const char* key) { return std::filesystem::path(get<std::string>(doc, key)); };
  ExperimentConfig& e = c.experiment;

  if (has("backbone")) c.backbone = parse_backbone_kind(get<std::string>(doc, "backbone"));
  if (has("toy_seed")) c.toy_seed = get<std::uint64_t>(doc, "toy_seed");
  if (has("remote")) c.remote = get<std::string>(doc, "remote");
  if (has("layer")) c.layer = get_count(doc, "layer");
  if (has("metric")) e.loss.metric = parse_metric(get<std::string>(doc, "metric"));
  if (has("metric_objective")) e.loss.metric_objective = get<bool>(doc, "metric_objective");
  if (has("tau_T")) e.loss.tau_t = get<double>(doc, "tau_T");
  if (has("tau_H")) e.loss.tau_h = get<double>(doc, "tau_H");
  if (has("lr")) e.loss.lr = get<double>(doc, "lr");
  if (has("epochs")) e.loss.epochs = get<int>(doc, "epochs");
  if (has("batch")) e.loss.batch = get_count(doc, "batch");
  if (has("mode")) e.loss.mode = parse_train_mode(get<std::string>(doc, "mode"));
  if (has("reversed")) e.loss.reversed = get<bool>(doc, "reversed");
  if (has("noise_mode")) e.noise_mode = parse_noise_mode(get<std::string>(doc, "noise_mode"));
  if (has("prompt_length")) e.prompt_length = get_count(doc, "prompt_length");
  if (has("d_out")) e.d_out = get_count(doc, "d_out");
  if (has("broadcast")) e.broadcast = get<bool>(doc, "broadcast");
  if (has("seed")) e.seed = get<std::uint64_t>(doc, "seed");
  if (has("include_suffix")) e.include_suffix = get<bool>(doc, "include_suffix");
  if (has("suffix_text")) e.suffix_text = get<std::string>(doc, "suffix_text");
  if (has("train_cap")) c.train_cap = get_count(doc, "train_cap");
  if (has("choice_token")) c.choice_token = get<TokenId>(doc, "choice_token");
  if (has("dataset")) c.dataset = path("dataset");
  if (has("hidden")) c.hidden = path("hidden");
  if (has("checkpoint")) c.checkpoint = path("checkpoint");
  if (has("source")) c.source = path("source");
  if (has("target")) c.target = path("target");
  if (has("out")) c.out = path("out");
  if (has("method")) c.method = get<std::string>(doc, "method");
  if (has("variant")) c.variant = get<std::string>(doc, "variant");
  if (has("layers")) c.layers = get<std::vector<std::size_t>>(doc, "layers");
  if (has("with_reversed")) c.with_reversed = get<bool>(doc, "with_reversed");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, "config: " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(doc);
}

void check_paths(const RunConfig& cfg) {
  auto check = [](const char* key, const std::optional<std::filesystem::path>& p) {
    if (p && !std::filesystem::exists(*p)) {
      throw Error(ErrorCode::ConfigError, std::string(key) + ": path does not exist: " + p->string());
    }
  };
  check("dataset", cfg.dataset);
  check("hidden", cfg.hidden);
  check("checkpoint", cfg.checkpoint);
  check("source", cfg.source);
  check("target", cfg.target);
}

}  // namespace ssp
