#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ssp/numerics.hpp"

namespace ssp {

enum class Split { train, test };

std::string_view to_string(Split split);

struct QASample {
  std::string id;
  std::string question;
  std::string answer;
  std::optional<std::string> context;
  std::vector<std::string> references;
  std::optional<int> label;
  std::optional<std::string> noise_text;
  std::optional<std::string> split;

  bool operator==(const QASample&) const = default;
};

struct LabeledDataset {
  std::string name;
  std::vector<QASample> samples;

  bool operator==(const LabeledDataset&) const = default;
};

/// Default cap on the number of labeled training samples.
inline constexpr std::size_t kDefaultTrainCap = 100;

LabeledDataset load_dataset(const std::filesystem::path& path);
LabeledDataset parse_dataset(std::string_view text, std::string name);
void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& path);
std::string dataset_to_jsonl(const LabeledDataset& dataset);

/// Samples of one split. With split tags present they are honored; without
/// any, the first `train_cap` samples train and the rest test. The training
/// side is always capped at `train_cap`.
std::vector<QASample> select_split(const std::vector<QASample>& samples, Split split,
                                   std::size_t train_cap = kDefaultTrainCap);

/// Question prompt without the answer, e.g.
/// "Answer the question concisely. Q: {question} A:".
std::string build_prompt(const QASample& sample, bool has_context);

/// ROUGE-L F1 over lowercased, whitespace-split tokens with ASCII punctuation
/// stripped.
double rouge_l_f1(std::string_view candidate, std::string_view reference);
std::vector<std::string> rouge_tokens(std::string_view text);

/// 1 iff the best ROUGE-L F1 against any reference is strictly above threshold.
int label_by_similarity(std::string_view generation, const std::vector<std::string>& references,
                        double threshold = 0.5);

struct HiddenRecord {
  std::string id;
  int label = 0;
  std::size_t layer = 0;
  Vec h_orig;
  Vec h_pert;
  std::optional<std::string> split;

  bool operator==(const HiddenRecord&) const = default;
};

struct HiddenFile {
  std::string model;
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::vector<HiddenRecord> records;  // canonical order: sorted by id
};

/// Values are stored at single precision; writing rounds every entry to the
/// nearest float and reading widens back to double.
void write_hidden(const HiddenFile& file, const std::filesystem::path& path);
std::string hidden_to_jsonl(const HiddenFile& file);
HiddenFile read_hidden(const std::filesystem::path& path);
HiddenFile parse_hidden(std::string_view text);

std::vector<HiddenRecord> select_split(const std::vector<HiddenRecord>& records, Split split,
                                       std::size_t train_cap = kDefaultTrainCap);

struct SyntheticSpec {
  std::size_t n_per_class = 100;  // per split
  std::size_t dim = 32;
  double gap = 1.0;               // gamma in [0, 1]
  double noise = 0.05;            // sigma
  std::uint64_t seed = 0;
  std::size_t layers = 1;
  std::optional<std::size_t> planted_layer;
};

/// Target pair cosine for truthful samples, 0.9 - 0.7 * gap.
double planted_truth_cosine(double gap);
/// Target pair cosine for hallucinated samples.
inline constexpr double kPlantedHalluCosine = 0.9;

/// One HiddenFile per layer. Each holds n_per_class samples of each label in
/// the train split and the same again in the test split. Truthful pairs sit
/// at cosine planted_truth_cosine(gap), hallucinated pairs at 0.9, before
/// Gaussian jitter of scale `noise` per unit norm. With a planted layer, only
/// that layer carries the gap; the others use gap 0.
std::vector<HiddenFile> synth_planted(const SyntheticSpec& spec);

/// Short labeled question/answer pairs with noise text, for exercising token
/// backbones.
LabeledDataset synth_qa(std::size_t n, std::uint64_t seed);

}  // namespace ssp
