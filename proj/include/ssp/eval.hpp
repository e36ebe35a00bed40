#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/backbone.hpp"
#include "ssp/data.hpp"
#include "ssp/file_backbone.hpp"
#include "ssp/model.hpp"
#include "ssp/objective.hpp"

namespace ssp {

// ---- scoring -----------------------------------------------------------

/// Higher scores mean "more likely truthful" for every method.
struct ScoreEntry {
  std::string id;
  double score = 0.0;
  int label = 0;
};

struct ScoreSet {
  std::string method;
  std::vector<ScoreEntry> entries;

  std::vector<double> scores() const;
  std::vector<int> labels() const;
  std::size_t count(int label) const;
};

/// Mann-Whitney AUROC with label 1 as the positive class; ties count 0.5.
double auroc(std::span<const double> scores, std::span<const int> labels);
double auroc(const ScoreSet& set);

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

/// One point per distinct score, thresholds descending, from (0,0) at +inf
/// to (1,1).
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);
/// "fpr,tpr" rows in curve order.
std::string roc_csv(std::span<const RocPoint> points);

/// 1 (truthful) iff score >= lambda.
int classify(double score, double lambda);
double balanced_accuracy(std::span<const double> scores, std::span<const int> labels, double lambda);

/// Midpoint between adjacent distinct sorted scores maximizing balanced
/// accuracy; the smallest such midpoint wins ties.
double calibrate_lambda(std::span<const double> scores, std::span<const int> labels);
double calibrate_lambda(const ScoreSet& set);

/// disc(z, z~) for each item under the model's metric, using the cached
/// perturbed hidden state.
ScoreSet score_items(std::span<const TrainItem> items, const DetectorModel& model, std::string method);

/// Scores one sample end to end through a token backbone.
double score_sample(const DetectorModel& model, const Backbone& backbone, const QASample& sample);

// ---- reports -----------------------------------------------------------

struct EvalReport {
  std::string method;
  std::string dataset;
  std::size_t layer = 0;
  double auroc = 0.0;
  std::optional<double> lambda;
  std::size_t n_truth = 0;
  std::size_t n_hallu = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<ScoreEntry> scores;
  std::vector<RocPoint> roc;
  std::string timestamp;

  /// Single-line JSON document followed by a newline.
  std::string to_json() const;
};

EvalReport make_report(const ScoreSet& set, std::string dataset, std::size_t layer, std::optional<double> lambda,
                       nlohmann::ordered_json config);

/// UTC time as 2026-01-31T12:00:00Z.
std::string utc_timestamp();

// ---- experiments -------------------------------------------------------

/// Provider of training and evaluation items for a detector.
class ItemSource {
 public:
  virtual ~ItemSource() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual std::size_t num_layers() const = 0;
  /// Token backbone for full-mode training, or null.
  virtual const Backbone* backbone() const = 0;
  virtual std::string backbone_name() const = 0;
  /// Items of one split, built under the model's layer, noise and generator.
  virtual std::vector<TrainItem> items(Split split, const DetectorModel& model) const = 0;
};

/// Question/answer samples run through a token backbone.
class SampleSource final : public ItemSource {
 public:
  SampleSource(const Backbone& backbone, LabeledDataset dataset, std::size_t train_cap = kDefaultTrainCap);

  std::string name() const override { return dataset_.name; }
  std::size_t dim() const override { return backbone_.meta().dim; }
  std::size_t num_layers() const override { return backbone_.meta().layers; }
  const Backbone* backbone() const override { return &backbone_; }
  std::string backbone_name() const override { return backbone_.meta().name; }
  std::vector<TrainItem> items(Split split, const DetectorModel& model) const override;

  std::vector<QASample> samples(Split split) const;

 private:
  const Backbone& backbone_;
  LabeledDataset dataset_;
  std::size_t train_cap_;
};

/// Precomputed hidden-state pairs.
class RecordSource final : public ItemSource {
 public:
  RecordSource(const FileBackbone& files, std::string name, std::size_t train_cap = kDefaultTrainCap);

  std::string name() const override { return name_; }
  std::size_t dim() const override { return files_.meta().dim; }
  std::size_t num_layers() const override { return files_.meta().layers; }
  const Backbone* backbone() const override { return nullptr; }
  std::string backbone_name() const override { return files_.meta().name; }
  std::vector<TrainItem> items(Split split, const DetectorModel& model) const override;

 private:
  const FileBackbone& files_;
  std::string name_;
  std::size_t train_cap_;
};

struct ExperimentConfig {
  LossConfig loss;
  std::size_t layer = 2;
  std::size_t prompt_length = 8;
  std::size_t d_out = 0;  // 0 = hidden width
  NoiseMode noise_mode = NoiseMode::seeded_text;
  bool include_suffix = true;
  std::string suffix_text{kDefaultSuffixText};
  bool broadcast = false;
  std::uint64_t seed = 0;
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);

/// Prompting strategy and component choices of one detector variant.
struct Variant {
  std::string name;
  NoiseMode noise_mode = NoiseMode::seeded_text;
  GeneratorKind generator = GeneratorKind::sample_specific;
  EncoderKind encoder = EncoderKind::mlp;
  TrainMode mode = TrainMode::full;
  bool reversed = false;
};

/// static_prompt, prompt_tuning, ssp_wo_encoder, ssp_wo_seedprompt, ssp and
/// optionally reversed.
std::vector<Variant> ablation_variants(bool include_reversed);
/// The full method under the configured noise mode and training mode.
Variant default_variant(const ExperimentConfig& cfg);
Variant find_variant(const ExperimentConfig& cfg, std::string_view name);

/// Fresh detector with parameters drawn from the configured seed.
DetectorModel init_model(const ItemSource& source, const ExperimentConfig& cfg, const Variant& variant);

struct TrainedDetector {
  DetectorModel model;
  TrainTrace trace;
};

/// Trains on the source's training split and calibrates lambda on the
/// resulting training scores.
TrainedDetector train_detector(const ItemSource& source, const ExperimentConfig& cfg, const Variant& variant);

/// Scores the test split with a frozen model.
EvalReport evaluate(const DetectorModel& model, const ItemSource& source, nlohmann::ordered_json config);

std::vector<EvalReport> layer_sweep(const ItemSource& source, const ExperimentConfig& cfg,
                                    std::span<const std::size_t> layers);

std::vector<EvalReport> ablation_suite(const ItemSource& source, const ExperimentConfig& cfg, bool include_reversed);

/// Applies a frozen model trained on `source_name` to the target's test split.
EvalReport transfer_eval(const DetectorModel& model, const std::string& source_name, const ItemSource& target);

// ---- baselines ---------------------------------------------------------

/// Mean negative log-probability of the answer tokens given the prompt.
double baseline_perplexity(const Backbone& backbone, const QASample& sample);

/// Log-probability of `choice_token` after (Q, A, T).
double baseline_self_eval(const Backbone& backbone, const QASample& sample, std::string_view suffix_text,
                          TokenId choice_token);

/// |p(choice | Q, A, T) - p(choice | Q, A, N, T)|.
double baseline_delta_p(const Backbone& backbone, const QASample& sample, std::span<const TokenId> noise,
                        std::string_view suffix_text, TokenId choice_token);

struct LinearProbe {
  Vec weight;
  double bias = 0.0;

  double predict(ConstSpan x) const;
};

/// Logistic regression by full-batch gradient descent (lr 0.01, 200 epochs),
/// weights initialized from the seed.
LinearProbe fit_linear_probe(std::span<const Vec> features, std::span<const int> labels, std::uint64_t seed,
                             double lr = 0.01, int epochs = 200);

inline constexpr TokenId kDefaultChoiceToken = 'A';

struct BaselineConfig {
  TokenId choice_token = kDefaultChoiceToken;
  std::string suffix_text{kDefaultSuffixText};
  std::size_t prompt_length = 8;
  NoiseMode noise_mode = NoiseMode::seeded_text;
};

/// Test-split report for "perplexity", "self_eval", "delta_p" or
/// "linear_probe". The token baselines need a SampleSource.
EvalReport run_baseline(std::string_view method, const ItemSource& source, const ExperimentConfig& cfg,
                        const BaselineConfig& baseline);

}  // namespace ssp
