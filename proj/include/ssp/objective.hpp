#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssp/backbone.hpp"
#include "ssp/data.hpp"
#include "ssp/model.hpp"
#include "ssp/numerics.hpp"

namespace ssp {

enum class TrainMode { full, encoder_only };

std::string_view to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view name);

struct LossConfig {
  double tau_t = 0.3;
  double tau_h = 0.7;
  /// Scoring metric. The hinge is applied to cosine similarity unless
  /// metric_objective is set, in which case it uses 1 - dist(z, z~, metric).
  Metric metric = Metric::cosine;
  bool metric_objective = false;
  double lr = 0.01;
  int epochs = 40;
  std::size_t batch = 10;  // 0 = full batch; mini-batches are drawn in a seeded order
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::full;
  /// Truthful pairs are held above tau_t and hallucinated pairs pushed below
  /// tau_h, the opposite of the normal objective.
  bool reversed = false;
};

void validate(const LossConfig& cfg);

double disc(ConstSpan z, ConstSpan z_t, Metric metric);

/// max(0, cos - tau_t)
double loss_truth(double cos_val, double tau_t);
/// max(0, tau_h - cos)
double loss_hallu(double cos_val, double tau_h);

struct HingeTerm {
  double loss = 0.0;
  double slope = 0.0;  // d loss / d similarity; 0 on the flat side and at the kink
};

HingeTerm sample_hinge(double similarity, int label, const LossConfig& cfg);

struct LossPair {
  double cos = 0.0;
  int label = 0;
};

/// Mean of the per-sample hinge terms.
double batch_loss(std::span<const LossPair> pairs, const LossConfig& cfg);

/// Swaps the thresholds and flips the objective direction; applying it twice
/// restores the original configuration.
LossConfig reversed_objective(LossConfig cfg);

/// Everything needed to rebuild the perturbed pass of a sample.
struct PromptInput {
  EmbeddingSeq qa;
  std::optional<EmbeddingSeq> suffix;
  NoisePromptState noise;
  Vec h;
  std::size_t max_context = 0;
};

struct TrainItem {
  std::string id;
  int label = 0;
  Vec hidden_orig;
  Vec hidden_pert;
  std::optional<PromptInput> prompt;
};

std::vector<TrainItem> items_from_records(std::span<const HiddenRecord> records);

/// Embeds each sample, runs the original pass once and the perturbed pass with
/// the model's current generator.
std::vector<TrainItem> items_from_samples(std::span<const QASample> samples, const Backbone& backbone,
                                          const DetectorModel& model);

/// Perturbed sequence for an item under the model's generator.
EmbeddingSeq perturbed_sequence(const TrainItem& item, const DetectorModel& model, GeneratorTape* tape = nullptr);

/// Parameter groups that SGD updates for this model and mode.
bool generator_trainable(const DetectorModel& model, TrainMode mode);
bool encoder_trainable(const DetectorModel& model);

struct ObjectiveResult {
  double loss = 0.0;             // mean over the batch
  std::vector<double> losses;    // per item
  std::vector<double> scores;    // disc(z, z~) per item, scoring metric
};

/// Averaged training objective over the given items. In full mode with a
/// trainable generator the perturbed pass is recomputed through the backbone;
/// otherwise the cached perturbed hidden state is used. When `grads` is set it
/// receives the gradient with respect to every parameter.
ObjectiveResult objective(std::span<const TrainItem* const> items, const Backbone* backbone,
                          const DetectorModel& model, const LossConfig& cfg, ModelGrads* grads = nullptr);

struct TrainTrace {
  std::vector<double> mean_loss;
  std::vector<double> train_auroc;  // NaN when an epoch saw one class only
  std::vector<double> seconds;

  std::string to_csv() const;
};

struct TrainResult {
  DetectorModel model;
  TrainTrace trace;
};

/// Plain SGD (no momentum) on the trainable parameters.
TrainResult train(std::vector<TrainItem> items, const Backbone* backbone, DetectorModel model, const LossConfig& cfg);

}  // namespace ssp
