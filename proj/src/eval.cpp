#include "ssp/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <numeric>
#include <sstream>

#include "ssp/error.hpp"
#include "ssp/rng.hpp"

namespace ssp {

using ordered_json = nlohmann::ordered_json;

std::vector<double> ScoreSet::scores() const {
  std::vector<double> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.score);
  return out;
}

std::vector<int> ScoreSet::labels() const {
  std::vector<int> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.label);
  return out;
}

std::size_t ScoreSet::count(int label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [label](const ScoreEntry& e) { return e.label == label; }));
}

namespace {

struct ClassCounts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

ClassCounts check_scores(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
  ClassCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw Error(ErrorCode::NonFiniteFunction, "non-finite score at index " + std::to_string(i));
    if (labels[i] == 1) {
      ++c.pos;
    } else if (labels[i] == 0) {
      ++c.neg;
    } else {
      throw Error(ErrorCode::SchemaError, "labels must be 0 or 1");
    }
  }
  if (c.pos == 0 || c.neg == 0) throw Error(ErrorCode::SingleClass, "both labels are required");
  return c;
}

std::vector<std::size_t> order_by_score(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return idx;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_scores(scores, labels);
  const auto idx = order_by_score(scores);
  // sum of midranks (1-based) over positives
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]] == 1) rank_sum += midrank;
    }
    i = j;
  }
  const double np = static_cast<double>(c.pos);
  const double nn = static_cast<double>(c.neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double auroc(const ScoreSet& set) { return auroc(set.scores(), set.labels()); }

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  const ClassCounts c = check_scores(scores, labels);
  auto idx = order_by_score(scores);
  std::reverse(idx.begin(), idx.end());
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  std::size_t tp = 0;
  std::size_t fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double t = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == t) {
      (labels[idx[i]] == 1 ? tp : fp) += 1;
      ++i;
    }
    out.push_back({t, static_cast<double>(fp) / static_cast<double>(c.neg),
                   static_cast<double>(tp) / static_cast<double>(c.pos)});
  }
  return out;
}

std::string roc_csv(std::span<const RocPoint> points) {
  std::ostringstream out;
  out << "fpr,tpr\n";
  for (const auto& p : points) out << format_double(p.fpr) << ',' << format_double(p.tpr) << '\n';
  return out.str();
}

int classify(double score, double lambda) { return score >= lambda ? 1 : 0; }

double balanced_accuracy(std::span<const double> scores, std::span<const int> labels, double lambda) {
  const ClassCounts c = check_scores(scores, labels);
  std::size_t tp = 0;
  std::size_t tn = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const int pred = classify(scores[i], lambda);
    if (labels[i] == 1 && pred == 1) ++tp;
    if (labels[i] == 0 && pred == 0) ++tn;
  }
  return 0.5 * (static_cast<double>(tp) / static_cast<double>(c.pos) +
                static_cast<double>(tn) / static_cast<double>(c.neg));
}

double calibrate_lambda(std::span<const double> scores, std::span<const int> labels) {
  check_scores(scores, labels);
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  if (sorted.size() == 1) return sorted.front();
  double best_lambda = 0.0;
  double best = -1.0;
  for (std::size_t i = 0; i + 1 < sorted.size(); ++i) {
    const double lambda = 0.5 * (sorted[i] + sorted[i + 1]);
    const double acc = balanced_accuracy(scores, labels, lambda);
    if (acc > best) {
      best = acc;
      best_lambda = lambda;
    }
  }
  return best_lambda;
}

double calibrate_lambda(const ScoreSet& set) { return calibrate_lambda(set.scores(), set.labels()); }

ScoreSet score_items(std::span<const TrainItem> items, const DetectorModel& model, std::string method) {
  ScoreSet set;
  set.method = std::move(method);
  set.entries.reserve(items.size());
  for (const auto& item : items) {
    const Vec z = encode(model.encoder, item.hidden_orig);
    const Vec zt = encode(model.encoder, item.hidden_pert);
    set.entries.push_back({item.id, disc(z, zt, model.meta.metric), item.label});
  }
  return set;
}

double score_sample(const DetectorModel& model, const Backbone& backbone, const QASample& sample) {
  QASample s = sample;
  if (!s.label) s.label = 0;
  const auto items = items_from_samples(std::span<const QASample>(&s, 1), backbone, model);
  return score_items(items, model, model.meta.variant).entries.front().score;
}

std::string EvalReport::to_json() const {
  ordered_json j;
  j["format"] = "ssp-report";
  j["version"] = 1;
  j["method"] = method;
  j["dataset"] = dataset;
  j["layer"] = layer;
  j["auroc"] = auroc;
  j["lambda"] = lambda ? ordered_json(*lambda) : ordered_json(nullptr);
  j["n_truth"] = n_truth;
  j["n_hallu"] = n_hallu;
  j["config"] = config;
  ordered_json arr = ordered_json::array();
  for (const auto& e : scores) arr.push_back({{"id", e.id}, {"score", e.score}, {"label", e.label}});
  j["scores"] = std::move(arr);
  j["timestamp"] = timestamp;
  return j.dump() + "\n";
}

EvalReport make_report(const ScoreSet& set, std::string dataset, std::size_t layer, std::optional<double> lambda,
                       ordered_json config) {
  EvalReport r;
  r.method = set.method;
  r.dataset = std::move(dataset);
  r.layer = layer;
  const auto scores = set.scores();
  const auto labels = set.labels();
  r.auroc = auroc(scores, labels);
  r.roc = roc_curve(scores, labels);
  r.lambda = lambda;
  r.n_truth = set.count(1);
  r.n_hallu = set.count(0);
  r.config = std::move(config);
  r.scores = set.entries;
  r.timestamp = utc_timestamp();
  return r;
}

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

SampleSource::SampleSource(const Backbone& backbone, LabeledDataset dataset, std::size_t train_cap)
    : backbone_(backbone), dataset_(std::move(dataset)), train_cap_(train_cap) {}

std::vector<QASample> SampleSource::samples(Split split) const {
  auto out = select_split(dataset_.samples, split, train_cap_);
  if (out.empty()) {
    throw Error(ErrorCode::EmptyDataset, "dataset '" + dataset_.name + "' has no " + std::string(to_string(split)) + " samples");
  }
  return out;
}

std::vector<TrainItem> SampleSource::items(Split split, const DetectorModel& model) const {
  return items_from_samples(samples(split), backbone_, model);
}

RecordSource::RecordSource(const FileBackbone& files, std::string name, std::size_t train_cap)
    : files_(files), name_(std::move(name)), train_cap_(train_cap) {}

std::vector<TrainItem> RecordSource::items(Split split, const DetectorModel& model) const {
  const auto records = select_split(files_.records(model.meta.layer), split, train_cap_);
  if (records.empty()) {
    throw Error(ErrorCode::EmptyDataset, "hidden file for layer " + std::to_string(model.meta.layer) + " has no " +
                                             std::string(to_string(split)) + " records");
  }
  return items_from_records(records);
}

ordered_json to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["layer"] = cfg.layer;
  j["metric"] = to_string(cfg.loss.metric);
  j["metric_objective"] = cfg.loss.metric_objective;
  j["tau_T"] = cfg.loss.tau_t;
  j["tau_H"] = cfg.loss.tau_h;
  j["reversed"] = cfg.loss.reversed;
  j["lr"] = cfg.loss.lr;
  j["epochs"] = cfg.loss.epochs;
  j["batch"] = cfg.loss.batch;
  j["mode"] = to_string(cfg.loss.mode);
  j["prompt_length"] = cfg.prompt_length;
  j["d_out"] = cfg.d_out;
  j["noise_mode"] = to_string(cfg.noise_mode);
  j["include_suffix"] = cfg.include_suffix;
  j["suffix_text"] = cfg.suffix_text;
  j["broadcast"] = cfg.broadcast;
  j["seed"] = cfg.seed;
  return j;
}

std::vector<Variant> ablation_variants(bool include_reversed) {
  std::vector<Variant> v{
      {"static_prompt", NoiseMode::static_text, GeneratorKind::none, EncoderKind::mlp, TrainMode::encoder_only, false},
      {"prompt_tuning", NoiseMode::static_text, GeneratorKind::global, EncoderKind::mlp, TrainMode::full, false},
      {"ssp_wo_encoder", NoiseMode::seeded_text, GeneratorKind::sample_specific, EncoderKind::identity, TrainMode::full,
       false},
      {"ssp_wo_seedprompt", NoiseMode::random, GeneratorKind::sample_specific, EncoderKind::mlp, TrainMode::full, false},
      {"ssp", NoiseMode::seeded_text, GeneratorKind::sample_specific, EncoderKind::mlp, TrainMode::full, false},
  };
  if (include_reversed) {
    v.push_back({"reversed", NoiseMode::seeded_text, GeneratorKind::sample_specific, EncoderKind::mlp, TrainMode::full,
                 true});
  }
  return v;
}

Variant default_variant(const ExperimentConfig& cfg) {
  return {"ssp", cfg.noise_mode, GeneratorKind::sample_specific, EncoderKind::mlp, cfg.loss.mode, false};
}

Variant find_variant(const ExperimentConfig& cfg, std::string_view name) {
  if (name == "ssp") return default_variant(cfg);
  for (const auto& v : ablation_variants(true)) {
    if (v.name == name) return v;
  }
  throw Error(ErrorCode::ConfigError, "unknown variant '" + std::string(name) + "'");
}

DetectorModel init_model(const ItemSource& source, const ExperimentConfig& cfg, const Variant& variant) {
  const std::size_t dim = source.dim();
  if (cfg.layer < 1 || cfg.layer > source.num_layers()) {
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(cfg.layer) + " outside 1.." +
                                                std::to_string(source.num_layers()));
  }
  LossConfig loss = cfg.loss;
  if (variant.reversed && !loss.reversed) loss = reversed_objective(loss);

  DetectorModel model;
  Rng gen_rng(derive_seed(cfg.seed, "generator"));
  Rng enc_rng(derive_seed(cfg.seed, "encoder"));
  model.generator =
      PromptGenerator::create(dim, cfg.prompt_length, 2 * dim, gen_rng, variant.generator, cfg.broadcast);
  const std::size_t d_out = cfg.d_out == 0 ? dim : cfg.d_out;
  model.encoder = variant.encoder == EncoderKind::mlp ? Encoder::create(dim, d_out, enc_rng) : Encoder::identity(dim);

  DetectorMeta& m = model.meta;
  m.dim = dim;
  m.d_out = model.encoder.out_dim;
  m.prompt_length = cfg.prompt_length;
  m.layer = cfg.layer;
  m.metric = loss.metric;
  m.tau_t = loss.tau_t;
  m.tau_h = loss.tau_h;
  m.reversed = loss.reversed;
  m.suffix_text = cfg.suffix_text;
  m.include_suffix = cfg.include_suffix;
  m.noise_mode = variant.noise_mode;
  m.noise_seed = derive_seed(cfg.seed, "noise");
  m.variant = variant.name;
  m.backbone = source.backbone_name();
  return model;
}

TrainedDetector train_detector(const ItemSource& source, const ExperimentConfig& cfg, const Variant& variant) {
  DetectorModel model = init_model(source, cfg, variant);
  LossConfig loss = cfg.loss;
  if (variant.reversed && !loss.reversed) loss = reversed_objective(loss);
  loss.mode = variant.mode;
  loss.seed = derive_seed(cfg.seed, "train");

  auto items = source.items(Split::train, model);
  TrainResult result = train(items, source.backbone(), std::move(model), loss);
  // the perturbed pass moved with the generator; rebuild before scoring
  if (generator_trainable(result.model, loss.mode) && source.backbone()) {
    items = source.items(Split::train, result.model);
  }
  const ScoreSet train_scores = score_items(items, result.model, variant.name);
  try {
    result.model.meta.lambda = calibrate_lambda(train_scores);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  return {std::move(result.model), std::move(result.trace)};
}

EvalReport evaluate(const DetectorModel& model, const ItemSource& source, ordered_json config) {
  if (model.meta.dim != source.dim()) {
    throw Error(ErrorCode::DimMismatch, "model width " + std::to_string(model.meta.dim) + " but data width " +
                                            std::to_string(source.dim()));
  }
  const auto items = source.items(Split::test, model);
  return make_report(score_items(items, model, model.meta.variant), source.name(), model.meta.layer,
                     model.meta.lambda, std::move(config));
}

std::vector<EvalReport> layer_sweep(const ItemSource& source, const ExperimentConfig& cfg,
                                    std::span<const std::size_t> layers) {
  std::vector<EvalReport> out;
  for (const std::size_t layer : layers) {
    ExperimentConfig c = cfg;
    c.layer = layer;
    const auto trained = train_detector(source, c, default_variant(c));
    out.push_back(evaluate(trained.model, source, to_json(c)));
  }
  return out;
}

std::vector<EvalReport> ablation_suite(const ItemSource& source, const ExperimentConfig& cfg, bool include_reversed) {
  std::vector<EvalReport> out;
  for (const auto& v : ablation_variants(include_reversed)) {
    const auto trained = train_detector(source, cfg, v);
    ordered_json c = to_json(cfg);
    c["variant"] = v.name;
    out.push_back(evaluate(trained.model, source, std::move(c)));
  }
  return out;
}

EvalReport transfer_eval(const DetectorModel& model, const std::string& source_name, const ItemSource& target) {
  ordered_json c;
  c["source"] = source_name;
  c["target"] = target.name();
  return evaluate(model, target, std::move(c));
}

double baseline_perplexity(const Backbone& backbone, const QASample& sample) {
  Tokens tokens = byte_tokenize(build_prompt(sample, sample.context.has_value()));
  const std::size_t prompt_len = tokens.size();
  const Tokens answer = byte_tokenize(" " + sample.answer);
  tokens.insert(tokens.end(), answer.begin(), answer.end());
  check_tokens(backbone.meta(), tokens);
  double nll = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    const Vec lp = backbone.next_token_logprobs(std::span<const TokenId>(tokens.data(), prompt_len + i));
    nll -= lp[static_cast<std::size_t>(answer[i])];
  }
  return nll / static_cast<double>(answer.size());
}

namespace {

double choice_logprob(const Backbone& backbone, const Tokens& tokens, TokenId choice) {
  const auto meta = backbone.meta();
  if (choice < 0 || static_cast<std::size_t>(choice) >= meta.vocab) {
    throw Error(ErrorCode::TokenOutOfRange, "choice token " + std::to_string(choice) + " outside the vocabulary");
  }
  return backbone.next_token_logprobs(tokens)[static_cast<std::size_t>(choice)];
}

Tokens concat(std::initializer_list<std::span<const TokenId>> parts) {
  Tokens out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

double baseline_self_eval(const Backbone& backbone, const QASample& sample, std::string_view suffix_text,
                          TokenId choice_token) {
  const Tokens qa = qa_tokens(sample);
  const Tokens suffix = EvalSuffix::from_text(suffix_text).tokens;
  return choice_logprob(backbone, concat({qa, suffix}), choice_token);
}

double baseline_delta_p(const Backbone& backbone, const QASample& sample, std::span<const TokenId> noise,
                        std::string_view suffix_text, TokenId choice_token) {
  const Tokens qa = qa_tokens(sample);
  const Tokens suffix = EvalSuffix::from_text(suffix_text).tokens;
  const double p0 = std::exp(choice_logprob(backbone, concat({qa, suffix}), choice_token));
  const double p1 = std::exp(choice_logprob(backbone, concat({qa, noise, suffix}), choice_token));
  return std::abs(p0 - p1);
}

double LinearProbe::predict(ConstSpan x) const {
  const double a = dot(weight, x) + bias;
  return 1.0 / (1.0 + std::exp(-a));
}

LinearProbe fit_linear_probe(std::span<const Vec> features, std::span<const int> labels, std::uint64_t seed,
                             double lr, int epochs) {
  if (features.empty() || features.size() != labels.size()) {
    throw Error(ErrorCode::ShapeMismatch, "probe features and labels differ in length");
  }
  const std::size_t pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (pos == 0 || pos == labels.size()) throw Error(ErrorCode::SingleClass, "probe needs both labels");
  const std::size_t d = features.front().size();
  LinearProbe probe;
  Rng rng(derive_seed(seed, "linear-probe"));
  probe.weight.resize(d);
  for (double& w : probe.weight) w = 0.01 * rng.normal();
  const double inv_n = 1.0 / static_cast<double>(features.size());
  for (int e = 0; e < epochs; ++e) {
    Vec gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i].size() != d) throw Error(ErrorCode::ShapeMismatch, "probe features differ in width");
      const double r = (probe.predict(features[i]) - static_cast<double>(labels[i])) * inv_n;
      axpy(r, features[i], gw);
      gb += r;
    }
    axpy(-lr, gw, probe.weight);
    probe.bias -= lr * gb;
  }
  return probe;
}

EvalReport run_baseline(std::string_view method, const ItemSource& source, const ExperimentConfig& cfg,
                        const BaselineConfig& baseline) {
  ordered_json config = to_json(cfg);
  config["choice_token"] = baseline.choice_token;
  ScoreSet set;
  set.method = std::string(method);

  if (method == "linear_probe") {
    const DetectorModel model = init_model(source, cfg, default_variant(cfg));
    const auto train_items = source.items(Split::train, model);
    const auto test_items = source.items(Split::test, model);
    std::vector<Vec> x;
    std::vector<int> y;
    for (const auto& it : train_items) {
      x.push_back(it.hidden_orig);
      y.push_back(it.label);
    }
    const LinearProbe probe = fit_linear_probe(x, y, cfg.seed);
    for (const auto& it : test_items) set.entries.push_back({it.id, probe.predict(it.hidden_orig), it.label});
    return make_report(set, source.name(), cfg.layer, std::nullopt, std::move(config));
  }

  const auto* samples = dynamic_cast<const SampleSource*>(&source);
  if (!samples || !samples->backbone()->supports_token_ops()) {
    throw Error(ErrorCode::CapabilityMissing,
                "baseline '" + std::string(method) + "' needs question/answer samples on a backbone with token log-probabilities");
  }
  const Backbone& bb = *samples->backbone();
  const std::uint64_t noise_seed = derive_seed(cfg.seed, "noise");
  for (const auto& s : samples->samples(Split::test)) {
    if (!s.label) throw Error(ErrorCode::SchemaError, "sample '" + s.id + "' has no label");
    double score = 0.0;
    if (method == "perplexity") {
      // low perplexity reads as truthful
      score = -baseline_perplexity(bb, s);
    } else if (method == "self_eval") {
      score = baseline_self_eval(bb, s, baseline.suffix_text, baseline.choice_token);
    } else if (method == "delta_p") {
      const Tokens noise = noise_tokens(s, baseline.noise_mode, baseline.prompt_length, noise_seed, bb.meta().vocab);
      score = baseline_delta_p(bb, s, noise, baseline.suffix_text, baseline.choice_token);
    } else {
      throw Error(ErrorCode::ConfigError, "unknown method '" + std::string(method) + "'");
    }
    set.entries.push_back({s.id, score, *s.label});
  }
  return make_report(set, source.name(), cfg.layer, std::nullopt, std::move(config));
}

}  // namespace ssp
