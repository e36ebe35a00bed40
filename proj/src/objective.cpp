#include "ssp/objective.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ssp/error.hpp"
#include "ssp/eval.hpp"
#include "ssp/rng.hpp"

namespace ssp {

std::string_view to_string(TrainMode mode) { return mode == TrainMode::full ? "full" : "encoder_only"; }

TrainMode parse_train_mode(std::string_view name) {
  if (name == "full") return TrainMode::full;
  if (name == "encoder_only" || name == "encoder-only") return TrainMode::encoder_only;
  throw Error(ErrorCode::ConfigError, "unknown training mode '" + std::string(name) + "'");
}

void validate(const LossConfig& cfg) {
  auto in_range = [](double t) { return t > 0.0 && t < 1.0; };
  if (!in_range(cfg.tau_t) || !in_range(cfg.tau_h)) {
    throw Error(ErrorCode::ConfigError, "thresholds must lie strictly between 0 and 1");
  }
  // lr = 0 is accepted so a run can be replayed without updates
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw Error(ErrorCode::ConfigError, "learning rate must be >= 0");
  if (cfg.epochs < 1) throw Error(ErrorCode::ConfigError, "epochs must be at least 1");
}

double disc(ConstSpan z, ConstSpan z_t, Metric metric) { return dist(z, z_t, metric); }

double loss_truth(double cos_val, double tau_t) { return std::max(0.0, cos_val - tau_t); }

double loss_hallu(double cos_val, double tau_h) { return std::max(0.0, tau_h - cos_val); }

HingeTerm sample_hinge(double similarity, int label, const LossConfig& cfg) {
  HingeTerm h;
  const bool truthful = label == 1;
  if (!cfg.reversed) {
    if (truthful) {
      h.loss = loss_truth(similarity, cfg.tau_t);
      h.slope = similarity > cfg.tau_t ? 1.0 : 0.0;
    } else {
      h.loss = loss_hallu(similarity, cfg.tau_h);
      h.slope = similarity < cfg.tau_h ? -1.0 : 0.0;
    }
  } else {
    if (truthful) {
      h.loss = std::max(0.0, cfg.tau_t - similarity);
      h.slope = similarity < cfg.tau_t ? -1.0 : 0.0;
    } else {
      h.loss = std::max(0.0, similarity - cfg.tau_h);
      h.slope = similarity > cfg.tau_h ? 1.0 : 0.0;
    }
  }
  return h;
}

double batch_loss(std::span<const LossPair> pairs, const LossConfig& cfg) {
  if (pairs.empty()) throw Error(ErrorCode::EmptyBatch, "loss over an empty batch");
  double s = 0.0;
  for (const auto& p : pairs) s += sample_hinge(p.cos, p.label, cfg).loss;
  return s / static_cast<double>(pairs.size());
}

LossConfig reversed_objective(LossConfig cfg) {
  std::swap(cfg.tau_t, cfg.tau_h);
  cfg.reversed = !cfg.reversed;
  return cfg;
}

std::vector<TrainItem> items_from_records(std::span<const HiddenRecord> records) {
  std::vector<TrainItem> items;
  items.reserve(records.size());
  for (const auto& r : records) items.push_back({r.id, r.label, r.h_orig, r.h_pert, std::nullopt});
  return items;
}

std::vector<TrainItem> items_from_samples(std::span<const QASample> samples, const Backbone& backbone,
                                          const DetectorModel& model) {
  const auto meta = backbone.meta();
  if (meta.dim != model.meta.dim) {
    throw Error(ErrorCode::DimMismatch, "backbone width " + std::to_string(meta.dim) + " but model expects " +
                                            std::to_string(model.meta.dim));
  }
  std::optional<EmbeddingSeq> suffix;
  if (model.meta.include_suffix) suffix = backbone.embed(EvalSuffix::from_text(model.meta.suffix_text).tokens);

  std::vector<TrainItem> items;
  items.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.label) throw Error(ErrorCode::SchemaError, "sample '" + s.id + "' has no label");
    PromptInput p;
    p.qa = backbone.embed(qa_tokens(s));
    p.suffix = suffix;
    p.max_context = meta.max_context;
    const EmbeddingSeq orig = assemble(p.qa, nullptr, suffix ? &*suffix : nullptr, meta.max_context);
    p.h = pool_h(orig);
    p.noise = init_noise_prompt(s, model.meta.noise_mode, model.meta.prompt_length, model.meta.noise_seed, backbone);

    TrainItem item;
    item.id = s.id;
    item.label = *s.label;
    item.hidden_orig = backbone.forward_hidden(orig, model.meta.layer);
    item.prompt = std::move(p);
    item.hidden_pert = backbone.forward_hidden(perturbed_sequence(item, model), model.meta.layer);
    items.push_back(std::move(item));
  }
  return items;
}

EmbeddingSeq perturbed_sequence(const TrainItem& item, const DetectorModel& model, GeneratorTape* tape) {
  if (!item.prompt) throw Error(ErrorCode::CapabilityMissing, "item '" + item.id + "' carries no prompt inputs");
  const PromptInput& p = *item.prompt;
  NoisePromptState noise = p.noise;
  noise.delta = generator_forward(model.generator, p.h, tape);
  return assemble(p.qa, &noise, p.suffix ? &*p.suffix : nullptr, p.max_context);
}

bool generator_trainable(const DetectorModel& model, TrainMode mode) {
  return mode == TrainMode::full && model.generator.kind != GeneratorKind::none;
}

bool encoder_trainable(const DetectorModel& model) { return model.encoder.kind == EncoderKind::mlp; }

namespace {

void accumulate(AffineLayer& acc, const AffineLayer& g) {
  axpy(1.0, g.weight.values, acc.weight.values);
  axpy(1.0, g.bias, acc.bias);
}

}  // namespace

ObjectiveResult objective(std::span<const TrainItem* const> items, const Backbone* backbone,
                          const DetectorModel& model, const LossConfig& cfg, ModelGrads* grads) {
  if (items.empty()) throw Error(ErrorCode::EmptyBatch, "objective over an empty batch");
  const bool through = generator_trainable(model, cfg.mode);
  if (through && (!backbone || !backbone->supports_vjp())) {
    throw Error(ErrorCode::CapabilityMissing, "generator training needs a backbone with gradients");
  }
  const double inv_n = 1.0 / static_cast<double>(items.size());
  const std::size_t layer = model.meta.layer;

  ObjectiveResult res;
  res.losses.reserve(items.size());
  res.scores.reserve(items.size());
  for (const TrainItem* item : items) {
    GeneratorTape gtape;
    std::optional<EmbeddingSeq> seq;
    Vec pert_hidden;
    if (through) {
      seq = perturbed_sequence(*item, model, grads ? &gtape : nullptr);
      pert_hidden = backbone->forward_hidden(*seq, layer);
    }
    const Vec& x_t = through ? pert_hidden : item->hidden_pert;
    // ReLU would silently zero a NaN, so inputs are checked before encoding
    if (!all_finite(item->hidden_orig) || !all_finite(x_t)) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite hidden state for item '" + item->id + "'");
    }

    EncoderTape tz;
    EncoderTape tzt;
    const Vec z = encode(model.encoder, item->hidden_orig, grads ? &tz : nullptr);
    const Vec zt = encode(model.encoder, x_t, grads ? &tzt : nullptr);

    double sim = 0.0;
    Vec dz;
    Vec dzt;
    if (!cfg.metric_objective || cfg.metric == Metric::cosine) {
      auto cg = cosine_with_grad(z, zt);
      sim = cg.value;
      dz = std::move(cg.du);
      dzt = std::move(cg.dv);
    } else {
      auto dg = dist_with_grad(z, zt, cfg.metric);
      sim = 1.0 - dg.value;
      dz = std::move(dg.du);
      dzt = std::move(dg.dv);
      for (double& v : dz) v = -v;
      for (double& v : dzt) v = -v;
    }
    // the hinge maps NaN to zero loss, so non-finite similarities are caught here
    if (!std::isfinite(sim)) {
      throw Error(ErrorCode::NonFiniteLoss, "non-finite similarity for item '" + item->id + "'");
    }
    const HingeTerm hinge = sample_hinge(sim, item->label, cfg);
    res.losses.push_back(hinge.loss);
    res.scores.push_back(model.meta.metric == Metric::cosine ? 1.0 - cosine(z, zt) : disc(z, zt, model.meta.metric));
    res.loss += hinge.loss * inv_n;

    if (!grads || hinge.slope == 0.0) continue;
    const double w = hinge.slope * inv_n;
    for (double& v : dz) v *= w;
    for (double& v : dzt) v *= w;
    const EncoderGrads gz = encoder_backward(model.encoder, tz, dz);
    const EncoderGrads gzt = encoder_backward(model.encoder, tzt, dzt);
    for (std::size_t l = 0; l < 3; ++l) {
      accumulate(grads->encoder.layers[l], gz.layers[l]);
      accumulate(grads->encoder.layers[l], gzt.layers[l]);
    }
    if (through) {
      const Mat d_delta = backbone->vjp_inject(*seq, layer, gzt.input);
      const GeneratorGrads gg = generator_backward(model.generator, gtape, d_delta);
      accumulate(grads->generator.hidden, gg.hidden);
      accumulate(grads->generator.output, gg.output);
    }
  }
  return res;
}

std::string TrainTrace::to_csv() const {
  std::ostringstream out;
  out << "epoch,mean_loss,train_auroc,seconds\n";
  for (std::size_t e = 0; e < mean_loss.size(); ++e) {
    out << e + 1 << ',' << format_double(mean_loss[e]) << ',' << format_double(train_auroc[e]) << ','
        << format_double(seconds[e]) << '\n';
  }
  return out.str();
}

TrainResult train(std::vector<TrainItem> items, const Backbone* backbone, DetectorModel model, const LossConfig& cfg) {
  validate(cfg);
  if (items.empty()) throw Error(ErrorCode::EmptyBatch, "no training items");
  const bool gen = generator_trainable(model, cfg.mode);
  const bool enc = encoder_trainable(model);
  if (gen) {
    if (!backbone || !backbone->supports_vjp()) {
      throw Error(ErrorCode::CapabilityMissing, "full training needs a backbone with gradients");
    }
    for (const auto& it : items) {
      if (!it.prompt) throw Error(ErrorCode::CapabilityMissing, "item '" + it.id + "' carries no prompt inputs");
    }
  }

  const std::size_t n = items.size();
  const std::size_t batch = cfg.batch == 0 || cfg.batch > n ? n : cfg.batch;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = items[i].label;
  Rng order_rng(derive_seed(cfg.seed, "batch-order"));
  std::vector<std::size_t> order(n);

  TrainTrace trace;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (batch < n) {
      for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[order_rng.below(i + 1)]);
    }
    std::vector<double> losses(n);
    std::vector<double> scores(n);
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t end = std::min(n, start + batch);
      std::vector<const TrainItem*> ptrs;
      for (std::size_t k = start; k < end; ++k) ptrs.push_back(&items[order[k]]);
      ModelGrads grads = ModelGrads::zeros_like(model);
      const ObjectiveResult r = objective(ptrs, backbone, model, cfg, &grads);
      if (!std::isfinite(r.loss)) {
        throw Error(ErrorCode::NonFiniteLoss, "loss became non-finite in epoch " + std::to_string(epoch + 1));
      }
      for (std::size_t k = start; k < end; ++k) {
        losses[order[k]] = r.losses[k - start];
        scores[order[k]] = r.scores[k - start];
      }
      auto params = parameter_views(model);
      auto gviews = grads.views();
      for (std::size_t p = 0; p < params.size(); ++p) {
        const bool is_gen = params[p].name.starts_with("generator.");
        if ((is_gen && !gen) || (!is_gen && !enc)) continue;
        if (!all_finite(gviews[p].values)) {
          throw Error(ErrorCode::NonFiniteLoss, "non-finite gradient for " + params[p].name);
        }
        axpy(-cfg.lr, gviews[p].values, params[p].values);
      }
    }
    trace.mean_loss.push_back(std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n));
    double a = std::nan("");
    try {
      a = auroc(scores, labels);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::SingleClass) throw;
    }
    trace.train_auroc.push_back(a);
    trace.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  return {std::move(model), std::move(trace)};
}

}  // namespace ssp
