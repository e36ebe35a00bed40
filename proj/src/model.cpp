#include "ssp/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ssp/error.hpp"

namespace ssp {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(NoiseMode mode) {
  switch (mode) {
    case NoiseMode::seeded_text: return "seeded_text";
    case NoiseMode::static_text: return "static_text";
    case NoiseMode::random: return "random";
  }
  return "seeded_text";
}

NoiseMode parse_noise_mode(std::string_view name) {
  if (name == "seeded_text") return NoiseMode::seeded_text;
  if (name == "static_text") return NoiseMode::static_text;
  if (name == "random") return NoiseMode::random;
  throw Error(ErrorCode::ConfigError, "unknown noise mode '" + std::string(name) + "'");
}

std::string_view to_string(GeneratorKind kind) {
  switch (kind) {
    case GeneratorKind::sample_specific: return "sample_specific";
    case GeneratorKind::global: return "global";
    case GeneratorKind::none: return "none";
  }
  return "sample_specific";
}

GeneratorKind parse_generator_kind(std::string_view name) {
  if (name == "sample_specific") return GeneratorKind::sample_specific;
  if (name == "global") return GeneratorKind::global;
  if (name == "none") return GeneratorKind::none;
  throw Error(ErrorCode::ConfigError, "unknown generator kind '" + std::string(name) + "'");
}

std::string_view to_string(EncoderKind kind) { return kind == EncoderKind::mlp ? "mlp" : "identity"; }

EncoderKind parse_encoder_kind(std::string_view name) {
  if (name == "mlp") return EncoderKind::mlp;
  if (name == "identity") return EncoderKind::identity;
  throw Error(ErrorCode::ConfigError, "unknown encoder kind '" + std::string(name) + "'");
}

Mat NoisePromptState::effective() const {
  Mat out = base;
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += delta.values[i];
  return out;
}

Tokens noise_tokens(const QASample& sample, NoiseMode mode, std::size_t length, std::uint64_t seed,
                    std::size_t vocab) {
  if (length == 0) throw Error(ErrorCode::ConfigError, "noise prompt length must be at least 1");
  Tokens tokens;
  switch (mode) {
    case NoiseMode::seeded_text:
      if (!sample.noise_text) {
        throw Error(ErrorCode::MissingSeedText, "sample '" + sample.id + "' has no generated noise text");
      }
      tokens = byte_tokenize(" " + *sample.noise_text);
      break;
    case NoiseMode::static_text:
      tokens = byte_tokenize(" " + std::string(kStaticNoiseText));
      break;
    case NoiseMode::random: {
      Rng rng(derive_seed(seed, "noise:" + sample.id));
      tokens.resize(length);
      for (auto& t : tokens) t = static_cast<TokenId>(rng.below(vocab));
      break;
    }
  }
  tokens.resize(length, kPadToken);
  return tokens;
}

NoisePromptState init_noise_prompt(const QASample& sample, NoiseMode mode, std::size_t length, std::uint64_t seed,
                                   const Backbone& backbone) {
  NoisePromptState state;
  state.tokens = noise_tokens(sample, mode, length, seed, backbone.meta().vocab);
  state.base = backbone.embed(state.tokens).matrix;
  state.delta = Mat(state.base.rows, state.base.cols);
  state.origin = mode;
  return state;
}

EvalSuffix EvalSuffix::from_text(std::string_view text) {
  if (text.empty()) throw Error(ErrorCode::ConfigError, "evaluation suffix must be non-empty");
  EvalSuffix s;
  s.text = std::string(text);
  s.tokens = byte_tokenize(" " + s.text);
  return s;
}

Tokens qa_tokens(const QASample& sample) {
  return byte_tokenize(build_prompt(sample, sample.context.has_value()) + " " + sample.answer);
}

Vec pool_h(const EmbeddingSeq& seq) {
  if (seq.length() == 0) throw Error(ErrorCode::EmptyInput, "cannot pool an empty sequence");
  Vec h(seq.matrix.cols, 0.0);
  for (std::size_t r = 0; r < seq.matrix.rows; ++r) axpy(1.0, seq.matrix.row(r), h);
  for (double& x : h) x /= static_cast<double>(seq.matrix.rows);
  return h;
}

EmbeddingSeq assemble(const EmbeddingSeq& qa, const NoisePromptState* noise, const EmbeddingSeq* suffix,
                      std::size_t max_context) {
  const std::size_t d = qa.matrix.cols;
  const std::size_t m = noise ? noise->length() : 0;
  const std::size_t t = suffix ? suffix->length() : 0;
  const std::size_t total = qa.length() + m + t;
  if (total > max_context) {
    throw Error(ErrorCode::ContextOverflow,
                std::to_string(total) + " rows exceed context of " + std::to_string(max_context));
  }
  if ((noise && noise->base.cols != d) || (suffix && suffix->matrix.cols != d)) {
    throw Error(ErrorCode::ShapeMismatch, "assemble: embedding widths differ");
  }
  EmbeddingSeq out;
  out.matrix = Mat(total, d);
  auto dst = out.matrix.values.begin();
  dst = std::copy(qa.matrix.values.begin(), qa.matrix.values.end(), dst);
  if (noise) {
    const Mat eff = noise->effective();
    dst = std::copy(eff.values.begin(), eff.values.end(), dst);
    out.inject = InjectSpan{qa.length(), m};
  }
  if (suffix) std::copy(suffix->matrix.values.begin(), suffix->matrix.values.end(), dst);
  return out;
}

namespace {

AffineLayer uniform_layer(std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  AffineLayer layer{Mat(in, out), Vec(out)};
  for (double& x : layer.weight.values) x = rng.uniform(-bound, bound);
  for (double& x : layer.bias) x = rng.uniform(-bound, bound);
  return layer;
}

AffineLayer zeros_like(const AffineLayer& layer) {
  return {Mat(layer.weight.rows, layer.weight.cols), Vec(layer.bias.size(), 0.0)};
}

Vec affine(const AffineLayer& layer, ConstSpan x) {
  Vec y = vec_mat(x, layer.weight);
  axpy(1.0, layer.bias, y);
  return y;
}

std::size_t generator_width(const PromptGenerator& gen) {
  return gen.broadcast ? gen.dim : gen.prompt_length * gen.dim;
}

}  // namespace

PromptGenerator PromptGenerator::create(std::size_t dim, std::size_t prompt_length, std::size_t hidden_width, Rng& rng,
                                        GeneratorKind kind, bool broadcast) {
  if (dim == 0 || prompt_length == 0 || hidden_width == 0) {
    throw Error(ErrorCode::ConfigError, "prompt generator dimensions must be positive");
  }
  PromptGenerator gen;
  gen.kind = kind;
  gen.broadcast = broadcast;
  gen.dim = dim;
  gen.prompt_length = prompt_length;
  const std::size_t width = generator_width(gen);
  switch (kind) {
    case GeneratorKind::sample_specific:
      gen.hidden = uniform_layer(dim, hidden_width, rng);
      gen.output = uniform_layer(hidden_width, width, rng);
      break;
    case GeneratorKind::global:
      gen.output.bias.assign(width, 0.0);
      break;
    case GeneratorKind::none:
      break;
  }
  return gen;
}

Mat generator_forward(const PromptGenerator& gen, ConstSpan h, GeneratorTape* tape) {
  if (h.size() != gen.dim) throw Error(ErrorCode::ShapeMismatch, "generator input has the wrong length");
  Mat delta(gen.prompt_length, gen.dim);
  Vec out;
  switch (gen.kind) {
    case GeneratorKind::none:
      break;
    case GeneratorKind::global:
      out = gen.output.bias;
      break;
    case GeneratorKind::sample_specific: {
      Vec pre = affine(gen.hidden, h);
      Vec act(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
      out = affine(gen.output, act);
      if (tape) {
        tape->pre = std::move(pre);
        tape->act = std::move(act);
      }
      break;
    }
  }
  if (!out.empty()) {
    if (gen.broadcast) {
      for (std::size_t r = 0; r < gen.prompt_length; ++r) std::copy(out.begin(), out.end(), delta.row(r).begin());
    } else {
      delta.values = std::move(out);
    }
  }
  if (tape) {
    tape->h.assign(h.begin(), h.end());
    tape->recorded = true;
  }
  return delta;
}

GeneratorGrads generator_backward(const PromptGenerator& gen, const GeneratorTape& tape, const Mat& d_delta) {
  if (!tape.recorded) throw Error(ErrorCode::NoForwardTape, "generator backward without a recorded forward pass");
  if (d_delta.rows != gen.prompt_length || d_delta.cols != gen.dim) {
    throw Error(ErrorCode::ShapeMismatch, "generator cotangent shape");
  }
  GeneratorGrads g{zeros_like(gen.hidden), zeros_like(gen.output), Vec(gen.dim, 0.0)};
  if (gen.kind == GeneratorKind::none) return g;

  Vec d_out;
  if (gen.broadcast) {
    d_out.assign(gen.dim, 0.0);
    for (std::size_t r = 0; r < d_delta.rows; ++r) axpy(1.0, d_delta.row(r), d_out);
  } else {
    d_out = d_delta.values;
  }
  if (gen.kind == GeneratorKind::global) {
    g.output.bias = std::move(d_out);
    return g;
  }
  add_outer(g.output.weight, tape.act, d_out);
  g.output.bias = d_out;
  Vec d_pre = mat_vec(gen.output.weight, d_out);
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    if (!(tape.pre[i] > 0.0)) d_pre[i] = 0.0;
  }
  add_outer(g.hidden.weight, tape.h, d_pre);
  g.hidden.bias = d_pre;
  g.h = mat_vec(gen.hidden.weight, d_pre);
  return g;
}

NoisePromptState apply_generator(const PromptGenerator& gen, ConstSpan h, const NoisePromptState& noise) {
  if (noise.length() != gen.prompt_length || noise.base.cols != gen.dim) {
    throw Error(ErrorCode::ShapeMismatch, "noise prompt and generator shapes differ");
  }
  NoisePromptState out = noise;
  out.delta = generator_forward(gen, h);
  return out;
}

Encoder Encoder::create(std::size_t dim, std::size_t out_dim, Rng& rng) {
  if (dim == 0 || out_dim == 0) throw Error(ErrorCode::ConfigError, "encoder dimensions must be positive");
  Encoder enc;
  enc.kind = EncoderKind::mlp;
  enc.in_dim = dim;
  enc.out_dim = out_dim;
  enc.layers[0] = uniform_layer(dim, dim, rng);
  enc.layers[1] = uniform_layer(dim, dim, rng);
  enc.layers[2] = uniform_layer(dim, out_dim, rng);
  return enc;
}

Encoder Encoder::identity(std::size_t dim) {
  Encoder enc;
  enc.kind = EncoderKind::identity;
  enc.in_dim = dim;
  enc.out_dim = dim;
  return enc;
}

Vec encode(const Encoder& enc, ConstSpan hidden, EncoderTape* tape) {
  if (hidden.size() != enc.in_dim) {
    throw Error(ErrorCode::ShapeMismatch, "encoder expects " + std::to_string(enc.in_dim) + " inputs, got " +
                                              std::to_string(hidden.size()));
  }
  if (tape) {
    tape->x.assign(hidden.begin(), hidden.end());
    tape->recorded = true;
  }
  if (enc.kind == EncoderKind::identity) return {hidden.begin(), hidden.end()};

  Vec x(hidden.begin(), hidden.end());
  for (std::size_t l = 0; l < 2; ++l) {
    Vec pre = affine(enc.layers[l], x);
    Vec act(pre.size());
    for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > 0.0 ? pre[i] : 0.0;
    if (tape) {
      tape->pre[l] = pre;
      tape->act[l] = act;
    }
    x = std::move(act);
  }
  return affine(enc.layers[2], x);
}

EncoderGrads encoder_backward(const Encoder& enc, const EncoderTape& tape, ConstSpan dz) {
  if (!tape.recorded) throw Error(ErrorCode::NoForwardTape, "encoder backward without a recorded forward pass");
  if (dz.size() != enc.out_dim) throw Error(ErrorCode::ShapeMismatch, "encoder cotangent length");
  EncoderGrads g;
  for (std::size_t l = 0; l < 3; ++l) g.layers[l] = zeros_like(enc.layers[l]);
  if (enc.kind == EncoderKind::identity) {
    g.input.assign(dz.begin(), dz.end());
    return g;
  }
  Vec up(dz.begin(), dz.end());
  for (std::size_t l = 3; l-- > 0;) {
    const Vec& in = l == 0 ? tape.x : tape.act[l - 1];
    add_outer(g.layers[l].weight, in, up);
    g.layers[l].bias = up;
    Vec down = mat_vec(enc.layers[l].weight, up);
    if (l > 0) {
      for (std::size_t i = 0; i < down.size(); ++i) {
        if (!(tape.pre[l - 1][i] > 0.0)) down[i] = 0.0;
      }
    }
    up = std::move(down);
  }
  g.input = std::move(up);
  return g;
}

namespace {

std::vector<ParamView> views_of(AffineLayer& gh, AffineLayer& go, std::array<AffineLayer, 3>& enc) {
  std::vector<ParamView> v;
  v.push_back({"generator.hidden.weight", gh.weight.values});
  v.push_back({"generator.hidden.bias", gh.bias});
  v.push_back({"generator.output.weight", go.weight.values});
  v.push_back({"generator.output.bias", go.bias});
  for (std::size_t l = 0; l < 3; ++l) {
    v.push_back({"encoder.layer" + std::to_string(l + 1) + ".weight", enc[l].weight.values});
    v.push_back({"encoder.layer" + std::to_string(l + 1) + ".bias", enc[l].bias});
  }
  return v;
}

}  // namespace

std::vector<ParamView> parameter_views(DetectorModel& model) {
  return views_of(model.generator.hidden, model.generator.output, model.encoder.layers);
}

ModelGrads ModelGrads::zeros_like(const DetectorModel& model) {
  ModelGrads g;
  g.generator.hidden = ssp::zeros_like(model.generator.hidden);
  g.generator.output = ssp::zeros_like(model.generator.output);
  g.generator.h.assign(model.generator.dim, 0.0);
  for (std::size_t l = 0; l < 3; ++l) g.encoder.layers[l] = ssp::zeros_like(model.encoder.layers[l]);
  g.encoder.input.assign(model.encoder.in_dim, 0.0);
  return g;
}

std::vector<ParamView> ModelGrads::views() { return views_of(generator.hidden, generator.output, encoder.layers); }

namespace {

ordered_json layer_json(const AffineLayer& layer) {
  ordered_json j;
  j["in"] = layer.weight.rows;
  j["out"] = layer.weight.cols;
  j["weight"] = layer.weight.values;
  j["bias"] = layer.bias;
  return j;
}

[[noreturn]] void bad_checkpoint(const std::string& what) {
  throw Error(ErrorCode::SchemaError, "checkpoint: " + what);
}

Vec number_array(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array()) bad_checkpoint(std::string("missing array '") + key + "'");
  Vec out;
  out.reserve(j[key].size());
  for (const auto& x : j[key]) {
    if (!x.is_number()) bad_checkpoint(std::string("non-numeric entry in '") + key + "'");
    const double v = x.get<double>();
    if (!std::isfinite(v)) bad_checkpoint(std::string("non-finite entry in '") + key + "'");
    out.push_back(v);
  }
  return out;
}

AffineLayer layer_from_json(const json& j) {
  if (!j.is_object() || !j.contains("in") || !j.contains("out")) bad_checkpoint("malformed layer");
  AffineLayer layer;
  const auto in = j["in"].get<std::size_t>();
  const auto out = j["out"].get<std::size_t>();
  layer.weight = Mat(in, out);
  layer.weight.values = number_array(j, "weight");
  layer.bias = number_array(j, "bias");
  if (layer.weight.values.size() != in * out) bad_checkpoint("weight size does not match its shape");
  return layer;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key) || j[key].is_null()) return fallback;
  return j[key].get<T>();
}

}  // namespace

std::string checkpoint_to_json(const DetectorModel& model) {
  const auto& m = model.meta;
  ordered_json doc;
  doc["format"] = "ssp-model";
  doc["version"] = 1;
  ordered_json meta;
  meta["d"] = m.dim;
  meta["d_out"] = m.d_out;
  meta["m"] = m.prompt_length;
  meta["layer"] = m.layer;
  meta["metric"] = to_string(m.metric);
  meta["tau_T"] = m.tau_t;
  meta["tau_H"] = m.tau_h;
  meta["lambda"] = m.lambda ? ordered_json(*m.lambda) : ordered_json(nullptr);
  meta["suffix_text"] = m.suffix_text;
  meta["include_suffix"] = m.include_suffix;
  meta["reversed"] = m.reversed;
  meta["noise_mode"] = to_string(m.noise_mode);
  meta["noise_seed"] = m.noise_seed;
  meta["variant"] = m.variant;
  meta["backbone"] = m.backbone;
  doc["meta"] = meta;

  const auto& g = model.generator;
  ordered_json gen;
  gen["kind"] = to_string(g.kind);
  gen["broadcast"] = g.broadcast;
  gen["hidden"] = layer_json(g.hidden);
  gen["output"] = layer_json(g.output);
  doc["generator"] = gen;

  ordered_json enc;
  enc["kind"] = to_string(model.encoder.kind);
  enc["in"] = model.encoder.in_dim;
  enc["out"] = model.encoder.out_dim;
  ordered_json layers = ordered_json::array();
  if (model.encoder.kind == EncoderKind::mlp) {
    for (const auto& l : model.encoder.layers) layers.push_back(layer_json(l));
  }
  enc["layers"] = layers;
  doc["encoder"] = enc;
  return doc.dump() + "\n";
}

DetectorModel checkpoint_from_json(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    bad_checkpoint(e.what());
  }
  try {
    if (!doc.is_object() || doc.value("format", "") != "ssp-model") bad_checkpoint("not an ssp-model document");
    if (!doc.contains("version") || !doc["version"].is_number_integer()) bad_checkpoint("missing version");
    if (doc["version"].get<long long>() != 1) {
      throw Error(ErrorCode::UnknownVersion, "checkpoint version " + doc["version"].dump());
    }
    const auto& jm = doc.at("meta");
    DetectorModel model;
    auto& m = model.meta;
    m.dim = jm.at("d").get<std::size_t>();
    m.d_out = jm.at("d_out").get<std::size_t>();
    m.prompt_length = jm.at("m").get<std::size_t>();
    m.layer = jm.at("layer").get<std::size_t>();
    m.metric = parse_metric(jm.at("metric").get<std::string>());
    m.tau_t = jm.at("tau_T").get<double>();
    m.tau_h = jm.at("tau_H").get<double>();
    if (jm.contains("lambda") && !jm["lambda"].is_null()) m.lambda = jm["lambda"].get<double>();
    m.suffix_text = jm.at("suffix_text").get<std::string>();
    m.include_suffix = get_or(jm, "include_suffix", true);
    m.reversed = get_or(jm, "reversed", false);
    m.noise_mode = parse_noise_mode(get_or<std::string>(jm, "noise_mode", "seeded_text"));
    m.noise_seed = get_or<std::uint64_t>(jm, "noise_seed", 0);
    m.variant = get_or<std::string>(jm, "variant", "ssp");
    m.backbone = get_or<std::string>(jm, "backbone", "");

    const auto& jg = doc.at("generator");
    auto& g = model.generator;
    g.kind = parse_generator_kind(jg.at("kind").get<std::string>());
    g.broadcast = get_or(jg, "broadcast", false);
    g.dim = m.dim;
    g.prompt_length = m.prompt_length;
    g.hidden = layer_from_json(jg.at("hidden"));
    g.output = layer_from_json(jg.at("output"));
    const std::size_t width = g.broadcast ? g.dim : g.prompt_length * g.dim;
    if (g.kind == GeneratorKind::sample_specific &&
        (g.hidden.weight.rows != g.dim || g.output.weight.cols != width || g.hidden.weight.cols != g.output.weight.rows ||
         g.hidden.bias.size() != g.hidden.weight.cols || g.output.bias.size() != width)) {
      bad_checkpoint("generator shapes do not match meta");
    }
    if (g.kind == GeneratorKind::global && g.output.bias.size() != width) {
      bad_checkpoint("global prompt table does not match meta");
    }

    const auto& je = doc.at("encoder");
    auto& e = model.encoder;
    e.kind = parse_encoder_kind(je.at("kind").get<std::string>());
    e.in_dim = je.at("in").get<std::size_t>();
    e.out_dim = je.at("out").get<std::size_t>();
    if (e.kind == EncoderKind::mlp) {
      const auto& jl = je.at("layers");
      if (!jl.is_array() || jl.size() != 3) bad_checkpoint("encoder needs three layers");
      for (std::size_t l = 0; l < 3; ++l) e.layers[l] = layer_from_json(jl[l]);
      if (e.layers[0].weight.rows != e.in_dim || e.layers[2].weight.cols != e.out_dim) {
        bad_checkpoint("encoder shapes do not match");
      }
    }
    if (e.in_dim != m.dim || e.out_dim != m.d_out) bad_checkpoint("encoder shapes do not match meta");
    return model;
  } catch (const json::exception& e) {
    bad_checkpoint(e.what());
  }
}

void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << checkpoint_to_json(model);
}

DetectorModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace ssp
