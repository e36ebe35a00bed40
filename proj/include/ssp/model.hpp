#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "ssp/backbone.hpp"
#include "ssp/data.hpp"
#include "ssp/numerics.hpp"
#include "ssp/rng.hpp"

namespace ssp {

inline constexpr std::string_view kDefaultSuffixText =
    "Is the proposed answer: (A) True (B) False The proposed answer is";

/// Fixed perturbation sentence for the static-prompt variant and as the
/// fallback when seed generation fails.
inline constexpr std::string_view kStaticNoiseText = "Stated plainly, in a calm and neutral tone.";

/// Byte used to pad seed text up to the noise-prompt length.
inline constexpr TokenId kPadToken = ' ';

enum class NoiseMode { seeded_text, static_text, random };

std::string_view to_string(NoiseMode mode);
NoiseMode parse_noise_mode(std::string_view name);

struct NoisePromptState {
  Tokens tokens;
  Mat base;   // m x d, frozen token embeddings
  Mat delta;  // m x d, generator output
  NoiseMode origin = NoiseMode::seeded_text;

  std::size_t length() const { return tokens.size(); }
  Mat effective() const;
};

/// Token ids for a sample's noise prompt, padded or truncated to `length`.
/// Random mode draws ids from a generator keyed by (seed, sample id).
Tokens noise_tokens(const QASample& sample, NoiseMode mode, std::size_t length, std::uint64_t seed,
                    std::size_t vocab);

NoisePromptState init_noise_prompt(const QASample& sample, NoiseMode mode, std::size_t length, std::uint64_t seed,
                                   const Backbone& backbone);

struct EvalSuffix {
  std::string text{kDefaultSuffixText};
  Tokens tokens;

  static EvalSuffix from_text(std::string_view text);
};

/// Token sequence of the question prompt followed by the answer.
Tokens qa_tokens(const QASample& sample);

/// Mean over token rows.
Vec pool_h(const EmbeddingSeq& seq);

/// Concatenates question/answer rows, the effective noise rows (if any) and
/// the suffix rows; the noise rows are marked as the inject span.
EmbeddingSeq assemble(const EmbeddingSeq& qa, const NoisePromptState* noise, const EmbeddingSeq* suffix,
                      std::size_t max_context);

struct AffineLayer {
  Mat weight;  // in x out
  Vec bias;
};

enum class GeneratorKind {
  sample_specific,  // delta = MLP(h)
  global,           // delta = one learned m x d table shared by every sample
  none,             // delta = 0
};

std::string_view to_string(GeneratorKind kind);
GeneratorKind parse_generator_kind(std::string_view name);

/// Two-layer MLP from the pooled input embedding to an additive delta on the
/// noise-prompt embeddings. With `broadcast`, one d-vector is added to every
/// noise row instead of a full m x d table.
struct PromptGenerator {
  GeneratorKind kind = GeneratorKind::sample_specific;
  bool broadcast = false;
  std::size_t dim = 0;
  std::size_t prompt_length = 0;
  AffineLayer hidden;  // d x d_hid
  AffineLayer output;  // d_hid x (m*d), or d_hid x d when broadcasting

  static PromptGenerator create(std::size_t dim, std::size_t prompt_length, std::size_t hidden_width, Rng& rng,
                                GeneratorKind kind = GeneratorKind::sample_specific, bool broadcast = false);
};

struct GeneratorTape {
  bool recorded = false;
  Vec h;
  Vec pre;
  Vec act;
};

struct GeneratorGrads {
  AffineLayer hidden;
  AffineLayer output;
  Vec h;
};

/// delta (m x d) for pooled embedding h.
Mat generator_forward(const PromptGenerator& gen, ConstSpan h, GeneratorTape* tape = nullptr);
GeneratorGrads generator_backward(const PromptGenerator& gen, const GeneratorTape& tape, const Mat& d_delta);

NoisePromptState apply_generator(const PromptGenerator& gen, ConstSpan h, const NoisePromptState& noise);

enum class EncoderKind { mlp, identity };

std::string_view to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(std::string_view name);

/// Three affine layers with ReLU after the first two.
struct Encoder {
  EncoderKind kind = EncoderKind::mlp;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::array<AffineLayer, 3> layers;

  static Encoder create(std::size_t dim, std::size_t out_dim, Rng& rng);
  static Encoder identity(std::size_t dim);
};

struct EncoderTape {
  bool recorded = false;
  Vec x;
  std::array<Vec, 2> pre;
  std::array<Vec, 2> act;
};

struct EncoderGrads {
  std::array<AffineLayer, 3> layers;
  Vec input;
};

Vec encode(const Encoder& enc, ConstSpan hidden, EncoderTape* tape = nullptr);
EncoderGrads encoder_backward(const Encoder& enc, const EncoderTape& tape, ConstSpan dz);

struct DetectorMeta {
  std::size_t dim = 0;
  std::size_t d_out = 0;
  std::size_t prompt_length = 8;
  std::size_t layer = 1;
  Metric metric = Metric::cosine;
  double tau_t = 0.3;
  double tau_h = 0.7;
  bool reversed = false;
  std::optional<double> lambda;
  std::string suffix_text{kDefaultSuffixText};
  bool include_suffix = true;
  NoiseMode noise_mode = NoiseMode::seeded_text;
  std::uint64_t noise_seed = 0;
  std::string variant = "ssp";
  std::string backbone;
};

struct DetectorModel {
  DetectorMeta meta;
  PromptGenerator generator;
  Encoder encoder;
};

/// Named views over every parameter array, in a fixed order shared by
/// gradient containers and the optimizer.
struct ParamView {
  std::string name;
  std::span<double> values;
};

std::vector<ParamView> parameter_views(DetectorModel& model);

struct ModelGrads {
  GeneratorGrads generator;
  EncoderGrads encoder;

  static ModelGrads zeros_like(const DetectorModel& model);
  /// Same names and order as parameter_views().
  std::vector<ParamView> views();
};

std::string checkpoint_to_json(const DetectorModel& model);
DetectorModel checkpoint_from_json(std::string_view text);
void save_checkpoint(const DetectorModel& model, const std::filesystem::path& path);
DetectorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ssp
