#include "ssp/toy_backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "ssp/error.hpp"
#include "ssp/rng.hpp"

namespace ssp {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kEmbeddingScale = 0.5;
constexpr double kPositionScale = 0.1;

Mat uniform_mat(Rng& rng, std::size_t rows, std::size_t cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Mat m(rows, cols);
  for (double& x : m.values) x = rng.uniform(-bound, bound);
  return m;
}

Mat normal_mat(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Mat m(rows, cols);
  for (double& x : m.values) x = scale * rng.normal();
  return m;
}

double gelu(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

double gelu_grad(double x) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  const double t = std::tanh(c * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x);
}

template <typename Cache>
Mat layer_norm(const Mat& x, const Vec& gain, const Vec& bias, Cache* cache) {
  Mat y(x.rows, x.cols);
  if (cache) {
    cache->xhat = Mat(x.rows, x.cols);
    cache->rstd.assign(x.rows, 0.0);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto row = x.row(r);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= n;
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    for (std::size_t c = 0; c < x.cols; ++c) {
      const double xh = (row[c] - mean) * rstd;
      y(r, c) = gain[c] * xh + bias[c];
      if (cache) cache->xhat(r, c) = xh;
    }
    if (cache) cache->rstd[r] = rstd;
  }
  return y;
}

template <typename Cache>
Mat layer_norm_backward(const Cache& cache, const Vec& gain, const Mat& dy) {
  Mat dx(dy.rows, dy.cols);
  const double n = static_cast<double>(dy.cols);
  Vec dxhat(dy.cols);
  for (std::size_t r = 0; r < dy.rows; ++r) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      dxhat[c] = dy(r, c) * gain[c];
      mean_d += dxhat[c];
      mean_dx += dxhat[c] * cache.xhat(r, c);
    }
    mean_d /= n;
    mean_dx /= n;
    for (std::size_t c = 0; c < dy.cols; ++c) {
      dx(r, c) = cache.rstd[r] * (dxhat[c] - mean_d - cache.xhat(r, c) * mean_dx);
    }
  }
  return dx;
}

void add_in_place(Mat& a, const Mat& b) {
  for (std::size_t i = 0; i < a.values.size(); ++i) a.values[i] += b.values[i];
}

}  // namespace

ToyBackbone::ToyBackbone(ToyConfig config) : config_(config) {
  if (config_.dim == 0 || config_.layers == 0 || config_.heads == 0 || config_.vocab == 0 ||
      config_.max_context == 0 || config_.dim % config_.heads != 0) {
    throw Error(ErrorCode::ConfigError, "invalid toy backbone shape");
  }
  Rng rng(derive_seed(config_.seed, "toy-backbone"));
  const std::size_t d = config_.dim;
  token_embedding_ = normal_mat(rng, config_.vocab, d, kEmbeddingScale);
  position_embedding_ = normal_mat(rng, config_.max_context, d, kPositionScale);
  blocks_.reserve(config_.layers);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    Block b;
    b.ln1_gain.assign(d, 1.0);
    b.ln1_bias.assign(d, 0.0);
    b.wq = uniform_mat(rng, d, d);
    b.wk = uniform_mat(rng, d, d);
    b.wv = uniform_mat(rng, d, d);
    b.wo = uniform_mat(rng, d, d);
    b.ln2_gain.assign(d, 1.0);
    b.ln2_bias.assign(d, 0.0);
    b.w_fc = uniform_mat(rng, d, 4 * d);
    b.b_fc.resize(4 * d);
    for (double& x : b.b_fc) x = rng.uniform(-0.1, 0.1);
    b.w_proj = uniform_mat(rng, 4 * d, d);
    b.b_proj.resize(d);
    for (double& x : b.b_proj) x = rng.uniform(-0.1, 0.1);
    blocks_.push_back(std::move(b));
  }
  final_gain_.assign(d, 1.0);
  final_bias_.assign(d, 0.0);
}

BackboneMeta ToyBackbone::meta() const {
  return {config_.dim, config_.layers, config_.vocab, config_.max_context,
          "toy-d" + std::to_string(config_.dim) + "-l" + std::to_string(config_.layers) + "-s" +
              std::to_string(config_.seed)};
}

EmbeddingSeq ToyBackbone::embed(std::span<const TokenId> tokens) const {
  check_tokens(meta(), tokens);
  EmbeddingSeq seq;
  seq.matrix = Mat(tokens.size(), config_.dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto src = token_embedding_.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), seq.matrix.row(i).begin());
  }
  return seq;
}

void ToyBackbone::validate(const EmbeddingSeq& seq) const {
  if (seq.length() == 0) throw Error(ErrorCode::EmptyInput, "empty embedding sequence");
  if (seq.length() > config_.max_context) {
    throw Error(ErrorCode::ContextOverflow,
                std::to_string(seq.length()) + " rows exceed context of " + std::to_string(config_.max_context));
  }
  if (seq.matrix.cols != config_.dim) {
    throw Error(ErrorCode::ShapeMismatch, "embedding width " + std::to_string(seq.matrix.cols));
  }
  if (seq.inject && seq.inject->start + seq.inject->length > seq.length()) {
    throw Error(ErrorCode::ShapeMismatch, "inject span outside the sequence");
  }
}

Mat ToyBackbone::input_rows(const EmbeddingSeq& seq) const {
  Mat x = seq.matrix;
  for (std::size_t i = 0; i < x.rows; ++i) axpy(1.0, position_embedding_.row(i), x.row(i));
  return x;
}

Mat ToyBackbone::run_block(const Block& block, const Mat& x, BlockCache* cache) const {
  const std::size_t n = x.rows;
  const std::size_t d = config_.dim;
  const std::size_t hd = d / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  BlockCache local;
  BlockCache& c = cache ? *cache : local;
  c.u = layer_norm(x, block.ln1_gain, block.ln1_bias, &c.ln1);
  c.q = matmul(c.u, block.wq);
  c.k = matmul(c.u, block.wk);
  c.v = matmul(c.u, block.wv);
  c.attn = Mat(n, d);
  c.probs.assign(config_.heads, Mat(n, n));
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const std::size_t off = h * hd;
    Mat& p = c.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double max_s = -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) s += c.q(i, off + e) * c.k(j, off + e);
        p(i, j) = s * scale;
        max_s = std::max(max_s, p(i, j));
      }
      double total = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) = std::exp(p(i, j) - max_s);
        total += p(i, j);
      }
      for (std::size_t j = 0; j <= i; ++j) {
        p(i, j) /= total;
        for (std::size_t e = 0; e < hd; ++e) c.attn(i, off + e) += p(i, j) * c.v(j, off + e);
      }
    }
  }
  Mat a = x;
  add_in_place(a, matmul(c.attn, block.wo));

  c.u2 = layer_norm(a, block.ln2_gain, block.ln2_bias, &c.ln2);
  c.pre_fc = matmul(c.u2, block.w_fc);
  c.act_fc = Mat(n, 4 * d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < 4 * d; ++j) {
      c.pre_fc(r, j) += block.b_fc[j];
      c.act_fc(r, j) = gelu(c.pre_fc(r, j));
    }
  }
  Mat y = a;
  add_in_place(y, matmul(c.act_fc, block.w_proj));
  for (std::size_t r = 0; r < n; ++r) axpy(1.0, block.b_proj, y.row(r));
  return y;
}

Mat ToyBackbone::block_backward(const Block& block, const BlockCache& c, const Mat& dy) const {
  const std::size_t n = dy.rows;
  const std::size_t d = config_.dim;
  const std::size_t hd = d / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  // MLP branch
  Mat da = dy;
  Mat dpre = matmul_bt(dy, block.w_proj);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < 4 * d; ++j) dpre(r, j) *= gelu_grad(c.pre_fc(r, j));
  }
  add_in_place(da, layer_norm_backward(c.ln2, block.ln2_gain, matmul_bt(dpre, block.w_fc)));

  // attention branch
  Mat dx = da;
  const Mat dattn = matmul_bt(da, block.wo);
  Mat dq(n, d), dk(n, d), dv(n, d);
  Vec dp(n);
  for (std::size_t h = 0; h < config_.heads; ++h) {
    const std::size_t off = h * hd;
    const Mat& p = c.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      double weighted = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) {
          s += dattn(i, off + e) * c.v(j, off + e);
          dv(j, off + e) += p(i, j) * dattn(i, off + e);
        }
        dp[j] = s;
        weighted += p(i, j) * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const double ds = p(i, j) * (dp[j] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t e = 0; e < hd; ++e) {
          dq(i, off + e) += ds * c.k(j, off + e);
          dk(j, off + e) += ds * c.q(i, off + e);
        }
      }
    }
  }
  Mat du = matmul_bt(dq, block.wq);
  add_in_place(du, matmul_bt(dk, block.wk));
  add_in_place(du, matmul_bt(dv, block.wv));
  add_in_place(dx, layer_norm_backward(c.ln1, block.ln1_gain, du));
  return dx;
}

std::vector<Vec> ToyBackbone::hidden_states(const EmbeddingSeq& seq) const {
  validate(seq);
  std::vector<Vec> out;
  Mat x = input_rows(seq);
  for (const auto& block : blocks_) {
    x = run_block(block, x, nullptr);
    const auto last = x.row(x.rows - 1);
    out.emplace_back(last.begin(), last.end());
  }
  return out;
}

Vec ToyBackbone::forward_hidden(const EmbeddingSeq& seq, std::size_t layer) const {
  check_layer(meta(), layer);
  validate(seq);
  Mat x = input_rows(seq);
  for (std::size_t l = 0; l < layer; ++l) x = run_block(blocks_[l], x, nullptr);
  const auto last = x.row(x.rows - 1);
  return {last.begin(), last.end()};
}

Mat ToyBackbone::vjp_inject(const EmbeddingSeq& seq, std::size_t layer, ConstSpan cotangent) const {
  check_layer(meta(), layer);
  validate(seq);
  if (!seq.inject) throw Error(ErrorCode::ShapeMismatch, "vjp_inject needs an inject span");
  if (cotangent.size() != config_.dim) throw Error(ErrorCode::ShapeMismatch, "cotangent length");

  std::vector<BlockCache> caches(layer);
  Mat x = input_rows(seq);
  for (std::size_t l = 0; l < layer; ++l) x = run_block(blocks_[l], x, &caches[l]);

  Mat grad(x.rows, x.cols);
  std::copy(cotangent.begin(), cotangent.end(), grad.row(x.rows - 1).begin());
  for (std::size_t l = layer; l-- > 0;) grad = block_backward(blocks_[l], caches[l], grad);

  // positions are an additive constant, so this is also the input-row gradient
  const auto [start, len] = *seq.inject;
  Mat out(len, config_.dim);
  for (std::size_t i = 0; i < len; ++i) {
    const auto src = grad.row(start + i);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Vec ToyBackbone::final_hidden(std::span<const TokenId> tokens) const {
  return forward_hidden(embed(tokens), config_.layers);
}

Vec ToyBackbone::next_token_logprobs(std::span<const TokenId> tokens) const {
  const Vec top = final_hidden(tokens);
  Mat row(1, config_.dim);
  std::copy(top.begin(), top.end(), row.values.begin());
  const Mat normed = layer_norm<NormCache>(row, final_gain_, final_bias_, nullptr);
  const Mat logits = matmul_bt(normed, token_embedding_);
  return log_softmax(logits.values);
}

Tokens ToyBackbone::generate(std::span<const TokenId> tokens, std::size_t max_new, DecodeStrategy strategy) const {
  check_tokens(meta(), tokens);
  return decode(*this, tokens, max_new, strategy);
}

std::uint64_t ToyBackbone::weights_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const std::vector<double>& v) {
    h = fnv1a({reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double)}, h);
  };
  mix(token_embedding_.values);
  mix(position_embedding_.values);
  for (const auto& b : blocks_) {
    for (const auto* v : {&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.b_fc, &b.b_proj}) mix(*v);
    for (const auto* m : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_fc, &b.w_proj}) mix(m->values);
  }
  mix(final_gain_);
  mix(final_bias_);
  return h;
}

}  // namespace ssp
