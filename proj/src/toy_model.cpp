#include "pcomp/toy_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <random>

#include <unicode/unistr.h>

#include "pcomp/error.hpp"

namespace pcomp::toy {

namespace {

// Box-Muller over mt19937_64 raw output; std::normal_distribution is not
// reproducible across standard libraries.
class NormalSource {
 public:
  explicit NormalSource(std::uint64_t seed) : engine_(seed) {}

  float next(float stddev) {
    if (has_spare_) {
      has_spare_ = false;
      return static_cast<float>(spare_ * stddev);
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return static_cast<float>(radius * std::cos(angle) * stddev);
  }

 private:
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

Matrix random_matrix(NormalSource& rng, int rows, int cols, float stddev) {
  Matrix m{rows, cols, std::vector<float>(static_cast<std::size_t>(rows) * cols)};
  for (float& v : m.data) v = rng.next(stddev);
  return m;
}

std::vector<float> random_gain(NormalSource& rng, int n) {
  std::vector<float> g(static_cast<std::size_t>(n));
  for (float& v : g) v = 1.0f + rng.next(0.1f);
  return g;
}

void matvec(const Matrix& m, std::span<const float> x, std::span<float> out) {
  for (int r = 0; r < m.rows; ++r) {
    const float* row = m.row(r);
    float acc = 0.0f;
    for (int c = 0; c < m.cols; ++c) acc += row[c] * x[static_cast<std::size_t>(c)];
    out[static_cast<std::size_t>(r)] = acc;
  }
}

void rms_norm(std::span<const float> x, std::span<const float> gain, float eps,
              std::span<float> out) {
  float sum_sq = 0.0f;
  for (float v : x) sum_sq += v * v;
  const float scale = 1.0f / std::sqrt(sum_sq / static_cast<float>(x.size()) + eps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * scale * gain[i];
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

void apply_rope(std::span<float> vec, int num_heads, int position, float base) {
  const int head_dim = static_cast<int>(vec.size()) / num_heads;
  const int half = head_dim / 2;
  for (int h = 0; h < num_heads; ++h) {
    float* head = vec.data() + static_cast<std::size_t>(h) * head_dim;
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(static_cast<double>(base), -2.0 * i / head_dim);
      const double angle = position * freq;
      const float c = static_cast<float>(std::cos(angle));
      const float s = static_cast<float>(std::sin(angle));
      const float a = head[i];
      const float b = head[i + half];
      head[i] = a * c - b * s;
      head[i + half] = a * s + b * c;
    }
  }
}

}  // namespace

float round_to_bf16(float value) {
  if (!std::isfinite(value)) return value;
  auto bits = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7fffu + lsb;
  bits &= 0xffff0000u;
  return std::bit_cast<float>(bits);
}

Weights make_weights(const Config& config) {
  if (config.hidden_dim % config.num_heads != 0 || (config.hidden_dim / config.num_heads) % 2 != 0) {
    throw InvalidArgument("toy hidden_dim must split into even-sized heads");
  }
  NormalSource rng(config.seed);
  const int d = config.hidden_dim;
  const float proj = 1.0f / std::sqrt(static_cast<float>(d));
  Weights w;
  w.config = config;
  w.embedding = random_matrix(rng, config.vocab_size, d, 1.0f);
  for (int l = 0; l < config.num_layers; ++l) {
    LayerWeights layer;
    layer.attn_norm = random_gain(rng, d);
    layer.wq = random_matrix(rng, d, d, proj);
    layer.wk = random_matrix(rng, d, d, proj);
    layer.wv = random_matrix(rng, d, d, proj);
    layer.wo = random_matrix(rng, d, d, proj);
    layer.mlp_norm = random_gain(rng, d);
    layer.w_in = random_matrix(rng, config.ffn_dim, d, proj);
    layer.w_out = random_matrix(rng, d, config.ffn_dim,
                                1.0f / std::sqrt(static_cast<float>(config.ffn_dim)));
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = random_gain(rng, d);
  w.unembedding = random_matrix(rng, config.vocab_size, d, 2.5f * proj);
  return w;
}

// Incremental decoder state: one KV cache per layer.
class ToyBackend::Session {
 public:
  Session(const Weights& weights, Dtype dtype) : w_(weights), dtype_(dtype) {
    keys_.resize(static_cast<std::size_t>(w_.config.num_layers));
    values_.resize(static_cast<std::size_t>(w_.config.num_layers));
  }

  int length() const { return length_; }

  // Processes one token at the next position. `writes` must all address this
  // position and be sorted by layer. Captured states are appended to
  // `captured` in `capture_layers` order.
  std::vector<float> step(TokenId token, std::span<const Write* const> writes,
                          std::span<const std::pair<int, std::size_t>> capture_layers,
                          std::vector<std::vector<float>>& captured) {
    const Config& cfg = w_.config;
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    if (token < 0 || token >= cfg.vocab_size) {
      throw InvalidArgument("token id " + std::to_string(token) + " outside toy vocabulary");
    }
    const int pos = length_;
    std::vector<float> x(w_.embedding.row(token), w_.embedding.row(token) + d);
    round_state(x);

    std::vector<float> normed(d), q(d), k(d), v(d), attn(d), proj(d);
    std::vector<float> hidden(static_cast<std::size_t>(cfg.ffn_dim));
    const int heads = cfg.num_heads;
    const auto head_dim = d / static_cast<std::size_t>(heads);
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head_dim));
    std::size_t next_write = 0;

    for (int l = 0; l < cfg.num_layers; ++l) {
      const LayerWeights& lw = w_.layers[static_cast<std::size_t>(l)];
      rms_norm(x, lw.attn_norm, cfg.norm_eps, normed);
      matvec(lw.wq, normed, q);
      matvec(lw.wk, normed, k);
      matvec(lw.wv, normed, v);
      apply_rope(q, heads, pos, cfg.rope_base);
      apply_rope(k, heads, pos, cfg.rope_base);
      auto& kc = keys_[static_cast<std::size_t>(l)];
      auto& vc = values_[static_cast<std::size_t>(l)];
      kc.insert(kc.end(), k.begin(), k.end());
      vc.insert(vc.end(), v.begin(), v.end());

      const int n = pos + 1;
      std::vector<float> scores(static_cast<std::size_t>(n));
      for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(h) * head_dim;
        float max_score = -INFINITY;
        for (int t = 0; t < n; ++t) {
          const float* kt = kc.data() + static_cast<std::size_t>(t) * d + off;
          float s = 0.0f;
          for (std::size_t i = 0; i < head_dim; ++i) s += q[off + i] * kt[i];
          s *= inv_sqrt;
          scores[static_cast<std::size_t>(t)] = s;
          max_score = std::max(max_score, s);
        }
        float total = 0.0f;
        for (float& s : scores) {
          s = std::exp(s - max_score);
          total += s;
        }
        for (std::size_t i = 0; i < head_dim; ++i) attn[off + i] = 0.0f;
        for (int t = 0; t < n; ++t) {
          const float weight = scores[static_cast<std::size_t>(t)] / total;
          const float* vt = vc.data() + static_cast<std::size_t>(t) * d + off;
          for (std::size_t i = 0; i < head_dim; ++i) attn[off + i] += weight * vt[i];
        }
      }
      matvec(lw.wo, attn, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];

      rms_norm(x, lw.mlp_norm, cfg.norm_eps, normed);
      matvec(lw.w_in, normed, hidden);
      for (float& hv : hidden) hv = gelu(hv);
      matvec(lw.w_out, hidden, proj);
      for (std::size_t i = 0; i < d; ++i) x[i] += proj[i];
      round_state(x);

      while (next_write < writes.size() && writes[next_write]->site.layer == l) {
        x = writes[next_write]->values;
        round_state(x);
        ++next_write;
      }
      for (const auto& [layer, slot] : capture_layers) {
        if (layer == l) captured[slot] = x;
      }
    }
    ++length_;
    return x;
  }

  std::vector<float> logits(std::span<const float> x) const {
    const Config& cfg = w_.config;
    std::vector<float> normed(static_cast<std::size_t>(cfg.hidden_dim));
    rms_norm(x, w_.final_norm, cfg.norm_eps, normed);
    std::vector<float> out(static_cast<std::size_t>(cfg.vocab_size));
    matvec(w_.unembedding, normed, out);
    return out;
  }

 private:
  void round_state(std::vector<float>& x) const {
    if (dtype_ == Dtype::bf16) {
      for (float& v : x) v = round_to_bf16(v);
    }
  }

  const Weights& w_;
  Dtype dtype_;
  int length_ = 0;
  std::vector<std::vector<float>> keys_;
  std::vector<std::vector<float>> values_;
};

namespace {

std::vector<const Write*> writes_at(std::span<const Write> writes, int position) {
  std::vector<const Write*> at;
  for (const Write& w : writes) {
    if (w.site.position == position) at.push_back(&w);
  }
  std::stable_sort(at.begin(), at.end(),
                   [](const Write* a, const Write* b) { return a->site.layer < b->site.layer; });
  return at;
}

}  // namespace

ToyBackend::ToyBackend(Dtype dtype, Config config) : weights_(make_weights(config)), dtype_(dtype) {}

ModelInfo ToyBackend::info() const {
  const Config& c = weights_.config;
  return {std::string(kToyModelId), c.num_layers, c.hidden_dim, c.vocab_size, dtype_, true};
}

std::vector<TokenId> ToyBackend::encode_chat(std::string_view user_text) const {
  std::vector<TokenId> tokens{kBos, kStartOfTurn};
  auto push_bytes = [&](std::string_view s) {
    for (unsigned char ch : s) tokens.push_back(static_cast<TokenId>(ch));
  };
  push_bytes("user\n");
  push_bytes(user_text);
  tokens.push_back(kEndOfTurn);
  push_bytes("\n");
  tokens.push_back(kStartOfTurn);
  push_bytes("model\n");
  return tokens;
}

std::string ToyBackend::decode(std::span<const TokenId> tokens) const {
  std::string text;
  for (TokenId t : tokens) {
    if (t >= 0 && t < 256) text.push_back(static_cast<char>(t));
  }
  // Byte tokens need not form valid UTF-8; ill-formed sequences become U+FFFD.
  std::string valid;
  icu::UnicodeString::fromUTF8(text).toUTF8String(valid);
  return valid;
}

ForwardOutput ToyBackend::forward(std::span<const TokenId> tokens, std::span<const Site> captures,
                                  std::span<const Write> writes, int logits_from) {
  Session session(weights_, dtype_);
  ForwardOutput out;
  out.captures.resize(captures.size());
  const int n = static_cast<int>(tokens.size());
  for (int pos = 0; pos < n; ++pos) {
    std::vector<std::pair<int, std::size_t>> capture_layers;
    for (std::size_t i = 0; i < captures.size(); ++i) {
      if (captures[i].position == pos) capture_layers.emplace_back(captures[i].layer, i);
    }
    std::vector<const Write*> at = writes_at(writes, pos);
    std::vector<float> state = session.step(tokens[static_cast<std::size_t>(pos)], at,
                                            capture_layers, out.captures);
    if (pos >= logits_from) out.logits.push_back(session.logits(state));
  }
  return out;
}

GenerateOutput ToyBackend::generate(std::span<const TokenId> prompt, int n_tokens,
                                    std::span<const Write> writes) {
  Session session(weights_, dtype_);
  std::vector<std::vector<float>> unused;
  std::vector<float> state;
  for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
    std::vector<const Write*> at = writes_at(writes, static_cast<int>(pos));
    state = session.step(prompt[pos], at, {}, unused);
  }
  GenerateOutput out;
  for (int i = 0; i < n_tokens; ++i) {
    std::vector<float> logits = session.logits(state);
    const TokenId next = greedy_pick(logits);
    out.tokens.push_back(next);
    out.step_logits.push_back(std::move(logits));
    if (i + 1 < n_tokens) state = session.step(next, {}, {}, unused);
  }
  return out;
}

}  // namespace pcomp::toy
