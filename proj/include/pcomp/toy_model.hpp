#pragma once

#include <cstdint>
#include <vector>

#include "pcomp/backend.hpp"

namespace pcomp::toy {

// Byte-level vocabulary plus four specials.
inline constexpr TokenId kBos = 256;
inline constexpr TokenId kStartOfTurn = 257;
inline constexpr TokenId kEndOfTurn = 258;
inline constexpr TokenId kEos = 259;

struct Config {
  int num_layers = 4;
  int hidden_dim = 64;
  int num_heads = 4;
  int ffn_dim = 256;
  int vocab_size = 260;
  float rope_base = 10000.0f;
  float norm_eps = 1e-6f;
  std::uint64_t seed = 0x5eed'4c41'7965'7273ULL;
};

// Row-major matrices: `rows x cols` stored as rows*cols floats.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<float> data;
  const float* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
};

struct LayerWeights {
  std::vector<float> attn_norm;
  Matrix wq, wk, wv, wo;
  std::vector<float> mlp_norm;
  Matrix w_in, w_out;
};

struct Weights {
  Config config;
  Matrix embedding;  // vocab x hidden
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;
  Matrix unembedding;  // vocab x hidden
};

// Fixed-seed weights; identical on every platform (the generator only uses
// mt19937_64 raw output).
Weights make_weights(const Config& config);

float round_to_bf16(float value);

// Four-block pre-norm transformer with rotary attention and a GELU MLP. Runs
// incrementally over a KV cache, so substituted states reach later positions
// only through the cached keys and values.
class ToyBackend final : public Backend {
 public:
  explicit ToyBackend(Dtype dtype = Dtype::f32, Config config = {});

  ModelInfo info() const override;
  std::vector<TokenId> encode_chat(std::string_view user_text) const override;
  std::string decode(std::span<const TokenId> tokens) const override;
  ForwardOutput forward(std::span<const TokenId> tokens, std::span<const Site> captures,
                        std::span<const Write> writes, int logits_from) override;
  GenerateOutput generate(std::span<const TokenId> prompt, int n_tokens,
                          std::span<const Write> writes) override;

  const Weights& weights() const { return weights_; }
  Dtype dtype() const { return dtype_; }

 private:
  class Session;

  Weights weights_;
  Dtype dtype_;
};

}  // namespace pcomp::toy
