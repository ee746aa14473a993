#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pcomp {

using TokenId = std::int32_t;

enum class Dtype { f32, bf16 };

std::string_view to_string(Dtype dtype);
// Accepts "f32"/"float32" and "bf16"/"bfloat16". Half precision is rejected
// with a ConfigError: residual magnitudes overflow to NaN at the probe layers.
Dtype parse_dtype(std::string_view label);

struct ModelInfo {
  std::string model_id;
  int num_layers = 0;
  int hidden_dim = 0;
  int vocab_size = 0;
  Dtype dtype = Dtype::f32;
  bool deterministic = true;
};

// A residual-stream location. `layer` is the output of block `layer` (the state
// block layer+1 consumes); the embedding output is not addressable.
struct Site {
  int layer = 0;
  int position = 0;
  friend auto operator<=>(const Site&, const Site&) = default;
};

enum class PromptTag { BB, XB, BY, XY, host };

std::string_view to_string(PromptTag tag);

struct HiddenVector {
  std::vector<float> values;
  Site site;
  PromptTag prompt_tag = PromptTag::XY;
};

struct TokenDistribution {
  std::vector<double> probs;
  int position = 0;
};

// Overwrite the residual stream at `site` with `values` during a forward pass.
// A layer set is expressed as several writes at the same position; they are
// applied in increasing layer order inside one pass.
struct Write {
  Site site;
  std::vector<float> values;
};

struct ForwardOutput {
  // One entry per requested capture site, in request order.
  std::vector<std::vector<float>> captures;
  // Logits for positions [logits_from, tokens.size()).
  std::vector<std::vector<float>> logits;
};

struct GenerateOutput {
  std::vector<TokenId> tokens;
  // step_logits[i] produced tokens[i].
  std::vector<std::vector<float>> step_logits;
};

// Model runtime. Implementations must be deterministic and are used by one
// thread at a time.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual ModelInfo info() const = 0;

  // Render `user_text` as a single user turn through the model's chat template
  // (including the generation prompt) and tokenize it.
  virtual std::vector<TokenId> encode_chat(std::string_view user_text) const = 0;

  virtual std::string decode(std::span<const TokenId> tokens) const = 0;

  virtual ForwardOutput forward(std::span<const TokenId> tokens,
                                std::span<const Site> captures,
                                std::span<const Write> writes,
                                int logits_from) = 0;

  // Greedy continuation. Writes must address prompt positions; they are applied
  // while the prompt is processed and later steps read them through the cache.
  // The default re-runs forward() over the growing sequence, which gives the
  // same tokens because the written positions never move.
  virtual GenerateOutput generate(std::span<const TokenId> prompt, int n_tokens,
                                  std::span<const Write> writes);
};

// Argmax with ties broken toward the lower token id.
TokenId greedy_pick(std::span<const float> logits);

// Numerically stable softmax in double precision.
std::vector<double> softmax(std::span<const float> logits);

using BackendFactory = std::function<std::shared_ptr<Backend>(Dtype)>;

struct ModelDescriptor {
  std::string model_id;
  int num_layers = 0;
  int hidden_dim = 0;
  Dtype default_dtype = Dtype::f32;
  std::vector<Dtype> supported_dtypes;
  // Empty when no runtime is available in this process.
  BackendFactory factory;
};

// Architecture metadata, available without loading weights. Used to validate
// run configurations before any model load.
std::optional<ModelDescriptor> describe_model(std::string_view model_id);

// Installs (or replaces) a runtime for `descriptor.model_id`.
void register_backend(ModelDescriptor descriptor);

std::vector<std::string> known_models();

class ModelHandle {
 public:
  explicit ModelHandle(std::shared_ptr<Backend> backend);

  const ModelInfo& info() const { return info_; }
  Backend& backend() { return *backend_; }

  std::vector<TokenId> tokenize(std::string_view user_text) const;
  std::string detokenize(std::span<const TokenId> tokens) const;

 private:
  std::shared_ptr<Backend> backend_;
  ModelInfo info_;
};

inline constexpr std::string_view kToyModelId = "toy-4layer";

// Resolves `model_id` through the registry, builds the runtime and runs one
// probe forward pass; any non-finite hidden state there is a NonFiniteError.
ModelHandle load_model(std::string_view model_id, Dtype dtype);

std::vector<HiddenVector> capture(ModelHandle& handle,
                                  std::span<const TokenId> prompt_tokens,
                                  std::span<const Site> sites,
                                  PromptTag tag = PromptTag::XY);

std::vector<TokenId> generate_greedy(ModelHandle& handle,
                                     std::span<const TokenId> prompt_tokens,
                                     int n_tokens,
                                     std::span<const Write> interventions = {});

struct ScoredGeneration {
  std::vector<TokenId> tokens;
  // distributions[i] is the next-token distribution tokens[i] was picked from.
  std::vector<TokenDistribution> distributions;
};

ScoredGeneration generate_greedy_scored(ModelHandle& handle,
                                        std::span<const TokenId> prompt_tokens,
                                        int n_tokens,
                                        std::span<const Write> interventions = {});

// One distribution per reference token, conditioning on the prompt plus the
// reference prefix. Writes may address prompt or reference positions.
std::vector<TokenDistribution> teacher_forced_distributions(
    ModelHandle& handle, std::span<const TokenId> prompt_tokens,
    std::span<const TokenId> reference_tokens,
    std::span<const Write> interventions = {});

}  // namespace pcomp
