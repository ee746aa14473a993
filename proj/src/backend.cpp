#include "pcomp/backend.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>

#include "pcomp/error.hpp"
#include "pcomp/toy_model.hpp"

namespace pcomp {

std::string_view to_string(Dtype dtype) {
  switch (dtype) {
    case Dtype::f32:
      return "f32";
    case Dtype::bf16:
      return "bf16";
  }
  return "?";
}

Dtype parse_dtype(std::string_view label) {
  if (label == "f32" || label == "float32") return Dtype::f32;
  if (label == "bf16" || label == "bfloat16") return Dtype::bf16;
  if (label == "f16" || label == "float16" || label == "fp16" || label == "half") {
    throw ConfigError(
        "dtype float16 is not supported: residual magnitudes overflow at the probe layers "
        "and decomposition statistics become NaN; use bf16 (same dynamic range as f32)");
  }
  throw ConfigError("unknown dtype '" + std::string(label) + "' (expected f32 or bf16)");
}

std::string_view to_string(PromptTag tag) {
  switch (tag) {
    case PromptTag::BB:
      return "BB";
    case PromptTag::XB:
      return "XB";
    case PromptTag::BY:
      return "BY";
    case PromptTag::XY:
      return "XY";
    case PromptTag::host:
      return "host";
  }
  return "?";
}

TokenId greedy_pick(std::span<const float> logits) {
  if (logits.empty()) throw BackendError("empty logits row");
  TokenId best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[static_cast<std::size_t>(best)]) best = static_cast<TokenId>(i);
  }
  return best;
}

std::vector<double> softmax(std::span<const float> logits) {
  double max_logit = -INFINITY;
  for (float v : logits) max_logit = std::max(max_logit, static_cast<double>(v));
  std::vector<double> probs(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(static_cast<double>(logits[i]) - max_logit);
    total += probs[i];
  }
  for (double& p : probs) p /= total;
  return probs;
}

GenerateOutput Backend::generate(std::span<const TokenId> prompt, int n_tokens,
                                 std::span<const Write> writes) {
  GenerateOutput out;
  std::vector<TokenId> sequence(prompt.begin(), prompt.end());
  for (int step = 0; step < n_tokens; ++step) {
    ForwardOutput fwd = forward(sequence, {}, writes, static_cast<int>(sequence.size()) - 1);
    if (fwd.logits.size() != 1) throw BackendError("backend returned wrong number of logit rows");
    TokenId next = greedy_pick(fwd.logits.front());
    out.tokens.push_back(next);
    out.step_logits.push_back(std::move(fwd.logits.front()));
    sequence.push_back(next);
  }
  return out;
}

namespace {

struct Registry {
  std::mutex mutex;
  std::map<std::string, ModelDescriptor, std::less<>> models;

  Registry() {
    toy::Config toy_config;
    models.emplace(std::string(kToyModelId),
                   ModelDescriptor{std::string(kToyModelId), toy_config.num_layers,
                                   toy_config.hidden_dim, Dtype::f32,
                                   {Dtype::f32, Dtype::bf16},
                                   [](Dtype dtype) -> std::shared_ptr<Backend> {
                                     return std::make_shared<toy::ToyBackend>(dtype);
                                   }});
    // Architectures of the instruction-tuned models the experiments target.
    // No native runtime ships for them; one can be registered at run time.
    models.emplace("google/gemma-2-2b-it",
                   ModelDescriptor{"google/gemma-2-2b-it", 26, 2304, Dtype::f32,
                                   {Dtype::f32, Dtype::bf16}, nullptr});
    models.emplace("Qwen/Qwen2.5-1.5B-Instruct",
                   ModelDescriptor{"Qwen/Qwen2.5-1.5B-Instruct", 28, 1536, Dtype::bf16,
                                   {Dtype::bf16, Dtype::f32}, nullptr});
    models.emplace("Qwen/Qwen2.5-3B-Instruct",
                   ModelDescriptor{"Qwen/Qwen2.5-3B-Instruct", 36, 2048, Dtype::bf16,
                                   {Dtype::bf16, Dtype::f32}, nullptr});
  }
};

Registry& registry() {
  static Registry instance;
  return instance;
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

void check_sites(const ModelInfo& info, std::span<const Site> sites, std::size_t length,
                 std::string_view what) {
  for (const Site& s : sites) {
    if (s.layer < 0 || s.layer >= info.num_layers) {
      throw InvalidArgument(std::string(what) + " layer " + std::to_string(s.layer) +
                            " outside [0, " + std::to_string(info.num_layers) + ")");
    }
    if (s.position < 0 || static_cast<std::size_t>(s.position) >= length) {
      throw InvalidArgument(std::string(what) + " position " + std::to_string(s.position) +
                            " outside sequence of length " + std::to_string(length));
    }
  }
}

void check_writes(const ModelInfo& info, std::span<const Write> writes, std::size_t length) {
  for (const Write& w : writes) {
    check_sites(info, std::span(&w.site, 1), length, "intervention");
    if (static_cast<int>(w.values.size()) != info.hidden_dim) {
      throw InvalidArgument("intervention vector has length " + std::to_string(w.values.size()) +
                            ", model hidden_dim is " + std::to_string(info.hidden_dim));
    }
    if (!all_finite(w.values)) throw InvalidArgument("intervention vector is not finite");
  }
}

std::vector<Write> sorted_writes(std::span<const Write> writes) {
  std::vector<Write> sorted(writes.begin(), writes.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const Write& a, const Write& b) { return a.site < b.site; });
  return sorted;
}

void check_logits(const std::vector<float>& row) {
  if (!all_finite(row)) throw NonFiniteError("non-finite logits");
}

}  // namespace

std::optional<ModelDescriptor> describe_model(std::string_view model_id) {
  Registry& reg = registry();
  std::lock_guard lock(reg.mutex);
  auto it = reg.models.find(model_id);
  if (it == reg.models.end()) return std::nullopt;
  return it->second;
}

void register_backend(ModelDescriptor descriptor) {
  if (descriptor.model_id.empty()) throw InvalidArgument("model id must be nonempty");
  if (descriptor.num_layers < 1 || descriptor.hidden_dim < 1) {
    throw InvalidArgument("num_layers and hidden_dim must be positive");
  }
  if (descriptor.supported_dtypes.empty()) descriptor.supported_dtypes = {descriptor.default_dtype};
  Registry& reg = registry();
  std::lock_guard lock(reg.mutex);
  reg.models.insert_or_assign(descriptor.model_id, std::move(descriptor));
}

std::vector<std::string> known_models() {
  Registry& reg = registry();
  std::lock_guard lock(reg.mutex);
  std::vector<std::string> ids;
  for (const auto& [id, _] : reg.models) ids.push_back(id);
  return ids;
}

ModelHandle::ModelHandle(std::shared_ptr<Backend> backend) : backend_(std::move(backend)) {
  if (!backend_) throw InvalidArgument("null backend");
  info_ = backend_->info();
  if (info_.num_layers < 1 || info_.hidden_dim < 1) {
    throw BackendError("backend reports non-positive num_layers or hidden_dim");
  }
}

std::vector<TokenId> ModelHandle::tokenize(std::string_view user_text) const {
  return backend_->encode_chat(user_text);
}

std::string ModelHandle::detokenize(std::span<const TokenId> tokens) const {
  return backend_->decode(tokens);
}

ModelHandle load_model(std::string_view model_id, Dtype dtype) {
  auto descriptor = describe_model(model_id);
  if (!descriptor) throw BackendError("unknown model id '" + std::string(model_id) + "'");
  const auto& dtypes = descriptor->supported_dtypes;
  if (std::find(dtypes.begin(), dtypes.end(), dtype) == dtypes.end()) {
    throw BackendError("dtype " + std::string(to_string(dtype)) + " is not supported for '" +
                       std::string(model_id) + "'");
  }
  if (!descriptor->factory) {
    throw BackendError("no runtime registered for '" + std::string(model_id) +
                       "' (register one with register_backend, e.g. the Python transformers "
                       "adapter)");
  }
  ModelHandle handle(descriptor->factory(dtype));
  if (handle.info().dtype != dtype) {
    throw BackendError("backend for '" + std::string(model_id) + "' loaded as " +
                       std::string(to_string(handle.info().dtype)) + ", requested " +
                       std::string(to_string(dtype)));
  }

  // Probe pass: every layer at the last prompt position must be finite.
  std::vector<TokenId> probe = handle.tokenize("Give advice to someone facing a difficult decision.");
  std::vector<Site> sites;
  for (int layer = 0; layer < handle.info().num_layers; ++layer) {
    sites.push_back({layer, static_cast<int>(probe.size()) - 1});
  }
  ForwardOutput out = handle.backend().forward(probe, sites, {}, static_cast<int>(probe.size()) - 1);
  for (std::size_t i = 0; i < out.captures.size(); ++i) {
    if (!all_finite(out.captures[i])) {
      throw NonFiniteError("probe forward pass produced non-finite hidden state at layer " +
                           std::to_string(sites[i].layer) + " in " +
                           std::string(to_string(dtype)) +
                           "; half precision overflows here, load in bf16 or f32");
    }
  }
  for (const auto& row : out.logits) check_logits(row);
  return handle;
}

std::vector<HiddenVector> capture(ModelHandle& handle, std::span<const TokenId> prompt_tokens,
                                  std::span<const Site> sites, PromptTag tag) {
  check_sites(handle.info(), sites, prompt_tokens.size(), "capture");
  ForwardOutput out = handle.backend().forward(prompt_tokens, sites, {},
                                               static_cast<int>(prompt_tokens.size()));
  if (out.captures.size() != sites.size()) throw BackendError("backend returned wrong capture count");
  std::vector<HiddenVector> result;
  result.reserve(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) {
    if (static_cast<int>(out.captures[i].size()) != handle.info().hidden_dim) {
      throw BackendError("backend returned hidden state of wrong length");
    }
    if (!all_finite(out.captures[i])) {
      throw NonFiniteError("non-finite activation at layer " + std::to_string(sites[i].layer) +
                           ", position " + std::to_string(sites[i].position));
    }
    result.push_back({std::move(out.captures[i]), sites[i], tag});
  }
  return result;
}

ScoredGeneration generate_greedy_scored(ModelHandle& handle,
                                        std::span<const TokenId> prompt_tokens, int n_tokens,
                                        std::span<const Write> interventions) {
  if (n_tokens < 1) throw InvalidArgument("n_tokens must be positive");
  if (prompt_tokens.empty()) throw InvalidArgument("empty prompt");
  check_writes(handle.info(), interventions, prompt_tokens.size());
  std::vector<Write> writes = sorted_writes(interventions);
  GenerateOutput out = handle.backend().generate(prompt_tokens, n_tokens, writes);
  if (static_cast<int>(out.tokens.size()) != n_tokens ||
      out.step_logits.size() != out.tokens.size()) {
    throw BackendError("backend generated the wrong number of tokens");
  }
  ScoredGeneration scored;
  scored.tokens = std::move(out.tokens);
  for (std::size_t i = 0; i < out.step_logits.size(); ++i) {
    check_logits(out.step_logits[i]);
    scored.distributions.push_back(
        {softmax(out.step_logits[i]), static_cast<int>(prompt_tokens.size() + i)});
  }
  return scored;
}

std::vector<TokenId> generate_greedy(ModelHandle& handle, std::span<const TokenId> prompt_tokens,
                                     int n_tokens, std::span<const Write> interventions) {
  return generate_greedy_scored(handle, prompt_tokens, n_tokens, interventions).tokens;
}

std::vector<TokenDistribution> teacher_forced_distributions(
    ModelHandle& handle, std::span<const TokenId> prompt_tokens,
    std::span<const TokenId> reference_tokens, std::span<const Write> interventions) {
  if (reference_tokens.empty()) throw InvalidArgument("reference_tokens must be nonempty");
  if (prompt_tokens.empty()) throw InvalidArgument("empty prompt");
  std::vector<TokenId> sequence(prompt_tokens.begin(), prompt_tokens.end());
  sequence.insert(sequence.end(), reference_tokens.begin(), reference_tokens.end());
  check_writes(handle.info(), interventions, sequence.size());
  std::vector<Write> writes = sorted_writes(interventions);

  const int first = static_cast<int>(prompt_tokens.size()) - 1;
  ForwardOutput out = handle.backend().forward(sequence, {}, writes, first);
  if (out.logits.size() < reference_tokens.size()) {
    throw BackendError("backend returned too few logit rows");
  }
  std::vector<TokenDistribution> dists;
  dists.reserve(reference_tokens.size());
  for (std::size_t i = 0; i < reference_tokens.size(); ++i) {
    check_logits(out.logits[i]);
    dists.push_back({softmax(out.logits[i]), static_cast<int>(prompt_tokens.size() + i)});
  }
  return dists;
}

}  // namespace pcomp
