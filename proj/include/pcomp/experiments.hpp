#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcomp/backend.hpp"
#include "pcomp/intervention.hpp"
#include "pcomp/results.hpp"

namespace pcomp {

enum class Experiment { localized, diverse, markers, inject, multilayer };
std::string_view to_string(Experiment experiment);
Experiment parse_experiment(std::string_view label);

// Unset fields fall back to the experiment defaults. Layering: command-line
// flags over a config file over the built-in defaults (see merge()).
struct RunConfig {
  std::optional<std::string> model_id;
  std::optional<std::string> dtype;
  std::optional<std::string> grid;  // "short", "long" or a grid file path
  std::optional<std::vector<int>> layers;
  std::optional<std::vector<std::string>> positions;
  std::optional<std::string> kl_direction;
  std::optional<std::string> out;
  std::optional<std::vector<std::string>> subset_personas;
  std::optional<std::vector<std::string>> subset_tasks;
  std::optional<std::vector<std::vector<int>>> layer_sets;
  std::optional<int> n_tokens;
  std::optional<int> jobs;
  std::optional<std::string> markers;  // marker-set file; built-in sets otherwise
};

// Fields set in `overrides` replace those in `base`.
RunConfig merge(const RunConfig& base, const RunConfig& overrides);
RunConfig config_from_json(const nlohmann::json& doc);
RunConfig load_config_file(const std::filesystem::path& path);

inline constexpr std::string_view kDefaultModel = "google/gemma-2-2b-it";

// Fully-resolved, validated configuration.
struct ResolvedConfig {
  Experiment experiment = Experiment::localized;
  std::string model_id;
  Dtype dtype = Dtype::f32;
  GridConfig grid;
  std::string grid_selector;
  std::vector<int> layers;
  std::vector<ProbeKind> positions;
  KlDirection kl_direction = KlDirection::clean_to_intervened;
  std::filesystem::path out;
  std::vector<std::string> subset_personas;
  std::vector<std::string> subset_tasks;
  std::vector<std::vector<int>> layer_sets;
  int n_tokens = kReferenceLength;
  int jobs = 1;
  std::vector<MarkerSet> marker_sets;
  std::string markers_source;
};

// Applies defaults and validates everything against the model's architecture
// metadata, without loading the model. Throws ConfigError.
ResolvedConfig resolve(Experiment experiment, const RunConfig& config);

nlohmann::json config_to_json(const ResolvedConfig& config);

std::vector<std::vector<int>> default_layer_sets();

using HandleFactory = std::function<ModelHandle(const std::string&, Dtype)>;

// Runs the experiment and returns its artifact (summaries filled in). With
// jobs > 1 cells are spread over independent handles from `factory`.
RunArtifact run_experiment(const ResolvedConfig& config, const HandleFactory& factory = load_model);

// Where the artifact for `config` is written: `out` itself when it names a
// .json file, otherwise out/{experiment}_{model}_{grid}.json.
std::filesystem::path artifact_path(const ResolvedConfig& config);

}  // namespace pcomp
