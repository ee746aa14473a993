#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcomp/behavioral.hpp"
#include "pcomp/intervention.hpp"

namespace pcomp {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::string_view kPercentileRule = "linear";

struct MarkerScore {
  bool any_marker = false;
  int distinct_count = 0;
  std::vector<std::string> matched;
  std::string text;
};

// One measured (cell, site, condition). KL experiments fill the KL fields,
// the marker experiment fills `marker`.
struct Row {
  std::string persona_id;
  std::string task_id;
  int layer = 0;            // first layer of `layers`
  std::vector<int> layers;  // every layer written (a single entry for one site)
  std::string position;     // p_last | g1 | g2
  std::string condition;    // vector source or marker condition
  std::string host;         // XY | host | bare
  std::optional<GeometryStats> geometry;
  std::optional<double> aggregate_kl;
  std::vector<double> per_token_kl;
  std::vector<TokenId> reference;
  bool degenerate = false;
  std::optional<MarkerScore> marker;
  std::string error;
};

enum class GroupBy { layer_position, persona, task, condition };
std::string_view to_string(GroupBy group_by);
GroupBy parse_group_by(std::string_view label);

struct Quantiles {
  double median = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
};

// Linear interpolation between closest ranks: h = (n-1)q,
// x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).
double percentile(std::span<const double> values, double q);
Quantiles quantiles(std::span<const double> values);

struct SummaryEntry {
  GroupBy group_by = GroupBy::layer_position;
  std::string metric;
  std::string key;
  // Structured copies of the key fields (empty / -1 when not part of the key).
  std::string persona_id;
  std::string task_id;
  int layer = -1;
  std::vector<int> layers;
  std::string position;
  std::string condition;
  std::size_t n = 0;
  // Missing when the group has no usable values.
  std::optional<double> median, p25, p75;
};

// Metric names: aggregate_kl, cos_add, cos_xy_overlap, inter_ratio.
// Error rows and degenerate statistics are left out.
std::optional<double> row_metric(const Row& row, std::string_view metric);

// Groups KL rows. layer_position groups by (layer, position); persona and task
// add the persona/task id to that key; condition groups by (condition, host,
// layer set). Entries come out in key order.
std::vector<SummaryEntry> aggregate(const std::vector<Row>& rows, GroupBy group_by,
                                    std::string_view metric = "aggregate_kl");

struct RunMetadata {
  std::string experiment;
  std::string model_id;
  std::string dtype;
  std::string grid_id;
  std::vector<int> layers;
  std::vector<std::vector<int>> layer_sets;
  std::vector<std::string> positions;
  std::string kl_direction;
  std::string percentile_rule{kPercentileRule};
  std::string timestamp;
  nlohmann::json config = nlohmann::json::object();
};

struct RunArtifact {
  int schema_version = kSchemaVersion;
  RunMetadata metadata;
  std::vector<Row> rows;
  std::vector<SummaryEntry> summary;
  std::vector<MarkerSummary> marker_summary;
};

// Recomputes `summary` and `marker_summary` from `rows`.
void summarize(RunArtifact& artifact);
std::vector<SummaryEntry> summarize_rows(std::string_view experiment, const std::vector<Row>& rows);

nlohmann::json row_to_json(const Row& row);
Row row_from_json(const nlohmann::json& doc);
nlohmann::json summary_to_json(const SummaryEntry& entry);
nlohmann::json artifact_to_json(const RunArtifact& artifact);
// Checks schema_version and that the stored summary equals a recomputation
// from the rows; throws ArtifactError otherwise.
RunArtifact artifact_from_json(const nlohmann::json& doc);

void write_artifact(const std::filesystem::path& path, const RunArtifact& artifact);
RunArtifact read_artifact(const std::filesystem::path& path);

// "{experiment}_{model}_{grid}.json" with the model id slugged.
std::string artifact_filename(std::string_view experiment, std::string_view model_id,
                              std::string_view grid_id);

// Row conversions from the experiment modules.
Row row_from_sweep(const SweepRow& row);
Row row_from_kl(const PromptCell& cell, const KLResult& kl);
Row row_from_marker(const MarkerRow& row, int layer);

}  // namespace pcomp
