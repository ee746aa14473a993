#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pcomp/backend.hpp"
#include "pcomp/grid.hpp"

namespace pcomp {

// Persona-specific surface patterns. A trailing '*' makes a prefix wildcard
// ("indemnif*" matches "indemnification").
struct MarkerSet {
  std::string persona_id;
  std::vector<std::string> patterns;  // normalized, unique
};

// NFKC, lowercase, curly apostrophes folded to "'".
std::string normalize_text(std::string_view text);

// Normalizes and validates: nonempty, unique after normalization.
MarkerSet make_marker_set(std::string persona_id, const std::vector<std::string>& patterns);

// Case-insensitive, word-boundary-aware matching. Word characters are Unicode
// letters, digits and '_'; every other character (including '-' and '\'') is a
// boundary. A space in a pattern matches exactly one whitespace character.
// Returns the distinct patterns found, in pattern order.
std::vector<std::string> match_markers(std::string_view text, const MarkerSet& markers);

std::vector<MarkerSet> builtin_marker_sets();
nlohmann::json marker_sets_to_json(const std::vector<MarkerSet>& sets);
std::vector<MarkerSet> marker_sets_from_json(const nlohmann::json& doc);
std::vector<MarkerSet> load_marker_sets(const std::filesystem::path& path);

enum class MarkerCondition { clean, additive, remove_x, bare };
inline constexpr std::array<MarkerCondition, 4> kMarkerConditions{
    MarkerCondition::clean, MarkerCondition::additive, MarkerCondition::remove_x,
    MarkerCondition::bare};
std::string_view to_string(MarkerCondition condition);
MarkerCondition parse_marker_condition(std::string_view label);

struct MarkerRow {
  std::string persona_id;
  std::string task_id;
  MarkerCondition condition = MarkerCondition::clean;
  bool any_marker = false;
  int distinct_count = 0;
  std::vector<std::string> matched;
  std::string text;
  std::string error;
};

struct MarkerSummary {
  MarkerCondition condition = MarkerCondition::clean;
  int cells = 0;
  int any_count = 0;
  double any_rate = 0.0;
  double mean_distinct = 0.0;
  friend bool operator==(const MarkerSummary&, const MarkerSummary&) = default;
};

struct MarkerReport {
  std::vector<MarkerRow> rows;
  std::vector<MarkerSummary> summary;  // one per condition present, in kMarkerConditions order
};

MarkerRow score_text(std::string_view text, const MarkerSet& markers, std::string task_id,
                     MarkerCondition condition);

// Rows whose generation failed are excluded from the rates.
std::vector<MarkerSummary> summarize_markers(const std::vector<MarkerRow>& rows);

inline constexpr int kMarkerTokens = 80;
inline constexpr int kMarkerLayer = 14;

// Per cell: clean XY, additive and remove-X substitutions at (p_last, layer),
// and the bare task prompt, each generated greedily for `n_tokens`.
MarkerReport run_marker_experiment(ModelHandle& handle, const std::vector<PromptCell>& cells,
                                   const std::vector<MarkerSet>& marker_sets, int layer,
                                   int n_tokens = kMarkerTokens);

}  // namespace pcomp
