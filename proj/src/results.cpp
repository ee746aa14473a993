#include "pcomp/results.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <tuple>

#include "pcomp/error.hpp"

namespace pcomp {

using nlohmann::json;

std::string_view to_string(GroupBy group_by) {
  switch (group_by) {
    case GroupBy::layer_position:
      return "layer_position";
    case GroupBy::persona:
      return "persona";
    case GroupBy::task:
      return "task";
    case GroupBy::condition:
      return "condition";
  }
  return "?";
}

GroupBy parse_group_by(std::string_view label) {
  for (GroupBy g : {GroupBy::layer_position, GroupBy::persona, GroupBy::task, GroupBy::condition}) {
    if (to_string(g) == label) return g;
  }
  throw ArtifactError("unknown group_by '" + std::string(label) + "'");
}

double percentile(std::span<const double> values, double q) {
  if (values.empty()) throw InvalidArgument("percentile of an empty set");
  if (q < 0.0 || q > 1.0) throw InvalidArgument("percentile fraction outside [0, 1]");
  std::vector<double> work(values.begin(), values.end());
  const double h = static_cast<double>(work.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const double frac = h - static_cast<double>(lo);
  std::nth_element(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(lo), work.end());
  const double lo_value = work[lo];
  if (lo + 1 >= work.size()) return lo_value;
  const double hi_value = *std::min_element(work.begin() + static_cast<std::ptrdiff_t>(lo) + 1, work.end());
  return lo_value + frac * (hi_value - lo_value);
}

Quantiles quantiles(std::span<const double> values) {
  return {percentile(values, 0.5), percentile(values, 0.25), percentile(values, 0.75)};
}

std::optional<double> row_metric(const Row& row, std::string_view metric) {
  if (!row.error.empty()) return std::nullopt;
  if (metric == "aggregate_kl") return row.aggregate_kl;
  if (!row.geometry) return std::nullopt;
  if (metric == "cos_add") {
    if (row.geometry->cos_add.degenerate) return std::nullopt;
    return row.geometry->cos_add.value;
  }
  if (metric == "cos_xy_overlap") {
    if (row.geometry->cos_xy_overlap.degenerate) return std::nullopt;
    return row.geometry->cos_xy_overlap.value;
  }
  if (metric == "inter_ratio") return row.geometry->inter_ratio;
  throw InvalidArgument("unknown metric '" + std::string(metric) + "'");
}

namespace {

int position_rank(const std::string& position) {
  if (position == "p_last") return 0;
  if (position == "g1") return 1;
  if (position == "g2") return 2;
  return 3;
}

std::string join_layers(const std::vector<int>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(layers[i]);
  }
  return out;
}

struct GroupKey {
  std::string persona;
  std::string task;
  std::string condition;
  std::string host;
  std::vector<int> layers;
  int layer = -1;
  std::string position;

  bool operator<(const GroupKey& other) const {
    // Layer before position before ids, positions in probe order.
    const auto a = std::make_tuple(condition, host, layers, layer, position_rank(position),
                                   position, persona, task);
    const auto b = std::make_tuple(other.condition, other.host, other.layers, other.layer,
                                   position_rank(other.position), other.position, other.persona,
                                   other.task);
    return a < b;
  }
};

GroupKey key_for(const Row& row, GroupBy group_by) {
  GroupKey k;
  switch (group_by) {
    case GroupBy::layer_position:
      k.layer = row.layer;
      k.position = row.position;
      break;
    case GroupBy::persona:
      k.persona = row.persona_id;
      k.layer = row.layer;
      k.position = row.position;
      break;
    case GroupBy::task:
      k.task = row.task_id;
      k.layer = row.layer;
      k.position = row.position;
      break;
    case GroupBy::condition:
      k.condition = row.condition;
      k.host = row.host;
      k.layers = row.layers;
      break;
  }
  return k;
}

std::string key_string(const GroupKey& k, GroupBy group_by) {
  switch (group_by) {
    case GroupBy::layer_position:
      return "layer=" + std::to_string(k.layer) + "|position=" + k.position;
    case GroupBy::persona:
      return "persona=" + k.persona + "|layer=" + std::to_string(k.layer) +
             "|position=" + k.position;
    case GroupBy::task:
      return "task=" + k.task + "|layer=" + std::to_string(k.layer) + "|position=" + k.position;
    case GroupBy::condition:
      return "condition=" + k.condition + "|host=" + k.host + "|layers=" + join_layers(k.layers);
  }
  return {};
}

bool is_kl_row(const Row& row) { return !row.marker.has_value(); }

}  // namespace

std::vector<SummaryEntry> aggregate(const std::vector<Row>& rows, GroupBy group_by,
                                    std::string_view metric) {
  std::map<GroupKey, std::vector<double>> groups;
  for (const Row& row : rows) {
    if (!is_kl_row(row)) continue;
    auto& values = groups[key_for(row, group_by)];
    if (auto v = row_metric(row, metric)) values.push_back(*v);
  }
  std::vector<SummaryEntry> out;
  for (const auto& [key, values] : groups) {
    SummaryEntry e;
    e.group_by = group_by;
    e.metric = std::string(metric);
    e.key = key_string(key, group_by);
    e.persona_id = key.persona;
    e.task_id = key.task;
    e.layer = key.layer;
    e.layers = key.layers;
    e.position = key.position;
    e.condition = key.condition;
    e.n = values.size();
    if (!values.empty()) {
      const Quantiles q = quantiles(values);
      e.median = q.median;
      e.p25 = q.p25;
      e.p75 = q.p75;
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<SummaryEntry> summarize_rows(std::string_view experiment,
                                         const std::vector<Row>& rows) {
  std::vector<SummaryEntry> out;
  auto append = [&](GroupBy g, std::string_view metric) {
    auto part = aggregate(rows, g, metric);
    out.insert(out.end(), std::make_move_iterator(part.begin()),
               std::make_move_iterator(part.end()));
  };
  if (experiment == "localized" || experiment == "diverse") {
    for (std::string_view metric : {"aggregate_kl", "cos_add", "cos_xy_overlap", "inter_ratio"}) {
      append(GroupBy::layer_position, metric);
    }
    if (experiment == "diverse") {
      append(GroupBy::persona, "aggregate_kl");
      append(GroupBy::task, "aggregate_kl");
    }
  } else if (experiment == "inject" || experiment == "multilayer") {
    append(GroupBy::condition, "aggregate_kl");
  }
  return out;
}

void summarize(RunArtifact& artifact) {
  artifact.summary = summarize_rows(artifact.metadata.experiment, artifact.rows);
  std::vector<MarkerRow> marker_rows;
  for (const Row& r : artifact.rows) {
    if (!r.marker) continue;
    MarkerRow m;
    m.persona_id = r.persona_id;
    m.task_id = r.task_id;
    m.condition = parse_marker_condition(r.condition);
    m.any_marker = r.marker->any_marker;
    m.distinct_count = r.marker->distinct_count;
    m.error = r.error;
    marker_rows.push_back(std::move(m));
  }
  artifact.marker_summary = summarize_markers(marker_rows);
}

namespace {

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::optional<double> read_optional(const json& doc, const char* key) {
  if (!doc.contains(key) || doc[key].is_null()) return std::nullopt;
  return doc[key].get<double>();
}

json cosine_to_json(const Cosine& c) { return {{"value", c.value}, {"degenerate", c.degenerate}}; }

Cosine cosine_from_json(const json& doc) {
  return {doc.at("value").get<double>(), doc.at("degenerate").get<bool>()};
}

}  // namespace

json row_to_json(const Row& row) {
  json doc;
  doc["persona_id"] = row.persona_id;
  doc["task_id"] = row.task_id;
  doc["layer"] = row.layer;
  doc["layers"] = row.layers;
  doc["position"] = row.position;
  doc["condition"] = row.condition;
  doc["host"] = row.host;
  if (row.geometry) {
    const GeometryStats& g = *row.geometry;
    doc["geometry"] = {{"cos_add", cosine_to_json(g.cos_add)},
                       {"cos_xy_overlap", cosine_to_json(g.cos_xy_overlap)},
                       {"inter_ratio", optional_number(g.inter_ratio)},
                       {"norm_delta_x", g.norm_delta_x},
                       {"norm_delta_y", g.norm_delta_y},
                       {"norm_delta_xy", g.norm_delta_xy},
                       {"norm_inter", g.norm_inter}};
  } else {
    doc["geometry"] = nullptr;
  }
  doc["aggregate_kl"] = optional_number(row.aggregate_kl);
  doc["per_token_kl"] = row.per_token_kl;
  doc["reference"] = row.reference;
  doc["degenerate"] = row.degenerate;
  if (row.marker) {
    doc["marker"] = {{"any_marker", row.marker->any_marker},
                     {"distinct_count", row.marker->distinct_count},
                     {"matched", row.marker->matched},
                     {"text", row.marker->text}};
  } else {
    doc["marker"] = nullptr;
  }
  doc["error"] = row.error;
  return doc;
}

Row row_from_json(const json& doc) {
  Row row;
  row.persona_id = doc.at("persona_id").get<std::string>();
  row.task_id = doc.at("task_id").get<std::string>();
  row.layer = doc.at("layer").get<int>();
  row.layers = doc.at("layers").get<std::vector<int>>();
  row.position = doc.at("position").get<std::string>();
  row.condition = doc.at("condition").get<std::string>();
  row.host = doc.at("host").get<std::string>();
  if (doc.contains("geometry") && !doc["geometry"].is_null()) {
    const json& g = doc["geometry"];
    GeometryStats stats;
    stats.cos_add = cosine_from_json(g.at("cos_add"));
    stats.cos_xy_overlap = cosine_from_json(g.at("cos_xy_overlap"));
    stats.inter_ratio = read_optional(g, "inter_ratio");
    stats.norm_delta_x = g.at("norm_delta_x").get<double>();
    stats.norm_delta_y = g.at("norm_delta_y").get<double>();
    stats.norm_delta_xy = g.at("norm_delta_xy").get<double>();
    stats.norm_inter = g.at("norm_inter").get<double>();
    row.geometry = stats;
  }
  row.aggregate_kl = read_optional(doc, "aggregate_kl");
  row.per_token_kl = doc.at("per_token_kl").get<std::vector<double>>();
  row.reference = doc.at("reference").get<std::vector<TokenId>>();
  row.degenerate = doc.at("degenerate").get<bool>();
  if (doc.contains("marker") && !doc["marker"].is_null()) {
    const json& m = doc["marker"];
    row.marker = MarkerScore{m.at("any_marker").get<bool>(), m.at("distinct_count").get<int>(),
                             m.at("matched").get<std::vector<std::string>>(),
                             m.at("text").get<std::string>()};
  }
  row.error = doc.at("error").get<std::string>();
  return row;
}

json summary_to_json(const SummaryEntry& e) {
  return {{"group_by", to_string(e.group_by)},
          {"metric", e.metric},
          {"key", e.key},
          {"persona_id", e.persona_id},
          {"task_id", e.task_id},
          {"layer", e.layer},
          {"layers", e.layers},
          {"position", e.position},
          {"condition", e.condition},
          {"n", e.n},
          {"median", optional_number(e.median)},
          {"p25", optional_number(e.p25)},
          {"p75", optional_number(e.p75)}};
}

namespace {

SummaryEntry summary_from_json(const json& doc) {
  SummaryEntry e;
  e.group_by = parse_group_by(doc.at("group_by").get<std::string>());
  e.metric = doc.at("metric").get<std::string>();
  e.key = doc.at("key").get<std::string>();
  e.persona_id = doc.at("persona_id").get<std::string>();
  e.task_id = doc.at("task_id").get<std::string>();
  e.layer = doc.at("layer").get<int>();
  e.layers = doc.at("layers").get<std::vector<int>>();
  e.position = doc.at("position").get<std::string>();
  e.condition = doc.at("condition").get<std::string>();
  e.n = doc.at("n").get<std::size_t>();
  e.median = read_optional(doc, "median");
  e.p25 = read_optional(doc, "p25");
  e.p75 = read_optional(doc, "p75");
  return e;
}

json marker_summary_to_json(const MarkerSummary& s) {
  return {{"condition", to_string(s.condition)},
          {"cells", s.cells},
          {"any_count", s.any_count},
          {"any_rate", s.any_rate},
          {"mean_distinct", s.mean_distinct}};
}

MarkerSummary marker_summary_from_json(const json& doc) {
  MarkerSummary s;
  s.condition = parse_marker_condition(doc.at("condition").get<std::string>());
  s.cells = doc.at("cells").get<int>();
  s.any_count = doc.at("any_count").get<int>();
  s.any_rate = doc.at("any_rate").get<double>();
  s.mean_distinct = doc.at("mean_distinct").get<double>();
  return s;
}

}  // namespace

json artifact_to_json(const RunArtifact& artifact) {
  const RunMetadata& m = artifact.metadata;
  json doc;
  doc["schema_version"] = artifact.schema_version;
  doc["metadata"] = {{"experiment", m.experiment},
                     {"model_id", m.model_id},
                     {"dtype", m.dtype},
                     {"grid_id", m.grid_id},
                     {"layers", m.layers},
                     {"layer_sets", m.layer_sets},
                     {"positions", m.positions},
                     {"kl_direction", m.kl_direction},
                     {"percentile_rule", m.percentile_rule},
                     {"timestamp", m.timestamp},
                     {"config", m.config}};
  json rows = json::array();
  for (const Row& r : artifact.rows) rows.push_back(row_to_json(r));
  doc["rows"] = std::move(rows);
  json summary = json::array();
  for (const SummaryEntry& e : artifact.summary) summary.push_back(summary_to_json(e));
  doc["summary"] = std::move(summary);
  json markers = json::array();
  for (const MarkerSummary& s : artifact.marker_summary) markers.push_back(marker_summary_to_json(s));
  doc["marker_summary"] = std::move(markers);
  return doc;
}

RunArtifact artifact_from_json(const json& doc) {
  if (!doc.is_object() || !doc.contains("schema_version")) {
    throw ArtifactError("malformed artifact: missing schema_version");
  }
  const int version = doc["schema_version"].get<int>();
  if (version != kSchemaVersion) {
    throw ArtifactError("unsupported artifact schema_version " + std::to_string(version) +
                        " (this build reads " + std::to_string(kSchemaVersion) + ")");
  }
  RunArtifact a;
  try {
    const json& m = doc.at("metadata");
    a.metadata.experiment = m.at("experiment").get<std::string>();
    a.metadata.model_id = m.at("model_id").get<std::string>();
    a.metadata.dtype = m.at("dtype").get<std::string>();
    a.metadata.grid_id = m.at("grid_id").get<std::string>();
    a.metadata.layers = m.at("layers").get<std::vector<int>>();
    a.metadata.layer_sets = m.at("layer_sets").get<std::vector<std::vector<int>>>();
    a.metadata.positions = m.at("positions").get<std::vector<std::string>>();
    a.metadata.kl_direction = m.at("kl_direction").get<std::string>();
    a.metadata.percentile_rule = m.at("percentile_rule").get<std::string>();
    a.metadata.timestamp = m.at("timestamp").get<std::string>();
    a.metadata.config = m.at("config");
    for (const json& r : doc.at("rows")) a.rows.push_back(row_from_json(r));
    for (const json& s : doc.at("summary")) a.summary.push_back(summary_from_json(s));
    for (const json& s : doc.at("marker_summary")) {
      a.marker_summary.push_back(marker_summary_from_json(s));
    }
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("malformed artifact: ") + e.what());
  }
  if (a.metadata.percentile_rule != kPercentileRule) {
    throw ArtifactError("artifact uses percentile rule '" + a.metadata.percentile_rule + "'");
  }

  RunArtifact recomputed = a;
  summarize(recomputed);
  json stored = json::array();
  json fresh = json::array();
  for (const auto& e : a.summary) stored.push_back(summary_to_json(e));
  for (const auto& e : recomputed.summary) fresh.push_back(summary_to_json(e));
  if (stored != fresh || a.marker_summary != recomputed.marker_summary) {
    throw ArtifactError("artifact summary does not match its rows");
  }
  return a;
}

void write_artifact(const std::filesystem::path& path, const RunArtifact& artifact) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write artifact " + path.string());
  out << artifact_to_json(artifact).dump(1) << '\n';
  if (!out) throw ArtifactError("write failed for " + path.string());
}

RunArtifact read_artifact(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open artifact " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ArtifactError("malformed artifact " + path.string() + ": " + e.what());
  }
  return artifact_from_json(doc);
}

std::string artifact_filename(std::string_view experiment, std::string_view model_id,
                              std::string_view grid_id) {
  auto slug = [](std::string_view s) {
    std::string out;
    for (char c : s) {
      const bool keep = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-';
      out.push_back(keep ? static_cast<char>(std::tolower(static_cast<unsigned char>(c))) : '-');
    }
    return out;
  };
  return std::string(experiment) + "_" + slug(model_id) + "_" + slug(grid_id) + ".json";
}

Row row_from_sweep(const SweepRow& s) {
  Row row;
  row.persona_id = s.persona_id;
  row.task_id = s.task_id;
  row.layer = s.layer;
  row.layers = {s.layer};
  row.position = std::string(to_string(s.position));
  row.condition = std::string(to_string(VectorSource::additive));
  row.host = "XY";
  row.geometry = s.geometry;
  if (s.kl) {
    row.aggregate_kl = s.kl->aggregate_kl;
    row.per_token_kl = s.kl->per_token_kl;
    row.reference = s.kl->reference;
    row.degenerate = s.kl->degenerate;
  }
  row.error = s.error;
  return row;
}

Row row_from_kl(const PromptCell& cell, const KLResult& kl) {
  Row row;
  row.persona_id = cell.persona_id;
  row.task_id = cell.task_id;
  row.layers = kl.spec.layers;
  row.layer = kl.spec.layers.empty() ? -1 : kl.spec.layers.front();
  row.position = std::string(to_string(kl.spec.position));
  row.condition = std::string(to_string(kl.spec.source));
  row.host = std::string(to_string(kl.spec.host));
  row.aggregate_kl = kl.aggregate_kl;
  row.per_token_kl = kl.per_token_kl;
  row.reference = kl.reference;
  row.degenerate = kl.degenerate;
  return row;
}

Row row_from_marker(const MarkerRow& m, int layer) {
  Row row;
  row.persona_id = m.persona_id;
  row.task_id = m.task_id;
  row.layer = layer;
  row.layers = {layer};
  row.position = "p_last";
  row.condition = std::string(to_string(m.condition));
  row.host = m.condition == MarkerCondition::bare ? "bare" : "XY";
  row.marker = MarkerScore{m.any_marker, m.distinct_count, m.matched, m.text};
  row.error = m.error;
  return row;
}

}  // namespace pcomp
