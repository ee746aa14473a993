#include "pcomp/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>

#include <fmt/format.h>

#include "pcomp/error.hpp"

namespace pcomp {

std::string_view to_string(TableKind kind) {
  switch (kind) {
    case TableKind::localized:
      return "localized";
    case TableKind::diverse:
      return "diverse";
    case TableKind::markers:
      return "markers";
    case TableKind::inject:
      return "inject";
  }
  return "?";
}

TableKind parse_table_kind(std::string_view label) {
  for (TableKind k : {TableKind::localized, TableKind::diverse, TableKind::markers,
                      TableKind::inject}) {
    if (to_string(k) == label) return k;
  }
  throw ConfigError("unknown table kind '" + std::string(label) +
                    "' (expected localized, diverse, markers or inject)");
}

namespace {

std::string fmt_median(double v) {
  if (std::abs(v) < 0.001 && v != 0.0) return fmt::format("{:.4f}", v);
  return fmt::format("{:.3f}", v);
}

// ".022" below one, three significant digits above.
std::string fmt_bound(double v) {
  if (v >= 1.0) return fmt::format("{:.3g}", v);
  std::string s = fmt::format("{:.3f}", v);
  if (s.rfind("0.", 0) == 0) s.erase(0, 1);
  return s;
}

std::string fmt_csv(const std::optional<double>& v) {
  return v ? fmt::format("{}", *v) : std::string();
}

std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s : s + std::string(width - s.size(), ' ');
}

std::string render_grid(const std::vector<std::vector<std::string>>& cells) {
  std::vector<std::size_t> widths;
  for (const auto& row : cells) {
    widths.resize(std::max(widths.size(), row.size()), 0);
    for (std::size_t i = 0; i < row.size(); ++i) widths[i] = std::max(widths[i], row[i].size());
  }
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t i = 0; i < cells[r].size(); ++i) {
      if (i) line += " | ";
      line += i + 1 == cells[r].size() ? cells[r][i] : pad(cells[r][i], widths[i]);
    }
    out += line + "\n";
    if (r == 0) {
      std::string rule;
      for (std::size_t i = 0; i < widths.size(); ++i) {
        if (i) rule += "-+-";
        rule += std::string(widths[i], '-');
      }
      out += rule + "\n";
    }
  }
  return out;
}

const SummaryEntry* find_entry(const std::vector<SummaryEntry>& summary, GroupBy group_by,
                               std::string_view metric, std::string_view key) {
  for (const auto& e : summary) {
    if (e.group_by == group_by && e.metric == metric && e.key == key) return &e;
  }
  return nullptr;
}

std::string layer_position_key(int layer, std::string_view position) {
  return "layer=" + std::to_string(layer) + "|position=" + std::string(position);
}

std::string format_cell(int layer, const SummaryEntry* e) {
  if (!e || !e->median) return fmt::format("L{}: n/a", layer);
  return fmt::format("L{}: {} [{},{}]", layer, fmt_median(*e->median), fmt_bound(*e->p25),
                     fmt_bound(*e->p75));
}

void require_experiment(const RunArtifact& a, std::initializer_list<std::string_view> accepted,
                        TableKind kind) {
  const bool ok = std::find(accepted.begin(), accepted.end(), a.metadata.experiment) !=
                  accepted.end();
  if (!ok || a.rows.empty()) {
    throw ArtifactError("artifact contains no rows for the " + std::string(to_string(kind)) +
                        " experiment (found experiment '" + a.metadata.experiment + "' with " +
                        std::to_string(a.rows.size()) + " rows)");
  }
}

std::vector<int> swept_layers(const RunArtifact& a) {
  std::vector<int> layers;
  for (const Row& r : a.rows) layers.push_back(r.layer);
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::vector<std::string> swept_positions(const RunArtifact& a) {
  std::vector<std::string> positions = a.metadata.positions;
  for (const Row& r : a.rows) {
    if (std::find(positions.begin(), positions.end(), r.position) == positions.end()) {
      positions.push_back(r.position);
    }
  }
  return positions;
}

std::vector<int> default_columns(const std::vector<int>& layers) {
  if (layers.size() <= 3) return layers;
  return {layers.front(), layers[layers.size() / 2], layers.back()};
}

RenderedTable localized_table(const RunArtifact& a, std::vector<int> columns) {
  if (columns.empty()) columns = default_columns(swept_layers(a));
  std::vector<std::string> header{"Model", "Position"};
  if (columns.size() == 3) {
    header.insert(header.end(), {"Early layer", "Mid layer", "Later layer"});
  } else {
    for (int l : columns) header.push_back("Layer " + std::to_string(l));
  }
  std::vector<std::vector<std::string>> cells{header};
  std::string csv = "model,position,layer,median,p25,p75,n\n";
  for (const std::string& position : swept_positions(a)) {
    std::vector<std::string> line{a.metadata.model_id, position};
    for (int layer : columns) {
      const SummaryEntry* e = find_entry(a.summary, GroupBy::layer_position, "aggregate_kl",
                                         layer_position_key(layer, position));
      line.push_back(format_cell(layer, e));
      csv += fmt::format("{},{},{},{},{},{},{}\n", a.metadata.model_id, position, layer,
                         e ? fmt_csv(e->median) : "", e ? fmt_csv(e->p25) : "",
                         e ? fmt_csv(e->p75) : "", e ? e->n : 0);
    }
    cells.push_back(std::move(line));
  }
  return {render_grid(cells), csv};
}

void append_breakdown(const RunArtifact& a, GroupBy group_by, int layer, const std::string& position,
                      RenderedTable& out) {
  const std::string label = group_by == GroupBy::persona ? "Persona" : "Task";
  std::vector<std::vector<std::string>> cells{{label, "Median KL [p25,p75]", "n"}};
  for (const auto& e : a.summary) {
    if (e.group_by != group_by || e.metric != "aggregate_kl" || e.layer != layer ||
        e.position != position) {
      continue;
    }
    const std::string& id = group_by == GroupBy::persona ? e.persona_id : e.task_id;
    cells.push_back({id,
                     e.median ? fmt::format("{} [{},{}]", fmt_median(*e.median), fmt_bound(*e.p25),
                                            fmt_bound(*e.p75))
                              : "n/a",
                     std::to_string(e.n)});
    out.csv += fmt::format("{},{},{},{},{},{},{},{}\n", to_string(group_by), id, layer, position,
                           fmt_csv(e.median), fmt_csv(e.p25), fmt_csv(e.p75), e.n);
  }
  out.text += fmt::format("\n{} medians at L{} {}\n", label, layer, position);
  out.text += render_grid(cells);
}

RenderedTable diverse_table(const RunArtifact& a, const std::vector<int>& columns) {
  RenderedTable t = localized_table(a, columns);
  const std::vector<int> shown = columns.empty() ? default_columns(swept_layers(a)) : columns;
  const int focus_layer = shown[shown.size() / 2];
  const std::string focus_position = swept_positions(a).front();
  t.csv += "group_by,id,layer,position,median,p25,p75,n\n";
  append_breakdown(a, GroupBy::persona, focus_layer, focus_position, t);
  append_breakdown(a, GroupBy::task, focus_layer, focus_position, t);
  return t;
}

std::string marker_label(MarkerCondition c, int layer) {
  switch (c) {
    case MarkerCondition::clean:
      return "Clean";
    case MarkerCondition::additive:
      return fmt::format("Additive substitution at p_last, L={}", layer);
    case MarkerCondition::remove_x:
      return fmt::format("Remove-X at p_last, L={}", layer);
    case MarkerCondition::bare:
      return "Bare prompt (no persona text)";
  }
  return "?";
}

RenderedTable markers_table(const RunArtifact& a) {
  const int layer = a.rows.front().layer;
  std::vector<std::vector<std::string>> cells{
      {"Condition", "Any persona marker present", "Distinct markers (mean)"}};
  std::string csv = "condition,any_count,cells,any_rate,mean_distinct\n";
  for (MarkerCondition c : kMarkerConditions) {
    auto it = std::find_if(a.marker_summary.begin(), a.marker_summary.end(),
                           [&](const MarkerSummary& s) { return s.condition == c; });
    if (it == a.marker_summary.end() || it->cells == 0) {
      cells.push_back({marker_label(c, layer), "n/a", "n/a"});
      csv += fmt::format("{},,,,\n", to_string(c));
      continue;
    }
    cells.push_back({marker_label(c, layer),
                     fmt::format("{} / {} ({:.1f}%)", it->any_count, it->cells, 100.0 * it->any_rate),
                     fmt::format("{:.2f}", it->mean_distinct)});
    csv += fmt::format("{},{},{},{},{}\n", to_string(c), it->any_count, it->cells, it->any_rate,
                       it->mean_distinct);
  }
  return {render_grid(cells), csv};
}

std::string layer_set_label(const std::vector<int>& layers) {
  std::string s = "{";
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(layers[i]);
  }
  return s + "}";
}

std::string inject_label(const SummaryEntry& e) {
  if (e.condition == "none") return "Host prompt, no substitution";
  const bool single = e.layers.size() == 1;
  const std::string where =
      single ? "L" + std::to_string(e.layers.front()) : layer_set_label(e.layers);
  if (e.condition == "oracle_clean") {
    return (single ? "Oracle single-site substitution at " : "Oracle substitution at ") + where;
  }
  if (e.condition == "additive") {
    return (single ? "Cached additive substitution at " : "Cached substitution at ") + where;
  }
  return e.condition + " at " + where;
}

RenderedTable inject_table(const RunArtifact& a) {
  std::vector<std::vector<std::string>> cells{{"Condition", "Median KL to clean long-persona target"}};
  std::string csv = "condition,layers,median,p25,p75,n\n";
  // Host baseline first, then single-site rows, then wider layer sets.
  std::vector<const SummaryEntry*> entries;
  for (const auto& e : a.summary) {
    if (e.group_by == GroupBy::condition && e.metric == "aggregate_kl") entries.push_back(&e);
  }
  auto rank = [](const SummaryEntry* e) {
    int cond = e->condition == "none" ? 0 : e->condition == "oracle_clean" ? 1 : 2;
    return std::make_tuple(e->condition == "none" ? 0 : 1, e->layers.size(), cond, e->layers);
  };
  std::stable_sort(entries.begin(), entries.end(),
                   [&](const SummaryEntry* x, const SummaryEntry* y) { return rank(x) < rank(y); });
  bool seen_none = false;
  for (const SummaryEntry* e : entries) {
    // The host baseline is layer-independent; show it once.
    if (e->condition == "none") {
      if (seen_none) continue;
      seen_none = true;
    }
    cells.push_back({inject_label(*e), e->median ? fmt::format("{:.2f}", *e->median) : "n/a"});
    csv += fmt::format("{},\"{}\",{},{},{},{}\n", e->condition, layer_set_label(e->layers), fmt_csv(e->median), fmt_csv(e->p25),
                       fmt_csv(e->p75), e->n);
  }
  return {render_grid(cells), csv};
}

}  // namespace

RenderedTable emit_table(const RunArtifact& artifact, TableKind kind,
                         const std::vector<int>& columns) {
  switch (kind) {
    case TableKind::localized:
      require_experiment(artifact, {"localized", "diverse"}, kind);
      return localized_table(artifact, columns);
    case TableKind::diverse:
      require_experiment(artifact, {"diverse", "localized"}, kind);
      return diverse_table(artifact, columns);
    case TableKind::markers:
      require_experiment(artifact, {"markers"}, kind);
      return markers_table(artifact);
    case TableKind::inject:
      require_experiment(artifact, {"inject", "multilayer"}, kind);
      return inject_table(artifact);
  }
  throw ArtifactError("unknown table kind");
}

std::vector<CurveSeries> emit_curves(const RunArtifact& artifact) {
  require_experiment(artifact, {"localized", "diverse"}, TableKind::localized);
  std::vector<CurveSeries> out;
  for (const std::string& position : swept_positions(artifact)) {
    CurveSeries series{position, {}};
    for (const auto& e : artifact.summary) {
      if (e.group_by != GroupBy::layer_position || e.metric != "aggregate_kl" ||
          e.position != position || !e.median) {
        continue;
      }
      series.points.push_back({e.layer, *e.median, *e.p25, *e.p75});
    }
    std::sort(series.points.begin(), series.points.end(),
              [](const CurvePoint& a, const CurvePoint& b) { return a.layer < b.layer; });
    out.push_back(std::move(series));
  }
  return out;
}

std::string curves_csv(const std::vector<CurveSeries>& series) {
  std::string csv = "position,layer,median,p25,p75\n";
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      csv += fmt::format("{},{},{},{},{}\n", s.position, p.layer, p.median, p.p25, p.p75);
    }
  }
  return csv;
}

std::string render_svg(const std::vector<CurveSeries>& series, std::string_view title) {
  constexpr double width = 640, height = 400;
  constexpr double left = 70, right = 20, top = 40, bottom = 50;
  constexpr double floor_value = 1e-6;

  int min_layer = 0, max_layer = 1;
  double lo = 0.1, hi = 0.1;
  bool any = false;
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      min_layer = any ? std::min(min_layer, p.layer) : p.layer;
      max_layer = any ? std::max(max_layer, p.layer) : p.layer;
      lo = std::min(lo, std::max(p.p25, floor_value));
      hi = std::max(hi, std::max(p.p75, floor_value));
      any = true;
    }
  }
  if (max_layer == min_layer) max_layer = min_layer + 1;
  const double log_lo = std::floor(std::log10(lo));
  const double log_hi = std::ceil(std::log10(hi)) + (std::log10(hi) == std::ceil(std::log10(hi)) ? 1 : 0);
  auto x_of = [&](double layer) {
    return left + (layer - min_layer) / (max_layer - min_layer) * (width - left - right);
  };
  auto y_of = [&](double v) {
    const double lv = std::log10(std::max(v, floor_value));
    return top + (log_hi - lv) / (log_hi - log_lo) * (height - top - bottom);
  };
  const std::map<std::string, std::string> colors{
      {"p_last", "#1f77b4"}, {"g1", "#ff7f0e"}, {"g2", "#2ca02c"}};

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.0f}\" height=\"{:.0f}\" "
      "viewBox=\"0 0 {:.0f} {:.0f}\" font-family=\"sans-serif\" font-size=\"12\">\n",
      width, height, width, height);
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += fmt::format("<text x=\"{:.2f}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
                     width / 2, title);
  // Axes and decade ticks.
  svg += fmt::format("<line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{2:.2f}\" stroke=\"black\"/>\n",
                     left, top, height - bottom);
  svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"black\"/>\n",
                     left, height - bottom, width - right, height - bottom);
  for (int e = static_cast<int>(log_lo); e <= static_cast<int>(log_hi); ++e) {
    const double y = y_of(std::pow(10.0, e));
    svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"#dddddd\"/>\n",
                       left, y, width - right, y);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\">1e{}</text>\n", left - 6,
                       y + 4, e);
  }
  for (int layer = min_layer; layer <= max_layer; ++layer) {
    const double x = x_of(layer);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{}</text>\n", x,
                       height - bottom + 16, layer);
  }
  svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">layer</text>\n",
                     (left + width - right) / 2, height - 12);
  svg += fmt::format(
      "<text x=\"16\" y=\"{:.2f}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2f})\">"
      "median causal KL</text>\n",
      (top + height - bottom) / 2, (top + height - bottom) / 2);
  // KL = 0.1 reference.
  const double ref_y = y_of(0.1);
  svg += fmt::format(
      "<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"gray\" "
      "stroke-dasharray=\"2,3\" class=\"kl-reference\"/>\n",
      left, ref_y, width - right, ref_y);

  int legend_row = 0;
  for (const auto& s : series) {
    const auto it = colors.find(s.position);
    const std::string color = it != colors.end() ? it->second : "#7f7f7f";
    if (!s.points.empty()) {
      std::string band;
      for (const auto& p : s.points) band += fmt::format("{:.2f},{:.2f} ", x_of(p.layer), y_of(p.p75));
      for (auto p = s.points.rbegin(); p != s.points.rend(); ++p) {
        band += fmt::format("{:.2f},{:.2f} ", x_of(p->layer), y_of(p->p25));
      }
      band.pop_back();
      svg += fmt::format("<polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.2\" stroke=\"none\"/>\n",
                         band, color);
      std::string line;
      for (const auto& p : s.points) line += fmt::format("{:.2f},{:.2f} ", x_of(p.layer), y_of(p.median));
      line.pop_back();
      svg += fmt::format(
          "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" data-position=\"{}\"/>\n",
          line, color, s.position);
    }
    const double ly = top + 8 + 16 * legend_row++;
    svg += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
                       width - right - 90, ly, width - right - 70, ly, color);
    svg += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\">{}</text>\n", width - right - 64, ly + 4,
                       s.position);
  }
  svg += "</svg>\n";
  return svg;
}

CurveFiles write_curves(const RunArtifact& artifact, const std::filesystem::path& directory,
                        std::string_view stem) {
  const std::vector<CurveSeries> series = emit_curves(artifact);
  std::filesystem::create_directories(directory);
  CurveFiles files{directory / (std::string(stem) + "_curves.csv"),
                   directory / (std::string(stem) + "_curves.svg")};
  std::ofstream(files.csv) << curves_csv(series);
  std::ofstream(files.svg) << render_svg(series, artifact.metadata.model_id + " (" +
                                                     artifact.metadata.grid_id + " grid)");
  return files;
}

}  // namespace pcomp
