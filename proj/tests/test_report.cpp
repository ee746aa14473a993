#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcomp/error.hpp"
#include "pcomp/report.hpp"

using namespace pcomp;

namespace {

RunArtifact sweep_artifact(const std::string& experiment = "localized") {
  RunArtifact a;
  a.metadata.experiment = experiment;
  a.metadata.model_id = "google/gemma-2-2b-it";
  a.metadata.grid_id = "short";
  a.metadata.positions = {"p_last", "g1", "g2"};
  for (int layer = 0; layer <= 24; layer += 2) a.metadata.layers.push_back(layer);
  int cell = 0;
  for (const char* persona : {"buffett", "marx", "yoda", "angelou"}) {
    for (const char* task : {"ubi", "haiku", "book"}) {
      ++cell;
      for (int layer : a.metadata.layers) {
        int pos_index = 0;
        for (const auto& pos : a.metadata.positions) {
          Row r;
          r.persona_id = persona;
          r.task_id = task;
          r.layer = layer;
          r.layers = {layer};
          r.position = pos;
          r.condition = "additive";
          r.host = "XY";
          r.aggregate_kl = 1e-4 * std::exp(0.35 * layer) * (1.0 + 0.1 * cell) * (1 + pos_index++);
          a.rows.push_back(r);
        }
      }
    }
  }
  summarize(a);
  return a;
}

RunArtifact marker_artifact() {
  RunArtifact a;
  a.metadata.experiment = "markers";
  a.metadata.model_id = "toy-4layer";
  a.metadata.layers = {14};
  for (const char* c : {"clean", "additive", "remove_x", "bare"}) {
    for (int i = 0; i < 3; ++i) {
      Row r;
      r.persona_id = "chef";
      r.task_id = "t" + std::to_string(i);
      r.layer = 14;
      r.layers = {14};
      r.position = "p_last";
      r.condition = c;
      r.host = std::string(c) == "bare" ? "bare" : "XY";
      MarkerScore m;
      m.any_marker = i < 2 && std::string(c) != "bare";
      m.distinct_count = m.any_marker ? 2 : 0;
      r.marker = m;
      a.rows.push_back(r);
    }
  }
  summarize(a);
  return a;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("localized table layout") {
  const RenderedTable t = emit_table(sweep_artifact(), TableKind::localized);
  const auto rows = lines(t.text);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].find("Early layer") != std::string::npos);
  CHECK(rows[0].find("Mid layer") != std::string::npos);
  CHECK(rows[0].find("Later layer") != std::string::npos);
  CHECK(rows[2].find("p_last") != std::string::npos);
  CHECK(rows[2].find("L0: ") != std::string::npos);
  CHECK(rows[2].find("L24: ") != std::string::npos);
  CHECK(t.csv.rfind("model,position", 0) == 0);

  const RenderedTable picked = emit_table(sweep_artifact(), TableKind::localized, {6, 14, 22});
  CHECK(picked.text.find("L6: ") != std::string::npos);
  CHECK(picked.text.find("L22: ") != std::string::npos);
  const RenderedTable missing = emit_table(sweep_artifact(), TableKind::localized, {7});
  CHECK(missing.text.find("L7: n/a") != std::string::npos);
}

TEST_CASE("diverse table adds persona and task breakdowns") {
  const RenderedTable t = emit_table(sweep_artifact("diverse"), TableKind::diverse);
  CHECK(t.text.find("Persona") != std::string::npos);
  CHECK(t.text.find("Task") != std::string::npos);
  CHECK(t.text.find("yoda") != std::string::npos);
  CHECK(t.text.find("haiku") != std::string::npos);
}

TEST_CASE("markers table layout") {
  const RenderedTable t = emit_table(marker_artifact(), TableKind::markers);
  const auto rows = lines(t.text);
  REQUIRE(rows.size() == 6);
  CHECK(rows[0].find("Any persona marker present") != std::string::npos);
  CHECK(rows[0].find("Distinct markers") != std::string::npos);
  CHECK(rows[2].find("Clean") != std::string::npos);
  CHECK(rows[2].find("2 / 3 (66.7%)") != std::string::npos);
  CHECK(rows[2].find("1.33") != std::string::npos);
  CHECK(rows[5].find("Bare") != std::string::npos);
  CHECK(rows[5].find("0 / 3 (0.0%)") != std::string::npos);
}

TEST_CASE("empty or mismatched artifacts name the experiment") {
  RunArtifact empty;
  empty.metadata.experiment = "localized";
  try {
    emit_table(empty, TableKind::localized);
    FAIL("empty artifact rendered");
  } catch (const ArtifactError& e) {
    CHECK(std::string(e.what()).find("localized") != std::string::npos);
  }
  try {
    emit_table(sweep_artifact(), TableKind::markers);
    FAIL("wrong artifact rendered");
  } catch (const ArtifactError& e) {
    CHECK(std::string(e.what()).find("markers") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_table_kind("figure"), ConfigError);
}

TEST_CASE("curves") {
  const RunArtifact a = sweep_artifact();
  const auto series = emit_curves(a);
  REQUIRE(series.size() == 3);
  CHECK(series[0].position == "p_last");
  const auto agg = aggregate(a.rows, GroupBy::layer_position);
  for (const auto& s : series) {
    CHECK(s.points.size() == 13);
    for (std::size_t i = 0; i < s.points.size(); ++i) {
      const auto& p = s.points[i];
      CHECK(p.p25 <= p.median);
      CHECK(p.median <= p.p75);
      if (i) CHECK(p.layer > s.points[i - 1].layer);
      bool found = false;
      for (const auto& e : agg) {
        if (e.position == s.position && e.layer == p.layer) {
          found = true;
          CHECK(*e.median == p.median);
          CHECK(*e.p25 == p.p25);
          CHECK(*e.p75 == p.p75);
        }
      }
      CHECK(found);
    }
  }
  const std::string csv = curves_csv(series);
  CHECK(csv.rfind("position,layer,median,p25,p75\n", 0) == 0);
  CHECK(lines(csv).size() == 1 + 3 * 13);
}

TEST_CASE("svg rendering") {
  const auto series = emit_curves(sweep_artifact());
  const std::string svg = render_svg(series, "test");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("class=\"kl-reference\"") != std::string::npos);
  CHECK(svg.find("stroke-dasharray") != std::string::npos);
  CHECK(svg.find("#1f77b4") != std::string::npos);
  CHECK(svg.find("#2ca02c") != std::string::npos);

  const auto dir = std::filesystem::temp_directory_path() / "pcomp_test_curves";
  const CurveFiles files = write_curves(sweep_artifact(), dir, "run");
  CHECK(std::filesystem::exists(files.csv));
  CHECK(std::filesystem::exists(files.svg));
  CHECK(files.svg.filename() == "run_curves.svg");
}

TEST_CASE("inject table labels") {
  RunArtifact a;
  a.metadata.experiment = "multilayer";
  a.metadata.layer_sets = {{10, 12, 14}};
  for (int i = 0; i < 3; ++i) {
    Row none;
    none.persona_id = "chef";
    none.task_id = "t" + std::to_string(i);
    none.layer = -1;
    none.position = "p_last";
    none.condition = "none";
    none.host = "host";
    none.aggregate_kl = 3.0 + i;
    a.rows.push_back(none);
    Row add = none;
    add.layers = {10, 12, 14};
    add.layer = 10;
    add.condition = "additive";
    add.aggregate_kl = 2.0 + i;
    a.rows.push_back(add);
  }
  summarize(a);
  const RenderedTable t = emit_table(a, TableKind::inject);
  CHECK(t.text.find("Host prompt, no substitution") != std::string::npos);
  CHECK(t.text.find("{10,12,14}") != std::string::npos);
  CHECK(t.text.find("4.00") != std::string::npos);
  CHECK(t.text.find("3.00") != std::string::npos);
  CHECK(t.csv.rfind("condition,layers,median,p25,p75,n\n", 0) == 0);
}
