#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pcomp/error.hpp"
#include "pcomp/grid.hpp"

using namespace pcomp;

namespace {

bool has_text(const std::vector<GridEntry>& entries, const std::string& text) {
  for (const auto& e : entries) {
    if (e.text == text) return true;
  }
  return false;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("pcomp_test_" + name);
}

}  // namespace

TEST_CASE("short grid") {
  const GridConfig g = short_grid();
  CHECK(has_text(g.personas, "Warren Buffett"));
  CHECK(has_text(g.personas, "Yoda"));
  CHECK(g.baseline_task == "Give advice to someone facing a difficult decision.");
  CHECK(grid_cells(g).size() == 12);
  CHECK_NOTHROW(validate(g));
}

TEST_CASE("long grid") {
  const GridConfig g = long_grid();
  CHECK(grid_cells(g).size() == 48);
  bool engineer = false;
  for (const auto& p : g.personas) {
    if (p.id == "engineer") engineer = p.text.find("single points of failure") != std::string::npos;
  }
  CHECK(engineer);
  const GridConfig s = short_grid();
  const auto& haiku = s.tasks[1];
  REQUIRE(haiku.id == "haiku");
  CHECK(has_text(g.tasks, haiku.text));
  CHECK_NOTHROW(validate(g));
}

TEST_CASE("prompt rendering") {
  const PromptCell c = build_cell(short_grid(), "yoda", "haiku");
  CHECK(c.prompt(Condition::XY) == "As Yoda, Write a haiku about Monday mornings.");
  CHECK(c.prompt(Condition::BY) == "As a thoughtful person, Write a haiku about Monday mornings.");
  CHECK(c.prompt(Condition::XB) == "As Yoda, Give advice to someone facing a difficult decision.");
  CHECK(c.prompt(Condition::BB) ==
        "As a thoughtful person, Give advice to someone facing a difficult decision.");
  CHECK(c.host_prompt() == c.prompt(Condition::BY));
  CHECK(c.task_text == "Write a haiku about Monday mornings.");
  CHECK(render_prompt("As {persona}, {task}", "A", "B") == "As A, B");
}

TEST_CASE("cell invariants hold on both grids") {
  for (const GridConfig& g : {short_grid(), long_grid()}) {
    std::set<std::string> bb;
    for (const PromptCell& c : grid_cells(g)) {
      bb.insert(c.prompt(Condition::BB));
      CHECK(c.prompt(Condition::XY) != c.prompt(Condition::BB));
    }
    CHECK(bb.size() == 1);
  }
}

TEST_CASE("baselines are not cell coordinates") {
  const GridConfig g = short_grid();
  CHECK_THROWS_AS(build_cell(g, "baseline", "haiku"), InvalidArgument);
  CHECK_THROWS_AS(build_cell(g, "a thoughtful person", "haiku"), InvalidArgument);
  CHECK_THROWS_AS(grid_cells(g, {"nobody"}, {}), InvalidArgument);

  GridConfig bad = g;
  bad.personas.push_back({"thoughtful", g.baseline_persona});
  CHECK_THROWS_AS(validate(bad), ValidationError);
}

TEST_CASE("subsets select in persona-major order") {
  const auto cells = grid_cells(long_grid(), {"lawyer", "engineer"}, {"startup", "architecture"});
  REQUIRE(cells.size() == 4);
  CHECK(cells[0].persona_id == "engineer");
  CHECK(cells[0].task_id == "architecture");
  CHECK(cells[3].persona_id == "lawyer");
  CHECK(cells[3].task_id == "startup");
}

TEST_CASE("grid files round-trip and validate") {
  const auto path = temp_file("grid.json");
  save_grid(path, short_grid());
  CHECK(load_grid(path) == short_grid());
  CHECK(resolve_grid(path.string()) == short_grid());

  auto doc = grid_to_json(short_grid());
  doc["personas"][1]["id"] = doc["personas"][0]["id"];
  try {
    grid_from_json(doc);
    FAIL("duplicate persona ids accepted");
  } catch (const ValidationError& e) {
    CHECK(e.field().find("personas") != std::string::npos);
  }

  doc = grid_to_json(short_grid());
  doc["tasks"][0]["text"] = "";
  CHECK_THROWS_AS(grid_from_json(doc), ValidationError);

  doc = grid_to_json(short_grid());
  doc["template"] = "As {persona}";
  CHECK_THROWS_AS(grid_from_json(doc), ValidationError);

  std::ofstream(temp_file("broken.json")) << "{not json";
  CHECK_THROWS_AS(load_grid(temp_file("broken.json")), ConfigError);
  CHECK_THROWS_AS(resolve_grid("/nonexistent/grid.json"), ConfigError);
}
