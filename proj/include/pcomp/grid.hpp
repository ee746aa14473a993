#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace pcomp {

struct GridEntry {
  std::string id;
  std::string text;
  friend bool operator==(const GridEntry&, const GridEntry&) = default;
};

inline constexpr std::string_view kDefaultTemplate = "As {persona}, {task}";

struct GridConfig {
  std::string id;
  std::vector<GridEntry> personas;
  std::vector<GridEntry> tasks;
  std::string baseline_persona;
  std::string baseline_task;
  std::string prompt_template{kDefaultTemplate};
  friend bool operator==(const GridConfig&, const GridConfig&) = default;
};

// The four 2x2 conditions. Index order is stable and used for arrays.
enum class Condition { BB = 0, XB = 1, BY = 2, XY = 3 };
inline constexpr std::array<Condition, 4> kConditions{Condition::BB, Condition::XB,
                                                      Condition::BY, Condition::XY};
std::string_view to_string(Condition c);

struct PromptCell {
  std::string persona_id;
  std::string task_id;
  std::array<std::string, 4> prompts;  // indexed by Condition
  // The task text on its own, used as the no-persona "bare" prompt.
  std::string task_text;

  const std::string& prompt(Condition c) const { return prompts[static_cast<std::size_t>(c)]; }
  // Persona-stripped host prompt ("As a thoughtful person, [task]"), i.e. BY.
  const std::string& host_prompt() const { return prompt(Condition::BY); }
};

// Throws ValidationError naming the offending field.
void validate(const GridConfig& grid);

GridConfig short_grid();
GridConfig long_grid();

// Substitutes {persona} and {task} in `prompt_template`.
std::string render_prompt(std::string_view prompt_template, std::string_view persona,
                          std::string_view task);

PromptCell build_cell(const GridConfig& grid, std::string_view persona_id,
                      std::string_view task_id);

// Cells in persona-major order, optionally restricted to id subsets (empty
// subset = all).
std::vector<PromptCell> grid_cells(const GridConfig& grid,
                                   const std::vector<std::string>& persona_subset = {},
                                   const std::vector<std::string>& task_subset = {});

nlohmann::json grid_to_json(const GridConfig& grid);
GridConfig grid_from_json(const nlohmann::json& doc);
void save_grid(const std::filesystem::path& path, const GridConfig& grid);
GridConfig load_grid(const std::filesystem::path& path);

// "short", "long", or a path to a grid file.
GridConfig resolve_grid(std::string_view selector);

}  // namespace pcomp
