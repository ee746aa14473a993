#include "pcomp/grid.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "pcomp/error.hpp"

namespace pcomp {

namespace {

constexpr std::string_view kBaselinePersona = "a thoughtful person";
constexpr std::string_view kBaselineTask = "Give advice to someone facing a difficult decision.";

constexpr std::string_view kUbiTask = "Comment on whether universal basic income is a good policy.";
constexpr std::string_view kHaikuTask = "Write a haiku about Monday mornings.";
constexpr std::string_view kBookTask = "Recommend a book worth reading and explain why.";

void check_entries(const std::vector<GridEntry>& entries, std::string_view kind) {
  if (entries.empty()) throw ValidationError(std::string(kind), "must contain at least one entry");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::string field = std::string(kind) + "[" + std::to_string(i) + "]";
    if (entries[i].id.empty()) throw ValidationError(field + ".id", "must be nonempty");
    if (entries[i].text.empty()) throw ValidationError(field + ".text", "must be nonempty");
    if (!ids.insert(entries[i].id).second) {
      throw ValidationError(field + ".id", "duplicate id '" + entries[i].id + "'");
    }
  }
}

const GridEntry& find_entry(const std::vector<GridEntry>& entries, std::string_view id,
                            std::string_view kind) {
  auto it = std::find_if(entries.begin(), entries.end(),
                         [&](const GridEntry& e) { return e.id == id; });
  if (it == entries.end()) {
    throw InvalidArgument("unknown " + std::string(kind) + " id '" + std::string(id) + "'");
  }
  return *it;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos;
       pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::vector<GridEntry> entries_from_json(const nlohmann::json& doc, const char* key) {
  if (!doc.contains(key) || !doc[key].is_array()) {
    throw ValidationError(key, "missing or not an array");
  }
  std::vector<GridEntry> out;
  for (std::size_t i = 0; i < doc[key].size(); ++i) {
    const auto& item = doc[key][i];
    const std::string field = std::string(key) + "[" + std::to_string(i) + "]";
    if (!item.is_object() || !item.contains("id") || !item.contains("text") ||
        !item["id"].is_string() || !item["text"].is_string()) {
      throw ValidationError(field, "expected an object with string fields id and text");
    }
    out.push_back({item["id"].get<std::string>(), item["text"].get<std::string>()});
  }
  return out;
}

}  // namespace

std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::BB:
      return "BB";
    case Condition::XB:
      return "XB";
    case Condition::BY:
      return "BY";
    case Condition::XY:
      return "XY";
  }
  return "?";
}

void validate(const GridConfig& grid) {
  check_entries(grid.personas, "personas");
  check_entries(grid.tasks, "tasks");
  if (grid.baseline_persona.empty()) throw ValidationError("baseline_persona", "must be nonempty");
  if (grid.baseline_task.empty()) throw ValidationError("baseline_task", "must be nonempty");
  for (std::size_t i = 0; i < grid.personas.size(); ++i) {
    if (grid.personas[i].text == grid.baseline_persona) {
      throw ValidationError("personas[" + std::to_string(i) + "].text",
                            "equals the baseline persona");
    }
  }
  for (std::size_t i = 0; i < grid.tasks.size(); ++i) {
    if (grid.tasks[i].text == grid.baseline_task) {
      throw ValidationError("tasks[" + std::to_string(i) + "].text", "equals the baseline task");
    }
  }
  if (grid.prompt_template.find("{persona}") == std::string::npos ||
      grid.prompt_template.find("{task}") == std::string::npos) {
    throw ValidationError("template", "must contain both {persona} and {task}");
  }
}

GridConfig short_grid() {
  GridConfig g;
  g.id = "short";
  g.personas = {{"buffett", "Warren Buffett"},
                {"marx", "Karl Marx"},
                {"yoda", "Yoda"},
                {"angelou", "Maya Angelou"}};
  g.tasks = {{"ubi", std::string(kUbiTask)},
             {"haiku", std::string(kHaikuTask)},
             {"book", std::string(kBookTask)}};
  g.baseline_persona = kBaselinePersona;
  g.baseline_task = kBaselineTask;
  return g;
}

GridConfig long_grid() {
  GridConfig g;
  g.id = "long";
  g.personas = {
      {"engineer",
       "a senior software engineer with 10 years of experience who pays close attention to "
       "architecture, reliability, and avoiding single points of failure"},
      {"counselor",
       "an empathetic counselor with deep training in active listening, cognitive behavioral "
       "therapy, and trauma-informed care, who helps clients feel heard without imposing "
       "solutions"},
      {"founder",
       "a pragmatic startup founder who has bootstrapped three companies, makes "
       "capital-efficient decisions, iterates fast based on user feedback, and avoids vanity "
       "metrics"},
      {"teacher",
       "a middle school science teacher who has taught for 15 years, explains concepts with "
       "relatable analogies, gently checks for understanding, and meets students at their "
       "level"},
      {"journalist",
       "an investigative journalist who has covered city government for two decades, asks "
       "pointed questions, follows the money, and verifies every claim against primary sources"},
      {"doctor",
       "a primary-care physician who has practiced for 25 years, listens carefully to symptoms, "
       "considers differential diagnoses without alarming the patient, and explains options "
       "clearly"},
      {"lawyer",
       "a corporate litigator who has tried cases at the appellate level for 20 years, "
       "anticipates opposing arguments, builds case theory from the record, and communicates "
       "dense law in plain English"},
      {"chef",
       "a head chef trained in classical French technique who has run three Michelin-starred "
       "kitchens, builds menus around seasonal ingredients, and teaches young cooks by "
       "demonstration"},
  };
  g.tasks = {
      {"architecture",
       "Review this design: a microservice architecture where eight services share a single "
       "PostgreSQL database for both transactional state and event log."},
      {"startup",
       "Review this plan: a three-person team building a B2B SaaS product, planning to launch "
       "in three months, with no usage analytics in v1."},
      {"scheduling",
       "Review this proposal: an internal tool that automates calendar scheduling using an LLM, "
       "sending tentative meetings to all parties before confirmation."},
      {"ubi", std::string(kUbiTask)},
      {"haiku", std::string(kHaikuTask)},
      {"book", std::string(kBookTask)},
  };
  g.baseline_persona = kBaselinePersona;
  g.baseline_task = kBaselineTask;
  return g;
}

std::string render_prompt(std::string_view prompt_template, std::string_view persona,
                          std::string_view task) {
  // Substitute {task} first so a persona containing "{task}" is left literal.
  std::string out(prompt_template);
  const std::string task_marker = "\x01task\x01";
  replace_all(out, "{task}", task_marker);
  replace_all(out, "{persona}", persona);
  replace_all(out, task_marker, task);
  return out;
}

PromptCell build_cell(const GridConfig& grid, std::string_view persona_id,
                      std::string_view task_id) {
  const GridEntry& persona = find_entry(grid.personas, persona_id, "persona");
  const GridEntry& task = find_entry(grid.tasks, task_id, "task");
  PromptCell cell;
  cell.persona_id = persona.id;
  cell.task_id = task.id;
  cell.task_text = task.text;
  auto set = [&](Condition c, std::string_view p, std::string_view t) {
    cell.prompts[static_cast<std::size_t>(c)] = render_prompt(grid.prompt_template, p, t);
  };
  set(Condition::BB, grid.baseline_persona, grid.baseline_task);
  set(Condition::XB, persona.text, grid.baseline_task);
  set(Condition::BY, grid.baseline_persona, task.text);
  set(Condition::XY, persona.text, task.text);
  return cell;
}

std::vector<PromptCell> grid_cells(const GridConfig& grid,
                                   const std::vector<std::string>& persona_subset,
                                   const std::vector<std::string>& task_subset) {
  for (const auto& id : persona_subset) find_entry(grid.personas, id, "persona");
  for (const auto& id : task_subset) find_entry(grid.tasks, id, "task");
  auto selected = [](const std::vector<std::string>& subset, const std::string& id) {
    return subset.empty() || std::find(subset.begin(), subset.end(), id) != subset.end();
  };
  std::vector<PromptCell> cells;
  for (const auto& p : grid.personas) {
    if (!selected(persona_subset, p.id)) continue;
    for (const auto& t : grid.tasks) {
      if (!selected(task_subset, t.id)) continue;
      cells.push_back(build_cell(grid, p.id, t.id));
    }
  }
  return cells;
}

nlohmann::json grid_to_json(const GridConfig& grid) {
  nlohmann::json doc;
  doc["id"] = grid.id;
  auto entries = [](const std::vector<GridEntry>& list) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : list) arr.push_back({{"id", e.id}, {"text", e.text}});
    return arr;
  };
  doc["personas"] = entries(grid.personas);
  doc["tasks"] = entries(grid.tasks);
  doc["baseline_persona"] = grid.baseline_persona;
  doc["baseline_task"] = grid.baseline_task;
  doc["template"] = grid.prompt_template;
  return doc;
}

GridConfig grid_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ValidationError("grid", "top level must be an object");
  GridConfig grid;
  grid.id = doc.value("id", std::string("custom"));
  grid.personas = entries_from_json(doc, "personas");
  grid.tasks = entries_from_json(doc, "tasks");
  for (const char* key : {"baseline_persona", "baseline_task"}) {
    if (!doc.contains(key) || !doc[key].is_string()) throw ValidationError(key, "missing or not a string");
  }
  grid.baseline_persona = doc["baseline_persona"].get<std::string>();
  grid.baseline_task = doc["baseline_task"].get<std::string>();
  if (doc.contains("template")) {
    if (!doc["template"].is_string()) throw ValidationError("template", "not a string");
    grid.prompt_template = doc["template"].get<std::string>();
  }
  validate(grid);
  return grid;
}

void save_grid(const std::filesystem::path& path, const GridConfig& grid) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write grid file " + path.string());
  out << grid_to_json(grid).dump(2) << '\n';
}

GridConfig load_grid(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open grid file " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("grid file " + path.string() + " does not parse: " + e.what());
  }
  GridConfig grid = grid_from_json(doc);
  if (!doc.contains("id")) grid.id = path.stem().string();
  return grid;
}

GridConfig resolve_grid(std::string_view selector) {
  if (selector == "short") return short_grid();
  if (selector == "long") return long_grid();
  return load_grid(std::filesystem::path(selector));
}

}  // namespace pcomp
