#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcomp/error.hpp"
#include "pcomp/experiments.hpp"
#include "pcomp/report.hpp"

namespace {

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, sep)) {
    if (!part.empty()) parts.push_back(part);
  }
  return parts;
}

int parse_int(const std::string& text, const std::string& flag) {
  try {
    std::size_t used = 0;
    const int value = std::stoi(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw pcomp::ConfigError(flag + ": '" + text + "' is not an integer");
  }
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  std::vector<int> out;
  for (const auto& p : split(text, ',')) out.push_back(parse_int(p, flag));
  if (out.empty()) throw pcomp::ConfigError(flag + " is empty");
  return out;
}

struct RunFlags {
  std::string model, dtype, grid, layers, positions, kl_direction, out, subset, layer_sets,
      config, markers;
  int n_tokens = 0;
  int jobs = 0;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--model", f.model, "Model id (toy-4layer runs with no downloads)");
  cmd->add_option("--dtype", f.dtype, "f32 or bf16");
  cmd->add_option("--grid", f.grid, "short, long or a grid JSON file");
  cmd->add_option("--layers", f.layers, "Comma-separated layer indices");
  cmd->add_option("--positions", f.positions, "Comma-separated subset of p_last,g1,g2");
  cmd->add_option("--kl-direction", f.kl_direction,
                  "clean_to_intervened (default) or intervened_to_clean");
  cmd->add_option("--out", f.out, "Output directory or .json path");
  cmd->add_option("--subset", f.subset, "persona_ids:task_ids, each comma-separated");
  cmd->add_option("--layer-sets", f.layer_sets, "Layer sets, e.g. 10,12,14;6,8,10");
  cmd->add_option("--n-tokens", f.n_tokens, "Generation length for markers");
  cmd->add_option("--config", f.config, "JSON config file; flags override it");
  cmd->add_option("--jobs", f.jobs, "Cells processed in parallel, one model handle each");
  cmd->add_option("--markers", f.markers, "Marker-set JSON file");
}

pcomp::RunConfig flags_to_config(const CLI::App* cmd, const RunFlags& f) {
  pcomp::RunConfig c;
  auto given = [&](const char* name) { return cmd->count(name) > 0; };
  if (given("--model")) c.model_id = f.model;
  if (given("--dtype")) c.dtype = f.dtype;
  if (given("--grid")) c.grid = f.grid;
  if (given("--layers")) c.layers = parse_int_list(f.layers, "--layers");
  if (given("--positions")) c.positions = split(f.positions, ',');
  if (given("--kl-direction")) c.kl_direction = f.kl_direction;
  if (given("--out")) c.out = f.out;
  if (given("--subset")) {
    const auto colon = f.subset.find(':');
    const std::string personas = f.subset.substr(0, colon);
    const std::string tasks = colon == std::string::npos ? "" : f.subset.substr(colon + 1);
    if (!personas.empty()) c.subset_personas = split(personas, ',');
    if (!tasks.empty()) c.subset_tasks = split(tasks, ',');
  }
  if (given("--layer-sets")) {
    std::vector<std::vector<int>> sets;
    for (const auto& s : split(f.layer_sets, ';')) sets.push_back(parse_int_list(s, "--layer-sets"));
    c.layer_sets = sets;
  }
  if (given("--n-tokens")) c.n_tokens = f.n_tokens;
  if (given("--jobs")) c.jobs = f.jobs;
  if (given("--markers")) c.markers = f.markers;
  return c;
}

int run(pcomp::Experiment experiment, const CLI::App* cmd, const RunFlags& f) {
  pcomp::RunConfig config;
  if (!f.config.empty()) config = pcomp::load_config_file(f.config);
  config = pcomp::merge(config, flags_to_config(cmd, f));
  const pcomp::ResolvedConfig resolved = pcomp::resolve(experiment, config);
  const pcomp::RunArtifact artifact = pcomp::run_experiment(resolved);
  const auto path = pcomp::artifact_path(resolved);
  pcomp::write_artifact(path, artifact);

  std::size_t errors = 0;
  for (const auto& row : artifact.rows) errors += row.error.empty() ? 0 : 1;
  std::cout << "wrote " << path.string() << " (" << artifact.rows.size() << " rows";
  if (errors) std::cout << ", " << errors << " with errors";
  std::cout << ")\n";
  return 0;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw pcomp::ArtifactError("cannot write " + path.string());
  out << text;
}

int report(const std::string& in, const std::string& table, const std::string& out,
           const std::string& columns) {
  const pcomp::RunArtifact artifact = pcomp::read_artifact(in);
  const pcomp::TableKind kind =
      table.empty() ? pcomp::parse_table_kind(artifact.metadata.experiment == "multilayer"
                                                  ? "inject"
                                                  : artifact.metadata.experiment)
                    : pcomp::parse_table_kind(table);
  const std::vector<int> cols = columns.empty() ? std::vector<int>{} : parse_int_list(columns, "--columns");
  const pcomp::RenderedTable rendered = pcomp::emit_table(artifact, kind, cols);
  std::cout << rendered.text;
  if (out.empty()) return 0;

  std::filesystem::create_directories(out);
  const std::string stem = std::filesystem::path(in).stem().string();
  const auto base = std::filesystem::path(out) / stem;
  write_text(base.string() + "_table.txt", rendered.text);
  write_text(base.string() + "_table.csv", rendered.csv);
  if (kind == pcomp::TableKind::localized || kind == pcomp::TableKind::diverse) {
    const auto files = pcomp::write_curves(artifact, out, stem);
    std::cout << "wrote " << files.csv.string() << ", " << files.svg.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persona/task residual decomposition and causal intervention"};
  app.require_subcommand(1);

  struct Sub {
    pcomp::Experiment experiment;
    const char* help;
    RunFlags flags;
    CLI::App* cmd = nullptr;
  };
  std::vector<Sub> subs{
      {pcomp::Experiment::localized, "Causal KL sweep over layers and probe positions", {}},
      {pcomp::Experiment::diverse, "Causal KL sweep on the 8x6 long-persona grid", {}},
      {pcomp::Experiment::markers, "Behavioral marker recovery", {}},
      {pcomp::Experiment::inject, "Single-site substitution into the host prompt", {}},
      {pcomp::Experiment::multilayer, "Multi-layer substitution into the host prompt", {}},
  };
  for (auto& s : subs) {
    s.cmd = app.add_subcommand(std::string(pcomp::to_string(s.experiment)), s.help);
    add_run_flags(s.cmd, s.flags);
  }

  std::string in, table, out, columns;
  CLI::App* report_cmd = app.add_subcommand("report", "Render tables and curves from an artifact");
  report_cmd->add_option("--in", in, "Artifact JSON")->required();
  report_cmd->add_option("--table", table, "localized, diverse, markers or inject");
  report_cmd->add_option("--out", out, "Directory for table and curve files");
  report_cmd->add_option("--columns", columns, "Layers shown as table columns");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (report_cmd->parsed()) return report(in, table, out, columns);
    for (const auto& s : subs) {
      if (s.cmd->parsed()) return run(s.experiment, s.cmd, s.flags);
    }
  } catch (const pcomp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pcomp::BackendError& e) {
    std::cerr << "backend error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
