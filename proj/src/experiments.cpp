#include "pcomp/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "pcomp/behavioral.hpp"
#include "pcomp/error.hpp"

namespace pcomp {

using nlohmann::json;

std::string_view to_string(Experiment experiment) {
  switch (experiment) {
    case Experiment::localized:
      return "localized";
    case Experiment::diverse:
      return "diverse";
    case Experiment::markers:
      return "markers";
    case Experiment::inject:
      return "inject";
    case Experiment::multilayer:
      return "multilayer";
  }
  return "?";
}

Experiment parse_experiment(std::string_view label) {
  for (Experiment e : {Experiment::localized, Experiment::diverse, Experiment::markers,
                       Experiment::inject, Experiment::multilayer}) {
    if (to_string(e) == label) return e;
  }
  throw ConfigError("unknown experiment '" + std::string(label) + "'");
}

RunConfig merge(const RunConfig& base, const RunConfig& overrides) {
  RunConfig out = base;
  auto take = [](auto& dst, const auto& src) {
    if (src) dst = src;
  };
  take(out.model_id, overrides.model_id);
  take(out.dtype, overrides.dtype);
  take(out.grid, overrides.grid);
  take(out.layers, overrides.layers);
  take(out.positions, overrides.positions);
  take(out.kl_direction, overrides.kl_direction);
  take(out.out, overrides.out);
  take(out.subset_personas, overrides.subset_personas);
  take(out.subset_tasks, overrides.subset_tasks);
  take(out.layer_sets, overrides.layer_sets);
  take(out.n_tokens, overrides.n_tokens);
  take(out.jobs, overrides.jobs);
  take(out.markers, overrides.markers);
  return out;
}

RunConfig config_from_json(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config file must hold a JSON object");
  static const std::vector<std::string> known{
      "model",  "dtype",       "grid",   "layers",   "positions", "kl_direction", "out",
      "subset", "layer_sets", "n_tokens", "jobs",    "markers"};
  for (const auto& [key, _] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  RunConfig c;
  try {
    if (doc.contains("model")) c.model_id = doc["model"].get<std::string>();
    if (doc.contains("dtype")) c.dtype = doc["dtype"].get<std::string>();
    if (doc.contains("grid")) c.grid = doc["grid"].get<std::string>();
    if (doc.contains("layers")) c.layers = doc["layers"].get<std::vector<int>>();
    if (doc.contains("positions")) c.positions = doc["positions"].get<std::vector<std::string>>();
    if (doc.contains("kl_direction")) c.kl_direction = doc["kl_direction"].get<std::string>();
    if (doc.contains("out")) c.out = doc["out"].get<std::string>();
    if (doc.contains("subset")) {
      const json& s = doc["subset"];
      if (s.contains("personas")) c.subset_personas = s["personas"].get<std::vector<std::string>>();
      if (s.contains("tasks")) c.subset_tasks = s["tasks"].get<std::vector<std::string>>();
    }
    if (doc.contains("layer_sets")) c.layer_sets = doc["layer_sets"].get<std::vector<std::vector<int>>>();
    if (doc.contains("n_tokens")) c.n_tokens = doc["n_tokens"].get<int>();
    if (doc.contains("jobs")) c.jobs = doc["jobs"].get<int>();
    if (doc.contains("markers")) c.markers = doc["markers"].get<std::string>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config value has the wrong type: ") + e.what());
  }
  return c;
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " does not parse: " + e.what());
  }
  return config_from_json(doc);
}

std::vector<std::vector<int>> default_layer_sets() {
  return {{10, 12, 14},
          {10, 12, 14, 16, 18},
          {10, 12, 14, 16, 18, 20, 22},
          {6, 8, 10, 12, 14, 16, 18, 20, 22}};
}

namespace {

void check_layer(int layer, int num_layers, const std::string& model_id) {
  if (layer < 0 || layer >= num_layers) {
    throw ConfigError("layer " + std::to_string(layer) + " is outside [0, " +
                      std::to_string(num_layers) + ") for model '" + model_id + "'");
  }
}

void check_layer_list(const std::vector<int>& layers, int num_layers, const std::string& model_id,
                      const std::string& what) {
  if (layers.empty()) throw ConfigError(what + " must not be empty");
  for (int l : layers) check_layer(l, num_layers, model_id);
  for (std::size_t i = 1; i < layers.size(); ++i) {
    if (layers[i] <= layers[i - 1]) throw ConfigError(what + " must be strictly increasing");
  }
}

bool is_kl_sweep(Experiment e) { return e == Experiment::localized || e == Experiment::diverse; }

}  // namespace

ResolvedConfig resolve(Experiment experiment, const RunConfig& config) {
  ResolvedConfig r;
  r.experiment = experiment;
  r.model_id = config.model_id.value_or(std::string(kDefaultModel));
  const auto descriptor = describe_model(r.model_id);
  if (!descriptor) {
    std::string known;
    for (const auto& id : known_models()) known += (known.empty() ? "" : ", ") + id;
    throw ConfigError("unknown model id '" + r.model_id + "' (known: " + known + ")");
  }
  r.dtype = config.dtype ? parse_dtype(*config.dtype) : descriptor->default_dtype;
  const auto& dtypes = descriptor->supported_dtypes;
  if (std::find(dtypes.begin(), dtypes.end(), r.dtype) == dtypes.end()) {
    throw ConfigError("dtype " + std::string(to_string(r.dtype)) + " is not supported for '" +
                      r.model_id + "'");
  }

  r.grid_selector = config.grid.value_or(experiment == Experiment::localized ? "short" : "long");
  r.grid = resolve_grid(r.grid_selector);
  validate(r.grid);

  const int num_layers = descriptor->num_layers;
  if (config.layers) {
    r.layers = *config.layers;
  } else if (is_kl_sweep(experiment)) {
    for (int l = 0; l < num_layers; l += 2) r.layers.push_back(l);
  } else if (experiment != Experiment::multilayer) {
    r.layers = {kMarkerLayer};
  }
  if (experiment != Experiment::multilayer) {
    check_layer_list(r.layers, num_layers, r.model_id, "layers");
  } else if (config.layers) {
    throw ConfigError("multilayer takes --layer-sets, not --layers");
  }
  if (experiment == Experiment::markers && r.layers.size() != 1) {
    throw ConfigError("markers takes exactly one layer");
  }

  if (config.positions) {
    if (!is_kl_sweep(experiment)) {
      throw ConfigError(std::string(to_string(experiment)) + " always probes p_last");
    }
    if (config.positions->empty()) throw ConfigError("positions must not be empty");
    for (const auto& p : *config.positions) {
      const ProbeKind kind = parse_probe_kind(p);
      if (std::find(r.positions.begin(), r.positions.end(), kind) != r.positions.end()) {
        throw ConfigError("duplicate position '" + p + "'");
      }
      r.positions.push_back(kind);
    }
  } else if (is_kl_sweep(experiment)) {
    r.positions = {kProbeKinds.begin(), kProbeKinds.end()};
  } else {
    r.positions = {ProbeKind::p_last};
  }

  r.kl_direction = config.kl_direction ? parse_kl_direction(*config.kl_direction)
                                       : KlDirection::clean_to_intervened;
  r.out = config.out.value_or("results");

  // Persona/task subset. The marker and host-injection runs default to the
  // eight personas crossed with the three review tasks.
  r.subset_personas = config.subset_personas.value_or(std::vector<std::string>{});
  if (config.subset_tasks) {
    r.subset_tasks = *config.subset_tasks;
  } else if (!is_kl_sweep(experiment)) {
    const std::vector<std::string> review{"architecture", "startup", "scheduling"};
    const bool has_review = std::all_of(review.begin(), review.end(), [&](const std::string& id) {
      return std::any_of(r.grid.tasks.begin(), r.grid.tasks.end(),
                         [&](const GridEntry& t) { return t.id == id; });
    });
    if (has_review) r.subset_tasks = review;
  }
  try {
    if (grid_cells(r.grid, r.subset_personas, r.subset_tasks).empty()) {
      throw ConfigError("subset selects no cells");
    }
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("subset: ") + e.what());
  }

  if (experiment == Experiment::multilayer) {
    r.layer_sets = config.layer_sets.value_or(default_layer_sets());
    if (r.layer_sets.empty()) throw ConfigError("layer_sets must not be empty");
    for (const auto& set : r.layer_sets) check_layer_list(set, num_layers, r.model_id, "layer set");
  } else if (config.layer_sets) {
    throw ConfigError("--layer-sets only applies to multilayer");
  }

  if (experiment == Experiment::markers) {
    r.n_tokens = config.n_tokens.value_or(kMarkerTokens);
    if (r.n_tokens < 1) throw ConfigError("n_tokens must be positive");
    if (config.markers) {
      r.marker_sets = load_marker_sets(*config.markers);
      r.markers_source = *config.markers;
    } else {
      r.marker_sets = builtin_marker_sets();
      r.markers_source = "builtin";
    }
    for (const PromptCell& cell : grid_cells(r.grid, r.subset_personas, r.subset_tasks)) {
      const bool found = std::any_of(r.marker_sets.begin(), r.marker_sets.end(),
                                     [&](const MarkerSet& m) { return m.persona_id == cell.persona_id; });
      if (!found) throw ConfigError("no marker set for persona '" + cell.persona_id + "'");
    }
  } else {
    if (config.n_tokens && *config.n_tokens != kReferenceLength) {
      throw ConfigError("the KL reference window is fixed at 10 tokens; --n-tokens applies to markers");
    }
    if (config.markers) throw ConfigError("--markers only applies to the markers experiment");
    r.n_tokens = kReferenceLength;
  }

  r.jobs = config.jobs.value_or(1);
  if (r.jobs < 1) throw ConfigError("jobs must be at least 1");
  return r;
}

json config_to_json(const ResolvedConfig& c) {
  json positions = json::array();
  for (ProbeKind k : c.positions) positions.push_back(to_string(k));
  return {{"experiment", to_string(c.experiment)},
          {"model", c.model_id},
          {"dtype", to_string(c.dtype)},
          {"grid", c.grid_selector},
          {"grid_id", c.grid.id},
          {"layers", c.layers},
          {"positions", positions},
          {"kl_direction", to_string(c.kl_direction)},
          {"out", c.out.string()},
          {"subset", {{"personas", c.subset_personas}, {"tasks", c.subset_tasks}}},
          {"layer_sets", c.layer_sets},
          {"n_tokens", c.n_tokens},
          {"jobs", c.jobs},
          {"markers", c.markers_source},
          {"decoding", {{"do_sample", false}, {"num_beams", 1}}},
          {"reference_length", kReferenceLength}};
}

namespace {

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

Row error_row(const PromptCell& cell, const std::string& condition, std::vector<int> layers,
              const std::string& message) {
  Row row;
  row.persona_id = cell.persona_id;
  row.task_id = cell.task_id;
  row.layers = std::move(layers);
  row.layer = row.layers.empty() ? -1 : row.layers.front();
  row.position = "p_last";
  row.condition = condition;
  row.host = "host";
  row.error = message;
  return row;
}

std::vector<Row> host_rows(ModelHandle& handle, const PromptCell& cell,
                           const std::vector<std::pair<VectorSource, std::vector<int>>>& conditions,
                           KlDirection direction) {
  std::vector<Row> rows;
  std::optional<CellCapture> cap;
  std::string cell_error;
  try {
    cap = capture_cell(handle, cell);
  } catch (const Error& e) {
    cell_error = e.what();
  }
  for (const auto& [source, layers] : conditions) {
    const std::string label(to_string(source));
    if (!cap) {
      rows.push_back(error_row(cell, label, layers, cell_error));
      continue;
    }
    try {
      rows.push_back(row_from_kl(cell, host_injection(handle, *cap, source, layers, direction)));
    } catch (const Error& e) {
      rows.push_back(error_row(cell, label, layers, e.what()));
    }
  }
  return rows;
}

std::vector<Row> run_cell(ModelHandle& handle, const ResolvedConfig& c, const PromptCell& cell) {
  std::vector<Row> rows;
  switch (c.experiment) {
    case Experiment::localized:
    case Experiment::diverse:
      for (const SweepRow& s : sweep(handle, std::vector<PromptCell>{cell}, c.layers, c.positions,
                                     c.kl_direction)) {
        rows.push_back(row_from_sweep(s));
      }
      break;
    case Experiment::markers: {
      MarkerReport report = run_marker_experiment(handle, {cell}, c.marker_sets,
                                                  c.layers.front(), c.n_tokens);
      for (const MarkerRow& m : report.rows) rows.push_back(row_from_marker(m, c.layers.front()));
      break;
    }
    case Experiment::inject: {
      std::vector<std::pair<VectorSource, std::vector<int>>> conditions{{VectorSource::none, {}}};
      for (int layer : c.layers) {
        conditions.push_back({VectorSource::oracle_clean, {layer}});
        conditions.push_back({VectorSource::additive, {layer}});
      }
      rows = host_rows(handle, cell, conditions, c.kl_direction);
      break;
    }
    case Experiment::multilayer: {
      std::vector<std::pair<VectorSource, std::vector<int>>> conditions{{VectorSource::none, {}}};
      for (const auto& set : c.layer_sets) conditions.push_back({VectorSource::additive, set});
      rows = host_rows(handle, cell, conditions, c.kl_direction);
      break;
    }
  }
  return rows;
}

}  // namespace

RunArtifact run_experiment(const ResolvedConfig& c, const HandleFactory& factory) {
  const std::vector<PromptCell> cells = grid_cells(c.grid, c.subset_personas, c.subset_tasks);
  std::vector<std::vector<Row>> per_cell(cells.size());

  const int workers = std::min<int>(c.jobs, static_cast<int>(cells.size()));
  if (workers <= 1) {
    ModelHandle handle = factory(c.model_id, c.dtype);
    for (std::size_t i = 0; i < cells.size(); ++i) per_cell[i] = run_cell(handle, c, cells[i]);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) {
      threads.emplace_back([&] {
        try {
          ModelHandle handle = factory(c.model_id, c.dtype);
          for (std::size_t i = next++; i < cells.size(); i = next++) {
            per_cell[i] = run_cell(handle, c, cells[i]);
          }
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = cells.size();
        }
      });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  RunArtifact artifact;
  RunMetadata& m = artifact.metadata;
  m.experiment = std::string(to_string(c.experiment));
  m.model_id = c.model_id;
  m.dtype = std::string(to_string(c.dtype));
  m.grid_id = c.grid.id;
  m.layers = c.layers;
  m.layer_sets = c.layer_sets;
  for (ProbeKind k : c.positions) m.positions.emplace_back(to_string(k));
  m.kl_direction = std::string(to_string(c.kl_direction));
  m.timestamp = utc_timestamp();
  m.config = config_to_json(c);
  for (auto& rows : per_cell) {
    artifact.rows.insert(artifact.rows.end(), std::make_move_iterator(rows.begin()),
                         std::make_move_iterator(rows.end()));
  }
  summarize(artifact);
  return artifact;
}

std::filesystem::path artifact_path(const ResolvedConfig& c) {
  if (c.out.extension() == ".json") return c.out;
  return c.out / artifact_filename(to_string(c.experiment), c.model_id, c.grid.id);
}

}  // namespace pcomp
