#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "pcomp/behavioral.hpp"
#include "pcomp/error.hpp"
#include "pcomp/experiments.hpp"
#include "pcomp/report.hpp"

namespace py = pybind11;
using namespace pcomp;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::handle& obj) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(obj).cast<std::string>());
}

py::array_t<float> to_array(const std::vector<float>& v) {
  return py::array_t<float>(static_cast<py::ssize_t>(v.size()), v.data());
}

py::array_t<double> to_array(const std::vector<double>& v) {
  return py::array_t<double>(static_cast<py::ssize_t>(v.size()), v.data());
}

std::vector<std::vector<float>> rows_of(const FloatArray& a) {
  if (a.ndim() == 1 && a.shape(0) == 0) return {};
  if (a.ndim() != 2) throw InvalidArgument("expected a 2-D array");
  std::vector<std::vector<float>> out(static_cast<std::size_t>(a.shape(0)));
  const float* data = a.data();
  for (py::ssize_t r = 0; r < a.shape(0); ++r) {
    out[static_cast<std::size_t>(r)].assign(data + r * a.shape(1), data + (r + 1) * a.shape(1));
  }
  return out;
}

py::array_t<float> matrix(const std::vector<std::vector<float>>& rows) {
  const py::ssize_t n = static_cast<py::ssize_t>(rows.size());
  const py::ssize_t d = n ? static_cast<py::ssize_t>(rows[0].size()) : 0;
  py::array_t<float> out({n, d});
  auto m = out.mutable_unchecked<2>();
  for (py::ssize_t r = 0; r < n; ++r) {
    for (py::ssize_t c = 0; c < d; ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  }
  return out;
}

Dtype dtype_arg(const py::handle& h) {
  if (py::isinstance<Dtype>(h)) return h.cast<Dtype>();
  return parse_dtype(h.cast<std::string>());
}

// Python subclasses of Backend. Calls may arrive from worker threads, so each
// override takes the GIL; Python exceptions become BackendError.
class PyBackend : public Backend {
 public:
  ModelInfo info() const override {
    return call<ModelInfo>("info", [](py::function f) { return f(); });
  }
  std::vector<TokenId> encode_chat(std::string_view text) const override {
    return call<std::vector<TokenId>>("encode_chat", [&](py::function f) { return f(std::string(text)); });
  }
  std::string decode(std::span<const TokenId> tokens) const override {
    return call<std::string>("decode", [&](py::function f) {
      return f(std::vector<TokenId>(tokens.begin(), tokens.end()));
    });
  }
  ForwardOutput forward(std::span<const TokenId> tokens, std::span<const Site> captures,
                        std::span<const Write> writes, int logits_from) override {
    return call<ForwardOutput>("forward", [&](py::function f) {
      return f(std::vector<TokenId>(tokens.begin(), tokens.end()),
               std::vector<Site>(captures.begin(), captures.end()),
               std::vector<Write>(writes.begin(), writes.end()), logits_from);
    });
  }
  GenerateOutput generate(std::span<const TokenId> prompt, int n_tokens,
                          std::span<const Write> writes) override {
    {
      py::gil_scoped_acquire gil;
      if (!py::get_override(static_cast<const Backend*>(this), "generate")) {
        py::gil_scoped_release release;
        return Backend::generate(prompt, n_tokens, writes);
      }
    }
    return call<GenerateOutput>("generate", [&](py::function f) {
      return f(std::vector<TokenId>(prompt.begin(), prompt.end()), n_tokens,
               std::vector<Write>(writes.begin(), writes.end()));
    });
  }

 private:
  template <typename T, typename F>
  T call(const char* name, F&& invoke) const {
    py::gil_scoped_acquire gil;
    try {
      py::function f = py::get_override(static_cast<const Backend*>(this), name);
      if (!f) throw BackendError(std::string("Backend.") + name + " is not implemented");
      return invoke(f).template cast<T>();
    } catch (py::error_already_set& e) {
      throw BackendError(std::string("Python backend ") + name + ": " + e.what());
    } catch (const py::cast_error& e) {
      throw BackendError(std::string("Python backend ") + name + " returned the wrong type: " + e.what());
    }
  }
};

// Drops a Python reference with the GIL held. After interpreter shutdown the
// reference is leaked instead.
void release_object(py::object* obj) {
  if (!Py_IsInitialized()) return;
  py::gil_scoped_acquire gil;
  delete obj;
}

BackendFactory wrap_factory(py::function factory) {
  std::shared_ptr<py::object> fn(new py::object(std::move(factory)), release_object);
  return [fn](Dtype dtype) -> std::shared_ptr<Backend> {
    py::gil_scoped_acquire gil;
    py::object obj;
    try {
      obj = (*fn)(dtype);
    } catch (py::error_already_set& e) {
      throw BackendError(std::string("backend factory failed: ") + e.what());
    }
    Backend* raw = nullptr;
    try {
      raw = obj.cast<Backend*>();
    } catch (const py::cast_error&) {
      throw BackendError("backend factory must return a pcomp.Backend");
    }
    auto keep = new py::object(std::move(obj));
    return std::shared_ptr<Backend>(raw, [keep](Backend*) { release_object(keep); });
  };
}

py::dict cell_dict(const PromptCell& c) {
  py::dict prompts;
  for (Condition cond : kConditions) prompts[py::str(std::string(to_string(cond)))] = c.prompt(cond);
  py::dict d;
  d["persona_id"] = c.persona_id;
  d["task_id"] = c.task_id;
  d["prompts"] = prompts;
  d["task_text"] = c.task_text;
  return d;
}

py::dict kl_dict(const KLResult& r) {
  py::dict d;
  d["aggregate_kl"] = r.aggregate_kl;
  d["per_token_kl"] = to_array(r.per_token_kl);
  d["reference"] = r.reference;
  py::list sites;
  for (const Site& s : r.sites) sites.append(py::make_tuple(s.layer, s.position));
  d["sites"] = sites;
  d["degenerate"] = r.degenerate;
  return d;
}

GridConfig grid_arg(const py::handle& h) {
  if (py::isinstance<py::str>(h)) return resolve_grid(h.cast<std::string>());
  return grid_from_json(from_py(h));
}

RunArtifact artifact_arg(const py::handle& h) {
  if (py::isinstance<py::dict>(h)) return artifact_from_json(from_py(h));
  return read_artifact(h.cast<std::filesystem::path>());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Persona/task residual decomposition and causal intervention";

  static py::exception<Error> error(m, "Error");
  static py::exception<ConfigError> config_error(m, "ConfigError", error.ptr());
  static py::exception<ValidationError> validation_error(m, "ValidationError", config_error.ptr());
  static py::exception<BackendError> backend_error(m, "BackendError", error.ptr());
  static py::exception<NonFiniteError> nonfinite_error(m, "NonFiniteError", backend_error.ptr());
  static py::exception<ArtifactError> artifact_error(m, "ArtifactError", error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ValidationError& e) {
      py::set_error(validation_error, e.what());
    } catch (const ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const NonFiniteError& e) {
      py::set_error(nonfinite_error, e.what());
    } catch (const BackendError& e) {
      py::set_error(backend_error, e.what());
    } catch (const ArtifactError& e) {
      py::set_error(artifact_error, e.what());
    } catch (const InvalidArgument& e) {
      py::set_error(PyExc_ValueError, e.what());
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::enum_<Dtype>(m, "Dtype").value("f32", Dtype::f32).value("bf16", Dtype::bf16);
  m.def("parse_dtype", &parse_dtype);

  py::class_<ModelInfo>(m, "ModelInfo")
      .def(py::init([](std::string id, int layers, int hidden, int vocab, const py::object& dtype,
                       bool deterministic) {
             return ModelInfo{std::move(id), layers, hidden, vocab, dtype_arg(dtype), deterministic};
           }),
           py::arg("model_id"), py::arg("num_layers"), py::arg("hidden_dim"), py::arg("vocab_size"),
           py::arg("dtype") = "f32", py::arg("deterministic") = true)
      .def_readonly("model_id", &ModelInfo::model_id)
      .def_readonly("num_layers", &ModelInfo::num_layers)
      .def_readonly("hidden_dim", &ModelInfo::hidden_dim)
      .def_readonly("vocab_size", &ModelInfo::vocab_size)
      .def_readonly("dtype", &ModelInfo::dtype)
      .def_readonly("deterministic", &ModelInfo::deterministic);

  py::class_<Site>(m, "Site")
      .def(py::init<int, int>(), py::arg("layer"), py::arg("position"))
      .def_readwrite("layer", &Site::layer)
      .def_readwrite("position", &Site::position)
      .def("__repr__", [](const Site& s) {
        return "Site(layer=" + std::to_string(s.layer) + ", position=" + std::to_string(s.position) + ")";
      });

  py::class_<Write>(m, "Write")
      .def(py::init([](Site site, FloatArray values) {
             return Write{site, std::vector<float>(values.data(), values.data() + values.size())};
           }),
           py::arg("site"), py::arg("values"))
      .def_readonly("site", &Write::site)
      .def_property_readonly("values", [](const Write& w) { return to_array(w.values); });

  py::class_<ForwardOutput>(m, "ForwardOutput")
      .def(py::init([](FloatArray captures, FloatArray logits) {
             return ForwardOutput{rows_of(captures), rows_of(logits)};
           }),
           py::arg("captures"), py::arg("logits"))
      .def_property_readonly("captures", [](const ForwardOutput& o) { return matrix(o.captures); })
      .def_property_readonly("logits", [](const ForwardOutput& o) { return matrix(o.logits); });

  py::class_<GenerateOutput>(m, "GenerateOutput")
      .def(py::init([](std::vector<TokenId> tokens, FloatArray step_logits) {
             return GenerateOutput{std::move(tokens), rows_of(step_logits)};
           }),
           py::arg("tokens"), py::arg("step_logits"))
      .def_readonly("tokens", &GenerateOutput::tokens)
      .def_property_readonly("step_logits", [](const GenerateOutput& o) { return matrix(o.step_logits); });

  py::class_<Backend, PyBackend>(m, "Backend")
      .def(py::init<>())
      .def("info", &Backend::info)
      .def("encode_chat", &Backend::encode_chat)
      .def("decode", [](const Backend& b, const std::vector<TokenId>& t) { return b.decode(t); })
      .def("forward", [](Backend& b, const std::vector<TokenId>& tokens, const std::vector<Site>& captures,
                         const std::vector<Write>& writes, int logits_from) {
        return b.forward(tokens, captures, writes, logits_from);
      })
      .def("generate", [](Backend& b, const std::vector<TokenId>& prompt, int n,
                          const std::vector<Write>& writes) { return b.generate(prompt, n, writes); });

  m.def(
      "register_backend",
      [](std::string model_id, int num_layers, int hidden_dim, const py::object& default_dtype,
         const std::vector<py::object>& supported, py::function factory) {
        std::vector<Dtype> dtypes;
        for (const auto& d : supported) dtypes.push_back(dtype_arg(d));
        register_backend({std::move(model_id), num_layers, hidden_dim, dtype_arg(default_dtype),
                          std::move(dtypes), wrap_factory(std::move(factory))});
      },
      py::arg("model_id"), py::arg("num_layers"), py::arg("hidden_dim"), py::arg("default_dtype"),
      py::arg("supported_dtypes"), py::arg("factory"));
  m.def("known_models", &known_models);
  m.def("describe_model", [](const std::string& id) -> py::object {
    const auto d = describe_model(id);
    if (!d) return py::none();
    py::list dtypes;
    for (Dtype t : d->supported_dtypes) dtypes.append(std::string(to_string(t)));
    py::dict out;
    out["model_id"] = d->model_id;
    out["num_layers"] = d->num_layers;
    out["hidden_dim"] = d->hidden_dim;
    out["default_dtype"] = std::string(to_string(d->default_dtype));
    out["supported_dtypes"] = dtypes;
    out["has_runtime"] = static_cast<bool>(d->factory);
    return out;
  });

  py::class_<ModelHandle>(m, "ModelHandle")
      .def_property_readonly("info", &ModelHandle::info)
      .def("tokenize", &ModelHandle::tokenize)
      .def("detokenize", [](const ModelHandle& h, const std::vector<TokenId>& t) { return h.detokenize(t); });

  m.def(
      "load_model",
      [](const std::string& id, const py::object& dtype) {
        const Dtype d = dtype_arg(dtype);
        py::gil_scoped_release release;
        return load_model(id, d);
      },
      py::arg("model_id"), py::arg("dtype") = "f32");
  m.def(
      "capture",
      [](ModelHandle& h, const std::vector<TokenId>& tokens, const std::vector<Site>& sites) {
        std::vector<HiddenVector> out;
        {
          py::gil_scoped_release release;
          out = capture(h, tokens, sites);
        }
        py::list arrays;
        for (const auto& v : out) arrays.append(to_array(v.values));
        return arrays;
      },
      py::arg("handle"), py::arg("tokens"), py::arg("sites"));
  m.def(
      "generate_greedy",
      [](ModelHandle& h, const std::vector<TokenId>& tokens, int n, const std::vector<Write>& writes) {
        py::gil_scoped_release release;
        return generate_greedy(h, tokens, n, writes);
      },
      py::arg("handle"), py::arg("tokens"), py::arg("n_tokens"), py::arg("writes") = std::vector<Write>{});
  m.def(
      "teacher_forced_distributions",
      [](ModelHandle& h, const std::vector<TokenId>& prompt, const std::vector<TokenId>& reference,
         const std::vector<Write>& writes) {
        std::vector<TokenDistribution> d;
        {
          py::gil_scoped_release release;
          d = teacher_forced_distributions(h, prompt, reference, writes);
        }
        const py::ssize_t n = static_cast<py::ssize_t>(d.size());
        const py::ssize_t v = n ? static_cast<py::ssize_t>(d[0].probs.size()) : 0;
        py::array_t<double> out({n, v});
        auto mm = out.mutable_unchecked<2>();
        for (py::ssize_t i = 0; i < n; ++i) {
          for (py::ssize_t k = 0; k < v; ++k) mm(i, k) = d[static_cast<std::size_t>(i)].probs[static_cast<std::size_t>(k)];
        }
        return out;
      },
      py::arg("handle"), py::arg("prompt"), py::arg("reference"), py::arg("writes") = std::vector<Write>{});

  m.def(
      "decompose",
      [](py::array_t<double, py::array::c_style | py::array::forcecast> bb,
         py::array_t<double, py::array::c_style | py::array::forcecast> xb,
         py::array_t<double, py::array::c_style | py::array::forcecast> by,
         py::array_t<double, py::array::c_style | py::array::forcecast> xy) {
        auto span = [](const auto& a) { return std::span<const double>(a.data(), static_cast<std::size_t>(a.size())); };
        if (bb.size() != xb.size() || bb.size() != by.size() || bb.size() != xy.size()) {
          throw InvalidArgument("states differ in length");
        }
        const DecompositionRecord r = decompose(span(bb), span(xb), span(by), span(xy));
        py::dict d;
        d["delta_x"] = to_array(r.delta_x);
        d["delta_y"] = to_array(r.delta_y);
        d["delta_xy"] = to_array(r.delta_xy);
        d["inter"] = to_array(r.inter);
        d["cos_add"] = r.cos_add.value;
        d["cos_xy_overlap"] = r.cos_xy_overlap.value;
        d["inter_ratio"] = r.inter_ratio ? py::cast(*r.inter_ratio) : py::none();
        d["degenerate"] = r.degenerate();
        d["additive"] = to_array(additive_prediction(r));
        d["remove_x"] = to_array(remove_persona(r));
        return d;
      },
      py::arg("h_bb"), py::arg("h_xb"), py::arg("h_by"), py::arg("h_xy"));

  m.def("short_grid", [] { return to_py(grid_to_json(short_grid())); });
  m.def("long_grid", [] { return to_py(grid_to_json(long_grid())); });
  m.def(
      "grid_cells",
      [](const py::object& grid, const std::vector<std::string>& personas,
         const std::vector<std::string>& tasks) {
        py::list out;
        for (const PromptCell& c : grid_cells(grid_arg(grid), personas, tasks)) out.append(cell_dict(c));
        return out;
      },
      py::arg("grid") = "short", py::arg("personas") = std::vector<std::string>{},
      py::arg("tasks") = std::vector<std::string>{});

  py::class_<CellCapture>(m, "CellCapture")
      .def_property_readonly("reference", [](const CellCapture& c) { return c.reference; })
      .def("position", [](const CellCapture& c, const std::string& cond, const std::string& kind) {
        for (Condition k : kConditions) {
          if (to_string(k) == cond) return c.position(k, parse_probe_kind(kind));
        }
        throw InvalidArgument("unknown condition '" + cond + "'");
      })
      .def("state", [](const CellCapture& c, const std::string& cond, const std::string& kind, int layer) {
        for (Condition k : kConditions) {
          if (to_string(k) == cond) return to_array(c.state(k, parse_probe_kind(kind), layer));
        }
        throw InvalidArgument("unknown condition '" + cond + "'");
      });
  m.def(
      "capture_cell",
      [](ModelHandle& h, const py::object& grid, const std::string& persona, const std::string& task) {
        const PromptCell cell = build_cell(grid_arg(grid), persona, task);
        py::gil_scoped_release release;
        return capture_cell(h, cell);
      },
      py::arg("handle"), py::arg("grid"), py::arg("persona_id"), py::arg("task_id"));
  m.def(
      "causal_kl",
      [](ModelHandle& h, const CellCapture& cap, int layer, const std::string& position,
         const std::string& source, const std::string& direction) {
        KLResult r;
        {
          py::gil_scoped_release release;
          r = causal_kl(h, cap, layer, parse_probe_kind(position), parse_vector_source(source),
                        parse_kl_direction(direction));
        }
        return kl_dict(r);
      },
      py::arg("handle"), py::arg("capture"), py::arg("layer"), py::arg("position") = "p_last",
      py::arg("source") = "additive", py::arg("direction") = "clean_to_intervened");
  m.def(
      "host_injection",
      [](ModelHandle& h, const CellCapture& cap, const std::string& source, const std::vector<int>& layers,
         const std::string& direction) {
        KLResult r;
        {
          py::gil_scoped_release release;
          r = host_injection(h, cap, parse_vector_source(source), layers, parse_kl_direction(direction));
        }
        return kl_dict(r);
      },
      py::arg("handle"), py::arg("capture"), py::arg("source"), py::arg("layers"),
      py::arg("direction") = "clean_to_intervened");

  m.def("normalize_text", &normalize_text);
  m.def("builtin_marker_sets", [] { return to_py(marker_sets_to_json(builtin_marker_sets())); });
  m.def(
      "match_markers",
      [](const std::string& text, const py::object& markers) {
        if (py::isinstance<py::str>(markers)) {
          const std::string id = markers.cast<std::string>();
          for (const MarkerSet& s : builtin_marker_sets()) {
            if (s.persona_id == id) return match_markers(text, s);
          }
          throw ConfigError("no built-in marker set for '" + id + "'");
        }
        return match_markers(text, make_marker_set("custom", markers.cast<std::vector<std::string>>()));
      },
      py::arg("text"), py::arg("markers"));

  m.def("percentile", [](const std::vector<double>& v, double q) { return percentile(v, q); });
  m.def("quantiles", [](const std::vector<double>& v) {
    const Quantiles q = quantiles(v);
    return py::make_tuple(q.median, q.p25, q.p75);
  });

  m.def(
      "run_experiment",
      [](const std::string& experiment, const py::object& config, const py::object& out) {
        const RunConfig rc = config.is_none() ? RunConfig{} : config_from_json(from_py(config));
        const ResolvedConfig resolved = resolve(parse_experiment(experiment), rc);
        RunArtifact artifact;
        {
          py::gil_scoped_release release;
          artifact = run_experiment(resolved);
        }
        if (!out.is_none()) write_artifact(out.cast<std::filesystem::path>(), artifact);
        return to_py(artifact_to_json(artifact));
      },
      py::arg("experiment"), py::arg("config") = py::none(), py::arg("out") = py::none());
  m.def("read_artifact", [](const std::filesystem::path& p) { return to_py(artifact_to_json(read_artifact(p))); });
  m.def(
      "emit_table",
      [](const py::object& artifact, const std::string& table, const std::vector<int>& columns) {
        const RenderedTable t = emit_table(artifact_arg(artifact), parse_table_kind(table), columns);
        return py::make_tuple(t.text, t.csv);
      },
      py::arg("artifact"), py::arg("table"), py::arg("columns") = std::vector<int>{});
  m.def(
      "write_curves",
      [](const py::object& artifact, const std::filesystem::path& dir, const std::string& stem) {
        const CurveFiles f = write_curves(artifact_arg(artifact), dir, stem);
        return py::make_tuple(f.csv, f.svg);
      },
      py::arg("artifact"), py::arg("directory"), py::arg("stem"));

  m.attr("TOY_MODEL_ID") = std::string(kToyModelId);
  m.attr("SCHEMA_VERSION") = kSchemaVersion;
}
