#include "pcomp/intervention.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>

#include "pcomp/error.hpp"

namespace pcomp {

std::string_view to_string(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::p_last:
      return "p_last";
    case ProbeKind::g1:
      return "g1";
    case ProbeKind::g2:
      return "g2";
  }
  return "?";
}

ProbeKind parse_probe_kind(std::string_view label) {
  for (ProbeKind k : kProbeKinds) {
    if (to_string(k) == label) return k;
  }
  throw ConfigError("unknown position kind '" + std::string(label) +
                    "' (expected p_last, g1 or g2)");
}

std::string_view to_string(VectorSource source) {
  switch (source) {
    case VectorSource::additive:
      return "additive";
    case VectorSource::remove_x:
      return "remove_x";
    case VectorSource::oracle_clean:
      return "oracle_clean";
    case VectorSource::none:
      return "none";
  }
  return "?";
}

VectorSource parse_vector_source(std::string_view label) {
  for (VectorSource s : {VectorSource::additive, VectorSource::remove_x,
                         VectorSource::oracle_clean, VectorSource::none}) {
    if (to_string(s) == label) return s;
  }
  throw ConfigError("unknown vector source '" + std::string(label) + "'");
}

std::string_view to_string(HostKind host) { return host == HostKind::xy ? "XY" : "host"; }

std::string_view to_string(KlDirection direction) {
  return direction == KlDirection::clean_to_intervened ? "clean_to_intervened"
                                                       : "intervened_to_clean";
}

KlDirection parse_kl_direction(std::string_view label) {
  if (label == "clean_to_intervened" || label == "forward") return KlDirection::clean_to_intervened;
  if (label == "intervened_to_clean" || label == "reverse") return KlDirection::intervened_to_clean;
  throw ConfigError("unknown KL direction '" + std::string(label) +
                    "' (expected clean_to_intervened or intervened_to_clean)");
}

int CellCapture::position(Condition c, ProbeKind kind) const {
  const int prompt_len = static_cast<int>(tokens(c).size());
  switch (kind) {
    case ProbeKind::p_last:
      return prompt_len - 1;
    case ProbeKind::g1:
      return prompt_len;
    case ProbeKind::g2:
      return prompt_len + 1;
  }
  return prompt_len - 1;
}

const std::vector<float>& CellCapture::state(Condition c, ProbeKind kind, int layer) const {
  if (layer < 0 || layer >= num_layers) {
    throw InvalidArgument("layer " + std::to_string(layer) + " outside [0, " +
                          std::to_string(num_layers) + ")");
  }
  return states[static_cast<std::size_t>(c)][static_cast<std::size_t>(kind)]
               [static_cast<std::size_t>(layer)];
}

std::vector<float>& CellCapture::state(Condition c, ProbeKind kind, int layer) {
  return const_cast<std::vector<float>&>(std::as_const(*this).state(c, kind, layer));
}

std::vector<TokenId> clean_reference(ModelHandle& handle, const PromptCell& cell, int length) {
  const std::vector<TokenId> prompt = handle.tokenize(cell.prompt(Condition::XY));
  return generate_greedy(handle, prompt, length);
}

CellCapture capture_cell(ModelHandle& handle, const PromptCell& cell, int reference_length) {
  if (reference_length < 2) throw InvalidArgument("reference must cover g1 and g2");
  CellCapture cap;
  cap.cell = cell;
  cap.num_layers = handle.info().num_layers;
  for (Condition c : kConditions) {
    cap.prompt_tokens[static_cast<std::size_t>(c)] = handle.tokenize(cell.prompt(c));
  }
  cap.reference = generate_greedy(handle, cap.tokens(Condition::XY), reference_length);
  cap.clean_distributions =
      teacher_forced_distributions(handle, cap.tokens(Condition::XY), cap.reference);

  for (Condition c : kConditions) {
    std::vector<TokenId> sequence = cap.tokens(c);
    sequence.insert(sequence.end(), cap.reference.begin(), cap.reference.end());
    std::vector<Site> sites;
    for (ProbeKind kind : kProbeKinds) {
      for (int layer = 0; layer < cap.num_layers; ++layer) {
        sites.push_back({layer, cap.position(c, kind)});
      }
    }
    std::vector<HiddenVector> captured =
        capture(handle, sequence, sites, static_cast<PromptTag>(static_cast<int>(c)));
    std::size_t i = 0;
    for (ProbeKind kind : kProbeKinds) {
      auto& per_layer = cap.states[static_cast<std::size_t>(c)][static_cast<std::size_t>(kind)];
      per_layer.resize(static_cast<std::size_t>(cap.num_layers));
      for (int layer = 0; layer < cap.num_layers; ++layer) {
        per_layer[static_cast<std::size_t>(layer)] = std::move(captured[i++].values);
      }
    }
  }
  return cap;
}

DecompositionRecord decompose_at(const CellCapture& capture, ProbeKind kind, int layer) {
  return decompose(capture.state(Condition::BB, kind, layer),
                   capture.state(Condition::XB, kind, layer),
                   capture.state(Condition::BY, kind, layer),
                   capture.state(Condition::XY, kind, layer));
}

namespace {

std::vector<float> narrow(const std::vector<double>& values) {
  return std::vector<float>(values.begin(), values.end());
}

}  // namespace

std::optional<std::vector<float>> substitution_vector(const CellCapture& capture, ProbeKind kind,
                                                      int layer, VectorSource source) {
  switch (source) {
    case VectorSource::none:
      return std::nullopt;
    case VectorSource::oracle_clean:
      return capture.state(Condition::XY, kind, layer);
    case VectorSource::additive:
      return narrow(additive_prediction(decompose_at(capture, kind, layer)));
    case VectorSource::remove_x:
      return narrow(remove_persona(decompose_at(capture, kind, layer)));
  }
  return std::nullopt;
}

double kl_divergence(const TokenDistribution& p, const TokenDistribution& q) {
  if (p.probs.size() != q.probs.size()) {
    throw InvalidArgument("distributions over different vocabularies");
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    const double pi = p.probs[i];
    if (pi <= 0.0) continue;
    const double qi = std::max(q.probs[i], DBL_MIN);
    kl += pi * (std::log(pi) - std::log(qi));
  }
  // Rounding can leave identical distributions a hair below zero.
  return std::max(kl, 0.0);
}

std::vector<double> per_token_kl(const std::vector<TokenDistribution>& clean,
                                 const std::vector<TokenDistribution>& intervened,
                                 KlDirection direction) {
  if (clean.size() != intervened.size()) {
    throw InvalidArgument("clean and intervened windows differ in length");
  }
  std::vector<double> out;
  out.reserve(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.push_back(direction == KlDirection::clean_to_intervened
                      ? kl_divergence(clean[i], intervened[i])
                      : kl_divergence(intervened[i], clean[i]));
  }
  return out;
}

KLResult evaluate_intervention(ModelHandle& handle, const CellCapture& capture,
                               const InterventionSpec& spec, KlDirection direction) {
  if (spec.layers.empty() && spec.source != VectorSource::none) {
    throw InvalidArgument("intervention needs at least one layer");
  }
  if (!std::is_sorted(spec.layers.begin(), spec.layers.end()) ||
      std::adjacent_find(spec.layers.begin(), spec.layers.end()) != spec.layers.end()) {
    throw InvalidArgument("intervention layers must be strictly increasing");
  }
  if (capture.clean_distributions.size() != capture.reference.size() ||
      capture.reference.empty()) {
    throw InvalidArgument("cell capture has no clean reference");
  }
  const Condition host_condition = spec.host == HostKind::xy ? Condition::XY : Condition::BY;
  const std::vector<TokenId>& host_tokens = capture.tokens(host_condition);
  const int position = capture.position(host_condition, spec.position);

  KLResult result;
  result.spec = spec;
  result.direction = direction;
  result.reference = capture.reference;

  std::vector<Write> writes;
  for (int layer : spec.layers) {
    if (spec.source == VectorSource::additive || spec.source == VectorSource::remove_x) {
      if (decompose_at(capture, spec.position, layer).degenerate()) result.degenerate = true;
    }
    auto vec = substitution_vector(capture, spec.position, layer, spec.source);
    if (!vec) continue;
    writes.push_back({{layer, position}, std::move(*vec)});
    result.sites.push_back({layer, position});
  }

  const std::vector<TokenDistribution> intervened =
      teacher_forced_distributions(handle, host_tokens, capture.reference, writes);
  result.per_token_kl = per_token_kl(capture.clean_distributions, intervened, direction);
  result.aggregate_kl =
      std::accumulate(result.per_token_kl.begin(), result.per_token_kl.end(), 0.0) /
      static_cast<double>(result.per_token_kl.size());
  return result;
}

KLResult causal_kl(ModelHandle& handle, const CellCapture& capture, int layer, ProbeKind kind,
                   VectorSource source, KlDirection direction) {
  return evaluate_intervention(handle, capture, {HostKind::xy, source, {layer}, kind}, direction);
}

KLResult host_injection(ModelHandle& handle, const CellCapture& capture, VectorSource source,
                        const std::vector<int>& layers, KlDirection direction) {
  if (source == VectorSource::remove_x) {
    throw InvalidArgument("host injection takes none, oracle_clean or additive");
  }
  return evaluate_intervention(handle, capture,
                               {HostKind::host, source, layers, ProbeKind::p_last}, direction);
}

GeometryStats geometry(const DecompositionRecord& record) {
  GeometryStats g;
  g.cos_add = record.cos_add;
  g.cos_xy_overlap = record.cos_xy_overlap;
  g.inter_ratio = record.inter_ratio;
  g.norm_delta_x = norm(record.delta_x);
  g.norm_delta_y = norm(record.delta_y);
  g.norm_delta_xy = norm(record.delta_xy);
  g.norm_inter = norm(record.inter);
  return g;
}

std::vector<SweepRow> sweep(ModelHandle& handle, const std::vector<PromptCell>& cells,
                            const std::vector<int>& layers,
                            const std::vector<ProbeKind>& positions, KlDirection direction) {
  if (layers.empty() || positions.empty()) {
    throw InvalidArgument("sweep needs nonempty layer and position lists");
  }
  for (int layer : layers) {
    if (layer < 0 || layer >= handle.info().num_layers) {
      throw InvalidArgument("sweep layer " + std::to_string(layer) + " outside [0, " +
                            std::to_string(handle.info().num_layers) + ")");
    }
  }
  std::vector<SweepRow> rows;
  for (const PromptCell& cell : cells) {
    std::optional<CellCapture> cap;
    std::string cell_error;
    try {
      cap = capture_cell(handle, cell);
    } catch (const Error& e) {
      cell_error = e.what();
    }
    for (int layer : layers) {
      for (ProbeKind kind : positions) {
        SweepRow row{cell.persona_id, cell.task_id, layer, kind, std::nullopt, std::nullopt,
                     cell_error};
        if (cap) {
          try {
            row.geometry = geometry(decompose_at(*cap, kind, layer));
            row.kl = causal_kl(handle, *cap, layer, kind, VectorSource::additive, direction);
          } catch (const Error& e) {
            row.error = e.what();
          }
        }
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::vector<SweepRow> sweep(ModelHandle& handle, const GridConfig& grid,
                            const std::vector<int>& layers,
                            const std::vector<ProbeKind>& positions, KlDirection direction) {
  return sweep(handle, grid_cells(grid), layers, positions, direction);
}

}  // namespace pcomp
