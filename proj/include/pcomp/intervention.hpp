#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pcomp/backend.hpp"
#include "pcomp/decomposition.hpp"
#include "pcomp/grid.hpp"

namespace pcomp {

// Length of the clean reference window every KL is measured over.
inline constexpr int kReferenceLength = 10;

// p_last is the final token of each condition's own rendered prompt; g1/g2 are
// the first/second clean XY continuation tokens, teacher-forced after every
// condition's prompt.
enum class ProbeKind { p_last = 0, g1 = 1, g2 = 2 };
inline constexpr std::array<ProbeKind, 3> kProbeKinds{ProbeKind::p_last, ProbeKind::g1,
                                                      ProbeKind::g2};
std::string_view to_string(ProbeKind kind);
ProbeKind parse_probe_kind(std::string_view label);

enum class VectorSource { additive, remove_x, oracle_clean, none };
std::string_view to_string(VectorSource source);
VectorSource parse_vector_source(std::string_view label);

// Which prompt receives the write: the clean XY prompt or the persona-stripped
// host ("As a thoughtful person, [task]").
enum class HostKind { xy, host };
std::string_view to_string(HostKind host);

enum class KlDirection {
  clean_to_intervened,  // KL(P_clean || P_intervened), the default
  intervened_to_clean,
};
std::string_view to_string(KlDirection direction);
KlDirection parse_kl_direction(std::string_view label);

struct InterventionSpec {
  HostKind host = HostKind::xy;
  VectorSource source = VectorSource::additive;
  std::vector<int> layers;  // strictly increasing; empty only for `none`
  ProbeKind position = ProbeKind::p_last;
};

struct KLResult {
  std::vector<double> per_token_kl;
  double aggregate_kl = 0.0;  // mean of per_token_kl
  std::vector<TokenId> reference;
  InterventionSpec spec;
  std::vector<Site> sites;  // where writes fired on the host sequence
  KlDirection direction = KlDirection::clean_to_intervened;
  bool degenerate = false;  // some decomposition feeding the write was degenerate
};

// Everything one cell needs, from four teacher-forced forward passes plus the
// clean generation. Reused across layers, positions and vector sources.
struct CellCapture {
  PromptCell cell;
  int num_layers = 0;
  std::array<std::vector<TokenId>, 4> prompt_tokens;  // by Condition
  std::vector<TokenId> reference;                      // clean XY greedy continuation
  std::vector<TokenDistribution> clean_distributions;  // teacher-forced on XY, no writes
  // states[condition][probe kind][layer]
  std::array<std::array<std::vector<std::vector<float>>, 3>, 4> states;

  const std::vector<TokenId>& tokens(Condition c) const {
    return prompt_tokens[static_cast<std::size_t>(c)];
  }
  // Position of `kind` in condition `c`'s teacher-forced sequence.
  int position(Condition c, ProbeKind kind) const;
  const std::vector<float>& state(Condition c, ProbeKind kind, int layer) const;
  std::vector<float>& state(Condition c, ProbeKind kind, int layer);
};

// Greedy continuation of the clean XY prompt.
std::vector<TokenId> clean_reference(ModelHandle& handle, const PromptCell& cell,
                                     int length = kReferenceLength);

CellCapture capture_cell(ModelHandle& handle, const PromptCell& cell,
                         int reference_length = kReferenceLength);

DecompositionRecord decompose_at(const CellCapture& capture, ProbeKind kind, int layer);

// The vector written for `source` at (kind, layer); nullopt for `none`.
std::optional<std::vector<float>> substitution_vector(const CellCapture& capture, ProbeKind kind,
                                                      int layer, VectorSource source);

double kl_divergence(const TokenDistribution& p, const TokenDistribution& q);

std::vector<double> per_token_kl(const std::vector<TokenDistribution>& clean,
                                 const std::vector<TokenDistribution>& intervened,
                                 KlDirection direction);

KLResult evaluate_intervention(ModelHandle& handle, const CellCapture& capture,
                               const InterventionSpec& spec,
                               KlDirection direction = KlDirection::clean_to_intervened);

KLResult causal_kl(ModelHandle& handle, const CellCapture& capture, int layer, ProbeKind kind,
                   VectorSource source,
                   KlDirection direction = KlDirection::clean_to_intervened);

// Writes into the host prompt at its own p_last, one cached vector per layer.
KLResult host_injection(ModelHandle& handle, const CellCapture& capture, VectorSource source,
                        const std::vector<int>& layers,
                        KlDirection direction = KlDirection::clean_to_intervened);

struct GeometryStats {
  Cosine cos_add;
  Cosine cos_xy_overlap;
  std::optional<double> inter_ratio;
  double norm_delta_x = 0.0;
  double norm_delta_y = 0.0;
  double norm_delta_xy = 0.0;
  double norm_inter = 0.0;
};

GeometryStats geometry(const DecompositionRecord& record);

struct SweepRow {
  std::string persona_id;
  std::string task_id;
  int layer = 0;
  ProbeKind position = ProbeKind::p_last;
  std::optional<GeometryStats> geometry;
  std::optional<KLResult> kl;
  std::string error;  // nonempty when this cell failed; the sweep continues
};

// One row per (cell, layer, position), cell-major. Per-cell failures are
// recorded in the row and do not stop the sweep.
std::vector<SweepRow> sweep(ModelHandle& handle, const std::vector<PromptCell>& cells,
                            const std::vector<int>& layers,
                            const std::vector<ProbeKind>& positions,
                            KlDirection direction = KlDirection::clean_to_intervened);
std::vector<SweepRow> sweep(ModelHandle& handle, const GridConfig& grid,
                            const std::vector<int>& layers,
                            const std::vector<ProbeKind>& positions,
                            KlDirection direction = KlDirection::clean_to_intervened);

}  // namespace pcomp
