#include "pcomp/criteria.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "pcomp/error.hpp"

namespace pcomp {

namespace {

const SummaryEntry* find_entry(const RunArtifact& artifact, GroupBy group_by,
                               std::string_view metric, auto&& pred) {
  for (const SummaryEntry& e : artifact.summary) {
    if (e.group_by == group_by && e.metric == metric && pred(e)) return &e;
  }
  return nullptr;
}

double site_median(const RunArtifact& artifact, std::string_view metric, int layer,
                   std::string_view position) {
  const SummaryEntry* e = find_entry(artifact, GroupBy::layer_position, metric,
                                     [&](const SummaryEntry& s) {
                                       return s.layer == layer && s.position == position;
                                     });
  if (!e || !e->median) {
    throw ArtifactError(fmt::format("artifact has no {} median at L{} {}", metric, layer, position));
  }
  return *e->median;
}

double condition_median(const RunArtifact& artifact, std::string_view condition,
                        const std::vector<int>& layers) {
  const SummaryEntry* e = find_entry(artifact, GroupBy::condition, "aggregate_kl",
                                     [&](const SummaryEntry& s) {
                                       return s.condition == condition && s.layers == layers;
                                     });
  if (!e || !e->median) {
    throw ArtifactError(fmt::format("artifact has no median KL for {} at layers [{}]", condition,
                                    fmt::join(layers, ",")));
  }
  return *e->median;
}

void expect_experiment(const RunArtifact& artifact, std::string_view experiment) {
  if (artifact.metadata.experiment != experiment) {
    throw ArtifactError(fmt::format("expected a {} artifact, got '{}'", experiment,
                                    artifact.metadata.experiment));
  }
}

}  // namespace

CriterionResult check_kl_band(const RunArtifact& localized) {
  expect_experiment(localized, "localized");
  const double early = site_median(localized, "aggregate_kl", 6, "p_last");
  const double late = site_median(localized, "aggregate_kl", 18, "p_last");
  return {early <= 0.01 && late >= 0.5,
          fmt::format("median KL L6={:.4g} (<= 0.01), L18={:.4g} (>= 0.5)", early, late)};
}

CriterionResult check_geometry(const RunArtifact& localized) {
  expect_experiment(localized, "localized");
  const double add = site_median(localized, "cos_add", 14, "p_last");
  const double overlap = site_median(localized, "cos_xy_overlap", 14, "p_last");
  const bool ok = std::abs(add - 0.874) <= 0.05 && overlap <= add - kOverlapMargin;
  return {ok, fmt::format("median cos_add={:.4f} (0.874 +/- 0.05), cos_xy_overlap={:.4f}", add,
                          overlap)};
}

CriterionResult check_marker_rates(const RunArtifact& markers) {
  expect_experiment(markers, "markers");
  auto rate = [&](MarkerCondition c) {
    for (const MarkerSummary& s : markers.marker_summary) {
      if (s.condition == c) return s.any_rate;
    }
    throw ArtifactError(fmt::format("marker artifact has no {} summary", to_string(c)));
  };
  const double bare = rate(MarkerCondition::bare);
  const double clean = rate(MarkerCondition::clean);
  const double additive = rate(MarkerCondition::additive);
  const bool ok = bare <= 0.15 && clean >= 0.5 && std::abs(additive - clean) <= 0.15;
  return {ok, fmt::format("any-rate bare={:.3f} clean={:.3f} additive={:.3f}", bare, clean,
                          additive)};
}

CriterionResult check_host_injection(const RunArtifact& inject, const RunArtifact& multilayer) {
  expect_experiment(inject, "inject");
  expect_experiment(multilayer, "multilayer");
  const int layer = inject.metadata.layers.empty() ? 14 : inject.metadata.layers.front();
  const double baseline = condition_median(inject, "none", {});
  const double oracle = condition_median(inject, "oracle_clean", {layer});
  const double additive = condition_median(inject, "additive", {layer});
  if (baseline <= 0.0) throw ArtifactError("host baseline KL is not positive");
  const double closed_oracle = (baseline - oracle) / baseline;
  const double closed_additive = (baseline - additive) / baseline;

  const auto& sets = multilayer.metadata.layer_sets;
  if (sets.empty()) throw ArtifactError("multilayer artifact lists no layer sets");
  const std::vector<int> narrow{10, 12, 14};
  const auto widest = *std::max_element(
      sets.begin(), sets.end(), [](const auto& a, const auto& b) { return a.size() < b.size(); });
  const double narrow_kl = condition_median(multilayer, "additive", narrow);
  const double widest_kl = condition_median(multilayer, "additive", widest);

  const bool ok = closed_oracle < 0.25 && closed_additive < 0.25 && widest_kl >= narrow_kl;
  return {ok, fmt::format("baseline={:.3f} oracle={:.3f} ({:.1f}% closed) additive={:.3f} "
                          "({:.1f}% closed); {{10,12,14}}={:.3f} widest={:.3f}",
                          baseline, oracle, 100 * closed_oracle, additive, 100 * closed_additive,
                          narrow_kl, widest_kl)};
}

}  // namespace pcomp
