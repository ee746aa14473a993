#pragma once

#include <string>

#include "pcomp/results.hpp"

namespace pcomp {

// Checks of full-scale model runs against the reference figures. Each takes
// the artifact(s) of the relevant experiment and reports pass/fail with the
// measured values in `detail`.
struct CriterionResult {
  bool passed = false;
  std::string detail;
};

// Localized sweep, p_last: median KL at L6 <= 0.01 and at L18 >= 0.5.
CriterionResult check_kl_band(const RunArtifact& localized);

// Localized sweep, L14 p_last: median cos_add within 0.05 of 0.874 and median
// cos_xy_overlap at least kOverlapMargin below it.
inline constexpr double kOverlapMargin = 0.2;
CriterionResult check_geometry(const RunArtifact& localized);

// Marker run: bare any-rate <= 15%, clean >= 50%, additive within 15 points
// of clean.
CriterionResult check_marker_rates(const RunArtifact& markers);

// Host injection: additive and oracle each close less than 25% of the gap
// between the host baseline and zero; the widest layer set is no better than
// {10,12,14}.
CriterionResult check_host_injection(const RunArtifact& inject, const RunArtifact& multilayer);

}  // namespace pcomp
