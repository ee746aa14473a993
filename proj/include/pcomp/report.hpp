#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "pcomp/results.hpp"

namespace pcomp {

enum class TableKind { localized, diverse, markers, inject };
std::string_view to_string(TableKind kind);
TableKind parse_table_kind(std::string_view label);

struct RenderedTable {
  std::string text;
  std::string csv;
};

// Plain-text and CSV renderings. For localized/diverse, `columns` picks the
// layers shown (default: first, middle and last swept layer). Missing groups
// render as "n/a". Throws ArtifactError when the artifact holds no rows for
// the requested experiment.
RenderedTable emit_table(const RunArtifact& artifact, TableKind kind,
                         const std::vector<int>& columns = {});

struct CurvePoint {
  int layer = 0;
  double median = 0.0;
  double p25 = 0.0;
  double p75 = 0.0;
};

struct CurveSeries {
  std::string position;
  std::vector<CurvePoint> points;  // strictly increasing layers
};

// KL-vs-layer medians with percentile bands, one series per position kind.
std::vector<CurveSeries> emit_curves(const RunArtifact& artifact);

// CSV columns: position,layer,median,p25,p75.
std::string curves_csv(const std::vector<CurveSeries>& series);

// Log-scale KL axis, percentile bands, dotted reference line at KL = 0.1.
std::string render_svg(const std::vector<CurveSeries>& series, std::string_view title);

struct CurveFiles {
  std::filesystem::path csv;
  std::filesystem::path svg;
};

CurveFiles write_curves(const RunArtifact& artifact, const std::filesystem::path& directory,
                        std::string_view stem);

}  // namespace pcomp
