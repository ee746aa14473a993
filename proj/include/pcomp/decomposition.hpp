#pragma once

#include <optional>
#include <span>
#include <vector>

namespace pcomp {

// Norms below this are treated as zero.
inline constexpr double kNormTolerance = 1e-8;

struct Cosine {
  double value = 0.0;
  // True when either input was (numerically) zero; value is then 0.
  bool degenerate = false;
};

// Dot products and norms accumulate in double whatever the input precision.
double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);
Cosine cosine(std::span<const double> u, std::span<const double> v);

std::vector<double> widen(std::span<const float> values);

// Residual decomposition of one 2x2 prompt set at one site:
//   delta_x  = h_xb - h_bb      delta_y = h_by - h_bb
//   delta_xy = h_xy - h_bb      inter   = delta_xy - delta_x - delta_y
struct DecompositionRecord {
  std::vector<double> h_bb, h_xb, h_by, h_xy;
  std::vector<double> delta_x, delta_y, delta_xy, inter;
  Cosine cos_add;         // cos(delta_xy, delta_x + delta_y)
  Cosine cos_xy_overlap;  // cos(delta_x, delta_y)
  // |inter| / |delta_xy|; missing when |delta_xy| is below tolerance.
  std::optional<double> inter_ratio;

  bool degenerate() const {
    return cos_add.degenerate || cos_xy_overlap.degenerate || !inter_ratio.has_value();
  }
};

DecompositionRecord decompose(std::span<const double> h_bb, std::span<const double> h_xb,
                              std::span<const double> h_by, std::span<const double> h_xy);
DecompositionRecord decompose(std::span<const float> h_bb, std::span<const float> h_xb,
                              std::span<const float> h_by, std::span<const float> h_xy);

// h_bb + delta_x + delta_y.
std::vector<double> additive_prediction(const DecompositionRecord& record);

// h_xy - delta_x: the composite state with the persona contribution removed.
std::vector<double> remove_persona(const DecompositionRecord& record);

}  // namespace pcomp
