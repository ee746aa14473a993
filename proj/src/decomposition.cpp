#include "pcomp/decomposition.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pcomp/error.hpp"

namespace pcomp {

namespace {

void check_same_length(std::size_t a, std::size_t b) {
  if (a != b) {
    throw InvalidArgument("vector length mismatch: " + std::to_string(a) + " vs " +
                          std::to_string(b));
  }
}

std::vector<double> difference(std::span<const double> a, std::span<const double> b) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

}  // namespace

double dot(std::span<const double> u, std::span<const double> v) {
  check_same_length(u.size(), v.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

double norm(std::span<const double> u) {
  // Scaled accumulation avoids overflow for large residual magnitudes.
  double scale = 0.0;
  for (double x : u) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double acc = 0.0;
  for (double x : u) {
    const double r = x / scale;
    acc += r * r;
  }
  return scale * std::sqrt(acc);
}

Cosine cosine(std::span<const double> u, std::span<const double> v) {
  check_same_length(u.size(), v.size());
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu < kNormTolerance || nv < kNormTolerance) return {0.0, true};
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] / nu) * (v[i] / nv);
  return {std::clamp(acc, -1.0, 1.0), false};
}

std::vector<double> widen(std::span<const float> values) {
  return std::vector<double>(values.begin(), values.end());
}

DecompositionRecord decompose(std::span<const double> h_bb, std::span<const double> h_xb,
                              std::span<const double> h_by, std::span<const double> h_xy) {
  check_same_length(h_bb.size(), h_xb.size());
  check_same_length(h_bb.size(), h_by.size());
  check_same_length(h_bb.size(), h_xy.size());
  if (h_bb.empty()) throw InvalidArgument("empty hidden vectors");

  DecompositionRecord r;
  r.h_bb.assign(h_bb.begin(), h_bb.end());
  r.h_xb.assign(h_xb.begin(), h_xb.end());
  r.h_by.assign(h_by.begin(), h_by.end());
  r.h_xy.assign(h_xy.begin(), h_xy.end());
  r.delta_x = difference(h_xb, h_bb);
  r.delta_y = difference(h_by, h_bb);
  r.delta_xy = difference(h_xy, h_bb);
  r.inter.resize(h_bb.size());
  std::vector<double> sum(h_bb.size());
  for (std::size_t i = 0; i < h_bb.size(); ++i) {
    sum[i] = r.delta_x[i] + r.delta_y[i];
    r.inter[i] = r.delta_xy[i] - r.delta_x[i] - r.delta_y[i];
  }
  r.cos_add = cosine(r.delta_xy, sum);
  r.cos_xy_overlap = cosine(r.delta_x, r.delta_y);
  const double nxy = norm(r.delta_xy);
  if (nxy >= kNormTolerance) r.inter_ratio = norm(r.inter) / nxy;
  return r;
}

DecompositionRecord decompose(std::span<const float> h_bb, std::span<const float> h_xb,
                              std::span<const float> h_by, std::span<const float> h_xy) {
  return decompose(widen(h_bb), widen(h_xb), widen(h_by), widen(h_xy));
}

std::vector<double> additive_prediction(const DecompositionRecord& record) {
  std::vector<double> out(record.h_bb.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = record.h_bb[i] + record.delta_x[i] + record.delta_y[i];
  }
  return out;
}

std::vector<double> remove_persona(const DecompositionRecord& record) {
  return difference(record.h_xy, record.delta_x);
}

}  // namespace pcomp
