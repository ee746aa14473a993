// Acceptance checks. Prints one PASS/FAIL/SKIP line per criterion and exits
// nonzero if any criterion fails. Criteria 8-11 need artifacts from full-size
// model runs; point PCOMP_GEMMA_ARTIFACTS at the directory holding them.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>

#include <fmt/format.h>

#include "marker_corpus.hpp"
#include "pcomp/criteria.hpp"
#include "pcomp/error.hpp"
#include "pcomp/experiments.hpp"

using namespace pcomp;

namespace {

struct Outcome {
  enum { pass, fail, skip } status = fail;
  std::string detail;
};

Outcome verdict(bool ok, std::string detail) {
  return {ok ? Outcome::pass : Outcome::fail, std::move(detail)};
}

double rel_err(const std::vector<double>& got, const std::vector<double>& want) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += (got[i] - want[i]) * (got[i] - want[i]);
    den += want[i] * want[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double scale) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = g(rng);
  return v;
}

// 1. Reconstruction, antisymmetry and scale covariance on synthetic cells.
Outcome decomposition_reconstruction() {
  std::mt19937_64 rng(20260101);
  double worst = 0.0;
  int failures = 0;
  for (int cell = 0; cell < 100; ++cell) {
    const std::size_t d = 16 + rng() % 2300;
    const double scale = std::pow(10.0, static_cast<double>(rng() % 5) - 2.0);
    const auto bb = random_vec(rng, d, scale), xb = random_vec(rng, d, scale),
               by = random_vec(rng, d, scale), xy = random_vec(rng, d, scale);
    const DecompositionRecord r = decompose(bb, xb, by, xy);
    std::vector<double> rebuilt(d);
    for (std::size_t i = 0; i < d; ++i) rebuilt[i] = r.h_bb[i] + r.delta_x[i] + r.delta_y[i] + r.inter[i];
    const double err = rel_err(rebuilt, xy);
    worst = std::max(worst, err);
    if (err > 1e-6) ++failures;

    // Exchanging the roles of BB and XB negates delta_x.
    const DecompositionRecord swapped = decompose(xb, bb, by, xy);
    std::vector<double> neg(d);
    for (std::size_t i = 0; i < d; ++i) neg[i] = -r.delta_x[i];
    if (rel_err(swapped.delta_x, neg) > 1e-6) ++failures;

    // Scaling every state by k scales deltas and inter by k; ratios are unchanged.
    const double k = 0.5 + static_cast<double>(rng() % 1000) / 100.0;
    auto scaled = [&](std::vector<double> v) {
      for (double& x : v) x *= k;
      return v;
    };
    const DecompositionRecord s = decompose(scaled(bb), scaled(xb), scaled(by), scaled(xy));
    if (rel_err(s.inter, scaled(r.inter)) > 1e-6 || rel_err(s.delta_xy, scaled(r.delta_xy)) > 1e-6 ||
        std::abs(s.cos_add.value - r.cos_add.value) > 1e-6 ||
        std::abs(*s.inter_ratio - *r.inter_ratio) > 1e-6 * *r.inter_ratio) {
      ++failures;
    }
  }
  return verdict(failures == 0, fmt::format("100 cells, max reconstruction rel err {:.2e} (<= 1e-6), "
                                            "{} property violations", worst, failures));
}

struct ToyCells {
  ModelHandle handle = load_model(kToyModelId, Dtype::f32);
  std::vector<CellCapture> caps;
  ToyCells() {
    for (const PromptCell& cell : grid_cells(short_grid())) caps.push_back(capture_cell(handle, cell));
  }
};

ToyCells& toy_cells() {
  static ToyCells cells;
  return cells;
}

// Greedy tokens implied by teacher-forced distributions along the reference.
bool follows_reference(const std::vector<TokenDistribution>& dists, const std::vector<TokenId>& ref) {
  for (std::size_t i = 0; i < ref.size(); ++i) {
    std::vector<float> logits(dists[i].probs.begin(), dists[i].probs.end());
    if (greedy_pick(logits) != ref[i]) return false;
  }
  return true;
}

std::vector<TokenDistribution> intervened(ToyCells& t, const CellCapture& cap, int layer,
                                          ProbeKind kind, std::vector<float> values) {
  const int pos = cap.position(Condition::XY, kind);
  std::vector<Write> w{{{layer, pos}, std::move(values)}};
  return teacher_forced_distributions(t.handle, cap.tokens(Condition::XY), cap.reference, w);
}

// 2. Writing back the captured clean state changes nothing.
Outcome identity_substitution() {
  ToyCells& t = toy_cells();
  double worst = 0.0;
  int mismatched = 0, sites = 0;
  for (const CellCapture& cap : t.caps) {
    for (ProbeKind kind : kProbeKinds) {
      for (int layer = 0; layer < cap.num_layers; ++layer) {
        ++sites;
        const KLResult r = causal_kl(t.handle, cap, layer, kind, VectorSource::oracle_clean);
        worst = std::max(worst, r.aggregate_kl);
        const auto& clean = cap.state(Condition::XY, kind, layer);
        if (!follows_reference(intervened(t, cap, layer, kind, clean), cap.reference)) ++mismatched;
        if (kind == ProbeKind::p_last) {
          std::vector<Write> w{{{layer, cap.position(Condition::XY, kind)}, clean}};
          if (generate_greedy(t.handle, cap.tokens(Condition::XY), kReferenceLength, w) != cap.reference) {
            ++mismatched;
          }
        }
      }
    }
  }
  return verdict(worst <= 1e-5 && mismatched == 0,
                 fmt::format("{} sites, max KL {:.2e} (<= 1e-5), {} token mismatches", sites, worst,
                             mismatched));
}

// 3. With XB rebuilt so that inter = 0, additive substitution is exact.
Outcome forced_additivity() {
  ToyCells& t = toy_cells();
  double worst = 0.0, worst_inter = 0.0;
  int sites = 0;
  for (CellCapture cap : t.caps) {
    for (ProbeKind kind : kProbeKinds) {
      for (int layer = 0; layer < cap.num_layers; ++layer) {
        auto& xb = cap.state(Condition::XB, kind, layer);
        const auto& xy = cap.state(Condition::XY, kind, layer);
        const auto& by = cap.state(Condition::BY, kind, layer);
        const auto& bb = cap.state(Condition::BB, kind, layer);
        for (std::size_t i = 0; i < xb.size(); ++i) xb[i] = xy[i] - by[i] + bb[i];
        const DecompositionRecord rec = decompose_at(cap, kind, layer);
        worst_inter = std::max(worst_inter, *rec.inter_ratio);
        const KLResult r = causal_kl(t.handle, cap, layer, kind, VectorSource::additive);
        worst = std::max(worst, r.aggregate_kl);
        ++sites;
      }
    }
  }
  return verdict(worst <= 1e-5, fmt::format("{} sites, max |inter|/|delta_xy| {:.1e}, max KL {:.2e} "
                                            "(<= 1e-5)", sites, worst_inter, worst));
}

// 4. remove_x followed by adding delta_x back restores the clean state.
Outcome remove_x_inverse() {
  ToyCells& t = toy_cells();
  int vector_mismatch = 0, token_mismatch = 0, sites = 0;
  for (const CellCapture& cap : t.caps) {
    for (int layer = 0; layer < cap.num_layers; ++layer) {
      const ProbeKind kind = ProbeKind::p_last;
      const DecompositionRecord rec = decompose_at(cap, kind, layer);
      const std::vector<double> removed = remove_persona(rec);
      std::vector<float> restored(removed.size());
      for (std::size_t i = 0; i < removed.size(); ++i) {
        const double back = removed[i] + rec.delta_x[i];
        if (back != rec.h_xy[i]) ++vector_mismatch;
        restored[i] = static_cast<float>(back);
      }
      if (restored != cap.state(Condition::XY, kind, layer)) ++vector_mismatch;
      std::vector<Write> w{{{layer, cap.position(Condition::XY, kind)}, restored}};
      if (generate_greedy(t.handle, cap.tokens(Condition::XY), kReferenceLength, w) != cap.reference) {
        ++token_mismatch;
      }
      ++sites;
    }
  }
  return verdict(vector_mismatch == 0 && token_mismatch == 0,
                 fmt::format("{} sites, {} inexact vector entries, {} token mismatches", sites,
                             vector_mismatch, token_mismatch));
}

// 5. Marker matcher against the hand-labelled corpus and a brute-force matcher.
Outcome marker_oracle() {
  const auto sets = builtin_marker_sets();
  int disagreements = 0, mislabelled = 0;
  for (const auto& c : corpus::cases()) {
    const MarkerSet& set = corpus::set_for(sets, c.persona);
    const auto got = match_markers(c.text, set);
    if (got != corpus::brute_force(c.text, set)) ++disagreements;
    if (got != c.expected) ++mislabelled;
  }
  return verdict(corpus::cases().size() == 30 && disagreements == 0 && mislabelled == 0,
                 fmt::format("{} cases, {} disagreements with brute force, {} with hand labels",
                             corpus::cases().size(), disagreements, mislabelled));
}

double sorted_percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v[lo];
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

// 6. Group medians and percentiles against sorting.
Outcome aggregation_oracle() {
  std::mt19937_64 rng(6);
  std::lognormal_distribution<double> kl(-3.0, 2.0);
  int mismatches = 0, groups = 0;
  for (int set = 0; set < 50; ++set) {
    std::vector<Row> rows;
    std::map<std::pair<int, std::string>, std::vector<double>> expected;
    const int n = 1 + static_cast<int>(rng() % 200);
    for (int i = 0; i < n; ++i) {
      Row r;
      r.persona_id = "p" + std::to_string(rng() % 5);
      r.task_id = "t";
      r.layer = 2 * static_cast<int>(rng() % 4);
      r.layers = {r.layer};
      r.position = std::string(to_string(kProbeKinds[rng() % 3]));
      r.condition = "additive";
      r.host = "XY";
      r.aggregate_kl = kl(rng);
      expected[{r.layer, r.position}].push_back(*r.aggregate_kl);
      rows.push_back(std::move(r));
    }
    for (const SummaryEntry& e : aggregate(rows, GroupBy::layer_position)) {
      ++groups;
      const auto& values = expected.at({e.layer, e.position});
      if (e.n != values.size() || *e.median != sorted_percentile(values, 0.5) ||
          *e.p25 != sorted_percentile(values, 0.25) || *e.p75 != sorted_percentile(values, 0.75)) {
        ++mismatches;
      }
    }
  }
  return verdict(mismatches == 0,
                 fmt::format("50 row sets, {} groups, {} inexact", groups, mismatches));
}

// 7. Two full toy localized runs give identical rows.
Outcome determinism() {
  RunConfig c;
  c.model_id = std::string(kToyModelId);
  c.layers = std::vector<int>{0, 1, 2, 3};
  const ResolvedConfig r = resolve(Experiment::localized, c);
  const RunArtifact a = run_experiment(r);
  const RunArtifact b = run_experiment(r);
  const bool same = artifact_to_json(a)["rows"] == artifact_to_json(b)["rows"] &&
                    artifact_to_json(a)["summary"] == artifact_to_json(b)["summary"];
  return verdict(same && a.rows.size() == 12 * 4 * 3,
                 fmt::format("{} rows per run, rows {}", a.rows.size(), same ? "identical" : "differ"));
}

std::optional<RunArtifact> gemma_artifact(const std::string& experiment) {
  const char* dir = std::getenv("PCOMP_GEMMA_ARTIFACTS");
  if (!dir) return std::nullopt;
  const std::string grid = experiment == "localized" ? "short" : "long";
  const auto path = std::filesystem::path(dir) /
                    artifact_filename(experiment, "google/gemma-2-2b-it", grid);
  if (!std::filesystem::exists(path)) return std::nullopt;
  return read_artifact(path);
}

Outcome gemma_scale(std::initializer_list<const char*> experiments,
                    const std::function<CriterionResult(const std::vector<RunArtifact>&)>& check) {
  std::vector<RunArtifact> artifacts;
  for (const char* e : experiments) {
    auto a = gemma_artifact(e);
    if (!a) {
      return {Outcome::skip, fmt::format("needs a Gemma-2-2B-IT {} artifact in $PCOMP_GEMMA_ARTIFACTS", e)};
    }
    artifacts.push_back(std::move(*a));
  }
  const CriterionResult r = check(artifacts);
  return verdict(r.passed, r.detail);
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, "decomposition reconstruction", decomposition_reconstruction},
      {2, "identity substitution", identity_substitution},
      {3, "forced-additivity oracle", forced_additivity},
      {4, "remove_x/add-back inverse", remove_x_inverse},
      {5, "marker matcher oracle", marker_oracle},
      {6, "aggregation oracle", aggregation_oracle},
      {7, "determinism", determinism},
      {8, "Gemma KL band (L6 / L18)",
       [] { return gemma_scale({"localized"}, [](const auto& a) { return check_kl_band(a[0]); }); }},
      {9, "Gemma L14 geometry",
       [] { return gemma_scale({"localized"}, [](const auto& a) { return check_geometry(a[0]); }); }},
      {10, "marker recovery rates",
       [] { return gemma_scale({"markers"}, [](const auto& a) { return check_marker_rates(a[0]); }); }},
      {11, "host injection ordering",
       [] {
         return gemma_scale({"inject", "multilayer"},
                            [](const auto& a) { return check_host_injection(a[0], a[1]); });
       }},
  };

  const auto start = std::chrono::steady_clock::now();
  int failed = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {Outcome::fail, std::string("exception: ") + e.what()};
    }
    const char* label = o.status == Outcome::pass ? "PASS" : o.status == Outcome::fail ? "FAIL" : "SKIP";
    if (o.status == Outcome::fail) ++failed;
    std::cout << fmt::format("[{}] criterion {:>2}: {} - {}", label, c.id, c.name, o.detail) << std::endl;
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << fmt::format("{} failed, {:.1f}s total", failed, seconds) << std::endl;
  return failed == 0 ? 0 : 1;
}
