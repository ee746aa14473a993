#include <doctest.h>

#include <cmath>
#include <numeric>

#include "pcomp/error.hpp"
#include "pcomp/intervention.hpp"
#include "pcomp/toy_model.hpp"
#include "toy_oracle.hpp"

using namespace pcomp;

namespace {

struct Fixture {
  ModelHandle handle = load_model(kToyModelId, Dtype::f32);
  PromptCell cell = build_cell(short_grid(), "yoda", "haiku");
  CellCapture cap = capture_cell(handle, cell);
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

std::vector<TokenId> with_reference(const CellCapture& cap, Condition c) {
  std::vector<TokenId> seq = cap.tokens(c);
  seq.insert(seq.end(), cap.reference.begin(), cap.reference.end());
  return seq;
}

}  // namespace

TEST_CASE("clean reference is the 10-token greedy XY continuation") {
  Fixture& f = fixture();
  const auto ref = clean_reference(f.handle, f.cell);
  CHECK(ref.size() == 10);
  CHECK(ref == clean_reference(f.handle, f.cell));
  CHECK(ref == f.cap.reference);
  const auto& w = dynamic_cast<toy::ToyBackend&>(f.handle.backend()).weights();
  CHECK(ref == oracle::greedy(w, f.cap.tokens(Condition::XY), 10));
}

TEST_CASE("probe positions") {
  const CellCapture& cap = fixture().cap;
  for (Condition c : kConditions) {
    const int len = static_cast<int>(cap.tokens(c).size());
    CHECK(cap.position(c, ProbeKind::p_last) == len - 1);
    CHECK(cap.position(c, ProbeKind::g1) == len);
    CHECK(cap.position(c, ProbeKind::g2) == len + 1);
  }
  CHECK(cap.tokens(Condition::BB).size() != cap.tokens(Condition::XY).size());
}

TEST_CASE("g1/g2 states come from the clean continuation appended to each condition") {
  Fixture& f = fixture();
  for (Condition c : {Condition::BB, Condition::BY}) {
    const auto seq = with_reference(f.cap, c);
    const int g2 = f.cap.position(c, ProbeKind::g2);
    const auto got = capture(f.handle, seq, std::vector<Site>{{2, g2}});
    CHECK(got[0].values == f.cap.state(c, ProbeKind::g2, 2));
  }
}

TEST_CASE("kl divergence") {
  const TokenDistribution p{{0.5, 0.5}, 0}, q{{0.25, 0.75}, 0};
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK(kl_divergence(p, q) == doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)));
  CHECK(kl_divergence(q, p) == doctest::Approx(0.25 * std::log(0.5) + 0.75 * std::log(1.5)));
  const auto fwd = per_token_kl({p}, {q}, KlDirection::clean_to_intervened);
  const auto rev = per_token_kl({p}, {q}, KlDirection::intervened_to_clean);
  CHECK(fwd[0] == kl_divergence(p, q));
  CHECK(rev[0] == kl_divergence(q, p));
  const TokenDistribution zero{{1.0, 0.0}, 0};
  CHECK(std::isfinite(kl_divergence(zero, q)));
  CHECK(std::isfinite(kl_divergence(q, zero)));
}

TEST_CASE("identity substitution leaves the continuation unchanged") {
  Fixture& f = fixture();
  for (ProbeKind kind : kProbeKinds) {
    for (int layer = 0; layer < 4; ++layer) {
      const KLResult r = causal_kl(f.handle, f.cap, layer, kind, VectorSource::oracle_clean);
      CHECK(r.aggregate_kl <= 1e-5);
      CHECK(r.per_token_kl.size() == 10);
      REQUIRE(r.sites.size() == 1);
      CHECK(r.sites[0] == Site{layer, f.cap.position(Condition::XY, kind)});
    }
  }
  const int p = f.cap.position(Condition::XY, ProbeKind::p_last);
  std::vector<Write> w{{{2, p}, f.cap.state(Condition::XY, ProbeKind::p_last, 2)}};
  CHECK(generate_greedy(f.handle, f.cap.tokens(Condition::XY), 10, w) == f.cap.reference);
}

TEST_CASE("forced additivity gives the clean distributions") {
  Fixture& f = fixture();
  CellCapture cap = f.cap;
  for (ProbeKind kind : kProbeKinds) {
    for (int layer = 0; layer < 4; ++layer) {
      auto& xb = cap.state(Condition::XB, kind, layer);
      const auto& xy = cap.state(Condition::XY, kind, layer);
      const auto& by = cap.state(Condition::BY, kind, layer);
      const auto& bb = cap.state(Condition::BB, kind, layer);
      for (std::size_t i = 0; i < xb.size(); ++i) xb[i] = xy[i] - by[i] + bb[i];
      const KLResult r = causal_kl(f.handle, cap, layer, kind, VectorSource::additive);
      CHECK(r.aggregate_kl <= 1e-5);
    }
  }
}

TEST_CASE("real additive substitution moves the distribution") {
  Fixture& f = fixture();
  const KLResult r = causal_kl(f.handle, f.cap, 3, ProbeKind::p_last, VectorSource::additive);
  CHECK(r.aggregate_kl > 0.0);
  for (double k : r.per_token_kl) CHECK(k >= 0.0);
  const double mean = std::accumulate(r.per_token_kl.begin(), r.per_token_kl.end(), 0.0) / 10.0;
  CHECK(r.aggregate_kl == doctest::Approx(mean));
}

TEST_CASE("remove_x and add-back") {
  Fixture& f = fixture();
  const int layer = 2;
  const auto removed = *substitution_vector(f.cap, ProbeKind::p_last, layer, VectorSource::remove_x);
  const DecompositionRecord rec = decompose_at(f.cap, ProbeKind::p_last, layer);
  const auto& xy = f.cap.state(Condition::XY, ProbeKind::p_last, layer);
  std::vector<float> restored(removed.size());
  for (std::size_t i = 0; i < removed.size(); ++i) {
    CHECK(static_cast<double>(removed[i]) ==
          static_cast<double>(static_cast<float>(rec.h_xy[i] - rec.delta_x[i])));
    restored[i] = static_cast<float>(rec.h_xy[i] - rec.delta_x[i] + rec.delta_x[i]);
  }
  CHECK(restored == xy);
  const int p = f.cap.position(Condition::XY, ProbeKind::p_last);
  std::vector<Write> w{{{layer, p}, restored}};
  CHECK(generate_greedy(f.handle, f.cap.tokens(Condition::XY), 10, w) == f.cap.reference);
}

TEST_CASE("host injection") {
  Fixture& f = fixture();
  const KLResult base = host_injection(f.handle, f.cap, VectorSource::none, {});
  CHECK(base.sites.empty());
  CHECK(base.reference == f.cap.reference);
  CHECK(base.aggregate_kl > 0.0);
  const int host_last = f.cap.position(Condition::BY, ProbeKind::p_last);
  const KLResult multi = host_injection(f.handle, f.cap, VectorSource::additive, {1, 2, 3});
  REQUIRE(multi.sites.size() == 3);
  CHECK(multi.sites[0] == Site{1, host_last});
  CHECK(multi.sites[2] == Site{3, host_last});
  CHECK_THROWS_AS(host_injection(f.handle, f.cap, VectorSource::remove_x, {2}), InvalidArgument);
  CHECK_THROWS_AS(host_injection(f.handle, f.cap, VectorSource::additive, {2, 1}), InvalidArgument);
  CHECK_THROWS_AS(host_injection(f.handle, f.cap, VectorSource::additive, {}), InvalidArgument);

  // The oracle write at the last block output fixes the final-layer state at
  // p_last, so g1's distribution matches the clean one exactly.
  const KLResult oracle_last = host_injection(f.handle, f.cap, VectorSource::oracle_clean, {3});
  CHECK(oracle_last.per_token_kl[0] <= 1e-9);
}

TEST_CASE("sweep cardinality and order") {
  Fixture& f = fixture();
  const std::vector<PromptCell> cells{f.cell, build_cell(short_grid(), "marx", "ubi")};
  const auto rows = sweep(f.handle, cells, {0, 3}, {kProbeKinds.begin(), kProbeKinds.end()});
  REQUIRE(rows.size() == 2 * 2 * 3);
  CHECK(rows[0].persona_id == "yoda");
  CHECK(rows[6].persona_id == "marx");
  for (const auto& r : rows) {
    CHECK(r.error.empty());
    REQUIRE(r.kl);
    REQUIRE(r.geometry);
  }
  CHECK_THROWS_AS(sweep(f.handle, cells, {4}, {ProbeKind::p_last}), InvalidArgument);
  CHECK_THROWS_AS(sweep(f.handle, cells, {}, {ProbeKind::p_last}), InvalidArgument);
}

TEST_CASE("label parsing") {
  CHECK(parse_probe_kind("g2") == ProbeKind::g2);
  CHECK(parse_vector_source("oracle_clean") == VectorSource::oracle_clean);
  CHECK(parse_kl_direction("intervened_to_clean") == KlDirection::intervened_to_clean);
  CHECK_THROWS_AS(parse_probe_kind("g3"), ConfigError);
  CHECK_THROWS_AS(parse_kl_direction("sideways"), ConfigError);
}
