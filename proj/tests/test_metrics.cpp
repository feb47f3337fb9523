#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <set>

#include "morphquad/metrics.hpp"
#include "scoresets.hpp"

using namespace morphquad;

namespace {

MorphScoreSet worked_example() {
  MorphScoreSet set;
  set.morphs.push_back({"m", {{IdentityId{"X"}, {"x0", "x1"}, {0.8, 0.4}}, {IdentityId{"Y"}, {"y0"}, {0.6}}}});
  return set;
}

SampleRecord bona(const std::string& id, const std::string& ident, Modality mod) {
  return {id, IdentityId{ident}, mod, SampleKind::bona_fide, {}, "images/" + id + ".mqt"};
}

SampleRecord morph(const std::string& id, const std::string& x, const std::string& y) {
  return {id, std::nullopt, Modality::enrollment, SampleKind::morph, {IdentityId{x}, IdentityId{y}}, "images/" + id};
}

}  // namespace

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine({0.3, -2.0}, {0.3, -2.0}), 1.0);
  EXPECT_EQ(cosine({1, 0}, {0, 1}), 0.0);
  EXPECT_NEAR(cosine({1, 0}, {1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}), std::sqrt(2.0) / 2, 1e-15);
  EXPECT_THROW(cosine({0, 0}, {1, 0}), DimensionError);
  EXPECT_THROW(cosine({1, 0}, {1, 0, 0}), DimensionError);
}

TEST(ErrorRates, Examples) {
  const std::vector<double> g{0.9, 0.8, 0.7, 0.6};
  EXPECT_EQ(fnmr(g, 0.65), 0.25);
  EXPECT_EQ(fnmr(g, 0.1), 0.0);
  EXPECT_EQ(fnmr(g, 0.6), 0.25);  // ties count as rejections
  const std::vector<double> imp{0.1, 0.2};
  EXPECT_EQ(fmr(imp, 0.15), 0.5);
  EXPECT_EQ(fmr(imp, 0.2), 0.0);
  EXPECT_THROW(fnmr(std::vector<double>{}, 0.5), ValidationError);
  EXPECT_THROW(fmr(std::vector<double>{}, 0.5), ValidationError);
}

TEST(ErrorRates, MonotoneInThreshold) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  std::vector<double> s(200);
  for (auto& v : s) v = d(rng);
  double pf = -1, pm = 2;
  for (double t = -3; t <= 3; t += 0.05) {
    EXPECT_GE(fnmr(s, t), pf);
    EXPECT_LE(fmr(s, t), pm);
    pf = fnmr(s, t);
    pm = fmr(s, t);
  }
}

TEST(Threshold, HundredScoresRejectExactlyOne) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> g(100);
  for (auto& v : g) v = u(rng);
  const auto r = solve_threshold(g, 0.01);
  auto sorted = g;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(r.tau, sorted[0]);
  EXPECT_EQ(std::count_if(g.begin(), g.end(), [&](double s) { return s <= r.tau; }), 1);
  EXPECT_EQ(r.achieved_fnmr, 0.01);
  EXPECT_FALSE(r.undersampled);
}

TEST(Threshold, TiesAndBoundaries) {
  const std::vector<double> same(50, 0.7);
  const auto r = solve_threshold(same, 0.01);
  EXPECT_LT(r.tau, 0.7);
  EXPECT_EQ(r.achieved_fnmr, 0.0);
  EXPECT_TRUE(r.undersampled);

  const std::vector<double> g{0.2, 0.5, 0.5, 0.9};
  // Rejecting either 0.5 rejects both, so targets below 3/4 stop at 0.2.
  EXPECT_EQ(solve_threshold(g, 0.25).tau, 0.2);
  EXPECT_EQ(solve_threshold(g, 0.5).tau, 0.2);
  EXPECT_EQ(solve_threshold(g, 0.75).tau, 0.5);
  EXPECT_GE(solve_threshold(g, 1.0).tau, 0.9);
  EXPECT_THROW(solve_threshold(std::vector<double>{}, 0.01), ValidationError);
}

TEST(Threshold, LargestAdmissibleValueOnRandomSets) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> len(1, 400), grid(0, 30);
  for (int t = 0; t < 300; ++t) {
    std::vector<double> g(len(rng));
    for (auto& v : g) v = grid(rng) / 30.0;
    const double target = std::uniform_real_distribution<double>(0.001, 0.3)(rng);
    const auto r = solve_threshold(g, target);
    EXPECT_LE(fnmr(g, r.tau), target);
    EXPECT_EQ(r.achieved_fnmr, fnmr(g, r.tau));
    // Any larger candidate score would exceed the target.
    for (double s : g)
      if (s > r.tau) EXPECT_GT(fnmr(g, s), target);
  }
}

TEST(Mmpmr, WorkedExample) {
  const auto set = worked_example();
  EXPECT_EQ(minmax_mmpmr(set, 0.5), 1.0);
  EXPECT_EQ(prodavg_mmpmr(set, 0.5), 0.5);
  const auto b = brute_force_mmpmr(set, 0.5);
  EXPECT_EQ(b.minmax, 1.0);
  EXPECT_EQ(b.prodavg, 0.5);
}

TEST(Mmpmr, Boundaries) {
  const auto set = worked_example();
  EXPECT_EQ(minmax_mmpmr(set, 0.8), 0.0);
  EXPECT_EQ(prodavg_mmpmr(set, 0.8), 0.0);
  EXPECT_EQ(minmax_mmpmr(set, 0.39), 1.0);
  EXPECT_EQ(prodavg_mmpmr(set, 0.39), 1.0);
  // Y's single score is rejected: the product vanishes.
  EXPECT_EQ(prodavg_mmpmr(set, 0.6), 0.0);
  MorphScoreSet single;
  single.morphs.push_back({"m", {{IdentityId{"X"}, {"x"}, {0.3}}}});
  for (double tau : {0.2, 0.3, 0.4}) {
    EXPECT_EQ(minmax_mmpmr(single, tau), tau < 0.3 ? 1.0 : 0.0);
    EXPECT_EQ(prodavg_mmpmr(single, tau), tau < 0.3 ? 1.0 : 0.0);
  }
  EXPECT_THROW(minmax_mmpmr(MorphScoreSet{}, 0.5), ValidationError);
}

TEST(Mmpmr, DuplicatedMorphLeavesMetricsUnchanged) {
  auto set = worked_example();
  set.morphs.push_back({"n", {{IdentityId{"Z"}, {"z"}, {0.1}}, {IdentityId{"W"}, {"w"}, {0.9}}}});
  const double mm = minmax_mmpmr(set, 0.5), pa = prodavg_mmpmr(set, 0.5);
  auto doubled = set;
  doubled.morphs.insert(doubled.morphs.end(), set.morphs.begin(), set.morphs.end());
  EXPECT_EQ(minmax_mmpmr(doubled, 0.5), mm);
  EXPECT_EQ(prodavg_mmpmr(doubled, 0.5), pa);
}

TEST(Mmpmr, FastMatchesBruteForce) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 300; ++t) {
    const auto set = testutil::random_scoreset(rng, 50, 5);
    for (int k = -21; k <= 21; ++k) {
      const double tau = k / 20.0;
      const auto b = brute_force_mmpmr(set, tau);
      EXPECT_EQ(minmax_mmpmr(set, tau), b.minmax);
      EXPECT_EQ(prodavg_mmpmr(set, tau), b.prodavg);
    }
  }
}

TEST(Mmpmr, DominanceCollapseAndMonotonicity) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 300; ++t) {
    const auto set = testutil::random_scoreset(rng, 20, 5);
    const auto single = testutil::random_scoreset(rng, 20, 5, true);
    const MmpmrEvaluator e(set), s(single);
    double pm = 2, pp = 2;
    for (int k = -22; k <= 22; ++k) {
      const double tau = k / 20.0 + 0.01 * (k % 3);
      EXPECT_LE(e.prodavg(tau), e.minmax(tau));
      EXPECT_EQ(s.prodavg(tau), s.minmax(tau));
      EXPECT_LE(e.minmax(tau), pm);
      EXPECT_LE(e.prodavg(tau), pp);
      pm = e.minmax(tau);
      pp = e.prodavg(tau);
      EXPECT_GE(pp, 0.0);
      EXPECT_LE(pm, 1.0);
    }
  }
}

TEST(Curve, SingleGridPointMatchesScalarOps) {
  std::mt19937_64 rng(6);
  const auto set = testutil::random_scoreset(rng, 30, 4);
  std::vector<double> genuine(300);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& g : genuine) g = u(rng);
  const auto rows = mmpmr_curve(set, genuine, {0.01});
  ASSERT_EQ(rows.size(), 1u);
  const double tau = solve_threshold(genuine, 0.01).tau;
  EXPECT_EQ(rows[0].tau, tau);
  EXPECT_EQ(rows[0].minmax, minmax_mmpmr(set, tau));
  EXPECT_EQ(rows[0].prodavg, prodavg_mmpmr(set, tau));
}

TEST(Curve, RowsSortedAndNonIncreasing) {
  std::mt19937_64 rng(7);
  const auto set = testutil::random_scoreset(rng, 40, 5);
  std::vector<double> genuine(500);
  std::normal_distribution<double> d(0.5, 0.2);
  for (auto& g : genuine) g = d(rng);
  const auto rows = mmpmr_curve(set, genuine, {0.2, 0.01, 0.05, 0.1, 0.02});
  for (std::size_t i = 1; i < rows.size(); ++i) {
    EXPECT_GT(rows[i].fnmr, rows[i - 1].fnmr);
    EXPECT_GE(rows[i].tau, rows[i - 1].tau);
    EXPECT_LE(rows[i].minmax, rows[i - 1].minmax);
    EXPECT_LE(rows[i].prodavg, rows[i - 1].prodavg);
  }
  EXPECT_THROW(mmpmr_curve(set, genuine, {0.0}), ValidationError);
  const auto csv = curve_to_csv(rows, "abc");
  EXPECT_EQ(csv.rfind("# config_hash=abc", 0), 0u);
  EXPECT_NE(csv.find("\nfnmr,tau,minmax_mmpmr,prodavg_mmpmr\n"), std::string::npos);
}

TEST(Verification, TwoIdentitiesEnumerateAllPairs) {
  const auto m = make_manifest({bona("a_e", "A", Modality::enrollment), bona("a_r", "A", Modality::reference),
                                bona("b_e", "B", Modality::enrollment), bona("b_r", "B", Modality::reference)});
  const auto p = gen_verification_protocol(m, {});
  EXPECT_EQ(p.match_pairs.size(), 2u);
  EXPECT_EQ(p.nonmatch_pairs.size(), 2u);
  for (const auto& [e, r] : p.nonmatch_pairs) EXPECT_NE(m.find(e)->identity, m.find(r)->identity);
  EXPECT_THROW(gen_verification_protocol(make_manifest({bona("a_e", "A", Modality::enrollment)}), {}),
               ValidationError);
}

TEST(Verification, FullScaleCountsAndDeterminism) {
  // 500 identities, 4 enrollment x 1 reference: 2000 match pairs; nonmatch capped.
  std::vector<SampleRecord> recs;
  for (int i = 0; i < 500; ++i) {
    const std::string id = "id" + std::to_string(i);
    for (int e = 0; e < 4; ++e) recs.push_back(bona(id + "_e" + std::to_string(e), id, Modality::enrollment));
    recs.push_back(bona(id + "_r0", id, Modality::reference));
  }
  const auto m = make_manifest(recs);
  VerificationConfig cfg;
  cfg.seed = 3;
  const auto p = gen_verification_protocol(m, cfg);
  EXPECT_EQ(p.match_pairs.size(), 2000u);
  EXPECT_EQ(p.nonmatch_pairs.size(), 69000u);
  EXPECT_EQ(p, gen_verification_protocol(m, cfg));
  std::set<std::pair<SampleId, SampleId>> uniq(p.nonmatch_pairs.begin(), p.nonmatch_pairs.end());
  EXPECT_EQ(uniq.size(), p.nonmatch_pairs.size());
  for (const auto& [e, r] : p.nonmatch_pairs) {
    EXPECT_EQ(m.find(e)->modality, Modality::enrollment);
    EXPECT_EQ(m.find(r)->modality, Modality::reference);
    EXPECT_NE(m.find(e)->identity, m.find(r)->identity);
  }
  cfg.max_match = 100;
  EXPECT_EQ(gen_verification_protocol(m, cfg).match_pairs.size(), 100u);
}

TEST(MorphScores, CountsScoresAndExclusions) {
  const auto m = make_manifest({bona("x_e", "X", Modality::enrollment), bona("x_r0", "X", Modality::reference),
                                bona("x_r1", "X", Modality::reference), bona("y_e", "Y", Modality::enrollment),
                                bona("y_r0", "Y", Modality::reference), bona("z_e", "Z", Modality::enrollment),
                                morph("mxy", "X", "Y"), morph("mxz", "X", "Z")});
  EmbeddingStore store;
  store.dim = 2;
  store.vectors = {{"x_e", {1, 0}},   {"x_r0", {1, 0.2}}, {"x_r1", {0.5, 1}}, {"y_e", {0, 1}},
                   {"y_r0", {1, 0}}, {"z_e", {-1, 0}},   {"mxy", {1, 0}},    {"mxz", {1, 1}}};
  const auto set = collect_morph_scores(store, m);
  ASSERT_EQ(set.morphs.size(), 1u);
  EXPECT_EQ(set.excluded, std::vector<SampleId>{"mxz"});
  const auto& ms = set.morphs[0];
  ASSERT_EQ(ms.subjects.size(), 2u);
  EXPECT_EQ(ms.subjects[0].scores.size(), 2u);
  EXPECT_EQ(ms.subjects[1].scores.size(), 1u);
  EXPECT_EQ(ms.subjects[1].scores[0], 1.0);  // morph embedded exactly like the probe
  for (const auto& s : ms.subjects)
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      const auto& u = store.at("mxy");
      const auto& v = store.at(s.probe_ids[i]);
      const double direct = (u[0] * v[0] + u[1] * v[1]) / (std::hypot(u[0], u[1]) * std::hypot(v[0], v[1]));
      EXPECT_NEAR(s.scores[i], direct, 1e-15);
    }
  const auto csv = scores_to_csv(set);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "morph_id,subject,probe_id,score");
}
