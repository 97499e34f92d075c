#include <doctest.h>

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/normal.hpp>

#include "fixtures.hpp"
#include "permanence/error.hpp"
#include "permanence/metrics.hpp"
#include "permanence/synth.hpp"

using namespace permanence;
using fixtures::scored;

namespace {

std::vector<ComparisonRecord> rows(PairKind kind, const std::string& m, const std::vector<double>& scores) {
  std::vector<ComparisonRecord> out;
  for (const double s : scores) out.push_back(scored(kind, m, s));
  return out;
}

}  // namespace

TEST_CASE("decide boundary semantics") {
  const auto sim = fixtures::similarity();
  const auto dist = fixtures::distance();
  CHECK(decide(34, 34, sim) == Decision::Match);
  CHECK(decide(33.99, 34, sim) == Decision::NonMatch);
  CHECK(decide(0.43, 0.42, dist) == Decision::NonMatch);
  CHECK(decide(0.42, 0.42, dist) == Decision::Match);
}

TEST_CASE("wilson interval examples") {
  const auto a = wilson_interval(0, 100, 0.95);
  CHECK(a.low == 0.0);
  CHECK(a.high == doctest::Approx(0.0370).epsilon(0.002));
  const auto b = wilson_interval(8, 330, 0.95);
  CHECK(b.low < 8.0 / 330);
  CHECK(b.high > 8.0 / 330);
  CHECK(wilson_interval(50, 50, 0.95).high == 1.0);
  CHECK_THROWS_AS(wilson_interval(5, 4), Error);
  CHECK_THROWS_AS(wilson_interval(0, 0), Error);
  CHECK_THROWS_AS(wilson_interval(1, 4, 1.0), Error);
}

TEST_CASE("wilson interval contains k/n exhaustively") {
  for (std::size_t n = 1; n <= 200; ++n) {
    for (std::size_t k = 0; k <= n; ++k) {
      const auto i = wilson_interval(k, n, 0.95);
      const double p = static_cast<double>(k) / static_cast<double>(n);
      REQUIRE(i.low <= p);
      REQUIRE(i.high >= p);
      REQUIRE(i.low >= 0.0);
      REQUIRE(i.high <= 1.0);
    }
  }
}

TEST_CASE("rule of three") {
  CHECK(rule_of_three(1000) == 0.003);
  CHECK(rule_of_three(3) == 1.0);
  CHECK(rule_of_three(300) == 0.01);
  CHECK_THROWS_AS(rule_of_three(0), Error);
}

TEST_CASE("interval binning rounds half away from zero") {
  CHECK(interval_bin(45) == 48);
  CHECK(interval_bin(44) == 42);
  CHECK(interval_bin(3) == 6);
  CHECK(interval_bin(2) == 0);
  for (int g = 0; g < 200; ++g) {
    CHECK(interval_bin(g) == static_cast<int>(std::round(g / 6.0)) * 6);
  }
}

TEST_CASE("fnmr by interval") {
  const auto sim = fixtures::similarity("m");
  std::vector<ComparisonRecord> g;
  for (int i = 0; i < 100; ++i) g.push_back(scored(PairKind::Genuine, "m", 500.0, 6 + 6 * (i % 3)));
  for (const auto& b : fnmr_by_interval(g, sim, 34)) {
    CHECK(b.fnmr == 0.0);
    CHECK(b.ci_method == CiMethod::RuleOfThree);
    CHECK(b.ci_high == doctest::Approx(3.0 / b.n_genuine));
  }

  std::vector<ComparisonRecord> h;
  for (int i = 0; i < 330; ++i) h.push_back(scored(PairKind::Genuine, "m", i < 8 ? 10.0 : 500.0, 45));
  const auto bins = fnmr_by_interval(h, sim, 34);
  REQUIRE(bins.size() == 1);
  CHECK(bins[0].interval_months == 48);
  CHECK(bins[0].n_false_nonmatch == 8);
  CHECK(bins[0].fnmr == doctest::Approx(0.02424).epsilon(1e-3));
  CHECK(bins[0].ci_method == CiMethod::Wilson);
  CHECK(bins[0].ci_low <= bins[0].fnmr);
  CHECK(bins[0].fnmr <= bins[0].ci_high);
  CHECK(bins[0].fnmr == fnmr_at_threshold(h, sim, 34));
  CHECK(bins[0].fnmr == doctest::Approx(1.0 - 322.0 / 330));
}

TEST_CASE("fmr at threshold") {
  const auto sim = fixtures::similarity("m");
  CHECK(fmr_at_threshold(rows(PairKind::Impostor, "m", {1, 2, 3}), sim, 34) == 0.0);
  std::vector<double> s(138190, 5.0);
  std::fill(s.begin(), s.begin() + 85, 100.0);
  CHECK(fmr_at_threshold(rows(PairKind::Impostor, "m", s), sim, 34) == doctest::Approx(0.000615).epsilon(1e-3));
  std::fill(s.begin(), s.begin() + 97, 100.0);
  CHECK(fmr_at_threshold(rows(PairKind::Impostor, "m", s), sim, 34) == doctest::Approx(0.000702).epsilon(1e-3));
  CHECK_THROWS_AS(fmr_at_threshold({}, sim, 34), Error);
}

TEST_CASE("calibration") {
  const auto sim = fixtures::similarity("m", -1e9, 1e9);
  SUBCASE("gaussian quantile") {
    const auto [g, i] = generate_score_populations(1000000, ScoreDistribution::normal(50, 5),
                                                   ScoreDistribution::normal(20, 5), 17);
    const auto c = calibrate_threshold(g, i, sim, 0.001);
    CHECK(c.achieved_fmr <= 0.001);
    CHECK(c.threshold == doctest::Approx(20 + 3.090 * 5).epsilon(0.01));

    // Reflection: the distance matcher on negated scores picks the negated threshold.
    std::vector<double> ng(g.size()), ni(i.size());
    std::transform(g.begin(), g.end(), ng.begin(), [](double v) { return -v; });
    std::transform(i.begin(), i.end(), ni.begin(), [](double v) { return -v; });
    MatcherProfile dist{"m", Orientation::LowerIsBetter, -1e9, 1e9, 0};
    const auto r = calibrate_threshold(ng, ni, dist, 0.001);
    CHECK(r.threshold == -c.threshold);
    CHECK(r.achieved_fmr == c.achieved_fmr);
    CHECK(r.achieved_fnmr == c.achieved_fnmr);
  }
  SUBCASE("separated") {
    const auto c = calibrate_threshold(std::vector<double>{10, 11, 12}, std::vector<double>{1, 2, 3}, sim, 0.001);
    CHECK(c.achieved_fmr == 0.0);
    CHECK(c.achieved_fnmr == 0.0);
  }
  SUBCASE("infeasible") {
    try {
      calibrate_threshold(std::vector<double>{1, 2}, std::vector<double>{5, 6}, sim, 0.0);
      FAIL("expected error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::CalibrationInfeasible);
    }
  }
}

TEST_CASE("det curve examples") {
  const auto sim = fixtures::similarity("m", -1e9, 1e9);
  const std::vector<double> same{1, 2, 3, 4, 5, 6};
  CHECK(det_curve(same, same, sim).eer == doctest::Approx(0.5));
  const auto d = det_curve(std::vector<double>{10, 11}, std::vector<double>{1, 2}, sim);
  CHECK(d.eer == 0.0);
  CHECK(d.auc == 1.0);
  const auto [g, i] =
      generate_score_populations(20000, ScoreDistribution::uniform(2, 3), ScoreDistribution::uniform(0, 1), 3);
  CHECK(det_curve(g, i, sim).eer == 0.0);
}

TEST_CASE("det curve monotone and EER matches brute force") {
  const auto sim = fixtures::similarity("m", -1e9, 1e9);
  const auto dist = MatcherProfile{"m", Orientation::LowerIsBetter, -1e9, 1e9, 0};
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 10 + rng.below(300);
    std::vector<double> g(n), i(n + rng.below(50));
    for (auto& v : g) v = std::round(rng.normal(1.0, 1.0) * 10) / 10;
    for (auto& v : i) v = std::round(rng.normal(0.0, 1.0) * 10) / 10;
    for (const auto& profile : {sim, dist}) {
      const auto d = det_curve(g, i, profile);
      for (std::size_t k = 1; k < d.points.size(); ++k) {
        REQUIRE(d.points[k].fmr <= d.points[k - 1].fmr);
        REQUIRE(d.points[k].fnmr >= d.points[k - 1].fnmr);
      }
      // Brute force over observed thresholds: the EER lies within the bracketing step.
      std::vector<double> t(g);
      t.insert(t.end(), i.begin(), i.end());
      std::sort(t.begin(), t.end());
      t.erase(std::unique(t.begin(), t.end()), t.end());
      if (profile.orientation == Orientation::LowerIsBetter) std::reverse(t.begin(), t.end());
      std::vector<std::pair<double, double>> rates;
      for (const double th : t) {
        double fa = 0, fr = 0;
        for (const double v : i) fa += decide(v, th, profile) == Decision::Match;
        for (const double v : g) fr += decide(v, th, profile) == Decision::NonMatch;
        rates.emplace_back(fa / i.size(), fr / g.size());
      }
      bool bracketed = false;
      for (std::size_t k = 0; k + 1 < rates.size(); ++k) {
        const auto [f0, r0] = rates[k];
        const auto [f1, r1] = rates[k + 1];
        if ((f0 - r0) * (f1 - r1) <= 0) {
          const double lo = std::min({f0, r0, f1, r1}), hi = std::max({f0, r0, f1, r1});
          if (d.eer >= lo - 1e-12 && d.eer <= hi + 1e-12) bracketed = true;
        }
      }
      CHECK(bracketed);
      CHECK(d.eer >= 0.0);
      CHECK(d.auc >= 0.0);
      CHECK(d.auc <= 1.0);
    }
  }
}

TEST_CASE("fusion arithmetic") {
  ComparisonTable t;
  t.matchers = {"a", "b"};
  const auto a = fixtures::similarity("a");
  const auto b = fixtures::distance("b");
  for (int k = 0; k < 138190; ++k) {
    ComparisonRecord r;
    r.kind = PairKind::Impostor;
    const bool acc_a = k < 82 || (k >= 82 && k < 85);
    const bool acc_b = (k >= 82 && k < 85) || (k >= 85 && k < 177);
    r.scores["a"] = acc_a ? 100.0 : 10.0;
    r.scores["b"] = acc_b ? 0.3 : 0.48;
    t.rows.push_back(r);
  }
  const auto f = fuse_and_rule(t, a, 34, b, 0.42);
  CHECK(f.a_only == 82);
  CHECK(f.b_only == 92);
  CHECK(f.both == 3);
  CHECK(f.a_only + f.b_only + f.both == 177);
  CHECK(f.fused_fmr == doctest::Approx(2.17e-5).epsilon(0.01));
  CHECK(f.fused_fmr <= std::min(f.fmr_a, f.fmr_b));
  const auto strict = fuse_and_rule(t, a, 3000, b, 0.0);
  CHECK(strict.fused_fmr == 0.0);

  t.rows[0].scores.erase("b");
  CHECK_THROWS_AS(fuse_and_rule(t, a, 34, b, 0.42), Error);
}

TEST_CASE("fusion bounds on random fixtures") {
  Rng rng(4);
  const auto a = fixtures::similarity("a", 0, 1, 0.5);
  const auto b = fixtures::distance("b");
  for (int trial = 0; trial < 100; ++trial) {
    ComparisonTable t;
    for (int k = 0; k < 200; ++k) {
      ComparisonRecord r;
      r.kind = k % 3 ? PairKind::Impostor : PairKind::Genuine;
      r.scores["a"] = rng.uniform();
      r.scores["b"] = rng.uniform();
      t.rows.push_back(r);
    }
    const auto f = fuse_and_rule(t, a, rng.uniform(), b, rng.uniform());
    CHECK(f.fused_fmr <= std::min(f.fmr_a, f.fmr_b));
    CHECK(f.fused_fnmr >= std::max(f.fnmr_a, f.fnmr_b));
  }
}

TEST_CASE("failure analysis") {
  const auto a = fixtures::similarity("a");
  const auto b = fixtures::distance("b");
  std::vector<ComparisonRecord> g;
  for (int s = 0; s < 276; ++s) {
    for (int k = 0; k < 5; ++k) {
      ComparisonRecord r;
      r.kind = PairKind::Genuine;
      r.gallery_subject = r.probe_subject = "S" + std::to_string(s);
      const bool fail = s < 26 && k == 0;
      r.scores["a"] = fail && s % 2 ? 10.0 : 200.0 + k;
      r.scores["b"] = fail && s % 2 == 0 ? 0.45 : 0.3;
      r.cov.q_gallery = fail ? 30.0 : 80.0;
      r.cov.q_probe = 85.0;
      r.dc = 0.9 + 0.01 * k;
      g.push_back(r);
    }
  }
  const auto rep = failure_analysis(g, a, 34, b, 0.42, 45);
  CHECK(rep.n_failure_subjects == 26);
  CHECK(rep.failure_subject_fraction == doctest::Approx(0.094).epsilon(0.01));
  for (const auto& c : rep.categories) {
    if (c.n_pairs == 0) {
      CHECK(std::isnan(c.captured_below_cut));
      for (const auto& [k, r] : c.correlations) CHECK_FALSE(r.has_value());
    } else {
      CHECK(c.captured_below_cut == 1.0);
    }
  }
  CHECK_FALSE(pearson({1, 1, 1}, {1, 2, 3}).has_value());
  CHECK(*pearson({1, 2, 3}, {2, 4, 6}) == doctest::Approx(1.0));
}

TEST_CASE("gaussian ROC oracle") {
  const auto sim = fixtures::similarity("m", -1e9, 1e9);
  const auto [g, i] =
      generate_score_populations(100000, ScoreDistribution::normal(1, 1), ScoreDistribution::normal(0, 1), 21);
  const auto d = det_curve(g, i, sim);
  boost::math::normal_distribution<> n01;
  CHECK(std::abs(d.eer - boost::math::cdf(n01, -0.5)) < 0.01);
  CHECK(std::abs(d.auc - boost::math::cdf(n01, 1.0 / std::sqrt(2.0))) < 0.005);
}
