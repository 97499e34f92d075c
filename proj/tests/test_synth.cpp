#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "permanence/core_model.hpp"
#include "permanence/error.hpp"
#include "permanence/lmm.hpp"
#include "permanence/metrics.hpp"
#include "permanence/synth.hpp"

using namespace permanence;

namespace {

SynthConfig small_config() {
  SynthConfig c = study_shaped_config();
  c.n_subjects = 60;
  c.max_impostor_probes = 2;
  return c;
}

}  // namespace

TEST_CASE("study-shaped config gives a genuine count near 45,927") {
  const auto out = generate_longitudinal(study_shaped_config());
  const double n = static_cast<double>(out.truth.n_genuine);
  CHECK(std::abs(n - 45927.0) / 45927.0 < 0.20);
  CHECK(study_session_schedule().size() == 14);
  CHECK(validate_dataset(out.captures).clean());
  for (const auto& m : out.truth.matchers) CHECK(m.clamped_genuine == 0);
}

TEST_CASE("same seed gives identical output") {
  const auto a = generate_longitudinal(small_config());
  const auto b = generate_longitudinal(small_config());
  CHECK(a.captures == b.captures);
  CHECK(a.scores == b.scores);
  CHECK(a.pairs.rows == b.pairs.rows);
  auto c = small_config();
  c.seed = 2;
  CHECK(generate_longitudinal(c).scores != a.scores);
}

TEST_CASE("pairs carry every score and match the protocol") {
  const auto out = generate_longitudinal(small_config());
  CHECK(out.pairs.incomplete.empty());
  CHECK(out.scores.size() == out.pairs.rows.size() * out.truth.matchers.size());
  for (const auto& r : out.pairs.rows) {
    if (r.kind == PairKind::Genuine) CHECK(r.gap_months > 0);
    else CHECK(r.gallery_subject != r.probe_subject);
  }
}

TEST_CASE("noiseless generator is linear in covariates") {
  auto c = small_config();
  c.matchers.resize(1);
  auto& m = c.matchers[0];
  m.profile.score_min = -1e6;
  m.profile.score_max = 1e6;
  m.sigma_true.setZero();
  m.sigma2_true = 0.0;
  const auto out = generate_longitudinal(c);
  std::vector<ComparisonRecord> g;
  for (const auto& r : out.pairs.rows)
    if (r.kind == PairKind::Genuine) g.push_back(r);
  ModelSpec s;
  s.outcome = m.profile.name;
  s.random = RandomStructure::InterceptOnly;
  s.fixed_terms = default_quality_terms();
  const auto d = build_design(g, s);
  const Eigen::VectorXd beta = d.X.colPivHouseholderQr().solve(d.y);
  for (std::size_t k = 0; k < d.column_names.size(); ++k) {
    const auto it = m.beta.find(d.column_names[k]);
    const double truth = it == m.beta.end() ? 0.0 : it->second;
    CHECK(std::abs(beta(static_cast<Eigen::Index>(k)) - truth) < 1e-8 * std::max(1.0, std::abs(truth)));
  }
}

TEST_CASE("random effects covariance recovered over many subjects") {
  auto c = small_config();
  c.n_subjects = 20000;
  c.max_impostor_probes = 0;
  c.session_months = {0, 6};
  c.enrollment_sessions = 1;
  c.images_per_eye_per_session = 1;
  c.matchers.resize(1);
  c.matchers[0].sigma_true << 4.0, 0.3, 0.3, 0.25;
  const auto out = generate_longitudinal(c);
  const auto& e = out.truth.matchers[0].effects;
  Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
  for (const auto& [u0, u1] : e) {
    Eigen::Vector2d u(u0, u1);
    cov += u * u.transpose();
  }
  cov /= static_cast<double>(e.size());
  const Eigen::Matrix2d& truth = c.matchers[0].sigma_true;
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(std::abs(cov(i, j) - truth(i, j)) < 0.05 * std::abs(truth(i, j)));
}

TEST_CASE("score populations") {
  const auto [g, i] =
      generate_score_populations(50000, ScoreDistribution::normal(0, 1), ScoreDistribution::normal(0, 1), 1);
  const MatcherProfile p{"m", Orientation::HigherIsBetter, -1e9, 1e9, 0};
  CHECK(std::abs(det_curve(g, i, p).eer - 0.5) < 0.01);
  const auto again = generate_score_populations(50000, ScoreDistribution::normal(0, 1),
                                                ScoreDistribution::normal(0, 1), 1);
  CHECK(again.first == g);
  CHECK_THROWS_AS(generate_score_populations(10, ScoreDistribution::normal(0, -1), ScoreDistribution::normal(0, 1), 1),
                  Error);
  CHECK_THROWS_AS(generate_score_populations(0, ScoreDistribution::normal(0, 1), ScoreDistribution::normal(0, 1), 1),
                  Error);
}

TEST_CASE("config validation and JSON round trip") {
  auto c = study_shaped_config();
  const auto back = synth_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  auto bad = c;
  bad.session_months = {0, 6, 6};
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.attrition_rate = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.matchers[0].sigma_true << 1.0, 2.0, 2.0, 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.quality = {80, 10, 90, 50};
  CHECK_THROWS_AS(bad.validate(), Error);
  auto j = to_json(c);
  j["unknown"] = 1;
  CHECK_THROWS_AS(synth_config_from_json(j), Error);
}
