#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "fixtures.hpp"
#include "permanence/error.hpp"
#include "permanence/lmm.hpp"

using namespace permanence;
using fixtures::MixedFixture;
using fixtures::simple_spec;

namespace {

// Dense marginal covariance V = Z Sigma Z' + sigma2 I over the whole design.
Eigen::MatrixXd dense_v(const Design& d, const Eigen::MatrixXd& sigma, double sigma2) {
  const auto n = d.y.size();
  Eigen::MatrixXd V = sigma2 * Eigen::MatrixXd::Identity(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (d.group[i] == d.group[j]) V(i, j) += d.Z.row(i) * sigma * d.Z.row(j).transpose();
  return V;
}

double dense_loglik(const Design& d, const Eigen::MatrixXd& sigma, double sigma2, Criterion c) {
  const Eigen::MatrixXd V = dense_v(d, sigma, sigma2);
  const Eigen::LLT<Eigen::MatrixXd> llt(V);
  const Eigen::MatrixXd VX = llt.solve(d.X);
  const Eigen::MatrixXd XVX = d.X.transpose() * VX;
  const Eigen::VectorXd beta = XVX.ldlt().solve(VX.transpose() * d.y);
  const Eigen::VectorXd r = d.y - d.X * beta;
  const double logdet_v = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  const double quad = r.dot(llt.solve(r));
  const double n = static_cast<double>(d.y.size()), p = static_cast<double>(d.X.cols());
  const double two_pi = 2.0 * std::numbers::pi;
  if (c == Criterion::ML) return -0.5 * (n * std::log(two_pi) + logdet_v + quad);
  const double logdet_x = std::log(XVX.determinant());
  return -0.5 * ((n - p) * std::log(two_pi) + logdet_v + logdet_x + quad);
}

}  // namespace

TEST_CASE("design columns") {
  MixedFixture fx;
  fx.subjects = 20;
  const auto rows = fx.rows();
  ModelSpec s;
  s.outcome = "y";
  s.apc_mode = ApcMode::GalleryAgePlusT;
  s.fixed_terms = {ContinuousTerm{"Q_gallery"}};
  const auto d = build_design(rows, s);
  CHECK(d.X.cols() == 4);
  CHECK(d.column_names == std::vector<std::string>{"Intercept", "A_gallery", "T", "Q_gallery"});
  CHECK(d.Z.cols() == 2);

  ModelSpec g = s;
  g.apc_mode.reset();
  g.fixed_terms = {enrollment_age_groups(), ContinuousTerm{"T"}};
  const auto dg = build_design(rows, g);
  CHECK(dg.X.cols() == 1 + 3 + 1);
  for (Eigen::Index i = 0; i < dg.X.rows(); ++i) CHECK(dg.X.row(i).segment(1, 3).sum() <= 1.0);

  ModelSpec ix = s;
  ix.fixed_terms = {InteractionTerm{"A_gallery", "T"}};
  const auto di = build_design(rows, ix);
  for (Eigen::Index i = 0; i < di.X.rows(); ++i) CHECK(di.X(i, 3) == di.X(i, 1) * di.X(i, 2));
}

TEST_CASE("design errors and exclusions") {
  MixedFixture fx;
  fx.subjects = 20;
  auto rows = fx.rows();
  ModelSpec s = simple_spec();
  s.fixed_terms.push_back(ContinuousTerm{"T"});
  try {
    build_design(rows, s);
    FAIL("expected rank error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RankDeficient);
    CHECK(std::string(e.what()).find("T") != std::string::npos);
  }

  ModelSpec g = simple_spec();
  auto groups = enrollment_age_groups();
  groups.levels.push_back({"20-30", 20, 30});
  g.fixed_terms = {groups};
  CHECK_THROWS_AS(build_design(rows, g), Error);

  rows[0].extra["missing"] = std::nan("");
  for (std::size_t i = 1; i < rows.size(); ++i) rows[i].extra["missing"] = 1.0 + static_cast<double>(i % 5);
  ModelSpec m = simple_spec();
  m.fixed_terms.push_back(ContinuousTerm{"missing"});
  const auto d = build_design(rows, m);
  CHECK(d.n_excluded == 1);
  CHECK(d.y.size() == static_cast<Eigen::Index>(rows.size() - 1));
}

TEST_CASE("balanced one-way ANOVA oracle") {
  MixedFixture fx;
  fx.beta_t = 0.0;
  fx.beta_q = 0.0;
  const auto rows = fx.rows();
  ModelSpec s = simple_spec();
  s.fixed_terms.clear();
  const auto d = build_design(rows, s);
  const auto fit = fit_reml(d);

  const int a = fx.subjects, n = fx.per_subject;
  std::vector<double> means(a, 0.0);
  double grand = 0.0;
  for (Eigen::Index i = 0; i < d.y.size(); ++i) {
    means[d.group[i]] += d.y(i) / n;
    grand += d.y(i) / (a * n);
  }
  double ssb = 0.0, ssw = 0.0;
  for (Eigen::Index i = 0; i < d.y.size(); ++i) ssw += std::pow(d.y(i) - means[d.group[i]], 2);
  for (const double m : means) ssb += n * std::pow(m - grand, 2);
  const double msw = ssw / (a * (n - 1));
  const double msb = ssb / (a - 1);
  const double var_u = (msb - msw) / n;
  CHECK(std::abs(fit.sigma2 - msw) / msw < 1e-6);
  CHECK(std::abs(fit.sigma(0, 0) - var_u) / var_u < 1e-6);
  CHECK(fit.converged);
}

TEST_CASE("REML and ML loglik match the dense likelihood") {
  MixedFixture fx;
  fx.subjects = 30;
  fx.per_subject = 6;
  fx.var_u1 = 0.01;
  const auto d = build_design(fx.rows(), simple_spec(RandomStructure::InterceptAndSlopeOnT));
  for (const auto c : {Criterion::REML, Criterion::ML}) {
    const auto fit = permanence::fit(d, c);
    CHECK(fit.loglik == doctest::Approx(dense_loglik(d, fit.sigma, fit.sigma2, c)).epsilon(1e-9));
    CHECK(fit.aic == doctest::Approx(2.0 * fit.n_params - 2.0 * fit.loglik).epsilon(1e-14));
    CHECK(fit.local_check_passed);
  }
}

TEST_CASE("GLS identity with frozen variance components") {
  MixedFixture fx;
  fx.subjects = 40;
  fx.per_subject = 5;
  fx.var_u1 = 0.02;
  const auto d = build_design(fx.rows(), simple_spec(RandomStructure::InterceptAndSlopeOnT));
  Eigen::Matrix2d sigma;
  sigma << 4.0, 0.05, 0.05, 0.02;
  const Eigen::VectorXd beta = gls_beta(d, sigma, 1.0);
  const Eigen::MatrixXd V = dense_v(d, sigma, 1.0);
  const Eigen::LLT<Eigen::MatrixXd> llt(V);
  const Eigen::MatrixXd VX = llt.solve(d.X);
  const Eigen::VectorXd ref = (d.X.transpose() * VX).ldlt().solve(VX.transpose() * d.y);
  CHECK((beta - ref).cwiseAbs().maxCoeff() < 1e-8 * std::max(1.0, ref.cwiseAbs().maxCoeff()));
}

TEST_CASE("row permutation invariance") {
  MixedFixture fx;
  fx.subjects = 50;
  fx.var_u1 = 0.01;
  auto rows = fx.rows();
  const auto spec = simple_spec(RandomStructure::InterceptAndSlopeOnT);
  const auto a = fit_reml(build_design(rows, spec));
  Rng rng(9);
  for (std::size_t i = rows.size() - 1; i > 0; --i) std::swap(rows[i], rows[rng.below(i + 1)]);
  const auto b = fit_reml(build_design(rows, spec));
  CHECK((a.beta - b.beta).cwiseAbs().maxCoeff() < 1e-10 * a.beta.cwiseAbs().maxCoeff());
  CHECK(std::abs(a.sigma2 - b.sigma2) < 1e-10 * a.sigma2);
  CHECK((a.sigma - b.sigma).cwiseAbs().maxCoeff() < 1e-10 * a.sigma.cwiseAbs().maxCoeff());
}

TEST_CASE("z-standardization invariance") {
  MixedFixture fx;
  fx.subjects = 60;
  fx.var_u1 = 0.01;
  const auto rows = fx.rows();
  auto spec = simple_spec(RandomStructure::InterceptAndSlopeOnT);
  const auto d_raw = build_design(rows, spec);
  const auto raw = fit_reml(d_raw);
  spec.standardize = true;
  const auto d_z = build_design(rows, spec);
  const auto z = fit_reml(d_z);
  CHECK(d_z.standardized);
  const double sd = d_z.outcome_sd;
  for (Eigen::Index k = 1; k < raw.beta.size(); ++k) {
    CHECK(std::abs(z.z(k) - raw.z(k)) < 1e-8 * std::max(1.0, std::abs(raw.z(k))));
    CHECK(std::abs(z.p(k) - raw.p(k)) < 1e-8);
    CHECK(z.beta(k) == doctest::Approx(raw.beta(k) / sd).epsilon(1e-8));
  }
}

TEST_CASE("fit errors and degenerate cases") {
  MixedFixture fx;
  fx.subjects = 1;
  fx.per_subject = 20;
  CHECK_THROWS_AS(fit_reml(build_design(fx.rows(), simple_spec())), Error);

  MixedFixture c;
  c.subjects = 10;
  auto rows = c.rows();
  for (auto& r : rows) r.scores["y"] = 3.0;
  ModelSpec s = simple_spec();
  s.fixed_terms.clear();
  try {
    fit_reml(build_design(rows, s));
    FAIL("expected degenerate error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateData);
  }

  // Nearly noiseless fixed-effects data: beta recovered, variance at the boundary.
  MixedFixture q;
  q.subjects = 30;
  q.var_u0 = 0.0;
  q.sigma = 1e-6;
  const auto fit = fit_reml(build_design(q.rows(), simple_spec(RandomStructure::InterceptAndSlopeOnT)));
  CHECK(std::abs(fit.beta(0) - q.beta0) < 1e-4);
  CHECK(std::abs(fit.beta(1) - q.beta_t) < 1e-4);
  CHECK(std::abs(fit.beta(2) - q.beta_q) < 1e-4);
  CHECK(fit.boundary);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.sigma);
  CHECK(es.eigenvalues().minCoeff() >= -1e-12);
}

TEST_CASE("likelihood ratio test") {
  MixedFixture fx;
  fx.subjects = 80;
  fx.var_u1 = 0.02;
  const auto rows = fx.rows();
  const auto full_spec = simple_spec(RandomStructure::InterceptAndSlopeOnT);
  const auto d = build_design(rows, full_spec);
  const auto reml = fit_reml(d);
  const auto same = likelihood_ratio_test(reml, reml);
  CHECK(same.chi2 == 0.0);
  CHECK(same.p == 1.0);

  const auto io = fit_reml(build_design(rows, simple_spec()));
  const auto slope = likelihood_ratio_test(io, reml);
  CHECK(slope.df == 2);
  CHECK(slope.chi2 >= 0.0);
  CHECK(slope.p < 1e-3);

  ModelSpec no_t = full_spec;
  no_t.fixed_terms = {ContinuousTerm{"Q_gallery"}};
  const auto d_no_t = build_design(rows, no_t);
  try {
    likelihood_ratio_test(fit_reml(d_no_t), reml);
    FAIL("expected not-nested");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NotNested);
  }
  const auto temporal = likelihood_ratio_test(fit_ml(d_no_t), fit_ml(d));
  CHECK(temporal.df == 1);
  CHECK(temporal.p < 1e-3);

  auto fewer = rows;
  fewer.pop_back();
  try {
    likelihood_ratio_test(fit_ml(build_design(fewer, no_t)), fit_ml(d));
    FAIL("expected row mismatch");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::RowMismatch);
  }
}

TEST_CASE("ICC by construction") {
  MixedFixture fx;
  fx.subjects = 2000;
  fx.per_subject = 8;
  fx.var_u0 = 0.65;
  fx.sigma = std::sqrt(0.35);
  const auto fit = fit_reml(build_design(fx.rows(), simple_spec()));
  CHECK(std::abs(icc(fit) - 0.65) < 0.02);

  FittedModel zero = fit;
  zero.sigma(0, 0) = 0.0;
  CHECK(icc(zero) == 0.0);
  FittedModel one = fit;
  one.sigma2 = 1e-12;
  CHECK(icc(one) == doctest::Approx(1.0));
  MixedFixture sl;
  sl.subjects = 30;
  sl.var_u1 = 0.01;
  CHECK_THROWS_AS(icc(fit_reml(build_design(sl.rows(), simple_spec(RandomStructure::InterceptAndSlopeOnT)))),
                  Error);
}

TEST_CASE("marginal R^2") {
  MixedFixture fx;
  fx.subjects = 300;
  fx.per_subject = 10;
  const auto d = build_design(fx.rows(), simple_spec());
  auto fit = fit_reml(d);
  FittedModel zero = fit;
  zero.beta.setZero();
  CHECK(marginal_r2(zero, d.X) == 0.0);

  MixedFixture nf;
  nf.subjects = 50;
  nf.var_u0 = 1e-10;
  nf.sigma = 1e-4;
  const auto dn = build_design(nf.rows(), simple_spec());
  CHECK(marginal_r2(fit_reml(dn), dn.X) > 0.999);

  // Fixed-effect variance 0.75 of the total: var(Xb) = 3 with var(u0) + sigma2 = 1.
  MixedFixture t;
  t.subjects = 600;
  t.beta_t = 0.0;
  t.beta_q = std::sqrt(3.0 / (400.0 / 12.0));
  t.var_u0 = 0.5;
  t.sigma = std::sqrt(0.5);
  const auto dt = build_design(t.rows(), simple_spec());
  CHECK(std::abs(marginal_r2(fit_reml(dt), dt.X) - 0.75) < 0.05);
}

TEST_CASE("VIF") {
  Eigen::MatrixXd orth(8, 3);
  orth << 1, 1, 1, -1, 1, 1, 1, -1, 1, -1, -1, 1, 1, 1, -1, -1, 1, -1, 1, -1, -1, -1, -1, -1;
  for (const auto c : {VifCentering::Uncentered, VifCentering::Centered}) {
    const auto v = vif(orth, c);
    for (Eigen::Index j = 0; j < 3; ++j) CHECK(v(j) == doctest::Approx(1.0));
  }
  Eigen::MatrixXd dup(6, 3);
  dup << 1, 1, 2, 2, 2, 1, 3, 3, 5, 4, 4, 2, 5, 5, 1, 6, 6, 7;
  const auto v = vif(dup);
  CHECK(std::isinf(v(0)));
  CHECK(std::isinf(v(1)));
  CHECK(std::isfinite(v(2)));
  CHECK_THROWS_AS(vif(Eigen::MatrixXd::Ones(5, 1)), Error);
}

TEST_CASE("age-group offsets recovered within 3 SE") {
  const double offsets[] = {0.0, 3.0, 5.0, 6.0};
  Rng rng(12);
  std::vector<ComparisonRecord> rows;
  for (int s = 0; s < 400; ++s) {
    const int age = 4 + s % 9;
    const int group = age <= 5 ? 0 : age <= 7 ? 1 : age <= 9 ? 2 : 3;
    const double u0 = rng.normal(0.0, 2.0);
    for (int j = 0; j < 8; ++j) {
      ComparisonRecord r;
      r.gallery_subject = r.probe_subject = "S" + std::to_string(s);
      r.gallery_age = age;
      r.gap_months = 6 * (j + 1);
      r.cov.q_gallery = 60 + 30 * rng.uniform();
      r.scores["y"] = 10.0 + offsets[group] - 0.05 * r.gap_months + 0.5 * r.cov.q_gallery + u0 + rng.normal(0.0, 1.0);
      rows.push_back(r);
    }
  }
  ModelSpec s = simple_spec();
  s.fixed_terms.insert(s.fixed_terms.begin(), enrollment_age_groups());
  const auto fit = fit_reml(build_design(rows, s));
  const char* names[] = {"age_group[6-7]", "age_group[8-9]", "age_group[10-12]"};
  for (int g = 1; g < 4; ++g) {
    const auto k = static_cast<Eigen::Index>(*fit.index_of(names[g - 1]));
    CHECK(std::abs(fit.beta(k) - offsets[g]) < 3.0 * fit.se(k));
  }
}

TEST_CASE("APC comparison bookkeeping") {
  MixedFixture fx;
  fx.subjects = 80;
  const auto rows = fx.rows();
  ModelSpec base = simple_spec(RandomStructure::InterceptAndSlopeOnT);
  base.fixed_terms = {ContinuousTerm{"Q_gallery"}};
  const auto rep = compare_apc(rows, base);
  REQUIRE(rep.entries.size() == 3);
  double min_aic = 1e300;
  for (const auto& e : rep.entries) {
    CHECK(e.n_rows == rep.entries[0].n_rows);
    CHECK(e.outcome_checksum == rep.entries[0].outcome_checksum);
    min_aic = std::min(min_aic, e.ml_aic);
  }
  for (const auto& e : rep.entries) CHECK(e.delta_aic == doctest::Approx(e.ml_aic - min_aic));
  CHECK(rep.overidentified_columns.size() == static_cast<std::size_t>(rep.overidentified_vif.size()));
}

TEST_CASE("stacked z-scores") {
  std::vector<ComparisonRecord> rows;
  for (int i = 0; i < 10; ++i) {
    ComparisonRecord r;
    r.gallery_subject = r.probe_subject = "S";
    r.eye = i % 2 ? Eye::Right : Eye::Left;
    r.scores["a"] = 100.0 * i;
    r.scores["b"] = 0.01 * i;
    rows.push_back(r);
  }
  const auto st = stack_standardized(rows, {"a", "b"});
  CHECK(st.size() == 20);
  double sum = 0.0;
  for (const auto& r : st) sum += *column_value(r, "z_score");
  CHECK(std::abs(sum) < 1e-9);
  for (const auto& r : st) CHECK(r.extra.count("matcher_b") == 1);
}
