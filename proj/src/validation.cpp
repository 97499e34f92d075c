#include "permanence/validation.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numeric>

#include <boost/math/distributions/normal.hpp>

#include "csv.hpp"
#include "permanence/error.hpp"
#include "permanence/rng.hpp"

namespace permanence {

Design subset_design(const Design& design, const std::vector<bool>& keep_group) {
  Design out;
  out.random = design.random;
  out.column_names = design.column_names;
  out.outcome_mean = design.outcome_mean;
  out.outcome_sd = design.outcome_sd;
  out.standardized = design.standardized;
  std::vector<int> remap(keep_group.size(), -1);
  for (std::size_t g = 0; g < keep_group.size(); ++g) {
    if (!keep_group[g]) continue;
    remap[g] = static_cast<int>(out.group_labels.size());
    out.group_labels.push_back(design.group_labels[g]);
  }
  std::vector<Eigen::Index> rows;
  for (Eigen::Index i = 0; i < design.y.size(); ++i) {
    if (remap[static_cast<std::size_t>(design.group[static_cast<std::size_t>(i)])] >= 0) rows.push_back(i);
  }
  const auto n = static_cast<Eigen::Index>(rows.size());
  out.y.resize(n);
  out.X.resize(n, design.X.cols());
  out.Z.resize(n, design.Z.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = rows[static_cast<std::size_t>(r)];
    out.y(r) = design.y(i);
    out.X.row(r) = design.X.row(i);
    out.Z.row(r) = design.Z.row(i);
    out.group.push_back(remap[static_cast<std::size_t>(design.group[static_cast<std::size_t>(i)])]);
    if (!design.source_rows.empty()) out.source_rows.push_back(design.source_rows[static_cast<std::size_t>(i)]);
  }
  return out;
}

CvReport kfold_subject_cv(const std::vector<ComparisonRecord>& rows, const ModelSpec& spec, int k,
                          std::uint64_t seed, const FitOptions& options) {
  return kfold_subject_cv(build_design(rows, spec), k, seed, options);
}

CvReport kfold_subject_cv(const Design& design, int k, std::uint64_t seed, const FitOptions& options) {
  if (k < 2) throw Error(ErrorCode::InvalidArgument, "cross-validation needs k >= 2");
  const auto n_subjects = static_cast<std::size_t>(design.n_groups());
  if (n_subjects < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::InvalidArgument, "cross-validation needs at least k subjects");
  }

  CvReport report;
  report.k = k;
  report.subjects = design.group_labels;
  std::vector<std::size_t> perm(n_subjects);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n_subjects - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  report.fold_of_subject.assign(n_subjects, 0);
  for (std::size_t pos = 0; pos < n_subjects; ++pos) {
    report.fold_of_subject[perm[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
  }

  report.per_fold.resize(static_cast<std::size_t>(k));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(k));
#pragma omp parallel for schedule(dynamic)
  for (int f = 0; f < k; ++f) {
    try {
      std::vector<bool> train(n_subjects), test(n_subjects);
      for (std::size_t g = 0; g < n_subjects; ++g) {
        test[g] = report.fold_of_subject[g] == f;
        train[g] = !test[g];
      }
      const Design dtrain = subset_design(design, train);
      const Design dtest = subset_design(design, test);
      if (dtest.y.size() == 0) throw Error(ErrorCode::EmptyInput, "fold " + std::to_string(f) + " has no rows");
      const FittedModel m = fit(dtrain, Criterion::REML, options);
      const Eigen::VectorXd err = dtest.y - predict_fixed(m, dtest.X);
      const double sse = err.squaredNorm();
      const double sst = (dtest.y.array() - dtest.y.mean()).square().sum();
      auto& out = report.per_fold[static_cast<std::size_t>(f)];
      out.oos_r2 = sst > 0.0 ? 1.0 - sse / sst : std::numeric_limits<double>::quiet_NaN();
      out.rmse = std::sqrt(sse / static_cast<double>(dtest.y.size()));
      out.n_test_subjects = static_cast<std::size_t>(dtest.n_groups());
      out.n_test_rows = static_cast<std::size_t>(dtest.y.size());
    } catch (...) {
      errors[static_cast<std::size_t>(f)] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& f : report.per_fold) {
    report.mean_oos_r2 += f.oos_r2 / k;
    report.mean_rmse += f.rmse / k;
  }
  return report;
}

namespace {

double poly(const double* c, int n, double x) {
  double r = c[n - 1];
  for (int i = n - 2; i >= 0; --i) r = r * x + c[i];
  return r;
}

double qnorm(double p) { return boost::math::quantile(boost::math::normal_distribution<double>(), p); }

ShapiroWilk swilk(std::vector<double> x) {
  const std::size_t n = x.size();
  std::sort(x.begin(), x.end());
  const double range = x.back() - x.front();
  if (!(range > 1e-19 * std::max(1.0, std::abs(x.front())))) {
    throw Error(ErrorCode::DegenerateData, "Shapiro-Wilk: zero variance");
  }
  const std::size_t nn2 = n / 2;
  const double an = static_cast<double>(n);
  std::vector<double> a(nn2 + 1);
  if (n == 3) {
    a[1] = std::sqrt(0.5);
  } else {
    static constexpr double c1[] = {0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056};
    static constexpr double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
    double summ2 = 0.0;
    for (std::size_t i = 1; i <= nn2; ++i) {
      a[i] = qnorm((static_cast<double>(i) - 0.375) / (an + 0.25));
      summ2 += a[i] * a[i];
    }
    summ2 *= 2.0;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(an);
    const double a1 = poly(c1, 6, rsn) - a[1] / ssumm2;
    std::size_t i1;
    double fac;
    if (n > 5) {
      i1 = 3;
      const double a2 = -a[2] / ssumm2 + poly(c2, 6, rsn);
      fac = std::sqrt((summ2 - 2.0 * a[1] * a[1] - 2.0 * a[2] * a[2]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
      a[2] = a2;
    } else {
      i1 = 2;
      fac = std::sqrt((summ2 - 2.0 * a[1] * a[1]) / (1.0 - 2.0 * a1 * a1));
    }
    a[1] = a1;
    for (std::size_t i = i1; i <= nn2; ++i) a[i] = -a[i] / fac;
  }

  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / an;
  double ssq = 0.0;
  for (const double v : x) ssq += (v - mean) * (v - mean);
  double num = 0.0;
  for (std::size_t i = 1; i <= nn2; ++i) num += a[i] * (x[n - i] - x[i - 1]);
  ShapiroWilk r;
  r.n = n;
  r.w = std::min(1.0, num * num / ssq);

  if (n == 3) {
    constexpr double pi6 = 1.90985931710274, stqr = 1.04719755119660;
    r.p = std::max(0.0, pi6 * (std::asin(std::sqrt(r.w)) - stqr));
    return r;
  }
  const double w1 = std::log(1.0 - r.w);
  double m, s, y;
  if (n <= 11) {
    static constexpr double g[] = {-2.273, 0.459};
    static constexpr double c3[] = {0.5440, -0.39978, 0.025054, -6.714e-4};
    static constexpr double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
    const double gamma = poly(g, 2, an);
    if (w1 >= gamma) {
      r.p = 1e-99;
      return r;
    }
    y = -std::log(gamma - w1);
    m = poly(c3, 4, an);
    s = std::exp(poly(c4, 4, an));
  } else {
    static constexpr double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
    static constexpr double c6[] = {-0.4803, -0.082676, 0.0030302};
    const double xx = std::log(an);
    y = w1;
    m = poly(c5, 4, xx);
    s = std::exp(poly(c6, 3, xx));
  }
  r.p = boost::math::cdf(boost::math::complement(boost::math::normal_distribution<double>(m, s), y));
  return r;
}

}  // namespace

ShapiroWilk shapiro_wilk(std::vector<double> x, std::uint64_t seed) {
  if (x.size() < 3) throw Error(ErrorCode::InvalidArgument, "Shapiro-Wilk needs n >= 3");
  constexpr std::size_t kMax = 5000;
  if (x.size() <= kMax) return swilk(std::move(x));
  Rng rng(seed);
  for (std::size_t i = 0; i < kMax; ++i) std::swap(x[i], x[i + rng.below(x.size() - i)]);
  x.resize(kMax);
  auto r = swilk(std::move(x));
  r.subsampled = true;
  return r;
}

DiagnosticsReport residual_diagnostics(const FittedModel& fit, const Design& design, std::uint64_t seed) {
  if (design.y.size() < 3) throw Error(ErrorCode::InvalidArgument, "diagnostics need n >= 3");
  DiagnosticsReport d;
  d.residuals = design.y - predict_fixed(fit, design.X);
  std::vector<double> r(d.residuals.data(), d.residuals.data() + d.residuals.size());
  d.normality = shapiro_wilk(r, seed);
  std::sort(r.begin(), r.end());
  const double n = static_cast<double>(r.size());
  d.qq.reserve(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    d.qq.push_back({r[i], qnorm((static_cast<double>(i + 1) - 0.375) / (n + 0.25))});
  }
  return d;
}

void write_qq(const std::filesystem::path& path, const std::vector<QqPoint>& qq) {
  auto out = csv::open_output(path);
  out << "sample_quantile,theoretical_quantile\n";
  for (const auto& p : qq) out << format_double(p.sample) << ',' << format_double(p.theoretical) << '\n';
}

}  // namespace permanence
