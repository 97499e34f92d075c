#include "permanence/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include <boost/math/distributions/normal.hpp>

#include "permanence/error.hpp"

namespace permanence {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

double oriented(double score, const MatcherProfile& m) {
  return m.orientation == Orientation::HigherIsBetter ? score : -score;
}

double native(double oriented_threshold, const MatcherProfile& m) {
  return m.orientation == Orientation::HigherIsBetter ? oriented_threshold : -oriented_threshold;
}

// Sorted oriented scores plus the exact error counts at every unique observed
// threshold t (decision: accept iff oriented score >= t).
struct Sweep {
  std::vector<double> thresholds;          // ascending, unique
  std::vector<std::size_t> impostor_accepts;
  std::vector<std::size_t> genuine_rejects;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
};

Sweep sweep(std::vector<double> genuine, std::vector<double> impostor, const MatcherProfile& m) {
  for (auto& s : genuine) s = oriented(s, m);
  for (auto& s : impostor) s = oriented(s, m);
  std::sort(genuine.begin(), genuine.end());
  std::sort(impostor.begin(), impostor.end());
  Sweep out;
  out.n_genuine = genuine.size();
  out.n_impostor = impostor.size();
  std::size_t gi = 0, ii = 0;
  while (gi < genuine.size() || ii < impostor.size()) {
    double t;
    if (gi == genuine.size()) {
      t = impostor[ii];
    } else if (ii == impostor.size()) {
      t = genuine[gi];
    } else {
      t = std::min(genuine[gi], impostor[ii]);
    }
    // Counts strictly below t are rejected at threshold t.
    out.thresholds.push_back(t);
    out.genuine_rejects.push_back(gi);
    out.impostor_accepts.push_back(impostor.size() - ii);
    while (gi < genuine.size() && genuine[gi] == t) ++gi;
    while (ii < impostor.size() && impostor[ii] == t) ++ii;
  }
  return out;
}

void require_nonempty(const std::vector<double>& g, const std::vector<double>& i) {
  if (g.empty() || i.empty()) throw Error(ErrorCode::EmptyInput, "genuine and impostor scores must be non-empty");
}

}  // namespace

Decision decide(double score, double threshold, const MatcherProfile& profile) {
  const bool match = profile.orientation == Orientation::HigherIsBetter ? score >= threshold : score <= threshold;
  return match ? Decision::Match : Decision::NonMatch;
}

Interval wilson_interval(std::size_t k, std::size_t n, double confidence) {
  if (n < 1 || k > n) throw Error(ErrorCode::InvalidArgument, "wilson_interval: requires 0 <= k <= n and n >= 1");
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "wilson_interval: confidence must lie in (0, 1)");
  }
  const double z = boost::math::quantile(boost::math::normal_distribution<double>(), 0.5 + confidence / 2.0);
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (p + z2 / (2.0 * nn)) / denom;
  const double half = z / denom * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
  Interval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
  if (k == 0) ci.low = 0.0;
  if (k == n) ci.high = 1.0;
  return ci;
}

double rule_of_three(std::size_t n) {
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "rule_of_three: n must be >= 1");
  return 3.0 / static_cast<double>(n);
}

int interval_bin(int gap_months, int bin_width) {
  return static_cast<int>(std::lround(static_cast<double>(gap_months) / bin_width)) * bin_width;
}

std::vector<IntervalStat> fnmr_by_interval(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& matcher,
                                           double threshold, int bin_width, double confidence) {
  if (bin_width <= 0) throw Error(ErrorCode::InvalidArgument, "bin width must be positive");
  std::map<int, std::pair<std::size_t, std::size_t>> bins;  // center -> (n, failures)
  for (const auto& r : genuine) {
    if (r.kind != PairKind::Genuine) throw Error(ErrorCode::InvalidArgument, "fnmr_by_interval: impostor row");
    const auto it = r.scores.find(matcher.name);
    if (it == r.scores.end()) throw Error(ErrorCode::IncompleteScores, "missing score for " + matcher.name);
    auto& [n, fails] = bins[interval_bin(r.gap_months, bin_width)];
    ++n;
    if (decide(it->second, threshold, matcher) == Decision::NonMatch) ++fails;
  }
  std::vector<IntervalStat> out;
  for (const auto& [center, counts] : bins) {
    IntervalStat s;
    s.interval_months = center;
    s.n_genuine = counts.first;
    s.n_false_nonmatch = counts.second;
    s.fnmr = static_cast<double>(s.n_false_nonmatch) / static_cast<double>(s.n_genuine);
    if (s.n_false_nonmatch == 0) {
      s.ci_method = CiMethod::RuleOfThree;
      s.ci_low = 0.0;
      s.ci_high = std::min(1.0, rule_of_three(s.n_genuine));
    } else {
      s.ci_method = CiMethod::Wilson;
      const auto ci = wilson_interval(s.n_false_nonmatch, s.n_genuine, confidence);
      s.ci_low = ci.low;
      s.ci_high = ci.high;
    }
    out.push_back(s);
  }
  return out;
}

std::vector<double> scores_of(const std::vector<ComparisonRecord>& rows, const std::string& matcher) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    if (auto it = r.scores.find(matcher); it != r.scores.end()) out.push_back(it->second);
  }
  return out;
}

double fmr_at_threshold(const std::vector<ComparisonRecord>& impostor, const MatcherProfile& matcher,
                        double threshold) {
  if (impostor.empty()) throw Error(ErrorCode::EmptyInput, "fmr_at_threshold: empty impostor table");
  std::size_t accepts = 0;
  for (const auto& r : impostor) {
    const auto it = r.scores.find(matcher.name);
    if (it == r.scores.end()) throw Error(ErrorCode::IncompleteScores, "missing score for " + matcher.name);
    if (decide(it->second, threshold, matcher) == Decision::Match) ++accepts;
  }
  return static_cast<double>(accepts) / static_cast<double>(impostor.size());
}

double fnmr_at_threshold(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& matcher,
                         double threshold) {
  if (genuine.empty()) throw Error(ErrorCode::EmptyInput, "fnmr_at_threshold: empty genuine table");
  std::size_t rejects = 0;
  for (const auto& r : genuine) {
    const auto it = r.scores.find(matcher.name);
    if (it == r.scores.end()) throw Error(ErrorCode::IncompleteScores, "missing score for " + matcher.name);
    if (decide(it->second, threshold, matcher) == Decision::NonMatch) ++rejects;
  }
  return static_cast<double>(rejects) / static_cast<double>(genuine.size());
}

Calibration calibrate_threshold(const std::vector<double>& genuine, const std::vector<double>& impostor,
                                const MatcherProfile& matcher, double target_fmr) {
  require_nonempty(genuine, impostor);
  const Sweep s = sweep(genuine, impostor, matcher);
  const double ni = static_cast<double>(s.n_impostor);
  for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
    const double fmr = static_cast<double>(s.impostor_accepts[i]) / ni;
    if (fmr <= target_fmr) {
      return {native(s.thresholds[i], matcher), fmr,
              static_cast<double>(s.genuine_rejects[i]) / static_cast<double>(s.n_genuine)};
    }
  }
  throw Error(ErrorCode::CalibrationInfeasible,
              "target FMR " + format_double(target_fmr) + " unattainable for matcher '" + matcher.name + "'");
}

Calibration calibrate_threshold(const std::vector<ComparisonRecord>& genuine,
                                const std::vector<ComparisonRecord>& impostor, const MatcherProfile& matcher,
                                double target_fmr) {
  return calibrate_threshold(scores_of(genuine, matcher.name), scores_of(impostor, matcher.name), matcher,
                             target_fmr);
}

DetCurve det_curve(const std::vector<double>& genuine, const std::vector<double>& impostor,
                   const MatcherProfile& matcher) {
  require_nonempty(genuine, impostor);
  const Sweep s = sweep(genuine, impostor, matcher);
  const double ng = static_cast<double>(s.n_genuine);
  const double ni = static_cast<double>(s.n_impostor);
  constexpr double inf = std::numeric_limits<double>::infinity();

  DetCurve curve;
  std::vector<double> oriented_t;
  curve.points.push_back({native(-inf, matcher), 1.0, 0.0});
  oriented_t.push_back(-inf);
  for (std::size_t i = 0; i < s.thresholds.size(); ++i) {
    curve.points.push_back({native(s.thresholds[i], matcher), static_cast<double>(s.impostor_accepts[i]) / ni,
                            static_cast<double>(s.genuine_rejects[i]) / ng});
    oriented_t.push_back(s.thresholds[i]);
  }
  curve.points.push_back({native(inf, matcher), 0.0, 1.0});
  oriented_t.push_back(inf);

  // FNMR - FMR is non-decreasing along the curve, from -1 to +1.
  const auto& pts = curve.points;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double d = pts[i].fnmr - pts[i].fmr;
    if (d < 0.0) continue;
    if (d == 0.0 || i == 0) {
      curve.eer = pts[i].fmr;
      curve.eer_threshold = pts[i].threshold;
    } else {
      const double d_prev = pts[i - 1].fnmr - pts[i - 1].fmr;
      const double alpha = -d_prev / (d - d_prev);
      curve.eer = pts[i - 1].fmr + alpha * (pts[i].fmr - pts[i - 1].fmr);
      const double t0 = oriented_t[i - 1], t1 = oriented_t[i];
      const double t = std::isfinite(t0) && std::isfinite(t1) ? t0 + alpha * (t1 - t0) : (std::isfinite(t0) ? t0 : t1);
      curve.eer_threshold = native(t, matcher);
    }
    break;
  }

  // ROC: x = FMR, y = 1 - FNMR; trapezoids over consecutive points.
  double auc = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double dx = pts[i - 1].fmr - pts[i].fmr;
    auc += dx * ((1.0 - pts[i - 1].fnmr) + (1.0 - pts[i].fnmr)) / 2.0;
  }
  curve.auc = auc;
  return curve;
}

DetCurve det_curve(const std::vector<ComparisonRecord>& genuine, const std::vector<ComparisonRecord>& impostor,
                   const MatcherProfile& matcher) {
  return det_curve(scores_of(genuine, matcher.name), scores_of(impostor, matcher.name), matcher);
}

FusionReport fuse_and_rule(const ComparisonTable& table, const MatcherProfile& a, double threshold_a,
                           const MatcherProfile& b, double threshold_b) {
  FusionReport r;
  std::size_t rej_a = 0, rej_b = 0;
  for (const auto& row : table.rows) {
    const auto sa = row.scores.find(a.name);
    const auto sb = row.scores.find(b.name);
    if (sa == row.scores.end() || sb == row.scores.end()) {
      throw Error(ErrorCode::IncompleteScores, "fusion requires both matcher scores on every pair (" +
                                                   row.gallery_image_id + " -> " + row.probe_image_id + ")");
    }
    const bool acc_a = decide(sa->second, threshold_a, a) == Decision::Match;
    const bool acc_b = decide(sb->second, threshold_b, b) == Decision::Match;
    if (row.kind == PairKind::Impostor) {
      ++r.n_impostor;
      if (acc_a && acc_b) {
        ++r.both;
      } else if (acc_a) {
        ++r.a_only;
      } else if (acc_b) {
        ++r.b_only;
      } else {
        ++r.neither;
      }
    } else {
      ++r.n_genuine;
      rej_a += acc_a ? 0 : 1;
      rej_b += acc_b ? 0 : 1;
      r.genuine_fused_rejects += (acc_a && acc_b) ? 0 : 1;
    }
  }
  if (!table.incomplete.empty()) {
    throw Error(ErrorCode::IncompleteScores, "fusion requires both matcher scores on every pair");
  }
  const double ni = static_cast<double>(r.n_impostor);
  const double ng = static_cast<double>(r.n_genuine);
  r.fmr_a = r.n_impostor ? static_cast<double>(r.a_only + r.both) / ni : kNaN;
  r.fmr_b = r.n_impostor ? static_cast<double>(r.b_only + r.both) / ni : kNaN;
  r.fused_fmr = r.n_impostor ? static_cast<double>(r.both) / ni : kNaN;
  r.fnmr_a = r.n_genuine ? static_cast<double>(rej_a) / ng : kNaN;
  r.fnmr_b = r.n_genuine ? static_cast<double>(rej_b) / ng : kNaN;
  r.fused_fnmr = r.n_genuine ? static_cast<double>(r.genuine_fused_rejects) / ng : kNaN;
  return r;
}

std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error(ErrorCode::InvalidArgument, "pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

FailureReport failure_analysis(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& a,
                               double threshold_a, const MatcherProfile& b, double threshold_b,
                               double min_quality_cut) {
  static const char* const kCovariates[] = {"DC",        "min_Q",     "Q_gallery", "Q_probe", "U_gallery",
                                            "U_probe",   "C_gallery", "C_probe",   "T"};
  FailureReport report;
  report.min_quality_cut = min_quality_cut;
  report.n_genuine = genuine.size();

  std::vector<const ComparisonRecord*> members[3];  // A-only, B-only, both
  std::set<std::string> cohort, failing;
  std::vector<double> fail_a, fail_b;
  for (const auto& r : genuine) {
    if (r.kind != PairKind::Genuine) throw Error(ErrorCode::InvalidArgument, "failure_analysis: impostor row");
    const auto sa = r.scores.find(a.name);
    const auto sb = r.scores.find(b.name);
    if (sa == r.scores.end() || sb == r.scores.end()) {
      throw Error(ErrorCode::IncompleteScores, "failure analysis requires both matcher scores");
    }
    cohort.insert(r.gallery_subject);
    const bool rej_a = decide(sa->second, threshold_a, a) == Decision::NonMatch;
    const bool rej_b = decide(sb->second, threshold_b, b) == Decision::NonMatch;
    if (!rej_a && !rej_b) continue;
    members[rej_a && rej_b ? 2 : (rej_a ? 0 : 1)].push_back(&r);
    failing.insert(r.gallery_subject);
    fail_a.push_back(sa->second);
    fail_b.push_back(sb->second);
  }
  report.n_cohort_subjects = cohort.size();
  report.n_failure_subjects = failing.size();
  report.n_failure_pairs = fail_a.size();
  report.failure_subject_fraction =
      cohort.empty() ? kNaN : static_cast<double>(failing.size()) / static_cast<double>(cohort.size());
  report.inter_matcher_r = pearson(fail_a, fail_b);

  static const char* const kNames[] = {"A-only", "B-only", "both"};
  for (int c = 0; c < 3; ++c) {
    FailureCategory cat;
    cat.name = kNames[c];
    const auto& rows = members[c];
    cat.n_pairs = rows.size();
    std::set<std::string> subjects;
    std::size_t below = 0;
    double gap = 0.0, minq = 0.0;
    for (const auto* r : rows) {
      subjects.insert(r->gallery_subject);
      const double q = *column_value(*r, "min_Q");
      below += q < min_quality_cut ? 1 : 0;
      gap += r->gap_months;
      minq += q;
    }
    cat.n_subjects = subjects.size();
    const double n = static_cast<double>(rows.size());
    cat.captured_below_cut = rows.empty() ? kNaN : static_cast<double>(below) / n;
    cat.mean_gap_months = rows.empty() ? kNaN : gap / n;
    cat.mean_min_quality = rows.empty() ? kNaN : minq / n;
    for (const auto* m : {&a, &b}) {
      for (const char* cov : kCovariates) {
        std::vector<double> xs, ys;
        for (const auto* r : rows) {
          xs.push_back(r->scores.at(m->name));
          ys.push_back(*column_value(*r, cov));
        }
        cat.correlations.emplace_back(m->name + "~" + cov, pearson(xs, ys));
      }
    }
    report.categories.push_back(std::move(cat));
  }
  return report;
}

}  // namespace permanence
