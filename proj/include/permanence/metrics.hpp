#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "permanence/core_model.hpp"

namespace permanence {

enum class Decision { Match, NonMatch };

/// Match at exactly the threshold: >= for similarity, <= for distance.
Decision decide(double score, double threshold, const MatcherProfile& profile);

struct Interval {
  double low = 0.0;
  double high = 1.0;
};

/// Wilson score interval for k successes in n trials.
Interval wilson_interval(std::size_t k, std::size_t n, double confidence = 0.95);

/// 3/n upper bound for zero observed events.
double rule_of_three(std::size_t n);

enum class CiMethod { Wilson, RuleOfThree };

struct IntervalStat {
  int interval_months = 0;
  std::size_t n_genuine = 0;
  std::size_t n_false_nonmatch = 0;
  double fnmr = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  CiMethod ci_method = CiMethod::Wilson;
};

/// Nearest multiple of bin_width, halves rounded away from zero.
int interval_bin(int gap_months, int bin_width = 6);

std::vector<IntervalStat> fnmr_by_interval(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& matcher,
                                           double threshold, int bin_width = 6, double confidence = 0.95);

double fmr_at_threshold(const std::vector<ComparisonRecord>& impostor, const MatcherProfile& matcher,
                        double threshold);
double fnmr_at_threshold(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& matcher,
                         double threshold);

// ---------------------------------------------------------------------------
// Exact threshold sweeps. Scores are oriented so that larger = more similar
// (distances are negated) before sweeping; reported thresholds are on the
// matcher's native scale.
// ---------------------------------------------------------------------------

struct Calibration {
  double threshold = 0.0;
  double achieved_fmr = 0.0;
  double achieved_fnmr = 0.0;
};

/// Loosest observed-score threshold whose FMR <= target_fmr. Throws
/// CalibrationInfeasible when even the strictest observed threshold exceeds it.
Calibration calibrate_threshold(const std::vector<double>& genuine, const std::vector<double>& impostor,
                                const MatcherProfile& matcher, double target_fmr);
Calibration calibrate_threshold(const std::vector<ComparisonRecord>& genuine,
                                const std::vector<ComparisonRecord>& impostor, const MatcherProfile& matcher,
                                double target_fmr);

struct DetPoint {
  double threshold = 0.0;
  double fmr = 0.0;
  double fnmr = 0.0;
};

struct DetCurve {
  // Ordered from loosest to strictest threshold; the first point accepts
  // everything (FMR = 1, FNMR = 0) and the last rejects everything.
  std::vector<DetPoint> points;
  double eer = 0.0;
  double eer_threshold = 0.0;
  double auc = 0.0;
};

DetCurve det_curve(const std::vector<double>& genuine, const std::vector<double>& impostor,
                   const MatcherProfile& matcher);
DetCurve det_curve(const std::vector<ComparisonRecord>& genuine, const std::vector<ComparisonRecord>& impostor,
                   const MatcherProfile& matcher);

struct FusionReport {
  std::size_t n_impostor = 0;
  std::size_t n_genuine = 0;
  // Impostor acceptances.
  std::size_t a_only = 0;
  std::size_t b_only = 0;
  std::size_t both = 0;
  std::size_t neither = 0;
  double fmr_a = 0.0;
  double fmr_b = 0.0;
  double fused_fmr = 0.0;
  // Genuine rejections.
  double fnmr_a = 0.0;
  double fnmr_b = 0.0;
  double fused_fnmr = 0.0;
  std::size_t genuine_fused_rejects = 0;
};

/// AND-rule: the fused decision is Match only when both matchers accept.
FusionReport fuse_and_rule(const ComparisonTable& table, const MatcherProfile& a, double threshold_a,
                           const MatcherProfile& b, double threshold_b);

/// Pearson correlation; nullopt when n < 2 or either column has zero variance.
std::optional<double> pearson(const std::vector<double>& x, const std::vector<double>& y);

struct FailureCategory {
  std::string name;  // "A-only", "B-only", "both"
  std::size_t n_pairs = 0;
  std::size_t n_subjects = 0;
  // Correlation of each matcher's score with each covariate, keyed
  // "<matcher>~<covariate>"; nullopt when undefined.
  std::vector<std::pair<std::string, std::optional<double>>> correlations;
  double captured_below_cut = 0.0;  // fraction with min quality < cut; NaN when empty
  double mean_gap_months = 0.0;
  double mean_min_quality = 0.0;
};

struct FailureReport {
  std::size_t n_genuine = 0;
  std::size_t n_failure_pairs = 0;
  std::size_t n_cohort_subjects = 0;
  std::size_t n_failure_subjects = 0;
  double failure_subject_fraction = 0.0;
  double min_quality_cut = 45.0;
  std::optional<double> inter_matcher_r;  // score correlation among all failures
  std::vector<FailureCategory> categories;
};

FailureReport failure_analysis(const std::vector<ComparisonRecord>& genuine, const MatcherProfile& a,
                               double threshold_a, const MatcherProfile& b, double threshold_b,
                               double min_quality_cut = 45.0);

/// Scores of `matcher` for rows of the given kind (rows without the score are skipped).
std::vector<double> scores_of(const std::vector<ComparisonRecord>& rows, const std::string& matcher);

}  // namespace permanence
