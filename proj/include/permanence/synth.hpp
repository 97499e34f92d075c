#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "permanence/core_model.hpp"

namespace permanence {

/// Normal(mean, sd) truncated to [lo, hi].
struct Bounded {
  double mean = 0.0;
  double sd = 1.0;
  double lo = 0.0;
  double hi = 1.0;
};

struct ScoreDistribution {
  enum class Kind { Normal, Uniform };
  Kind kind = Kind::Normal;
  double a = 0.0;  // mean, or lower bound
  double b = 1.0;  // sd, or upper bound

  static ScoreDistribution normal(double mean, double sd) { return {Kind::Normal, mean, sd}; }
  static ScoreDistribution uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
  void validate() const;
};

/// Genuine scores follow
///   y = sum_k beta[k] * column_k + u0 + u1 * T + e,   (u0, u1) ~ N(0, Sigma), e ~ N(0, sigma2)
/// with "Intercept" as the constant term and other keys resolved by
/// column_value on the comparison. Impostor scores are i.i.d. draws.
/// Scores outside the profile range are clamped and counted.
struct SynthMatcher {
  MatcherProfile profile;
  std::map<std::string, double> beta;
  Eigen::Matrix2d sigma_true = Eigen::Matrix2d::Zero();
  double sigma2_true = 1.0;
  ScoreDistribution impostor;
};

struct SynthConfig {
  int n_subjects = 276;
  int enrollment_age_min = 4;  // inclusive integer years
  int enrollment_age_max = 12;
  std::vector<int> session_months;  // strictly increasing
  int enrollment_sessions = 4;      // subjects enroll uniformly in the first sessions
  int images_per_eye_per_session = 4;
  double attrition_rate = 0.134;  // per-session permanent dropout
  Bounded quality{80.0, 10.0, 0.0, 100.0};
  Bounded usable_area{85.0, 8.0, 0.0, 100.0};
  Bounded circularity{90.0, 5.0, 0.0, 100.0};
  Bounded dilation{0.45, 0.08, 0.2, 0.8};
  Bounded iris_radius{120.0, 8.0, 90.0, 150.0};
  std::vector<SynthMatcher> matchers;
  std::size_t max_impostor_probes = 10;
  std::uint64_t seed = 1;

  /// Throws ConfigInvalid.
  void validate() const;
};

/// Months 0..42 every 6 months, a suspension gap, then 72..102.
std::vector<int> study_session_schedule();

/// The study shape: 276 subjects, 14 sessions with a gap, 4 images per eye
/// per session, and two matchers ("verieye" similarity, "openiris" distance)
/// with fixed effects from the published left-eye models and ICC 0.65.
SynthConfig study_shaped_config();

struct MatcherTruth {
  std::string name;
  std::map<std::string, double> beta;
  Eigen::Matrix2d sigma_true = Eigen::Matrix2d::Zero();
  double sigma2_true = 0.0;
  std::vector<std::pair<double, double>> effects;  // (u0, u1) per subject
  std::size_t clamped_genuine = 0;
  std::size_t clamped_impostor = 0;
};

struct GroundTruth {
  std::vector<std::string> subjects;
  std::vector<double> enrollment_age;  // continuous latent age at month 0
  std::vector<MatcherTruth> matchers;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
};

struct SynthOutput {
  std::vector<CaptureRecord> captures;
  ScoreTable scores;
  ComparisonTable pairs;  // genuine then impostor, scores attached
  GroundTruth truth;
};

SynthOutput generate_longitudinal(const SynthConfig& cfg);

std::pair<std::vector<double>, std::vector<double>> generate_score_populations(std::size_t n,
                                                                               const ScoreDistribution& genuine,
                                                                               const ScoreDistribution& impostor,
                                                                               std::uint64_t seed);

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GroundTruth& truth);

nlohmann::json to_json(const MatcherProfile& profile);
MatcherProfile matcher_profile_from_json(const nlohmann::json& j);

}  // namespace permanence
