#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "permanence/core_model.hpp"

namespace permanence {

// ---------------------------------------------------------------------------
// Model specification
// ---------------------------------------------------------------------------

/// Which two of the three collinear age/time variables enter the model.
enum class ApcMode { GalleryAgePlusT, ProbeAgePlusT, GalleryAgePlusDeltaA };

std::string_view to_string(ApcMode mode);
std::optional<ApcMode> parse_apc_mode(std::string_view text);
/// The two columns an APC mode contributes, age term first.
std::pair<std::string, std::string> apc_columns(ApcMode mode);

enum class RandomStructure { InterceptOnly, InterceptAndSlopeOnT };

std::string_view to_string(RandomStructure random);

struct ContinuousTerm {
  std::string column;
};

/// A factor built by binning a numeric column into closed ranges [lo, hi].
struct CategoricalTerm {
  struct Level {
    std::string label;
    double lo = 0.0;
    double hi = 0.0;
  };
  std::string name;
  std::string column;
  std::vector<Level> levels;
  std::size_t reference = 0;
};

/// Elementwise product of two numeric columns.
struct InteractionTerm {
  std::string left;
  std::string right;
};

using FixedTerm = std::variant<ContinuousTerm, CategoricalTerm, InteractionTerm>;

/// Enrollment-age factor with levels 4-5, 6-7, 8-9, 10-12 (reference 4-5).
CategoricalTerm enrollment_age_groups();

struct ModelSpec {
  std::string outcome;     // matcher name or any numeric column
  bool standardize = false;  // z-score the outcome within the modeled rows
  std::optional<ApcMode> apc_mode = ApcMode::GalleryAgePlusT;
  std::vector<FixedTerm> fixed_terms;
  RandomStructure random = RandomStructure::InterceptAndSlopeOnT;
  std::string slope_column = "T";
};

/// Quality and dilation covariates of the primary models.
std::vector<FixedTerm> default_quality_terms();

struct Design {
  Eigen::VectorXd y;
  Eigen::MatrixXd X;  // intercept first
  Eigen::MatrixXd Z;  // per-row random-effects design: [1] or [1, slope]
  std::vector<int> group;
  std::vector<std::string> group_labels;
  std::vector<std::string> column_names;
  RandomStructure random = RandomStructure::InterceptAndSlopeOnT;
  std::size_t n_excluded = 0;  // rows dropped for missing covariates
  std::vector<std::size_t> source_rows;
  double outcome_mean = 0.0;
  double outcome_sd = 1.0;
  bool standardized = false;

  int n_groups() const { return static_cast<int>(group_labels.size()); }
  /// Order-sensitive digest of (group label, y) used to confirm two fits saw
  /// the same rows.
  std::uint64_t row_checksum() const;
};

/// Throws RankDeficient (naming the offending columns) or InvalidArgument.
/// check_rank = false skips the rank test, for collinearity diagnostics.
Design build_design(const std::vector<ComparisonRecord>& rows, const ModelSpec& spec, bool check_rank = true);

// ---------------------------------------------------------------------------
// Estimation
// ---------------------------------------------------------------------------

enum class Criterion { REML, ML };

struct FitOptions {
  int max_iterations = 500;
  double rel_tolerance = 1e-9;   // relative change of the criterion
  double step_tolerance = 1e-8;  // max |parameter step|
  int perturbation_checks = 20;
  std::uint64_t perturbation_seed = 0x5eedULL;
};

struct FittedModel {
  Criterion criterion = Criterion::REML;
  RandomStructure random = RandomStructure::InterceptAndSlopeOnT;
  std::vector<std::string> names;
  Eigen::VectorXd beta;
  Eigen::VectorXd se;
  Eigen::VectorXd z;
  Eigen::VectorXd p;
  Eigen::MatrixXd beta_cov;
  Eigen::MatrixXd sigma;  // random-effects covariance (1x1 or 2x2)
  double sigma2 = 0.0;
  double loglik = 0.0;
  double aic = 0.0;
  std::size_t n_obs = 0;
  std::size_t n_subjects = 0;
  std::size_t n_params = 0;
  std::size_t n_excluded = 0;
  bool converged = false;
  int iterations = 0;
  bool boundary = false;
  bool local_check_passed = true;
  double mean_slope_covariate = 0.0;
  std::uint64_t row_checksum = 0;
  Eigen::VectorXd theta;  // log-Cholesky parameters of Sigma / sigma2
  std::string message;

  std::optional<std::size_t> index_of(std::string_view name) const;
  double random_correlation() const;  // NaN for intercept-only fits
};

/// Profiled -2 log-likelihood at relative-covariance parameters theta.
double profiled_deviance(const Design& design, const Eigen::VectorXd& theta, Criterion criterion);

FittedModel fit(const Design& design, Criterion criterion = Criterion::REML, const FitOptions& options = {});
inline FittedModel fit_reml(const Design& design, const FitOptions& options = {}) {
  return fit(design, Criterion::REML, options);
}
inline FittedModel fit_ml(const Design& design, const FitOptions& options = {}) {
  return fit(design, Criterion::ML, options);
}

/// Generalized least squares for fixed variance components.
Eigen::VectorXd gls_beta(const Design& design, const Eigen::MatrixXd& sigma, double sigma2);

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

struct LrtResult {
  double chi2 = 0.0;
  std::size_t df = 0;
  double p = 1.0;
};

/// Nested-model likelihood ratio test. Models whose fixed effects differ
/// must both be ML fits.
LrtResult likelihood_ratio_test(const FittedModel& nested, const FittedModel& full);

/// sigma2_u0 / (sigma2_u0 + sigma2) from an intercept-only fit.
double icc(const FittedModel& intercept_only);

/// var(X beta) / (var(X beta) + z' Sigma z + sigma2), z = (1, mean slope
/// covariate) for random-slope fits.
double marginal_r2(const FittedModel& fit, const Eigen::MatrixXd& X);

enum class VifCentering { Uncentered, Centered };

/// Per-column VIF of predictors X (no intercept column; an intercept is
/// always added to the auxiliary regressions). Uncentered measures R^2 about
/// zero, Centered about the column mean. Exact collinearity gives +inf.
Eigen::VectorXd vif(const Eigen::MatrixXd& X, VifCentering centering = VifCentering::Uncentered);

struct ApcEntry {
  ApcMode mode = ApcMode::GalleryAgePlusT;
  FittedModel reml;
  double ml_loglik = 0.0;
  double ml_aic = 0.0;
  double delta_aic = 0.0;  // relative to the best (smallest) ML AIC
  std::string age_term;
  std::string time_term;
  std::size_t n_rows = 0;
  std::uint64_t outcome_checksum = 0;
};

struct ApcReport {
  std::vector<ApcEntry> entries;
  // Overidentified A_gallery + A_probe + T design: diagnostic only.
  std::vector<std::string> overidentified_columns;
  Eigen::VectorXd overidentified_vif;
  Eigen::VectorXd overidentified_vif_centered;
};

ApcReport compare_apc(const std::vector<ComparisonRecord>& rows, const ModelSpec& base_spec,
                      const FitOptions& options = {});

/// Stacks several matchers into one table with a z-standardized outcome
/// column "z_score" and a 0/1 indicator "matcher_<name>" per non-reference
/// matcher. When per_eye is true standardization is per matcher-eye,
/// otherwise per matcher pooled over eyes.
std::vector<ComparisonRecord> stack_standardized(const std::vector<ComparisonRecord>& rows,
                                                 const std::vector<std::string>& matchers, bool per_eye = true);

/// Fixed-effect predictions X * beta.
Eigen::VectorXd predict_fixed(const FittedModel& fit, const Eigen::MatrixXd& X);

}  // namespace permanence
