#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "permanence/lmm.hpp"

namespace permanence {

struct FoldResult {
  double oos_r2 = 0.0;
  double rmse = 0.0;
  std::size_t n_test_subjects = 0;
  std::size_t n_test_rows = 0;
};

struct CvReport {
  int k = 0;
  std::vector<FoldResult> per_fold;
  std::vector<int> fold_of_subject;  // indexed like Design::group_labels
  std::vector<std::string> subjects;
  double mean_oos_r2 = 0.0;
  double mean_rmse = 0.0;
};

/// Rows of `design` belonging to the selected groups, with groups renumbered.
Design subset_design(const Design& design, const std::vector<bool>& keep_group);

/// Subjects are shuffled by `seed` and dealt round-robin into k folds. Each
/// fold is predicted from a fit on the other folds using fixed effects only.
/// The design (and any outcome standardization) is built once on all rows.
CvReport kfold_subject_cv(const std::vector<ComparisonRecord>& rows, const ModelSpec& spec, int k,
                          std::uint64_t seed, const FitOptions& options = {});
CvReport kfold_subject_cv(const Design& design, int k, std::uint64_t seed, const FitOptions& options = {});

struct ShapiroWilk {
  double w = 0.0;
  double p = 0.0;
  std::size_t n = 0;
  bool subsampled = false;
};

/// Royston's AS R94 approximation, 3 <= n <= 5000. Larger samples are tested
/// on a seeded subsample of 5000 and flagged.
ShapiroWilk shapiro_wilk(std::vector<double> x, std::uint64_t seed = 0);

struct QqPoint {
  double sample = 0.0;
  double theoretical = 0.0;
};

struct DiagnosticsReport {
  Eigen::VectorXd residuals;  // marginal residuals y - X beta, design order
  std::vector<QqPoint> qq;    // sorted residuals against Blom normal scores
  ShapiroWilk normality;
};

DiagnosticsReport residual_diagnostics(const FittedModel& fit, const Design& design, std::uint64_t seed = 0);

void write_qq(const std::filesystem::path& path, const std::vector<QqPoint>& qq);

}  // namespace permanence
