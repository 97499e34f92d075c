#pragma once

// Data-parallel inner loops. Each kernel exists twice: a straightforward
// serial reference and an OpenMP version. Parallel versions write per-item
// results into preallocated slots and reduce them serially in index order,
// so their output does not depend on the thread count or schedule.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace permanence::kernels {

// ---------------------------------------------------------------------------
// Mixed-model sufficient statistics
// ---------------------------------------------------------------------------

/// Per-subject cross products of the random-effects design Z with (X, y),
/// plus pooled X'X, X'y and y'y. Everything the profiled REML criterion needs.
struct SubjectBlocks {
  Eigen::Index q = 0;
  Eigen::Index p = 0;
  std::size_t n_obs = 0;
  std::vector<Eigen::MatrixXd> ZtZ;  // q x q
  std::vector<Eigen::MatrixXd> ZtX;  // q x p
  std::vector<Eigen::VectorXd> Zty;  // q
  Eigen::MatrixXd XtX;
  Eigen::VectorXd Xty;
  double yty = 0.0;
};

/// Quantities of the scaled marginal covariance V~ = I + Z Lambda Lambda' Z'.
struct RemlTerms {
  Eigen::MatrixXd XtVinvX;
  Eigen::VectorXd XtVinvy;
  double ytVinvy = 0.0;
  double logdet_V = 0.0;
};

/// Rows grouped by subject: rows of subject g are order[offset[g] .. offset[g+1]).
struct GroupIndex {
  std::vector<std::size_t> offset;
  std::vector<std::size_t> order;

  static GroupIndex build(std::span<const int> group, int n_groups);
  int n_groups() const { return static_cast<int>(offset.size()) - 1; }
};

// ---------------------------------------------------------------------------
// Impostor sampling
// ---------------------------------------------------------------------------

struct DrawSpec {
  std::uint64_t seed = 0;
  std::uint64_t pool_size = 0;
  std::uint64_t take = 0;
};

/// First `take` positions of a Fisher-Yates shuffle of [0, pool_size) driven
/// by Rng(seed). Sparse swaps, O(take) memory.
std::vector<std::uint64_t> partial_shuffle(const DrawSpec& spec);

namespace serial {

SubjectBlocks subject_blocks(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                             std::span<const int> group, int n_groups);
RemlTerms reml_terms(const SubjectBlocks& blocks, const Eigen::MatrixXd& lambda);
std::vector<std::vector<std::uint64_t>> impostor_draws(std::span<const DrawSpec> specs);
std::size_t wilson_coverage(double p, std::size_t n, std::size_t trials, double confidence, std::uint64_t seed);
Eigen::VectorXd vif_columns(const Eigen::MatrixXd& X, bool centered);

}  // namespace serial

namespace parallel {

SubjectBlocks subject_blocks(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                             std::span<const int> group, int n_groups);
RemlTerms reml_terms(const SubjectBlocks& blocks, const Eigen::MatrixXd& lambda);
std::vector<std::vector<std::uint64_t>> impostor_draws(std::span<const DrawSpec> specs);
std::size_t wilson_coverage(double p, std::size_t n, std::size_t trials, double confidence, std::uint64_t seed);
Eigen::VectorXd vif_columns(const Eigen::MatrixXd& X, bool centered);

}  // namespace parallel

/// Variance inflation of column j of X regressed on the other columns.
/// `centered` selects R^2 about the mean; otherwise about zero (the
/// convention of regressions without an explicit constant column).
double column_vif(const Eigen::MatrixXd& X, Eigen::Index j, bool centered);

/// One Monte-Carlo coverage trial: draw k ~ Binomial(n, p) as n Bernoulli
/// draws and report whether the Wilson interval for k/n contains p.
/// Trial t of a run uses trial_seed = mix_seed(seed, t).
bool wilson_trial_covers(double p, std::size_t n, double confidence, std::uint64_t trial_seed);

int max_threads();

}  // namespace permanence::kernels
