#include "permanence/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "permanence/metrics.hpp"
#include "permanence/rng.hpp"

namespace permanence::kernels {

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

GroupIndex GroupIndex::build(std::span<const int> group, int n_groups) {
  GroupIndex index;
  index.offset.assign(static_cast<std::size_t>(n_groups) + 1, 0);
  for (const int g : group) ++index.offset[static_cast<std::size_t>(g) + 1];
  for (int g = 0; g < n_groups; ++g) index.offset[g + 1] += index.offset[g];
  index.order.resize(group.size());
  std::vector<std::size_t> cursor(index.offset.begin(), index.offset.end() - 1);
  for (std::size_t i = 0; i < group.size(); ++i) index.order[cursor[group[i]]++] = i;
  return index;
}

std::vector<std::uint64_t> partial_shuffle(const DrawSpec& spec) {
  const std::uint64_t take = std::min(spec.take, spec.pool_size);
  std::vector<std::pair<std::uint64_t, std::uint64_t>> moved;  // position -> value
  moved.reserve(2 * take);
  auto value_at = [&](std::uint64_t pos) {
    for (const auto& [p, v] : moved)
      if (p == pos) return v;
    return pos;
  };
  auto assign = [&](std::uint64_t pos, std::uint64_t value) {
    for (auto& [p, v] : moved) {
      if (p == pos) {
        v = value;
        return;
      }
    }
    moved.emplace_back(pos, value);
  };
  Rng rng(spec.seed);
  std::vector<std::uint64_t> out;
  out.reserve(take);
  for (std::uint64_t i = 0; i < take; ++i) {
    const std::uint64_t j = i + rng.below(spec.pool_size - i);
    const std::uint64_t vi = value_at(i);
    const std::uint64_t vj = value_at(j);
    assign(i, vj);
    assign(j, vi);
    out.push_back(vj);
  }
  return out;
}

double column_vif(const Eigen::MatrixXd& X, Eigen::Index j, bool centered) {
  const Eigen::Index n = X.rows();
  const Eigen::Index k = X.cols();
  Eigen::MatrixXd A(n, k);
  A.col(0).setOnes();
  for (Eigen::Index c = 0, dst = 1; c < k; ++c) {
    if (c != j) A.col(dst++) = X.col(c);
  }
  const Eigen::VectorXd x = X.col(j);
  const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(x);
  const double rss = (x - A * coef).squaredNorm();
  const double tss = centered ? (x.array() - x.mean()).matrix().squaredNorm() : x.squaredNorm();
  if (!(tss > 0.0) || rss <= 1e-12 * tss) return std::numeric_limits<double>::infinity();
  return tss / rss;
}

bool wilson_trial_covers(double p, std::size_t n, double confidence, std::uint64_t trial_seed) {
  Rng rng(trial_seed);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) k += rng.uniform() < p ? 1 : 0;
  const auto ci = wilson_interval(k, n, confidence);
  return ci.low <= p && p <= ci.high;
}

namespace {

// Block of one subject's rows; shared by both subject_blocks versions.
void accumulate_subject(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                        std::span<const std::size_t> rows, Eigen::MatrixXd& ZtZ, Eigen::MatrixXd& ZtX,
                        Eigen::VectorXd& Zty, Eigen::MatrixXd& XtX, Eigen::VectorXd& Xty, double& yty) {
  const Eigen::Index q = Z.cols();
  const Eigen::Index p = X.cols();
  ZtZ.setZero(q, q);
  ZtX.setZero(q, p);
  Zty.setZero(q);
  XtX.setZero(p, p);
  Xty.setZero(p);
  yty = 0.0;
  for (const std::size_t i : rows) {
    const auto zi = Z.row(static_cast<Eigen::Index>(i));
    const auto xi = X.row(static_cast<Eigen::Index>(i));
    const double yi = y(static_cast<Eigen::Index>(i));
    ZtZ.noalias() += zi.transpose() * zi;
    ZtX.noalias() += zi.transpose() * xi;
    Zty.noalias() += zi.transpose() * yi;
    XtX.noalias() += xi.transpose() * xi;
    Xty.noalias() += xi.transpose() * yi;
    yty += yi * yi;
  }
}

struct SubjectTerm {
  Eigen::MatrixXd xx;
  Eigen::VectorXd xy;
  double yy = 0.0;
  double logdet = 0.0;
};

// Woodbury correction of one subject: with M = I + L'Z'ZL,
//   X'V~^-1 X = X'X - (L'Z'X)' M^-1 (L'Z'X), and log|V~| = log|M|.
void subject_term(const SubjectBlocks& b, std::size_t g, const Eigen::MatrixXd& lambda, SubjectTerm& t) {
  const Eigen::MatrixXd A = lambda.transpose() * b.ZtX[g];
  const Eigen::VectorXd c = lambda.transpose() * b.Zty[g];
  Eigen::MatrixXd M = lambda.transpose() * b.ZtZ[g] * lambda;
  M.diagonal().array() += 1.0;
  const Eigen::LLT<Eigen::MatrixXd> llt(M);
  const Eigen::MatrixXd L = llt.matrixL();
  t.logdet = 2.0 * L.diagonal().array().log().sum();
  const Eigen::MatrixXd Ainv = llt.matrixL().solve(A);
  const Eigen::VectorXd cinv = llt.matrixL().solve(c);
  t.xx.noalias() = Ainv.transpose() * Ainv;
  t.xy.noalias() = Ainv.transpose() * cinv;
  t.yy = cinv.squaredNorm();
}

RemlTerms combine(const SubjectBlocks& b, const std::vector<SubjectTerm>& terms) {
  RemlTerms out;
  out.XtVinvX = b.XtX;
  out.XtVinvy = b.Xty;
  out.ytVinvy = b.yty;
  for (const auto& t : terms) {
    out.XtVinvX -= t.xx;
    out.XtVinvy -= t.xy;
    out.ytVinvy -= t.yy;
    out.logdet_V += t.logdet;
  }
  return out;
}

}  // namespace

namespace serial {

SubjectBlocks subject_blocks(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                             std::span<const int> group, int n_groups) {
  const GroupIndex index = GroupIndex::build(group, n_groups);
  SubjectBlocks b;
  b.q = Z.cols();
  b.p = X.cols();
  b.n_obs = static_cast<std::size_t>(y.size());
  b.ZtZ.resize(n_groups);
  b.ZtX.resize(n_groups);
  b.Zty.resize(n_groups);
  b.XtX.setZero(b.p, b.p);
  b.Xty.setZero(b.p);
  Eigen::MatrixXd xx;
  Eigen::VectorXd xy;
  double yy = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    const std::span<const std::size_t> rows(index.order.data() + index.offset[g],
                                            index.offset[g + 1] - index.offset[g]);
    accumulate_subject(X, Z, y, rows, b.ZtZ[g], b.ZtX[g], b.Zty[g], xx, xy, yy);
    b.XtX += xx;
    b.Xty += xy;
    b.yty += yy;
  }
  return b;
}

RemlTerms reml_terms(const SubjectBlocks& blocks, const Eigen::MatrixXd& lambda) {
  std::vector<SubjectTerm> terms(blocks.ZtZ.size());
  for (std::size_t g = 0; g < terms.size(); ++g) subject_term(blocks, g, lambda, terms[g]);
  return combine(blocks, terms);
}

std::vector<std::vector<std::uint64_t>> impostor_draws(std::span<const DrawSpec> specs) {
  std::vector<std::vector<std::uint64_t>> out;
  out.reserve(specs.size());
  for (const auto& s : specs) out.push_back(partial_shuffle(s));
  return out;
}

std::size_t wilson_coverage(double p, std::size_t n, std::size_t trials, double confidence, std::uint64_t seed) {
  std::size_t covered = 0;
  for (std::size_t t = 0; t < trials; ++t) covered += wilson_trial_covers(p, n, confidence, mix_seed(seed, t));
  return covered;
}

Eigen::VectorXd vif_columns(const Eigen::MatrixXd& X, bool centered) {
  Eigen::VectorXd out(X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) out(j) = column_vif(X, j, centered);
  return out;
}

}  // namespace serial

namespace parallel {

SubjectBlocks subject_blocks(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                             std::span<const int> group, int n_groups) {
  const GroupIndex index = GroupIndex::build(group, n_groups);
  SubjectBlocks b;
  b.q = Z.cols();
  b.p = X.cols();
  b.n_obs = static_cast<std::size_t>(y.size());
  b.ZtZ.resize(n_groups);
  b.ZtX.resize(n_groups);
  b.Zty.resize(n_groups);
  std::vector<Eigen::MatrixXd> xx(n_groups);
  std::vector<Eigen::VectorXd> xy(n_groups);
  std::vector<double> yy(n_groups, 0.0);
#pragma omp parallel for schedule(dynamic, 8)
  for (int g = 0; g < n_groups; ++g) {
    const std::span<const std::size_t> rows(index.order.data() + index.offset[g],
                                            index.offset[g + 1] - index.offset[g]);
    accumulate_subject(X, Z, y, rows, b.ZtZ[g], b.ZtX[g], b.Zty[g], xx[g], xy[g], yy[g]);
  }
  b.XtX.setZero(b.p, b.p);
  b.Xty.setZero(b.p);
  for (int g = 0; g < n_groups; ++g) {
    b.XtX += xx[g];
    b.Xty += xy[g];
    b.yty += yy[g];
  }
  return b;
}

RemlTerms reml_terms(const SubjectBlocks& blocks, const Eigen::MatrixXd& lambda) {
  const auto n = static_cast<std::ptrdiff_t>(blocks.ZtZ.size());
  std::vector<SubjectTerm> terms(blocks.ZtZ.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t g = 0; g < n; ++g) subject_term(blocks, static_cast<std::size_t>(g), lambda, terms[g]);
  return combine(blocks, terms);
}

std::vector<std::vector<std::uint64_t>> impostor_draws(std::span<const DrawSpec> specs) {
  std::vector<std::vector<std::uint64_t>> out(specs.size());
  const auto n = static_cast<std::ptrdiff_t>(specs.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = partial_shuffle(specs[i]);
  return out;
}

std::size_t wilson_coverage(double p, std::size_t n, std::size_t trials, double confidence, std::uint64_t seed) {
  std::vector<unsigned char> hit(trials, 0);
  const auto count = static_cast<std::ptrdiff_t>(trials);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t t = 0; t < count; ++t) {
    hit[t] = wilson_trial_covers(p, n, confidence, mix_seed(seed, static_cast<std::uint64_t>(t))) ? 1 : 0;
  }
  std::size_t covered = 0;
  for (const auto h : hit) covered += h;
  return covered;
}

Eigen::VectorXd vif_columns(const Eigen::MatrixXd& X, bool centered) {
  Eigen::VectorXd out(X.cols());
  const auto k = static_cast<std::ptrdiff_t>(X.cols());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t j = 0; j < k; ++j) out(j) = column_vif(X, j, centered);
  return out;
}

}  // namespace parallel

}  // namespace permanence::kernels
