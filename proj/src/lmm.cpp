#include "permanence/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <tuple>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "permanence/error.hpp"
#include "permanence/kernels.hpp"
#include "permanence/rng.hpp"

namespace permanence {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t vector_checksum(const Eigen::VectorXd& v) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const double x = v(i);
    h = fnv1a(h, &x, sizeof x);
  }
  return h;
}

double two_sided_p(double z) {
  if (!std::isfinite(z)) return std::isnan(z) ? kNaN : 0.0;
  return 2.0 * boost::math::cdf(boost::math::complement(boost::math::normal_distribution<double>(), std::abs(z)));
}

// Column index -> offending flag, by greedy sequential projection.
std::vector<std::size_t> dependent_columns(const Eigen::MatrixXd& X) {
  std::vector<std::size_t> bad;
  std::vector<Eigen::Index> kept;
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const Eigen::VectorXd col = X.col(j);
    const double norm = col.norm();
    if (!(norm > 0.0)) {
      bad.push_back(static_cast<std::size_t>(j));
      continue;
    }
    if (!kept.empty()) {
      Eigen::MatrixXd A(X.rows(), static_cast<Eigen::Index>(kept.size()));
      for (std::size_t k = 0; k < kept.size(); ++k) A.col(static_cast<Eigen::Index>(k)) = X.col(kept[k]);
      const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(col);
      if ((col - A * coef).norm() <= 1e-9 * norm) {
        bad.push_back(static_cast<std::size_t>(j));
        continue;
      }
    }
    kept.push_back(j);
  }
  return bad;
}

}  // namespace

// ---------------------------------------------------------------------------
// Specification helpers
// ---------------------------------------------------------------------------

std::string_view to_string(ApcMode mode) {
  switch (mode) {
    case ApcMode::GalleryAgePlusT: return "GalleryAgePlusT";
    case ApcMode::ProbeAgePlusT: return "ProbeAgePlusT";
    case ApcMode::GalleryAgePlusDeltaA: return "GalleryAgePlusDeltaA";
  }
  return "";
}

std::optional<ApcMode> parse_apc_mode(std::string_view text) {
  for (auto m : {ApcMode::GalleryAgePlusT, ApcMode::ProbeAgePlusT, ApcMode::GalleryAgePlusDeltaA}) {
    if (text == to_string(m)) return m;
  }
  return std::nullopt;
}

std::pair<std::string, std::string> apc_columns(ApcMode mode) {
  switch (mode) {
    case ApcMode::GalleryAgePlusT: return {"A_gallery", "T"};
    case ApcMode::ProbeAgePlusT: return {"A_probe", "T"};
    case ApcMode::GalleryAgePlusDeltaA: return {"A_gallery", "delta_A"};
  }
  return {};
}

std::string_view to_string(RandomStructure random) {
  return random == RandomStructure::InterceptOnly ? "InterceptOnly" : "InterceptAndSlopeOnT";
}

CategoricalTerm enrollment_age_groups() {
  return {"age_group", "A_gallery", {{"4-5", 4, 5}, {"6-7", 6, 7}, {"8-9", 8, 9}, {"10-12", 10, 12}}, 0};
}

std::vector<FixedTerm> default_quality_terms() {
  std::vector<FixedTerm> terms;
  for (const char* c : {"Q_gallery", "Q_probe", "U_gallery", "U_probe", "DC", "C_gallery", "C_probe"}) {
    terms.emplace_back(ContinuousTerm{c});
  }
  return terms;
}

std::uint64_t Design::row_checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const auto& label = group_labels[static_cast<std::size_t>(group[static_cast<std::size_t>(i)])];
    h = fnv1a(h, label.data(), label.size());
    const double v = y(i);
    h = fnv1a(h, &v, sizeof v);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Design construction
// ---------------------------------------------------------------------------

namespace {

struct ColumnPlan {
  std::string name;
  // Evaluates the column on a row; NaN when missing.
  std::function<double(const ComparisonRecord&)> eval;
  std::string source;  // raw column referenced, for unknown-column checks
};

double value_or_nan(const ComparisonRecord& r, std::string_view name) {
  const auto v = column_value(r, name);
  return v ? *v : kNaN;
}

}  // namespace

Design build_design(const std::vector<ComparisonRecord>& rows, const ModelSpec& spec, bool check_rank) {
  if (spec.outcome.empty()) throw Error(ErrorCode::InvalidArgument, "model outcome not set");

  std::vector<ColumnPlan> plan;
  std::vector<std::string> referenced{spec.outcome};
  auto continuous = [&](const std::string& column) {
    plan.push_back({column, [column](const ComparisonRecord& r) { return value_or_nan(r, column); }, column});
    referenced.push_back(column);
  };
  if (spec.apc_mode) {
    const auto [age, time] = apc_columns(*spec.apc_mode);
    continuous(age);
    continuous(time);
  }
  std::vector<const CategoricalTerm*> factors;
  for (const auto& term : spec.fixed_terms) {
    if (const auto* c = std::get_if<ContinuousTerm>(&term)) {
      continuous(c->column);
    } else if (const auto* f = std::get_if<CategoricalTerm>(&term)) {
      if (f->levels.size() < 2 || f->reference >= f->levels.size()) {
        throw Error(ErrorCode::InvalidArgument, "factor '" + f->name + "' needs >= 2 levels and a valid reference");
      }
      factors.push_back(f);
      referenced.push_back(f->column);
      for (std::size_t l = 0; l < f->levels.size(); ++l) {
        if (l == f->reference) continue;
        const auto level = f->levels[l];
        const auto column = f->column;
        plan.push_back({f->name + "[" + level.label + "]",
                        [column, level](const ComparisonRecord& r) {
                          const double v = value_or_nan(r, column);
                          if (std::isnan(v)) return kNaN;
                          return (v >= level.lo && v <= level.hi) ? 1.0 : 0.0;
                        },
                        column});
      }
    } else {
      const auto& ix = std::get<InteractionTerm>(term);
      const auto left = ix.left, right = ix.right;
      plan.push_back({left + ":" + right,
                      [left, right](const ComparisonRecord& r) { return value_or_nan(r, left) * value_or_nan(r, right); },
                      left});
      referenced.push_back(left);
      referenced.push_back(right);
    }
  }
  const bool slope = spec.random == RandomStructure::InterceptAndSlopeOnT;
  if (slope) referenced.push_back(spec.slope_column);

  for (const auto& name : referenced) {
    const bool known = std::any_of(rows.begin(), rows.end(), [&](const auto& r) { return column_value(r, name).has_value(); });
    if (!known && !rows.empty()) throw Error(ErrorCode::InvalidArgument, "unknown column '" + name + "'");
  }

  auto in_some_level = [](const CategoricalTerm& f, double v) {
    return std::any_of(f.levels.begin(), f.levels.end(), [v](const auto& l) { return v >= l.lo && v <= l.hi; });
  };

  Design d;
  d.random = spec.random;
  d.column_names.push_back("Intercept");
  for (const auto& c : plan) d.column_names.push_back(c.name);

  std::vector<double> ys, slopes;
  std::vector<std::vector<double>> xs;
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double y = value_or_nan(r, spec.outcome);
    bool ok = std::isfinite(y);
    std::vector<double> x(plan.size());
    for (std::size_t c = 0; ok && c < plan.size(); ++c) {
      x[c] = plan[c].eval(r);
      ok = std::isfinite(x[c]);
    }
    for (const auto* f : factors) ok = ok && in_some_level(*f, value_or_nan(r, f->column));
    double s = 0.0;
    if (ok && slope) {
      s = value_or_nan(r, spec.slope_column);
      ok = std::isfinite(s);
    }
    if (!ok) {
      ++d.n_excluded;
      continue;
    }
    ys.push_back(y);
    xs.push_back(std::move(x));
    slopes.push_back(s);
    labels.push_back(r.gallery_subject);
    d.source_rows.push_back(i);
  }
  if (ys.empty()) throw Error(ErrorCode::EmptyInput, "no complete rows for model of '" + spec.outcome + "'");

  // Canonical row order, so fits do not depend on input order.
  std::vector<std::size_t> perm(ys.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  auto key = [&](std::size_t k) {
    const auto& r = rows[d.source_rows[k]];
    return std::tie(labels[k], r.gallery_image_id, r.probe_image_id, r.eye, ys[k], xs[k], slopes[k]);
  };
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  auto apply = [&perm](auto& v) {
    auto sorted = v;
    for (std::size_t k = 0; k < perm.size(); ++k) sorted[k] = std::move(v[perm[k]]);
    v = std::move(sorted);
  };
  apply(ys);
  apply(xs);
  apply(slopes);
  apply(labels);
  apply(d.source_rows);

  for (const auto* f : factors) {
    for (const auto& level : f->levels) {
      const bool present = std::any_of(d.source_rows.begin(), d.source_rows.end(), [&](std::size_t i) {
        const double v = value_or_nan(rows[i], f->column);
        return v >= level.lo && v <= level.hi;
      });
      if (!present) {
        throw Error(ErrorCode::InvalidArgument, "factor '" + f->name + "' level '" + level.label + "' has no rows");
      }
    }
  }

  const auto n = static_cast<Eigen::Index>(ys.size());
  const auto p = static_cast<Eigen::Index>(plan.size() + 1);
  d.y = Eigen::Map<const Eigen::VectorXd>(ys.data(), n);
  if (spec.standardize) {
    d.outcome_mean = d.y.mean();
    d.outcome_sd = n > 1 ? std::sqrt((d.y.array() - d.outcome_mean).square().sum() / static_cast<double>(n - 1)) : 0.0;
    if (!(d.outcome_sd > 0.0)) throw Error(ErrorCode::DegenerateData, "cannot standardize a constant outcome");
    d.y = (d.y.array() - d.outcome_mean) / d.outcome_sd;
    d.standardized = true;
  }
  d.X.resize(n, p);
  d.X.col(0).setOnes();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 1; c < p; ++c) d.X(i, c) = xs[static_cast<std::size_t>(i)][static_cast<std::size_t>(c - 1)];
  }
  d.Z.resize(n, slope ? 2 : 1);
  d.Z.col(0).setOnes();
  if (slope) d.Z.col(1) = Eigen::Map<const Eigen::VectorXd>(slopes.data(), n);

  std::map<std::string, int> ids;
  for (const auto& l : labels) ids.emplace(l, 0);
  int next = 0;
  for (auto& [label, id] : ids) {
    id = next++;
    d.group_labels.push_back(label);
  }
  d.group.reserve(labels.size());
  for (const auto& l : labels) d.group.push_back(ids.at(l));

  if (check_rank) {
    const auto bad = dependent_columns(d.X);
    if (!bad.empty()) {
      std::string names;
      for (const auto j : bad) names += (names.empty() ? "" : ", ") + d.column_names[j];
      throw Error(ErrorCode::RankDeficient, "rank-deficient design; dependent columns: " + names);
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// Profiled likelihood
// ---------------------------------------------------------------------------

namespace {

// The optimizer works on Z with its slope column divided by its RMS, so all
// relative-covariance factors are O(1). theta holds the log-Cholesky
// parameters of (D Sigma D) / sigma2 with D = diag(1, rms).
struct Problem {
  kernels::SubjectBlocks blocks;
  const Design* design = nullptr;
  Eigen::MatrixXd Zs;
  kernels::GroupIndex index;
  Eigen::VectorXd scale;  // per Z column
  Eigen::Index n = 0;
  Eigen::Index p = 0;
  Eigen::Index q = 0;
  Criterion criterion = Criterion::REML;

  static Problem make(const Design& d, Criterion criterion) {
    Problem pr;
    pr.n = d.y.size();
    pr.p = d.X.cols();
    pr.q = d.Z.cols();
    pr.criterion = criterion;
    pr.scale = Eigen::VectorXd::Ones(pr.q);
    if (pr.q == 2) {
      const double rms = std::sqrt(d.Z.col(1).squaredNorm() / static_cast<double>(pr.n));
      pr.scale(1) = rms > 0.0 ? rms : 1.0;
    }
    pr.design = &d;
    pr.Zs = d.Z;
    for (Eigen::Index c = 0; c < pr.q; ++c) pr.Zs.col(c) /= pr.scale(c);
    pr.index = kernels::GroupIndex::build(d.group, d.n_groups());
    pr.blocks = kernels::parallel::subject_blocks(d.X, pr.Zs, d.y, d.group, d.n_groups());
    return pr;
  }

  Eigen::Index n_theta() const { return q * (q + 1) / 2; }

  Eigen::MatrixXd lambda(const Eigen::VectorXd& theta) const {
    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(q, q);
    L(0, 0) = std::exp(theta(0));
    if (q == 2) {
      L(1, 0) = theta(1);
      L(1, 1) = std::exp(theta(2));
    }
    return L;
  }

  struct Eval {
    double deviance = 0.0;
    Eigen::VectorXd beta;
    Eigen::MatrixXd XtVinvX_inv;
    double sigma2 = 0.0;
  };

  // r' V~^-1 r from explicit residuals r = y - X beta; the normal-equation
  // form y'V~^-1 y - beta'X'V~^-1 y cancels badly when residuals are tiny.
  double residual_quadratic(const Eigen::MatrixXd& L, const Eigen::VectorXd& beta) const {
    const Eigen::VectorXd r = design->y - design->X * beta;
    double total = r.squaredNorm();
    const int groups = index.n_groups();
    std::vector<double> correction(static_cast<std::size_t>(groups), 0.0);
#pragma omp parallel for schedule(static)
    for (int g = 0; g < groups; ++g) {
      Eigen::VectorXd zr = Eigen::VectorXd::Zero(q);
      for (std::size_t k = index.offset[g]; k < index.offset[g + 1]; ++k) {
        const auto i = static_cast<Eigen::Index>(index.order[k]);
        zr += Zs.row(i).transpose() * r(i);
      }
      Eigen::MatrixXd M = L.transpose() * blocks.ZtZ[g] * L;
      M.diagonal().array() += 1.0;
      const Eigen::LLT<Eigen::MatrixXd> llt(M);
      const Eigen::VectorXd c = llt.matrixL().solve(L.transpose() * zr);
      correction[g] = c.squaredNorm();
    }
    for (const double c : correction) total -= c;
    return total;
  }

  Eval evaluate_lambda(const Eigen::MatrixXd& L, bool full) const {
    const auto t = kernels::parallel::reml_terms(blocks, L);
    const Eigen::LLT<Eigen::MatrixXd> llt(t.XtVinvX);
    Eval e;
    if (llt.info() != Eigen::Success) {
      e.deviance = std::numeric_limits<double>::infinity();
      return e;
    }
    e.beta = llt.solve(t.XtVinvy);
    const double r = std::max(residual_quadratic(L, e.beta), 1e-300);
    const double nn = static_cast<double>(n);
    const double pp = static_cast<double>(p);
    const double two_pi = 2.0 * std::numbers::pi;
    if (criterion == Criterion::REML) {
      const Eigen::MatrixXd Lx = llt.matrixL();
      const double logdet_x = 2.0 * Lx.diagonal().array().log().sum();
      e.sigma2 = r / (nn - pp);
      e.deviance = t.logdet_V + logdet_x + (nn - pp) * (1.0 + std::log(two_pi * e.sigma2));
    } else {
      e.sigma2 = r / nn;
      e.deviance = t.logdet_V + nn * (1.0 + std::log(two_pi * e.sigma2));
    }
    if (full) e.XtVinvX_inv = llt.solve(Eigen::MatrixXd::Identity(p, p));
    return e;
  }

  double deviance(const Eigen::VectorXd& theta) const {
    const double d = evaluate_lambda(lambda(theta), false).deviance;
    return std::isfinite(d) ? d : std::numeric_limits<double>::max();
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& theta) const {
    constexpr double h = 1e-4;
    Eigen::VectorXd g(theta.size());
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Eigen::VectorXd a = theta, b = theta;
      a(i) += h;
      b(i) -= h;
      g(i) = (deviance(a) - deviance(b)) / (2.0 * h);
    }
    return g;
  }

  Eigen::MatrixXd hessian(const Eigen::VectorXd& theta) const {
    constexpr double h = 1e-3;
    const Eigen::Index k = theta.size();
    Eigen::MatrixXd H(k, k);
    const double f0 = deviance(theta);
    for (Eigen::Index i = 0; i < k; ++i) {
      for (Eigen::Index j = i; j < k; ++j) {
        if (i == j) {
          Eigen::VectorXd a = theta, b = theta;
          a(i) += h;
          b(i) -= h;
          H(i, i) = (deviance(a) - 2.0 * f0 + deviance(b)) / (h * h);
        } else {
          Eigen::VectorXd pp = theta, pm = theta, mp = theta, mm = theta;
          pp(i) += h, pp(j) += h;
          pm(i) += h, pm(j) -= h;
          mp(i) -= h, mp(j) += h;
          mm(i) -= h, mm(j) -= h;
          H(i, j) = H(j, i) = (deviance(pp) - deviance(pm) - deviance(mp) + deviance(mm)) / (4.0 * h * h);
        }
      }
    }
    return H;
  }
};

struct Optimum {
  Eigen::VectorXd theta;
  double f = 0.0;
  int iterations = 0;
  bool converged = false;
};

// BFGS on the inverse Hessian with Armijo backtracking.
Optimum bfgs(const Problem& pr, Eigen::VectorXd x, const FitOptions& opt, int iteration_budget) {
  const Eigen::Index k = x.size();
  double f = pr.deviance(x);
  Eigen::VectorXd g = pr.gradient(x);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(k, k);
  Optimum out;
  for (int it = 1; it <= iteration_budget; ++it) {
    out.iterations = it;
    Eigen::VectorXd d = -H * g;
    if (!(g.dot(d) < 0.0)) {
      H.setIdentity();
      d = -g;
    }
    const double max_step = d.cwiseAbs().maxCoeff();
    if (!(max_step > 0.0)) {
      out.converged = true;
      break;
    }
    double alpha = std::min(1.0, 2.0 / max_step);
    const double slope = g.dot(d);
    Eigen::VectorXd x_new;
    double f_new = f;
    bool accepted = false;
    while (alpha * max_step > 1e-14) {
      x_new = x + alpha * d;
      f_new = pr.deviance(x_new);
      if (f_new <= f + 1e-4 * alpha * slope) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      // No decrease along the quasi-Newton direction: stationary to
      // working precision.
      out.converged = true;
      break;
    }
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd g_new = pr.gradient(x_new);
    const Eigen::VectorXd yk = g_new - g;
    const double sy = s.dot(yk);
    const double change = std::abs(f - f_new) / std::max(1.0, std::abs(f));
    x = x_new;
    f = f_new;
    g = g_new;
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(k, k);
      H = (I - rho * s * yk.transpose()) * H * (I - rho * yk * s.transpose()) + rho * s * s.transpose();
    }
    if (change < opt.rel_tolerance || s.cwiseAbs().maxCoeff() < opt.step_tolerance) {
      out.converged = true;
      break;
    }
  }
  out.theta = x;
  out.f = f;
  return out;
}

// Newton refinement with a finite-difference Hessian. Large steps must
// decrease the criterion; steps already at the noise floor are taken unless
// they make it measurably worse.
void polish(const Problem& pr, Optimum& o) {
  for (int it = 0; it < 20; ++it) {
    const Eigen::MatrixXd H = pr.hessian(o.theta);
    const Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) return;
    const Eigen::VectorXd step = -llt.solve(pr.gradient(o.theta));
    const double size = step.cwiseAbs().maxCoeff();
    if (!(size > 1e-12)) return;
    const double slack = size < 1e-5 ? 1e-12 * std::max(1.0, std::abs(o.f)) : 0.0;
    double alpha = 1.0;
    bool moved = false;
    while (alpha > 1e-4) {
      const Eigen::VectorXd cand = o.theta + alpha * step;
      const double f = pr.deviance(cand);
      if (f < o.f || (slack > 0.0 && f <= o.f + slack)) {
        o.theta = cand;
        o.f = std::min(f, o.f);
        moved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!moved || alpha * size < 1e-10) return;
  }
}

Eigen::VectorXd initial_theta(const Problem& pr) {
  Eigen::VectorXd t = Eigen::VectorXd::Zero(pr.n_theta());
  if (pr.q == 2) t(2) = std::log(0.5);
  return t;
}

}  // namespace

double profiled_deviance(const Design& design, const Eigen::VectorXd& theta, Criterion criterion) {
  const Problem pr = Problem::make(design, criterion);
  if (theta.size() != pr.n_theta()) throw Error(ErrorCode::InvalidArgument, "theta has the wrong length");
  return pr.deviance(theta);
}

FittedModel fit(const Design& design, Criterion criterion, const FitOptions& options) {
  const auto n = static_cast<std::size_t>(design.y.size());
  const auto p = static_cast<std::size_t>(design.X.cols());
  if (n <= p) throw Error(ErrorCode::InvalidArgument, "fit requires more observations than fixed effects");
  if (design.n_groups() < 2) throw Error(ErrorCode::InvalidArgument, "fit requires at least two subjects");
  if ((design.y.array() == design.y(0)).all()) throw Error(ErrorCode::DegenerateData, "outcome is constant");
  if (!dependent_columns(design.X).empty()) throw Error(ErrorCode::RankDeficient, "singular fixed-effects design");

  const Problem pr = Problem::make(design, criterion);
  Optimum best = bfgs(pr, initial_theta(pr), options, options.max_iterations);
  int total_iterations = best.iterations;
  if (best.converged) polish(pr, best);

  // Local-optimum check against random perturbations; restart from any
  // strictly better point.
  Rng rng(options.perturbation_seed);
  bool passed = true;
  for (int restart = 0; restart < 3; ++restart) {
    passed = true;
    Eigen::VectorXd better;
    double f_better = best.f;
    for (int k = 0; k < options.perturbation_checks; ++k) {
      Eigen::VectorXd cand = best.theta;
      for (Eigen::Index i = 0; i < cand.size(); ++i) cand(i) += rng.normal(0.0, 0.5);
      const double f = pr.deviance(cand);
      if (f < f_better - 1e-9 * std::max(1.0, std::abs(best.f))) {
        f_better = f;
        better = cand;
        passed = false;
      }
    }
    if (passed) break;
    const int budget = std::max(1, options.max_iterations - total_iterations);
    Optimum again = bfgs(pr, better, options, budget);
    total_iterations += again.iterations;
    if (again.converged) polish(pr, again);
    if (again.f < best.f) best = again;
  }

  FittedModel m;
  m.criterion = criterion;
  m.random = design.random;
  m.names = design.column_names;
  m.n_obs = n;
  m.n_subjects = static_cast<std::size_t>(design.n_groups());
  m.n_excluded = design.n_excluded;
  m.iterations = total_iterations;
  m.converged = best.converged;
  m.local_check_passed = passed;
  m.theta = best.theta;
  m.row_checksum = design.row_checksum();
  if (pr.q == 2) m.mean_slope_covariate = design.Z.col(1).mean();

  // Boundary: an eigenvalue of the relative covariance (in scaled units)
  // that is negligible next to sigma2, or whose absolute variance is
  // negligible next to var(y), is clamped to zero and the fixed effects
  // re-solved.
  Eigen::MatrixXd L = pr.lambda(best.theta);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(L * L.transpose());
  Eigen::VectorXd ev = eig.eigenvalues();
  const double var_y = (design.y.array() - design.y.mean()).square().mean();
  const double sigma2_hat = pr.evaluate_lambda(L, false).sigma2;
  auto negligible = [&](double v) { return v < 1e-6 || v * sigma2_hat < 1e-10 * var_y; };
  if (negligible(ev.minCoeff())) {
    m.boundary = true;
    for (Eigen::Index i = 0; i < ev.size(); ++i) ev(i) = negligible(ev(i)) ? 0.0 : ev(i);
    L = eig.eigenvectors() * ev.cwiseSqrt().asDiagonal();
    m.message = "variance components at the boundary; clamped to PSD";
  }
  const auto e = pr.evaluate_lambda(L, true);
  m.loglik = -0.5 * e.deviance;
  m.sigma2 = e.sigma2;
  m.beta = e.beta;
  m.beta_cov = e.sigma2 * e.XtVinvX_inv;
  m.se = m.beta_cov.diagonal().cwiseSqrt();
  m.z = m.beta.cwiseQuotient(m.se);
  m.p.resize(m.z.size());
  for (Eigen::Index i = 0; i < m.z.size(); ++i) m.p(i) = two_sided_p(m.z(i));
  const Eigen::MatrixXd Dinv = pr.scale.cwiseInverse().asDiagonal();
  m.sigma = e.sigma2 * Dinv * (L * L.transpose()) * Dinv;
  const auto q = static_cast<std::size_t>(pr.q);
  m.n_params = p + q * (q + 1) / 2 + 1;
  m.aic = 2.0 * static_cast<double>(m.n_params) - 2.0 * m.loglik;
  if (!m.converged && m.message.empty()) m.message = "iteration limit reached";
  return m;
}

Eigen::VectorXd gls_beta(const Design& design, const Eigen::MatrixXd& sigma, double sigma2) {
  const Problem pr = Problem::make(design, Criterion::REML);
  if (sigma.rows() != pr.q || sigma.cols() != pr.q || !(sigma2 > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "gls_beta: covariance shape mismatch");
  }
  const Eigen::MatrixXd D = pr.scale.asDiagonal();
  const Eigen::MatrixXd rel = D * sigma * D / sigma2;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(rel);
  const Eigen::MatrixXd L = eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
  return pr.evaluate_lambda(L, false).beta;
}

std::optional<std::size_t> FittedModel::index_of(std::string_view name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return i;
  return std::nullopt;
}

double FittedModel::random_correlation() const {
  if (sigma.rows() < 2) return kNaN;
  const double denom = std::sqrt(sigma(0, 0) * sigma(1, 1));
  return denom > 0.0 ? sigma(1, 0) / denom : kNaN;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

LrtResult likelihood_ratio_test(const FittedModel& nested, const FittedModel& full) {
  if (nested.criterion != full.criterion) {
    throw Error(ErrorCode::NotNested, "LRT requires both models fitted with the same criterion");
  }
  const bool same_fixed = nested.names == full.names;
  if (!same_fixed && full.criterion == Criterion::REML) {
    throw Error(ErrorCode::NotNested, "models differ in fixed effects; refit both by ML");
  }
  for (const auto& name : nested.names) {
    if (!full.index_of(name)) throw Error(ErrorCode::NotNested, "term '" + name + "' missing from the full model");
  }
  if (nested.random == RandomStructure::InterceptAndSlopeOnT && full.random == RandomStructure::InterceptOnly) {
    throw Error(ErrorCode::NotNested, "nested model has the richer random structure");
  }
  if (nested.n_params > full.n_params) throw Error(ErrorCode::NotNested, "nested model has more parameters");
  if (nested.n_obs != full.n_obs || nested.row_checksum != full.row_checksum) {
    throw Error(ErrorCode::RowMismatch, "models were fitted on different rows");
  }
  LrtResult r;
  r.chi2 = std::max(0.0, 2.0 * (full.loglik - nested.loglik));
  r.df = full.n_params - nested.n_params;
  if (r.df == 0) {
    r.p = 1.0;
  } else {
    const boost::math::chi_squared_distribution<double> chi(static_cast<double>(r.df));
    r.p = boost::math::cdf(boost::math::complement(chi, r.chi2));
  }
  return r;
}

double icc(const FittedModel& fit) {
  if (fit.random != RandomStructure::InterceptOnly) {
    throw Error(ErrorCode::InvalidArgument, "ICC is defined from an intercept-only fit");
  }
  const double between = fit.sigma(0, 0);
  return between / (between + fit.sigma2);
}

Eigen::VectorXd predict_fixed(const FittedModel& fit, const Eigen::MatrixXd& X) {
  if (X.cols() != fit.beta.size()) throw Error(ErrorCode::InvalidArgument, "design width does not match the fit");
  return X * fit.beta;
}

double marginal_r2(const FittedModel& fit, const Eigen::MatrixXd& X) {
  const Eigen::VectorXd f = predict_fixed(fit, X);
  const double var_f = (f.array() - f.mean()).square().sum() / static_cast<double>(f.size());
  double random = fit.sigma(0, 0);
  if (fit.sigma.rows() == 2) {
    const double t = fit.mean_slope_covariate;
    random += 2.0 * t * fit.sigma(1, 0) + t * t * fit.sigma(1, 1);
  }
  const double total = var_f + random + fit.sigma2;
  if (!(total > 0.0)) throw Error(ErrorCode::DegenerateData, "marginal R^2: zero total variance");
  return var_f / total;
}

Eigen::VectorXd vif(const Eigen::MatrixXd& X, VifCentering centering) {
  if (X.cols() < 2) throw Error(ErrorCode::InvalidArgument, "VIF needs at least two predictors");
  return kernels::parallel::vif_columns(X, centering == VifCentering::Centered);
}

ApcReport compare_apc(const std::vector<ComparisonRecord>& rows, const ModelSpec& base_spec, const FitOptions& options) {
  ApcReport report;
  for (const auto mode : {ApcMode::GalleryAgePlusT, ApcMode::ProbeAgePlusT, ApcMode::GalleryAgePlusDeltaA}) {
    ModelSpec spec = base_spec;
    spec.apc_mode = mode;
    const Design d = build_design(rows, spec);
    ApcEntry e;
    e.mode = mode;
    std::tie(e.age_term, e.time_term) = apc_columns(mode);
    e.reml = fit(d, Criterion::REML, options);
    const FittedModel ml = fit(d, Criterion::ML, options);
    e.ml_loglik = ml.loglik;
    e.ml_aic = ml.aic;
    e.n_rows = static_cast<std::size_t>(d.y.size());
    e.outcome_checksum = vector_checksum(d.y);
    report.entries.push_back(std::move(e));
  }
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : report.entries) best = std::min(best, e.ml_aic);
  for (auto& e : report.entries) e.delta_aic = e.ml_aic - best;

  ModelSpec over = base_spec;
  over.apc_mode.reset();
  over.fixed_terms.clear();
  for (const char* c : {"A_gallery", "A_probe", "T"}) over.fixed_terms.emplace_back(ContinuousTerm{c});
  for (const auto& t : base_spec.fixed_terms) over.fixed_terms.push_back(t);
  const Design d = build_design(rows, over, false);
  const Eigen::MatrixXd predictors = d.X.rightCols(d.X.cols() - 1);
  report.overidentified_columns.assign(d.column_names.begin() + 1, d.column_names.end());
  report.overidentified_vif = vif(predictors, VifCentering::Uncentered);
  report.overidentified_vif_centered = vif(predictors, VifCentering::Centered);
  return report;
}

std::vector<ComparisonRecord> stack_standardized(const std::vector<ComparisonRecord>& rows,
                                                 const std::vector<std::string>& matchers, bool per_eye) {
  if (matchers.size() < 2) throw Error(ErrorCode::InvalidArgument, "stacking needs at least two matchers");
  std::vector<ComparisonRecord> out;
  for (std::size_t k = 0; k < matchers.size(); ++k) {
    const auto& m = matchers[k];
    // Mean and sample SD per stratum (eye or pooled).
    std::map<int, std::pair<double, double>> stats;
    std::map<int, std::size_t> counts;
    auto stratum = [&](const ComparisonRecord& r) { return per_eye ? static_cast<int>(r.eye) : 0; };
    for (const auto& r : rows) {
      if (auto it = r.scores.find(m); it != r.scores.end()) {
        stats[stratum(r)].first += it->second;
        ++counts[stratum(r)];
      }
    }
    for (auto& [s, v] : stats) v.first /= static_cast<double>(counts[s]);
    for (const auto& r : rows) {
      if (auto it = r.scores.find(m); it != r.scores.end()) {
        const double dlt = it->second - stats[stratum(r)].first;
        stats[stratum(r)].second += dlt * dlt;
      }
    }
    for (auto& [s, v] : stats) {
      v.second = counts[s] > 1 ? std::sqrt(v.second / static_cast<double>(counts[s] - 1)) : 0.0;
      if (!(v.second > 0.0)) throw Error(ErrorCode::DegenerateData, "matcher '" + m + "' has constant scores");
    }
    for (const auto& r : rows) {
      const auto it = r.scores.find(m);
      if (it == r.scores.end()) continue;
      ComparisonRecord s = r;
      const auto& [mean, sd] = stats[stratum(r)];
      s.extra["z_score"] = (it->second - mean) / sd;
      s.extra["matcher_index"] = static_cast<double>(k);
      for (std::size_t j = 1; j < matchers.size(); ++j) s.extra["matcher_" + matchers[j]] = j == k ? 1.0 : 0.0;
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace permanence
