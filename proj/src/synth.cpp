#include "permanence/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <unordered_map>

#include "permanence/error.hpp"
#include "permanence/pairing.hpp"
#include "permanence/rng.hpp"

namespace permanence {

namespace {

using nlohmann::json;

// Substream salts: captures, random effects, genuine noise, impostor draws,
// impostor pairing.
constexpr std::uint64_t kCaptureStream = 0x11;
constexpr std::uint64_t kEffectStream = 0x2000;
constexpr std::uint64_t kGenuineStream = 0x3000;
constexpr std::uint64_t kImpostorStream = 0x4000;

void check_bounded(const Bounded& b, const std::string& name) {
  if (!(b.sd > 0.0) || !(b.lo < b.hi) || !std::isfinite(b.mean)) {
    throw Error(ErrorCode::ConfigInvalid, "covariate '" + name + "' needs sd > 0 and lo < hi");
  }
}

double draw(Rng& rng, const Bounded& b) { return rng.truncated_normal(b.mean, b.sd, b.lo, b.hi); }

double draw(Rng& rng, const ScoreDistribution& d) {
  return d.kind == ScoreDistribution::Kind::Normal ? rng.normal(d.a, d.b) : d.a + (d.b - d.a) * rng.uniform();
}

// Square root of a PSD 2x2 matrix (symmetric eigen form, tolerates zeros).
Eigen::Matrix2d psd_root(const Eigen::Matrix2d& s) {
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(s);
  return eig.eigenvectors() * eig.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
}

std::string subject_name(int s) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "S%04d", s + 1);
  return buf;
}

std::string image_name(int s, int collection, Eye eye, int k) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "S%04d_C%02d_%s_%d", s + 1, collection, eye == Eye::Left ? "L" : "R", k + 1);
  return buf;
}

struct SubjectDraw {
  double age0 = 0.0;
  std::vector<CaptureRecord> captures;
};

SubjectDraw draw_subject(const SynthConfig& cfg, int s) {
  Rng rng(mix_seed(mix_seed(cfg.seed, kCaptureStream), static_cast<std::uint64_t>(s)));
  SubjectDraw out;
  const auto span = static_cast<std::uint64_t>(cfg.enrollment_age_max - cfg.enrollment_age_min + 1);
  out.age0 = cfg.enrollment_age_min + static_cast<double>(rng.below(span)) + rng.uniform();
  const auto n_sessions = static_cast<int>(cfg.session_months.size());
  const int start = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.enrollment_sessions)));
  for (int k = start; k < n_sessions; ++k) {
    if (k > start && rng.uniform() < cfg.attrition_rate) break;
    const int month = cfg.session_months[static_cast<std::size_t>(k)];
    const int age = static_cast<int>(std::floor(out.age0 + month / 12.0));
    for (const Eye eye : {Eye::Left, Eye::Right}) {
      for (int i = 0; i < cfg.images_per_eye_per_session; ++i) {
        CaptureRecord c;
        c.image_id = image_name(s, k + 1, eye, i);
        c.subject_id = subject_name(s);
        c.eye = eye;
        c.collection_index = k + 1;
        c.capture_time_months = month;
        c.age_years = age;
        c.quality = draw(rng, cfg.quality);
        c.usable_area = draw(rng, cfg.usable_area);
        c.circularity = draw(rng, cfg.circularity);
        const double dilation = draw(rng, cfg.dilation);
        c.iris_radius = draw(rng, cfg.iris_radius);
        c.pupil_radius = dilation * c.iris_radius;
        out.captures.push_back(std::move(c));
      }
    }
  }
  return out;
}

double linear_predictor(const std::map<std::string, double>& beta, const ComparisonRecord& row) {
  double y = 0.0;
  for (const auto& [name, b] : beta) {
    if (name == "Intercept") {
      y += b;
      continue;
    }
    const auto v = column_value(row, name);
    if (!v) throw Error(ErrorCode::ConfigInvalid, "beta refers to unknown column '" + name + "'");
    y += b * *v;
  }
  return y;
}

}  // namespace

void ScoreDistribution::validate() const {
  if (!std::isfinite(a) || !std::isfinite(b)) throw Error(ErrorCode::InvalidArgument, "non-finite distribution parameter");
  if (kind == Kind::Normal && !(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "normal distribution needs sd > 0");
  if (kind == Kind::Uniform && !(a < b)) throw Error(ErrorCode::InvalidArgument, "uniform distribution needs lo < hi");
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::ConfigInvalid, m); };
  if (n_subjects < 1) fail("n_subjects must be >= 1");
  if (enrollment_age_min > enrollment_age_max || enrollment_age_min < 0) fail("invalid enrollment age range");
  if (session_months.empty()) fail("session schedule is empty");
  for (std::size_t i = 1; i < session_months.size(); ++i) {
    if (session_months[i] <= session_months[i - 1]) fail("session schedule must be strictly increasing");
  }
  if (enrollment_sessions < 1 || enrollment_sessions > static_cast<int>(session_months.size())) {
    fail("enrollment_sessions must be within the schedule");
  }
  if (images_per_eye_per_session < 1) fail("images_per_eye_per_session must be >= 1");
  if (!(attrition_rate >= 0.0 && attrition_rate < 1.0)) fail("attrition_rate must be in [0, 1)");
  check_bounded(quality, "quality");
  check_bounded(usable_area, "usable_area");
  check_bounded(circularity, "circularity");
  check_bounded(dilation, "dilation");
  check_bounded(iris_radius, "iris_radius");
  if (quality.lo < 0 || quality.hi > 100 || usable_area.lo < 0 || usable_area.hi > 100 || circularity.lo < 0 ||
      circularity.hi > 100) {
    fail("quality metric bounds must lie within [0, 100]");
  }
  if (!(dilation.lo > 0.0) || !(dilation.hi < 1.0)) fail("dilation bounds must lie within (0, 1)");
  if (!(iris_radius.lo > 0.0)) fail("iris radius bound must be positive");
  std::set<std::string> names;
  for (const auto& m : matchers) {
    try {
      m.profile.validate();
      m.impostor.validate();
    } catch (const Error& e) {
      fail("matcher '" + m.profile.name + "': " + e.what());
    }
    if (!names.insert(m.profile.name).second) fail("duplicate matcher '" + m.profile.name + "'");
    if (!(m.sigma2_true >= 0.0)) fail("sigma2_true must be >= 0");
    if (std::abs(m.sigma_true(0, 1) - m.sigma_true(1, 0)) > 1e-12 * (1.0 + m.sigma_true.norm())) {
      fail("Sigma_true must be symmetric");
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(m.sigma_true);
    if (eig.eigenvalues().minCoeff() < -1e-12 * (1.0 + m.sigma_true.norm())) fail("Sigma_true must be PSD");
  }
}

std::vector<int> study_session_schedule() {
  std::vector<int> months;
  for (int m = 0; m <= 42; m += 6) months.push_back(m);
  for (int m = 72; m <= 102; m += 6) months.push_back(m);
  return months;
}

SynthConfig study_shaped_config() {
  SynthConfig cfg;
  cfg.session_months = study_session_schedule();

  // Similarity scale: total SD ~130 points, ICC 0.65.
  SynthMatcher v;
  v.profile = {"verieye", Orientation::HigherIsBetter, 0.0, 3000.0, 34.0};
  v.beta = {{"Intercept", -600.0}, {"A_gallery", 7.58}, {"T", -0.60},       {"Q_gallery", 1.59},
            {"Q_probe", 1.19},     {"U_gallery", -0.83}, {"U_probe", 1.99}, {"DC", 438.6},
            {"C_gallery", 3.62},   {"C_probe", 1.18}};
  const double sd_v = 130.0, rho_v = 0.1, slope_v = 0.3;
  const double s0_v = std::sqrt(0.65) * sd_v;
  v.sigma_true << s0_v * s0_v, rho_v * s0_v * slope_v, rho_v * s0_v * slope_v, slope_v * slope_v;
  v.sigma2_true = 0.35 * sd_v * sd_v;
  v.impostor = ScoreDistribution::normal(10.0, 8.0);

  // Distance scale (fractional Hamming distance).
  SynthMatcher o;
  o.profile = {"openiris", Orientation::LowerIsBetter, 0.0, 1.0, 0.42};
  o.beta = {{"Intercept", 0.78},     {"A_gallery", -0.0036}, {"T", 0.00024},     {"Q_gallery", -0.00037},
            {"Q_probe", -0.00032},   {"U_gallery", 0.00010}, {"U_probe", -0.0010}, {"DC", -0.124},
            {"C_gallery", -0.0020},  {"C_probe", -0.00091}};
  const double sd_o = 0.045, rho_o = -0.1, slope_o = 0.00015;
  const double s0_o = std::sqrt(0.65) * sd_o;
  o.sigma_true << s0_o * s0_o, rho_o * s0_o * slope_o, rho_o * s0_o * slope_o, slope_o * slope_o;
  o.sigma2_true = 0.35 * sd_o * sd_o;
  o.impostor = ScoreDistribution::normal(0.46, 0.012);

  cfg.matchers = {v, o};
  return cfg;
}

SynthOutput generate_longitudinal(const SynthConfig& cfg) {
  cfg.validate();
  SynthOutput out;
  auto& truth = out.truth;
  const int n = cfg.n_subjects;

  std::vector<SubjectDraw> subjects(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
  for (int s = 0; s < n; ++s) subjects[static_cast<std::size_t>(s)] = draw_subject(cfg, s);
  for (int s = 0; s < n; ++s) {
    auto& d = subjects[static_cast<std::size_t>(s)];
    truth.subjects.push_back(subject_name(s));
    truth.enrollment_age.push_back(d.age0);
    for (auto& c : d.captures) out.captures.push_back(std::move(c));
  }

  for (std::size_t m = 0; m < cfg.matchers.size(); ++m) {
    const auto& mc = cfg.matchers[m];
    MatcherTruth mt;
    mt.name = mc.profile.name;
    mt.beta = mc.beta;
    mt.sigma_true = mc.sigma_true;
    mt.sigma2_true = mc.sigma2_true;
    const Eigen::Matrix2d root = psd_root(mc.sigma_true);
    for (int s = 0; s < n; ++s) {
      Rng rng(mix_seed(mix_seed(cfg.seed, kEffectStream + m), static_cast<std::uint64_t>(s)));
      const Eigen::Vector2d z(rng.normal(), rng.normal());
      const Eigen::Vector2d u = root * z;
      mt.effects.emplace_back(u(0), u(1));
    }
    truth.matchers.push_back(std::move(mt));
  }

  auto genuine = generate_genuine_pairs(out.captures);
  std::vector<ComparisonRecord> impostor;
  if (cfg.max_impostor_probes > 0) {
    PairingConfig pc;
    pc.max_impostor_probes = cfg.max_impostor_probes;
    pc.base_seed = cfg.seed;
    impostor = generate_impostor_pairs(out.captures, pc);
  }
  truth.n_genuine = genuine.size();
  truth.n_impostor = impostor.size();

  std::unordered_map<std::string, std::size_t> subject_index;
  for (std::size_t s = 0; s < truth.subjects.size(); ++s) subject_index.emplace(truth.subjects[s], s);

  auto& rows = out.pairs.rows;
  rows = std::move(genuine);
  rows.insert(rows.end(), std::make_move_iterator(impostor.begin()), std::make_move_iterator(impostor.end()));
  if (!rows.empty()) {
    for (const auto& mc : cfg.matchers) linear_predictor(mc.beta, rows.front());
  }

  for (std::size_t m = 0; m < cfg.matchers.size(); ++m) {
    const auto& mc = cfg.matchers[m];
    auto& mt = truth.matchers[m];
    out.pairs.matchers.push_back(mc.profile.name);
    const double sigma = std::sqrt(mc.sigma2_true);
    std::vector<char> clamped(rows.size(), 0);
    const auto n_rows = static_cast<std::int64_t>(rows.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n_rows; ++i) {
      auto& row = rows[static_cast<std::size_t>(i)];
      double y;
      if (row.kind == PairKind::Genuine) {
        Rng rng(mix_seed(mix_seed(cfg.seed, kGenuineStream + m), static_cast<std::uint64_t>(i)));
        const auto [u0, u1] = mt.effects[subject_index.at(row.gallery_subject)];
        y = linear_predictor(mc.beta, row) + u0 + u1 * row.gap_months + sigma * rng.normal();
      } else {
        Rng rng(mix_seed(mix_seed(cfg.seed, kImpostorStream + m), static_cast<std::uint64_t>(i)));
        y = draw(rng, mc.impostor);
      }
      if (y < mc.profile.score_min || y > mc.profile.score_max) {
        y = std::clamp(y, mc.profile.score_min, mc.profile.score_max);
        clamped[static_cast<std::size_t>(i)] = 1;
      }
      row.scores[mc.profile.name] = y;
    }
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!clamped[i]) continue;
      ++(rows[i].kind == PairKind::Genuine ? mt.clamped_genuine : mt.clamped_impostor);
    }
  }

  out.scores.reserve(rows.size() * cfg.matchers.size());
  for (const auto& row : rows) {
    for (const auto& [name, score] : row.scores) {
      out.scores.push_back({row.gallery_image_id, row.probe_image_id, name, score});
    }
  }
  return out;
}

std::pair<std::vector<double>, std::vector<double>> generate_score_populations(std::size_t n,
                                                                               const ScoreDistribution& genuine,
                                                                               const ScoreDistribution& impostor,
                                                                               std::uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::InvalidArgument, "population size must be >= 1");
  genuine.validate();
  impostor.validate();
  std::pair<std::vector<double>, std::vector<double>> out;
  Rng g(mix_seed(seed, 0)), im(mix_seed(seed, 1));
  out.first.reserve(n);
  out.second.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.first.push_back(draw(g, genuine));
  for (std::size_t i = 0; i < n; ++i) out.second.push_back(draw(im, impostor));
  return out;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

namespace {

json bounded_json(const Bounded& b) { return {{"mean", b.mean}, {"sd", b.sd}, {"lo", b.lo}, {"hi", b.hi}}; }

template <typename T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorCode::ConfigInvalid, where + ": missing or invalid '" + key + "'");
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw Error(ErrorCode::ConfigInvalid, where + ": unknown key '" + key + "'");
    }
  }
}

Bounded bounded_from(const json& j, const std::string& where) {
  reject_unknown(j, {"mean", "sd", "lo", "hi"}, where);
  return {get<double>(j, "mean", where), get<double>(j, "sd", where), get<double>(j, "lo", where),
          get<double>(j, "hi", where)};
}

json distribution_json(const ScoreDistribution& d) {
  if (d.kind == ScoreDistribution::Kind::Normal) return {{"kind", "normal"}, {"mean", d.a}, {"sd", d.b}};
  return {{"kind", "uniform"}, {"lo", d.a}, {"hi", d.b}};
}

ScoreDistribution distribution_from(const json& j, const std::string& where) {
  const auto kind = get<std::string>(j, "kind", where);
  if (kind == "normal") {
    reject_unknown(j, {"kind", "mean", "sd"}, where);
    return ScoreDistribution::normal(get<double>(j, "mean", where), get<double>(j, "sd", where));
  }
  if (kind == "uniform") {
    reject_unknown(j, {"kind", "lo", "hi"}, where);
    return ScoreDistribution::uniform(get<double>(j, "lo", where), get<double>(j, "hi", where));
  }
  throw Error(ErrorCode::ConfigInvalid, where + ": distribution kind must be normal or uniform");
}

json matrix_json(const Eigen::Matrix2d& m) { return {{m(0, 0), m(0, 1)}, {m(1, 0), m(1, 1)}}; }

Eigen::Matrix2d matrix_from(const json& j, const std::string& where) {
  try {
    Eigen::Matrix2d m;
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 2; ++c) m(r, c) = j.at(static_cast<std::size_t>(r)).at(static_cast<std::size_t>(c)).get<double>();
    return m;
  } catch (const json::exception&) {
    throw Error(ErrorCode::ConfigInvalid, where + ": expected a 2x2 array");
  }
}

}  // namespace

json to_json(const MatcherProfile& p) {
  return {{"name", p.name},
          {"orientation", std::string(to_string(p.orientation))},
          {"score_min", p.score_min},
          {"score_max", p.score_max},
          {"default_threshold", p.default_threshold}};
}

MatcherProfile matcher_profile_from_json(const json& j) {
  const std::string where = "matcher profile";
  reject_unknown(j, {"name", "orientation", "score_min", "score_max", "default_threshold"}, where);
  MatcherProfile p;
  p.name = get<std::string>(j, "name", where);
  const auto o = parse_orientation(get<std::string>(j, "orientation", where));
  if (!o) throw Error(ErrorCode::ConfigInvalid, where + ": orientation must be higher or lower");
  p.orientation = *o;
  p.score_min = get<double>(j, "score_min", where);
  p.score_max = get<double>(j, "score_max", where);
  p.default_threshold = get<double>(j, "default_threshold", where);
  try {
    p.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigInvalid, e.what());
  }
  return p;
}

json to_json(const SynthConfig& c) {
  json matchers = json::array();
  for (const auto& m : c.matchers) {
    matchers.push_back({{"profile", to_json(m.profile)},
                        {"beta", m.beta},
                        {"sigma_true", matrix_json(m.sigma_true)},
                        {"sigma2_true", m.sigma2_true},
                        {"impostor", distribution_json(m.impostor)}});
  }
  return {{"n_subjects", c.n_subjects},
          {"enrollment_age_range", {c.enrollment_age_min, c.enrollment_age_max}},
          {"session_schedule", c.session_months},
          {"enrollment_sessions", c.enrollment_sessions},
          {"images_per_eye_per_session", c.images_per_eye_per_session},
          {"attrition_rate", c.attrition_rate},
          {"covariates",
           {{"quality", bounded_json(c.quality)},
            {"usable_area", bounded_json(c.usable_area)},
            {"circularity", bounded_json(c.circularity)},
            {"dilation", bounded_json(c.dilation)},
            {"iris_radius", bounded_json(c.iris_radius)}}},
          {"matchers", matchers},
          {"max_impostor_probes", c.max_impostor_probes},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  const std::string where = "synth";
  reject_unknown(j,
                 {"n_subjects", "enrollment_age_range", "session_schedule", "enrollment_sessions",
                  "images_per_eye_per_session", "attrition_rate", "covariates", "matchers",
                  "max_impostor_probes", "seed"},
                 where);
  SynthConfig c = study_shaped_config();
  if (j.contains("n_subjects")) c.n_subjects = get<int>(j, "n_subjects", where);
  if (j.contains("enrollment_age_range")) {
    const auto r = get<std::vector<int>>(j, "enrollment_age_range", where);
    if (r.size() != 2) throw Error(ErrorCode::ConfigInvalid, where + ": enrollment_age_range needs two values");
    c.enrollment_age_min = r[0];
    c.enrollment_age_max = r[1];
  }
  if (j.contains("session_schedule")) c.session_months = get<std::vector<int>>(j, "session_schedule", where);
  if (j.contains("enrollment_sessions")) c.enrollment_sessions = get<int>(j, "enrollment_sessions", where);
  if (j.contains("images_per_eye_per_session")) {
    c.images_per_eye_per_session = get<int>(j, "images_per_eye_per_session", where);
  }
  if (j.contains("attrition_rate")) c.attrition_rate = get<double>(j, "attrition_rate", where);
  if (j.contains("covariates")) {
    const auto& cov = j.at("covariates");
    reject_unknown(cov, {"quality", "usable_area", "circularity", "dilation", "iris_radius"}, "synth.covariates");
    if (cov.contains("quality")) c.quality = bounded_from(cov.at("quality"), "synth.covariates.quality");
    if (cov.contains("usable_area")) c.usable_area = bounded_from(cov.at("usable_area"), "synth.covariates.usable_area");
    if (cov.contains("circularity")) c.circularity = bounded_from(cov.at("circularity"), "synth.covariates.circularity");
    if (cov.contains("dilation")) c.dilation = bounded_from(cov.at("dilation"), "synth.covariates.dilation");
    if (cov.contains("iris_radius")) c.iris_radius = bounded_from(cov.at("iris_radius"), "synth.covariates.iris_radius");
  }
  if (j.contains("matchers")) {
    c.matchers.clear();
    for (const auto& mj : j.at("matchers")) {
      const std::string mw = "synth.matchers";
      reject_unknown(mj, {"profile", "beta", "sigma_true", "sigma2_true", "impostor"}, mw);
      SynthMatcher m;
      m.profile = matcher_profile_from_json(mj.at("profile"));
      m.beta = get<std::map<std::string, double>>(mj, "beta", mw);
      m.sigma_true = matrix_from(mj.at("sigma_true"), mw);
      m.sigma2_true = get<double>(mj, "sigma2_true", mw);
      m.impostor = distribution_from(mj.at("impostor"), mw + ".impostor");
      c.matchers.push_back(std::move(m));
    }
  }
  if (j.contains("max_impostor_probes")) c.max_impostor_probes = get<std::size_t>(j, "max_impostor_probes", where);
  if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed", where);
  c.validate();
  return c;
}

json to_json(const GroundTruth& t) {
  json matchers = json::array();
  for (const auto& m : t.matchers) {
    json effects = json::array();
    for (std::size_t s = 0; s < m.effects.size(); ++s) {
      effects.push_back({{"subject", t.subjects[s]}, {"u0", m.effects[s].first}, {"u1", m.effects[s].second}});
    }
    matchers.push_back({{"name", m.name},
                        {"beta", m.beta},
                        {"sigma_true", matrix_json(m.sigma_true)},
                        {"sigma2_true", m.sigma2_true},
                        {"clamped_genuine", m.clamped_genuine},
                        {"clamped_impostor", m.clamped_impostor},
                        {"random_effects", effects}});
  }
  json ages = json::array();
  for (std::size_t s = 0; s < t.subjects.size(); ++s) {
    ages.push_back({{"subject", t.subjects[s]}, {"enrollment_age", t.enrollment_age[s]}});
  }
  return {{"n_genuine", t.n_genuine}, {"n_impostor", t.n_impostor}, {"subjects", ages}, {"matchers", matchers}};
}

}  // namespace permanence
