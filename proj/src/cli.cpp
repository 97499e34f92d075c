#include "permanence/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <boost/version.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include "csv.hpp"
#include "permanence/core_model.hpp"
#include "permanence/lmm.hpp"
#include "permanence/metrics.hpp"
#include "permanence/pairing.hpp"
#include "permanence/report.hpp"
#include "permanence/run_config.hpp"
#include "permanence/synth.hpp"
#include "permanence/validation.hpp"

namespace permanence::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownFlag: return 2;
    case ErrorCode::InvalidArgument: return 10;
    case ErrorCode::MissingFile: return 11;
    case ErrorCode::MissingColumn: return 12;
    case ErrorCode::DuplicateKey: return 13;
    case ErrorCode::ParseError: return 14;
    case ErrorCode::RangeError: return 15;
    case ErrorCode::IncompleteScores: return 16;
    case ErrorCode::EmptyInput: return 17;
    case ErrorCode::CalibrationInfeasible: return 18;
    case ErrorCode::RankDeficient: return 19;
    case ErrorCode::DegenerateData: return 20;
    case ErrorCode::NotNested: return 21;
    case ErrorCode::RowMismatch: return 22;
    case ErrorCode::ConfigInvalid: return 23;
    case ErrorCode::MissingPrerequisite: return 24;
  }
  return 1;
}

std::string sha256_hex(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, "cannot read " + file.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char h[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(h, sizeof h, "%02x", md[i]);
    hex += h;
  }
  return hex;
}

namespace {

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

std::string f(double v) { return format_double(v); }
std::string f(std::size_t v) { return std::to_string(v); }
std::string f(int v) { return std::to_string(v); }
std::string f(bool v) { return v ? "true" : "false"; }
std::string f(const std::optional<double>& v) { return v ? format_double(*v) : ""; }

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

struct Table {
  std::string header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> row) { rows.push_back(std::move(row)); }
};

struct CsvData {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw Error(ErrorCode::MissingColumn, "missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

CsvData read_csv(const fs::path& path) {
  auto in = csv::open_input(path);
  CsvData d;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    for (const auto sv : csv::split(line)) fields.emplace_back(csv::trim(sv));
    if (first) {
      d.header = std::move(fields);
      first = false;
    } else {
      d.rows.push_back(std::move(fields));
    }
  }
  return d;
}

double number(const std::string& s) {
  const auto v = csv::parse_number<double>(s);
  return v ? *v : std::numeric_limits<double>::quiet_NaN();
}

std::string eye_label(Eye e) { return std::string(to_string(e)); }

// ---------------------------------------------------------------------------
// One subcommand invocation
// ---------------------------------------------------------------------------

class Run {
 public:
  Run(RunConfig cfg, fs::path config_path, fs::path out, std::string sub, std::ostream& log)
      : cfg_(std::move(cfg)), config_path_(std::move(config_path)), out_(std::move(out)), sub_(std::move(sub)),
        log_(log) {}

  const RunConfig& cfg() const { return cfg_; }
  const std::string& sub() const { return sub_; }
  std::ostream& log() { return log_; }

  fs::path input(const std::optional<fs::path>& configured, const char* default_name) {
    fs::path p = configured ? (configured->is_absolute() ? *configured : cfg_.base_dir / *configured)
                            : out_ / default_name;
    if (!fs::exists(p)) {
      if (configured) throw Error(ErrorCode::MissingFile, "input not found: " + p.string());
      throw Error(ErrorCode::MissingPrerequisite,
                  std::string(default_name) + " not found in the output directory; run synth or set inputs");
    }
    inputs_.push_back(p);
    return p;
  }

  fs::path prerequisite(const std::string& name, const std::string& producer) {
    const fs::path p = out_ / name;
    if (!fs::exists(p)) {
      throw Error(ErrorCode::MissingPrerequisite, name + " not found; run '" + producer + "' first");
    }
    inputs_.push_back(p);
    return p;
  }

  std::optional<fs::path> optional_artifact(const std::string& name) {
    const fs::path p = out_ / name;
    if (!fs::exists(p)) return std::nullopt;
    inputs_.push_back(p);
    return p;
  }

  fs::path output(const std::string& name) {
    const fs::path p = out_ / name;
    outputs_.push_back(p);
    return p;
  }

  void write(const std::string& name, const Table& t) {
    auto o = csv::open_output(output(name));
    o << t.header << '\n';
    for (const auto& r : t.rows) {
      for (std::size_t i = 0; i < r.size(); ++i) o << (i ? "," : "") << r[i];
      o << '\n';
    }
  }

  void write_text(const std::string& name, const std::string& text) {
    auto o = csv::open_output(output(name));
    o << text;
  }

  const std::vector<CaptureRecord>& captures() {
    if (!captures_) {
      auto table = ingest_captures(input(cfg_.captures, "captures.csv"));
      captures_ = std::move(table.records);
    }
    return *captures_;
  }

  const ComparisonTable& pairs() {
    if (!pairs_) pairs_ = read_pairs(prerequisite("pairs.csv", "pairs"), captures());
    return *pairs_;
  }

  /// Explicit config thresholds, then calibrated thresholds, then defaults.
  std::map<std::string, std::pair<double, std::string>> thresholds() {
    std::map<std::string, std::pair<double, std::string>> out;
    std::map<std::string, double> calibrated;
    if (const auto p = optional_artifact("thresholds.csv")) {
      const auto d = read_csv(*p);
      for (const auto& r : d.rows) calibrated[r.at(d.col("matcher"))] = number(r.at(d.col("threshold")));
    }
    for (const auto& m : cfg_.matchers) {
      if (const auto it = cfg_.thresholds.find(m.name); it != cfg_.thresholds.end()) {
        out[m.name] = {it->second, "config"};
      } else if (const auto c = calibrated.find(m.name); c != calibrated.end()) {
        out[m.name] = {c->second, "calibrated"};
      } else {
        out[m.name] = {m.default_threshold, "default"};
      }
    }
    return out;
  }

  void write_manifest() {
    auto entry = [&](const fs::path& p) {
      std::string shown;
      const auto rel = p.lexically_normal().lexically_relative(out_.lexically_normal());
      if (!rel.empty() && *rel.begin() != "..") {
        shown = rel.generic_string();
      } else {
        const auto brel = p.lexically_normal().lexically_relative(cfg_.base_dir.lexically_normal());
        shown = (!brel.empty() ? brel : p).generic_string();
      }
      return json{{"path", shown}, {"sha256", sha256_hex(p)}, {"bytes", fs::file_size(p)}};
    };
    auto list = [&](std::vector<fs::path> paths) {
      std::sort(paths.begin(), paths.end());
      paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
      json a = json::array();
      for (const auto& p : paths) a.push_back(entry(p));
      return a;
    };
    json m;
    m["tool"] = kToolName;
    m["version"] = kVersion;
    m["subcommand"] = sub_;
    m["seed"] = cfg_.seed;
    m["config"] = {{"file", config_path_.filename().generic_string()}, {"sha256", sha256_hex(config_path_)}};
    m["libraries"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"boost", std::to_string(BOOST_VERSION / 100000) + "." + std::to_string(BOOST_VERSION / 100 % 1000) +
                                    "." + std::to_string(BOOST_VERSION % 100)},
                      {"nlohmann_json", "3.11.3"},
                      {"cli11", CLI11_VERSION}};
    m["inputs"] = list(inputs_);
    m["outputs"] = list(outputs_);
    auto o = csv::open_output(out_ / ("manifest_" + sub_ + ".json"));
    o << m.dump(2) << '\n';
  }

 private:
  RunConfig cfg_;
  fs::path config_path_;
  fs::path out_;
  std::string sub_;
  std::ostream& log_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
  std::optional<std::vector<CaptureRecord>> captures_;
  std::optional<ComparisonTable> pairs_;
};

std::vector<ComparisonRecord> select(const ComparisonTable& t, PairKind kind, std::optional<Eye> eye = std::nullopt) {
  std::vector<ComparisonRecord> out;
  for (const auto& r : t.rows) {
    if (r.kind == kind && (!eye || r.eye == *eye)) out.push_back(r);
  }
  return out;
}

void require_matchers(const RunConfig& cfg) {
  if (cfg.matchers.empty()) throw Error(ErrorCode::ConfigInvalid, "config declares no matchers");
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_synth(Run& run) {
  if (!run.cfg().synth) throw Error(ErrorCode::ConfigInvalid, "config has no 'synth' section");
  SynthConfig sc = *run.cfg().synth;
  sc.seed = run.cfg().seed;
  const auto out = generate_longitudinal(sc);
  write_captures(run.output("captures.csv"), out.captures);
  write_scores(run.output("scores.csv"), out.scores);
  run.write_text("ground_truth.json", to_json(out.truth).dump(2) + "\n");
  std::ostringstream s;
  s << "synthetic study\n"
    << "subjects: " << sc.n_subjects << "\n"
    << "images: " << out.captures.size() << "\n"
    << "genuine pairs: " << out.truth.n_genuine << "\n"
    << "impostor pairs: " << out.truth.n_impostor << "\n";
  for (const auto& m : out.truth.matchers) {
    s << "matcher " << m.name << ": clamped genuine " << m.clamped_genuine << ", clamped impostor "
      << m.clamped_impostor << "\n";
  }
  run.write_text("synth_summary.txt", s.str());
  run.log() << s.str();
}

void cmd_ingest(Run& run) {
  const auto path = run.input(run.cfg().captures, "captures.csv");
  const auto table = ingest_captures(path);
  const auto report = validate_dataset(table.records);
  Table rejected{"line,reason", {}};
  for (const auto& r : table.rejected) rejected.add({f(r.line), r.reason});
  run.write("rejected_rows.csv", rejected);
  Table findings{"record,image_id,violation,detail", {}};
  for (const auto& x : report.findings) findings.add({f(x.record), x.image_id, x.violation, x.detail});
  run.write("validation.csv", findings);

  std::ostringstream s;
  s << "input rows: " << table.input_rows << "\n"
    << "accepted: " << table.records.size() << "\n"
    << "rejected: " << table.rejected.size() << "\n"
    << "flagged records: " << report.n_flagged_records << " (" << fixed(100.0 * report.flagged_fraction(), 2)
    << "%)\n";
  for (const auto& [name, count] : report.counts) s << "  " << name << ": " << count << "\n";
  std::set<std::string> subjects;
  for (const auto& r : table.records) subjects.insert(r.subject_id);
  s << "subjects: " << subjects.size() << "\n";
  const fs::path scores_path = run.cfg().scores ? *run.cfg().scores : fs::path("scores.csv");
  if (run.cfg().scores || fs::exists(path.parent_path() / "scores.csv")) {
    const auto scores = ingest_scores(run.input(run.cfg().scores, "scores.csv"));
    std::map<std::string, std::size_t> per;
    for (const auto& r : scores) ++per[r.matcher];
    s << "score rows: " << scores.size() << "\n";
    for (const auto& [m, n] : per) s << "  " << m << ": " << n << "\n";
  }
  run.write_text("ingest_summary.txt", s.str());
  run.log() << s.str();
}

void cmd_pairs(Run& run) {
  require_matchers(run.cfg());
  const auto& captures = run.captures();
  const auto scores = ingest_scores(run.input(run.cfg().scores, "scores.csv"));
  auto pairs = generate_genuine_pairs(captures);
  PairingConfig pc;
  pc.max_impostor_probes = run.cfg().max_impostor_probes;
  pc.base_seed = run.cfg().seed;
  auto impostor = generate_impostor_pairs(captures, pc);
  pairs.insert(pairs.end(), std::make_move_iterator(impostor.begin()), std::make_move_iterator(impostor.end()));
  const auto table = attach_scores(std::move(pairs), scores, run.cfg().matchers);
  write_pairs(run.output("pairs.csv"), table);
  ComparisonTable incomplete{table.matchers, table.incomplete, {}};
  write_pairs(run.output("incomplete_pairs.csv"), incomplete);

  std::ostringstream s;
  for (const auto kind : {PairKind::Genuine, PairKind::Impostor}) {
    for (const auto eye : {Eye::Left, Eye::Right}) {
      s << to_string(kind) << " " << eye_label(eye) << ": " << select(table, kind, eye).size() << "\n";
    }
  }
  s << "incomplete: " << table.incomplete.size() << "\n";
  run.write_text("pairs_summary.txt", s.str());
  run.log() << s.str();
}

void cmd_calibrate(Run& run) {
  require_matchers(run.cfg());
  const auto& t = run.pairs();
  const auto genuine = select(t, PairKind::Genuine);
  const auto impostor = select(t, PairKind::Impostor);
  Table out{"matcher,target_fmr,threshold,achieved_fmr,achieved_fnmr", {}};
  std::ostringstream s;
  for (const auto& m : run.cfg().matchers) {
    const auto c = calibrate_threshold(genuine, impostor, m, run.cfg().target_fmr);
    out.add({m.name, f(run.cfg().target_fmr), f(c.threshold), f(c.achieved_fmr), f(c.achieved_fnmr)});
    s << m.name << ": threshold " << c.threshold << " FMR " << fixed(100 * c.achieved_fmr, 3) << "% FNMR "
      << fixed(100 * c.achieved_fnmr, 3) << "%\n";
  }
  run.write("thresholds.csv", out);
  run.write_text("calibrate_summary.txt", s.str());
  run.log() << s.str();
}

void cmd_fnmr(Run& run) {
  require_matchers(run.cfg());
  const auto& t = run.pairs();
  const auto thr = run.thresholds();
  Table bins{"matcher,eye,interval_months,n_genuine,n_false_nonmatch,fnmr,ci_low,ci_high,ci_method", {}};
  Table rates{"matcher,eye,threshold,threshold_source,n_genuine,n_impostor,fnmr,fmr", {}};
  for (const auto& m : run.cfg().matchers) {
    const auto [threshold, source] = thr.at(m.name);
    for (const auto eye : {Eye::Left, Eye::Right}) {
      const auto g = select(t, PairKind::Genuine, eye);
      const auto im = select(t, PairKind::Impostor, eye);
      if (!g.empty()) {
        for (const auto& b : fnmr_by_interval(g, m, threshold, run.cfg().bin_width, run.cfg().confidence)) {
          bins.add({m.name, eye_label(eye), f(b.interval_months), f(b.n_genuine), f(b.n_false_nonmatch), f(b.fnmr),
                    f(b.ci_low), f(b.ci_high), b.ci_method == CiMethod::Wilson ? "Wilson" : "RuleOfThree"});
        }
      }
      rates.add({m.name, eye_label(eye), f(threshold), source, f(g.size()), f(im.size()),
                 g.empty() ? "" : f(fnmr_at_threshold(g, m, threshold)),
                 im.empty() ? "" : f(fmr_at_threshold(im, m, threshold))});
    }
  }
  run.write("fnmr_intervals.csv", bins);
  run.write("error_rates.csv", rates);
  run.log() << "interval bins: " << bins.rows.size() << "\n";
}

void cmd_det(Run& run) {
  require_matchers(run.cfg());
  const auto& t = run.pairs();
  Table points{"matcher,eye,threshold,fmr,fnmr", {}};
  Table summary{"matcher,eye,eer,eer_threshold,auc", {}};
  for (const auto& m : run.cfg().matchers) {
    for (const auto eye : {Eye::Left, Eye::Right}) {
      const auto g = select(t, PairKind::Genuine, eye);
      const auto im = select(t, PairKind::Impostor, eye);
      if (g.empty() || im.empty()) continue;
      const auto d = det_curve(g, im, m);
      for (const auto& p : d.points) points.add({m.name, eye_label(eye), f(p.threshold), f(p.fmr), f(p.fnmr)});
      summary.add({m.name, eye_label(eye), f(d.eer), f(d.eer_threshold), f(d.auc)});
      run.log() << m.name << " " << eye_label(eye) << ": EER " << fixed(100 * d.eer, 3) << "% AUC " << fixed(d.auc, 6)
                << "\n";
    }
  }
  run.write("det_points.csv", points);
  run.write("det_summary.csv", summary);
}

void cmd_failures(Run& run) {
  const auto [a_name, b_name] = run.cfg().fusion_pair();
  const auto& a = run.cfg().matcher(a_name);
  const auto& b = run.cfg().matcher(b_name);
  const auto thr = run.thresholds();
  const auto g = select(run.pairs(), PairKind::Genuine);
  const auto rep = failure_analysis(g, a, thr.at(a.name).first, b, thr.at(b.name).first, run.cfg().min_quality_cut);
  Table cats{"category,n_pairs,n_subjects,captured_below_cut,mean_gap_months,mean_min_quality", {}};
  Table cors{"category,pair,r", {}};
  for (const auto& c : rep.categories) {
    cats.add({c.name, f(c.n_pairs), f(c.n_subjects), f(c.captured_below_cut), f(c.mean_gap_months),
              f(c.mean_min_quality)});
    for (const auto& [k, r] : c.correlations) cors.add({c.name, k, f(r)});
  }
  run.write("failures.csv", cats);
  run.write("failure_correlations.csv", cors);
  std::ostringstream s;
  s << "genuine pairs: " << rep.n_genuine << "\n"
    << "failure pairs: " << rep.n_failure_pairs << "\n"
    << "failure subjects: " << rep.n_failure_subjects << " of " << rep.n_cohort_subjects << " ("
    << fixed(100 * rep.failure_subject_fraction, 1) << "%)\n"
    << "min quality cut: " << rep.min_quality_cut << "\n"
    << "inter-matcher r among failures: " << (rep.inter_matcher_r ? fixed(*rep.inter_matcher_r, 3) : "undefined")
    << "\n";
  for (const auto& c : rep.categories) {
    s << c.name << ": " << c.n_pairs << " pairs, " << c.n_subjects << " subjects, below cut "
      << (std::isnan(c.captured_below_cut) ? "undefined" : fixed(100 * c.captured_below_cut, 1) + "%") << "\n";
  }
  run.write_text("failures_summary.txt", s.str());
  run.log() << s.str();
}

void cmd_fuse(Run& run) {
  const auto [a_name, b_name] = run.cfg().fusion_pair();
  const auto& a = run.cfg().matcher(a_name);
  const auto& b = run.cfg().matcher(b_name);
  const auto thr = run.thresholds();
  const auto r = fuse_and_rule(run.pairs(), a, thr.at(a.name).first, b, thr.at(b.name).first);
  Table t{"key,value", {}};
  t.add({"matcher_a", a.name});
  t.add({"matcher_b", b.name});
  t.add({"threshold_a", f(thr.at(a.name).first)});
  t.add({"threshold_b", f(thr.at(b.name).first)});
  t.add({"n_impostor", f(r.n_impostor)});
  t.add({"n_genuine", f(r.n_genuine)});
  t.add({"impostor_a_only", f(r.a_only)});
  t.add({"impostor_b_only", f(r.b_only)});
  t.add({"impostor_both", f(r.both)});
  t.add({"impostor_neither", f(r.neither)});
  t.add({"fmr_a", f(r.fmr_a)});
  t.add({"fmr_b", f(r.fmr_b)});
  t.add({"fused_fmr", f(r.fused_fmr)});
  t.add({"fnmr_a", f(r.fnmr_a)});
  t.add({"fnmr_b", f(r.fnmr_b)});
  t.add({"fused_fnmr", f(r.fused_fnmr)});
  run.write("fusion.csv", t);
  run.log() << "AND-rule fused FMR " << sci(r.fused_fmr) << " (" << r.both << " of " << r.n_impostor
            << "), fused FNMR " << sci(r.fused_fnmr) << "\n";
}

// ----- models ---------------------------------------------------------------

ModelSpec primary_spec(const RunConfig& cfg, const std::string& outcome) {
  ModelSpec s;
  s.outcome = outcome;
  s.standardize = cfg.lmm.standardize;
  s.apc_mode = cfg.lmm.apc_mode;
  s.random = cfg.lmm.random;
  for (const auto& c : cfg.lmm.covariates) s.fixed_terms.emplace_back(ContinuousTerm{c});
  for (const auto& [l, r] : cfg.lmm.interactions) s.fixed_terms.emplace_back(InteractionTerm{l, r});
  return s;
}

std::string time_term(const RunConfig& cfg) {
  return cfg.lmm.apc_mode ? apc_columns(*cfg.lmm.apc_mode).second : std::string("T");
}

struct ModelOutputs {
  Table fixed{"model,matcher,eye,predictor,beta,se,z,p", {}};
  Table fits{"model,matcher,eye,criterion,n_obs,n_subjects,n_excluded,n_params,sigma2,var_intercept,cov_intercept_slope,"
             "var_slope,corr_intercept_slope,loglik,aic,icc,marginal_r2,converged,iterations,boundary,local_check,"
             "shapiro_w,shapiro_p,shapiro_n,shapiro_subsampled,standardized,outcome_mean,outcome_sd",
             {}};
  Table lrt{"matcher,eye,test,criterion,chi2,df,p", {}};
  Table traj{"matcher,eye,age_group,T_months,predicted", {}};
  std::ostringstream text;
};

void record_fit(ModelOutputs& o, const std::string& model, const std::string& matcher, const std::string& eye,
                const FittedModel& m, const Design& d, std::optional<double> icc_value,
                const std::optional<ShapiroWilk>& sw) {
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    o.fixed.add({model, matcher, eye, m.names[i], f(m.beta(k)), f(m.se(k)), f(m.z(k)), f(m.p(k))});
  }
  const bool slope = m.sigma.rows() == 2;
  const double r2 = marginal_r2(m, d.X);
  o.fits.add({model, matcher, eye, m.criterion == Criterion::REML ? "REML" : "ML", f(m.n_obs), f(m.n_subjects),
              f(m.n_excluded), f(m.n_params), f(m.sigma2), f(m.sigma(0, 0)), slope ? f(m.sigma(1, 0)) : "",
              slope ? f(m.sigma(1, 1)) : "", slope ? f(m.random_correlation()) : "", f(m.loglik), f(m.aic),
              f(icc_value), f(r2), f(m.converged), f(m.iterations), f(m.boundary), f(m.local_check_passed),
              sw ? f(sw->w) : "", sw ? f(sw->p) : "", sw ? f(sw->n) : "", sw ? f(sw->subsampled) : "",
              f(d.standardized), f(d.outcome_mean), f(d.outcome_sd)});

  auto& t = o.text;
  t << "== " << model << " | " << matcher << " | " << eye << " ==\n";
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %14s %12s %10s %10s\n", "Predictor", "beta", "SE", "z", "p");
  t << line;
  for (std::size_t i = 0; i < m.names.size(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    std::snprintf(line, sizeof line, "%-28s %14.6g %12.4g %10.3f %10.3g\n", m.names[i].c_str(), m.beta(k), m.se(k),
                  m.z(k), m.p(k));
    t << line;
  }
  t << "variance components: var(u0) " << sci(m.sigma(0, 0));
  if (slope) {
    t << ", var(u1) " << sci(m.sigma(1, 1)) << ", corr(u0,u1) " << fixed(m.random_correlation(), 3);
  }
  t << ", residual " << sci(m.sigma2) << "\n";
  if (icc_value) t << "ICC (intercept-only companion fit): " << fixed(*icc_value, 3) << "\n";
  t << "marginal R^2 (fixed variance / total, slope variance at mean T): " << fixed(r2, 3) << "\n";
  t << "REML/ML loglik " << f(m.loglik) << ", AIC " << f(m.aic) << ", n_obs " << m.n_obs << ", subjects "
    << m.n_subjects << ", excluded rows " << m.n_excluded << "\n";
  t << "convergence: " << (m.converged ? "converged" : "NOT converged") << " in " << m.iterations
    << " iterations; boundary " << f(m.boundary) << "; local check " << (m.local_check_passed ? "passed" : "failed");
  if (!m.message.empty()) t << "; " << m.message;
  t << "\n";
  if (sw) {
    t << "Shapiro-Wilk W " << fixed(sw->w, 4) << " (n " << sw->n << (sw->subsampled ? ", seeded subsample" : "")
      << ")\n";
  }
  t << "\n";
}

void add_lrt(ModelOutputs& o, const std::string& matcher, const std::string& eye, const std::string& test,
             const FittedModel& nested, const FittedModel& full) {
  const auto r = likelihood_ratio_test(nested, full);
  o.lrt.add({matcher, eye, test, nested.criterion == Criterion::REML ? "REML" : "ML", f(r.chi2), f(r.df), f(r.p)});
  o.text << "LRT " << test << " (" << matcher << " " << eye << "): chi2 " << fixed(r.chi2, 2) << ", df " << r.df
         << ", p " << sci(r.p) << "\n\n";
}

void cmd_lmm(Run& run) {
  require_matchers(run.cfg());
  const auto& cfg = run.cfg();
  const auto& t = run.pairs();
  const auto& opt = cfg.lmm.fit;
  ModelOutputs o;
  o.text << "Linear mixed-effects models (REML unless noted); Wald tests with a normal reference.\n\n";
  for (const auto& m : cfg.matchers) {
    for (const auto eye : cfg.lmm.eyes) {
      const auto rows = select(t, PairKind::Genuine, eye);
      const std::string el = eye_label(eye);
      const ModelSpec spec = primary_spec(cfg, m.name);
      const Design d = build_design(rows, spec);
      const FittedModel fit_main = fit(d, Criterion::REML, opt);

      ModelSpec io_spec = spec;
      io_spec.random = RandomStructure::InterceptOnly;
      const Design d_io = build_design(rows, io_spec);
      const FittedModel fit_io = fit(d_io, Criterion::REML, opt);
      const double icc_value = icc(fit_io);

      const auto diag = residual_diagnostics(fit_main, d, cfg.seed);
      write_qq(run.output("qq_" + m.name + "_" + el + ".csv"), diag.qq);
      record_fit(o, "primary", m.name, el, fit_main, d, icc_value, diag.normality);

      if (spec.random == RandomStructure::InterceptAndSlopeOnT) {
        add_lrt(o, m.name, el, "random_slope", fit_io, fit_main);
      }
      if (spec.apc_mode) {
        ModelSpec no_time = spec;
        no_time.apc_mode.reset();
        no_time.fixed_terms.insert(no_time.fixed_terms.begin(),
                                   ContinuousTerm{apc_columns(*spec.apc_mode).first});
        const FittedModel ml_full = fit(d, Criterion::ML, opt);
        const FittedModel ml_nested = fit(build_design(rows, no_time), Criterion::ML, opt);
        add_lrt(o, m.name, el, "temporal_" + time_term(cfg), ml_nested, ml_full);
      }

      if (cfg.lmm.age_group_model) {
        ModelSpec ag = spec;
        ag.apc_mode.reset();
        ag.fixed_terms.clear();
        const auto groups = enrollment_age_groups();
        ag.fixed_terms.emplace_back(groups);
        ag.fixed_terms.emplace_back(ContinuousTerm{"T"});
        for (const auto& c : cfg.lmm.covariates) ag.fixed_terms.emplace_back(ContinuousTerm{c});
        const Design dg = build_design(rows, ag);
        const FittedModel fg = fit(dg, Criterion::REML, opt);
        record_fit(o, "age_groups", m.name, el, fg, dg, std::nullopt, std::nullopt);

        const Eigen::RowVectorXd mean = dg.X.colwise().mean();
        const auto t_col = *fg.index_of("T");
        const double t_max = dg.X.col(static_cast<Eigen::Index>(t_col)).maxCoeff();
        for (std::size_t l = 0; l < groups.levels.size(); ++l) {
          Eigen::RowVectorXd x = mean;
          for (std::size_t k = 0; k < groups.levels.size(); ++k) {
            if (k == groups.reference) continue;
            const auto idx = *fg.index_of(groups.name + "[" + groups.levels[k].label + "]");
            x(static_cast<Eigen::Index>(idx)) = k == l ? 1.0 : 0.0;
          }
          for (int month = 0; month <= static_cast<int>(t_max); month += 6) {
            x(static_cast<Eigen::Index>(t_col)) = month;
            o.traj.add({m.name, el, groups.levels[l].label, f(month), f(x.dot(fg.beta))});
          }
        }
      }
    }
  }

  if (cfg.lmm.combined_model && cfg.matchers.size() >= 2) {
    std::vector<ComparisonRecord> rows;
    for (const auto eye : cfg.lmm.eyes) {
      auto part = select(t, PairKind::Genuine, eye);
      rows.insert(rows.end(), part.begin(), part.end());
    }
    std::vector<std::string> names;
    for (const auto& m : cfg.matchers) names.push_back(m.name);
    const auto stacked = stack_standardized(rows, names, cfg.lmm.standardize_per_eye);
    ModelSpec s = primary_spec(cfg, "z_score");
    s.standardize = false;
    const std::string tt = time_term(cfg);
    for (std::size_t k = 1; k < names.size(); ++k) {
      s.fixed_terms.emplace_back(ContinuousTerm{"matcher_" + names[k]});
      s.fixed_terms.emplace_back(InteractionTerm{"matcher_" + names[k], tt});
    }
    const Design d = build_design(stacked, s);
    const FittedModel fm = fit(d, Criterion::REML, opt);
    o.text << "Combined model: z-scores standardized per "
           << (cfg.lmm.standardize_per_eye ? "matcher-eye" : "matcher (pooled eyes)") << ", reference matcher "
           << names[0] << ".\n";
    record_fit(o, "combined", "all", "pooled", fm, d, std::nullopt, std::nullopt);
  }

  run.write("lmm_fixed_effects.csv", o.fixed);
  run.write("lmm_fit.csv", o.fits);
  run.write("lmm_lrt.csv", o.lrt);
  run.write("trajectories.csv", o.traj);
  run.write_text("lmm_report.txt", o.text.str());
  run.log() << "fitted " << o.fits.rows.size() << " models\n";
}

void cmd_apc(Run& run) {
  require_matchers(run.cfg());
  const auto& cfg = run.cfg();
  const auto& t = run.pairs();
  Table out{"matcher,eye,mode,age_term,age_beta,age_se,age_p,time_term,time_beta,time_se,time_p,ml_loglik,ml_aic,"
            "delta_aic,n_rows,outcome_checksum",
            {}};
  Table vifs{"matcher,eye,column,vif_uncentered,vif_centered", {}};
  for (const auto& m : cfg.matchers) {
    for (const auto eye : cfg.lmm.eyes) {
      const auto rows = select(t, PairKind::Genuine, eye);
      ModelSpec base = primary_spec(cfg, m.name);
      const auto rep = compare_apc(rows, base, cfg.lmm.fit);
      for (const auto& e : rep.entries) {
        const auto ai = static_cast<Eigen::Index>(*e.reml.index_of(e.age_term));
        const auto ti = static_cast<Eigen::Index>(*e.reml.index_of(e.time_term));
        char checksum[32];
        std::snprintf(checksum, sizeof checksum, "%016llx", static_cast<unsigned long long>(e.outcome_checksum));
        out.add({m.name, eye_label(eye), std::string(to_string(e.mode)), e.age_term, f(e.reml.beta(ai)),
                 f(e.reml.se(ai)), f(e.reml.p(ai)), e.time_term, f(e.reml.beta(ti)), f(e.reml.se(ti)),
                 f(e.reml.p(ti)), f(e.ml_loglik), f(e.ml_aic), f(e.delta_aic), f(e.n_rows), checksum});
      }
      for (std::size_t c = 0; c < rep.overidentified_columns.size(); ++c) {
        const auto k = static_cast<Eigen::Index>(c);
        vifs.add({m.name, eye_label(eye), rep.overidentified_columns[c], f(rep.overidentified_vif(k)),
                  f(rep.overidentified_vif_centered(k))});
      }
    }
  }
  run.write("apc.csv", out);
  run.write("apc_vif.csv", vifs);
  run.log() << "APC comparisons: " << out.rows.size() << " fits (overidentified design reported as VIF only)\n";
}

void cmd_cv(Run& run) {
  require_matchers(run.cfg());
  const auto& cfg = run.cfg();
  const auto& t = run.pairs();
  Table folds{"matcher,eye,fold,oos_r2,rmse,n_test_subjects,n_test_rows", {}};
  Table summary{"matcher,eye,k,mean_oos_r2,mean_rmse,marginal_r2,gap", {}};
  for (const auto& m : cfg.matchers) {
    for (const auto eye : cfg.lmm.eyes) {
      const auto rows = select(t, PairKind::Genuine, eye);
      const Design d = build_design(rows, primary_spec(cfg, m.name));
      const auto cv = kfold_subject_cv(d, cfg.cv_folds, cfg.seed, cfg.lmm.fit);
      for (std::size_t k = 0; k < cv.per_fold.size(); ++k) {
        const auto& p = cv.per_fold[k];
        folds.add({m.name, eye_label(eye), f(k), f(p.oos_r2), f(p.rmse), f(p.n_test_subjects), f(p.n_test_rows)});
      }
      const double r2 = marginal_r2(fit(d, Criterion::REML, cfg.lmm.fit), d.X);
      summary.add({m.name, eye_label(eye), f(cv.k), f(cv.mean_oos_r2), f(cv.mean_rmse), f(r2), f(r2 - cv.mean_oos_r2)});
      run.log() << m.name << " " << eye_label(eye) << ": out-of-sample R^2 " << fixed(cv.mean_oos_r2, 3)
                << ", marginal R^2 " << fixed(r2, 3) << "\n";
    }
  }
  run.write("cv_folds.csv", folds);
  run.write("cv_summary.csv", summary);
}

void cmd_report(Run& run) {
  const auto fnmr = read_csv(run.prerequisite("fnmr_intervals.csv", "fnmr"));
  const auto det = read_csv(run.prerequisite("det_points.csv", "det"));
  const auto traj = read_csv(run.prerequisite("trajectories.csv", "lmm"));

  // Interval FNMR with confidence whiskers, one figure per matcher.
  std::map<std::string, std::map<std::string, report::Series>> by_matcher;
  for (const auto& r : fnmr.rows) {
    auto& s = by_matcher[r[fnmr.col("matcher")]][r[fnmr.col("eye")]];
    s.label = "eye " + r[fnmr.col("eye")];
    s.markers = true;
    s.x.push_back(number(r[fnmr.col("interval_months")]));
    s.y.push_back(100 * number(r[fnmr.col("fnmr")]));
    s.low.push_back(100 * number(r[fnmr.col("ci_low")]));
    s.high.push_back(100 * number(r[fnmr.col("ci_high")]));
  }
  std::vector<std::string> figures;
  for (auto& [matcher, series] : by_matcher) {
    report::Chart c;
    c.title = "Longitudinal FNMR: " + matcher;
    c.x_label = "Time since enrollment (months)";
    c.y_label = "FNMR (%)";
    for (auto& [eye, s] : series) c.series.push_back(std::move(s));
    double top = 0.0;
    for (const auto& s : c.series)
      for (const double h : s.high) top = std::max(top, h);
    c.y_range = std::make_pair(0.0, top > 0.0 ? top * 1.05 : 1.0);
    const std::string name = "fig_fnmr_" + matcher + ".svg";
    run.write_text(name, report::render_svg(c));
    figures.push_back(name);
  }

  report::Chart dc;
  dc.title = "DET curves";
  dc.x_label = "False match rate";
  dc.y_label = "False non-match rate";
  dc.log_x = dc.log_y = true;
  std::map<std::string, report::Series> det_series;
  for (const auto& r : det.rows) {
    const std::string key = r[det.col("matcher")] + " " + r[det.col("eye")];
    auto& s = det_series[key];
    s.label = key;
    s.x.push_back(number(r[det.col("fmr")]));
    s.y.push_back(number(r[det.col("fnmr")]));
  }
  for (auto& [k, s] : det_series) dc.series.push_back(std::move(s));
  run.write_text("fig_det.svg", report::render_svg(dc));
  figures.push_back("fig_det.svg");

  std::map<std::string, std::map<std::string, report::Series>> tr;
  for (const auto& r : traj.rows) {
    const std::string key = r[traj.col("matcher")] + "_" + r[traj.col("eye")];
    auto& s = tr[key][r[traj.col("age_group")]];
    s.label = "enrolled " + r[traj.col("age_group")];
    s.x.push_back(number(r[traj.col("T_months")]));
    s.y.push_back(number(r[traj.col("predicted")]));
  }
  for (auto& [key, groups] : tr) {
    report::Chart c;
    c.title = "Predicted match score by enrollment age: " + key;
    c.x_label = "Time since enrollment (months)";
    c.y_label = "Predicted score";
    std::vector<std::pair<double, report::Series>> ordered;
    for (auto& [label, s] : groups) {
      const auto lo = csv::parse_number<double>(label.substr(0, label.find('-')));
      ordered.emplace_back(lo ? *lo : 0.0, std::move(s));
    }
    std::sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [k, s] : ordered) c.series.push_back(std::move(s));
    const std::string name = "fig_trajectories_" + key + ".svg";
    run.write_text(name, report::render_svg(c));
    figures.push_back(name);
  }
  std::ostringstream s;
  for (const auto& name : figures) s << name << "\n";
  run.write_text("report_index.txt", s.str());
  run.log() << "figures: " << figures.size() << "\n";
}

struct Subcommand {
  const char* name;
  const char* help;
  void (*fn)(Run&);
};

constexpr Subcommand kSubcommands[] = {
    {"ingest", "Ingest and validate the capture table", cmd_ingest},
    {"pairs", "Generate genuine and impostor pairs and attach scores", cmd_pairs},
    {"calibrate", "Calibrate per-matcher thresholds to a target FMR", cmd_calibrate},
    {"fnmr", "Interval FNMR with confidence bounds and overall error rates", cmd_fnmr},
    {"det", "DET curves, EER and AUC per matcher and eye", cmd_det},
    {"failures", "Categorize genuine failures of two matchers", cmd_failures},
    {"fuse", "AND-rule fusion of two matchers", cmd_fuse},
    {"lmm", "Fit the mixed-effects models per matcher and eye", cmd_lmm},
    {"apc", "Compare the three age-period-cohort parameterizations", cmd_apc},
    {"cv", "Subject-level k-fold cross-validation", cmd_cv},
    {"synth", "Generate a synthetic study from the config's synth section", cmd_synth},
    {"report", "Render SVG figures from earlier outputs", cmd_report},
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Longitudinal biometric permanence evaluation", std::string(kToolName)};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1, 1);
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  std::vector<CLI::App*> subs;
  for (const auto& s : kSubcommands) {
    auto* sc = app.add_subcommand(s.name, s.help);
    sc->add_option("--config", config_path, "JSON run configuration")->required();
    sc->add_option("--out", out_dir, "Output directory (overrides the config's 'out')");
    sc->add_option("--seed", seed, "Run seed (overrides the config's 'seed')");
    subs.push_back(sc);
  }

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ExtrasError& e) {
    err << "error: " << to_string(ErrorCode::UnknownFlag) << ": " << e.what() << "\n";
    return exit_code(ErrorCode::UnknownFlag);
  } catch (const CLI::ParseError& e) {
    err << "error: " << to_string(ErrorCode::InvalidArgument) << ": " << e.what() << "\n";
    return exit_code(ErrorCode::InvalidArgument);
  }

  std::size_t which = 0;
  for (std::size_t i = 0; i < subs.size(); ++i)
    if (subs[i]->parsed()) which = i;
  const auto* chosen = subs[which];
  try {
    RunConfig cfg = load_run_config(config_path);
    if (chosen->count("--seed") > 0) cfg.seed = seed;
    const fs::path dir = chosen->count("--out") > 0 ? fs::path(out_dir) : cfg.out;
    fs::create_directories(dir);
    Run r(std::move(cfg), config_path, dir, kSubcommands[which].name, out);
    kSubcommands[which].fn(r);
    r.write_manifest();
    return 0;
  } catch (const Error& e) {
    err << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace permanence::cli
