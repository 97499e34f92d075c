#include "permanence/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "permanence/error.hpp"

namespace permanence {

namespace {

using nlohmann::json;

[[noreturn]] void invalid(const std::string& message) { throw Error(ErrorCode::ConfigInvalid, message); }

void allow_only(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) invalid(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      invalid(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& target, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    invalid(where + ": invalid value for '" + key + "'");
  }
}

Eye eye_from(const std::string& s) {
  const auto e = parse_eye(s);
  if (!e) invalid("eye must be L or R");
  return *e;
}

}  // namespace

const MatcherProfile& RunConfig::matcher(const std::string& name) const {
  for (const auto& m : matchers)
    if (m.name == name) return m;
  throw Error(ErrorCode::ConfigInvalid, "unknown matcher '" + name + "'");
}

std::pair<std::string, std::string> RunConfig::fusion_pair() const {
  if (fusion) return *fusion;
  if (matchers.size() < 2) throw Error(ErrorCode::ConfigInvalid, "fusion needs two matchers");
  return {matchers[0].name, matchers[1].name};
}

RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  allow_only(j,
             {"inputs", "out", "seed", "matchers", "pairing", "thresholds", "calibration", "fnmr", "failures",
              "fusion", "lmm", "cv", "synth"},
             "config");
  RunConfig c;
  c.base_dir = base_dir;
  if (j.contains("inputs")) {
    const auto& in = j.at("inputs");
    allow_only(in, {"captures", "scores"}, "inputs");
    std::string s;
    if (in.contains("captures")) {
      read(in, "captures", s, "inputs");
      c.captures = s;
    }
    if (in.contains("scores")) {
      read(in, "scores", s, "inputs");
      c.scores = s;
    }
  }
  std::string out = c.out.string();
  read(j, "out", out, "config");
  c.out = out;
  read(j, "seed", c.seed, "config");

  if (j.contains("synth")) {
    if (j.at("synth").is_object() && j.at("synth").contains("seed")) invalid("synth: set the seed at the top level");
    c.synth = synth_config_from_json(j.at("synth"));
  }
  if (j.contains("matchers")) {
    if (!j.at("matchers").is_array()) invalid("matchers must be an array");
    for (const auto& m : j.at("matchers")) c.matchers.push_back(matcher_profile_from_json(m));
  } else if (c.synth) {
    for (const auto& m : c.synth->matchers) c.matchers.push_back(m.profile);
  }
  std::set<std::string> names;
  for (const auto& m : c.matchers)
    if (!names.insert(m.name).second) invalid("duplicate matcher '" + m.name + "'");

  if (c.synth) c.max_impostor_probes = std::max<std::size_t>(1, c.synth->max_impostor_probes);
  if (j.contains("pairing")) {
    allow_only(j.at("pairing"), {"max_impostor_probes"}, "pairing");
    read(j.at("pairing"), "max_impostor_probes", c.max_impostor_probes, "pairing");
    if (c.max_impostor_probes < 1) invalid("pairing.max_impostor_probes must be >= 1");
  }
  read(j, "thresholds", c.thresholds, "config");
  for (const auto& [name, t] : c.thresholds) {
    if (!names.count(name)) invalid("thresholds: unknown matcher '" + name + "'");
  }
  if (j.contains("calibration")) {
    allow_only(j.at("calibration"), {"target_fmr"}, "calibration");
    read(j.at("calibration"), "target_fmr", c.target_fmr, "calibration");
    if (!(c.target_fmr >= 0.0 && c.target_fmr <= 1.0)) invalid("calibration.target_fmr must be in [0, 1]");
  }
  if (j.contains("fnmr")) {
    allow_only(j.at("fnmr"), {"bin_width", "confidence"}, "fnmr");
    read(j.at("fnmr"), "bin_width", c.bin_width, "fnmr");
    read(j.at("fnmr"), "confidence", c.confidence, "fnmr");
    if (c.bin_width < 1) invalid("fnmr.bin_width must be >= 1");
    if (!(c.confidence > 0.0 && c.confidence < 1.0)) invalid("fnmr.confidence must be in (0, 1)");
  }
  if (j.contains("failures")) {
    allow_only(j.at("failures"), {"min_quality_cut"}, "failures");
    read(j.at("failures"), "min_quality_cut", c.min_quality_cut, "failures");
  }
  if (j.contains("fusion")) {
    std::vector<std::string> pair;
    read(j, "fusion", pair, "config");
    if (pair.size() != 2 || pair[0] == pair[1]) invalid("fusion must name two distinct matchers");
    c.fusion = std::make_pair(pair[0], pair[1]);
  }
  if (j.contains("lmm")) {
    const auto& l = j.at("lmm");
    const std::string w = "lmm";
    allow_only(l,
               {"eyes", "apc_mode", "random", "standardize", "covariates", "interactions", "age_group_model",
                "combined_model", "standardize_per_eye", "max_iterations", "perturbation_checks"},
               w);
    if (l.contains("eyes")) {
      std::vector<std::string> eyes;
      read(l, "eyes", eyes, w);
      c.lmm.eyes.clear();
      for (const auto& e : eyes) c.lmm.eyes.push_back(eye_from(e));
    }
    if (l.contains("apc_mode")) {
      if (l.at("apc_mode").is_null()) {
        c.lmm.apc_mode.reset();
      } else {
        std::string m;
        read(l, "apc_mode", m, w);
        c.lmm.apc_mode = parse_apc_mode(m);
        if (!c.lmm.apc_mode) invalid("lmm.apc_mode must be GalleryAgePlusT, ProbeAgePlusT or GalleryAgePlusDeltaA");
      }
    }
    if (l.contains("random")) {
      std::string r;
      read(l, "random", r, w);
      if (r == "InterceptOnly") c.lmm.random = RandomStructure::InterceptOnly;
      else if (r == "InterceptAndSlopeOnT") c.lmm.random = RandomStructure::InterceptAndSlopeOnT;
      else invalid("lmm.random must be InterceptOnly or InterceptAndSlopeOnT");
    }
    read(l, "standardize", c.lmm.standardize, w);
    read(l, "covariates", c.lmm.covariates, w);
    if (l.contains("interactions")) {
      std::vector<std::vector<std::string>> ix;
      read(l, "interactions", ix, w);
      for (const auto& p : ix) {
        if (p.size() != 2) invalid("lmm.interactions entries must be [left, right]");
        c.lmm.interactions.emplace_back(p[0], p[1]);
      }
    }
    read(l, "age_group_model", c.lmm.age_group_model, w);
    read(l, "combined_model", c.lmm.combined_model, w);
    read(l, "standardize_per_eye", c.lmm.standardize_per_eye, w);
    read(l, "max_iterations", c.lmm.fit.max_iterations, w);
    read(l, "perturbation_checks", c.lmm.fit.perturbation_checks, w);
    if (c.lmm.fit.max_iterations < 1) invalid("lmm.max_iterations must be >= 1");
  }
  if (j.contains("cv")) {
    allow_only(j.at("cv"), {"k"}, "cv");
    read(j.at("cv"), "k", c.cv_folds, "cv");
    if (c.cv_folds < 2) invalid("cv.k must be >= 2");
  }
  if (c.fusion) {
    c.matcher(c.fusion->first);
    c.matcher(c.fusion->second);
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, "config not found: " + path.string());
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

json to_json(const RunConfig& c) {
  json j;
  json inputs = json::object();
  if (c.captures) inputs["captures"] = c.captures->string();
  if (c.scores) inputs["scores"] = c.scores->string();
  j["inputs"] = inputs;
  j["out"] = c.out.string();
  j["seed"] = c.seed;
  j["matchers"] = json::array();
  for (const auto& m : c.matchers) j["matchers"].push_back(to_json(m));
  j["pairing"] = {{"max_impostor_probes", c.max_impostor_probes}};
  j["thresholds"] = c.thresholds;
  j["calibration"] = {{"target_fmr", c.target_fmr}};
  j["fnmr"] = {{"bin_width", c.bin_width}, {"confidence", c.confidence}};
  j["failures"] = {{"min_quality_cut", c.min_quality_cut}};
  if (c.fusion) j["fusion"] = {c.fusion->first, c.fusion->second};
  json eyes = json::array();
  for (const auto e : c.lmm.eyes) eyes.push_back(std::string(to_string(e)));
  json ix = json::array();
  for (const auto& [a, b] : c.lmm.interactions) ix.push_back({a, b});
  j["lmm"] = {{"eyes", eyes},
              {"apc_mode", c.lmm.apc_mode ? json(std::string(to_string(*c.lmm.apc_mode))) : json(nullptr)},
              {"random", std::string(to_string(c.lmm.random))},
              {"standardize", c.lmm.standardize},
              {"covariates", c.lmm.covariates},
              {"interactions", ix},
              {"age_group_model", c.lmm.age_group_model},
              {"combined_model", c.lmm.combined_model},
              {"standardize_per_eye", c.lmm.standardize_per_eye},
              {"max_iterations", c.lmm.fit.max_iterations},
              {"perturbation_checks", c.lmm.fit.perturbation_checks}};
  j["cv"] = {{"k", c.cv_folds}};
  if (c.synth) {
    j["synth"] = to_json(*c.synth);
    j["synth"].erase("seed");
  }
  return j;
}

}  // namespace permanence
