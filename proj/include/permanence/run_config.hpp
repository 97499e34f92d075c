#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "permanence/core_model.hpp"
#include "permanence/lmm.hpp"
#include "permanence/synth.hpp"

namespace permanence {

struct LmmRunConfig {
  std::vector<Eye> eyes{Eye::Left, Eye::Right};
  std::optional<ApcMode> apc_mode = ApcMode::GalleryAgePlusT;
  RandomStructure random = RandomStructure::InterceptAndSlopeOnT;
  bool standardize = false;
  std::vector<std::string> covariates{"Q_gallery", "Q_probe", "U_gallery", "U_probe", "DC", "C_gallery", "C_probe"};
  std::vector<std::pair<std::string, std::string>> interactions;
  bool age_group_model = true;
  bool combined_model = true;         // stacked z-scored matchers
  bool standardize_per_eye = true;    // z-scores per matcher-eye, else per matcher
  FitOptions fit;
};

/// Everything one run needs; a run is reproducible from this alone.
struct RunConfig {
  std::filesystem::path base_dir;  // directory of the config file
  std::optional<std::filesystem::path> captures;  // default <out>/captures.csv
  std::optional<std::filesystem::path> scores;    // default <out>/scores.csv
  std::filesystem::path out = "permanence_out";
  std::uint64_t seed = 1;
  std::vector<MatcherProfile> matchers;
  std::size_t max_impostor_probes = 10;
  std::map<std::string, double> thresholds;  // explicit overrides
  double target_fmr = 0.001;
  int bin_width = 6;
  double confidence = 0.95;
  double min_quality_cut = 45.0;
  std::optional<std::pair<std::string, std::string>> fusion;
  LmmRunConfig lmm;
  int cv_folds = 5;
  std::optional<SynthConfig> synth;

  const MatcherProfile& matcher(const std::string& name) const;
  std::pair<std::string, std::string> fusion_pair() const;
};

/// Parses and validates; unknown keys and bad values throw ConfigInvalid.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace permanence
