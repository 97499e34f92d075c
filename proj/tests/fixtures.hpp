#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "permanence/core_model.hpp"
#include "permanence/lmm.hpp"
#include "permanence/rng.hpp"
#include "permanence/synth.hpp"

namespace fixtures {

using namespace permanence;

inline CaptureRecord capture(const std::string& image, const std::string& subject, Eye eye, int collection,
                             int month, int age, double quality = 80.0) {
  CaptureRecord r;
  r.image_id = image;
  r.subject_id = subject;
  r.eye = eye;
  r.collection_index = collection;
  r.capture_time_months = month;
  r.age_years = age;
  r.quality = quality;
  r.usable_area = 85.0;
  r.circularity = 90.0;
  r.pupil_radius = 45.0;
  r.iris_radius = 100.0;
  return r;
}

inline MatcherProfile similarity(const std::string& name = "sim", double lo = 0.0, double hi = 3000.0,
                                 double threshold = 34.0) {
  return {name, Orientation::HigherIsBetter, lo, hi, threshold};
}

inline MatcherProfile distance(const std::string& name = "dist", double threshold = 0.42) {
  return {name, Orientation::LowerIsBetter, 0.0, 1.0, threshold};
}

inline ComparisonRecord scored(PairKind kind, const std::string& matcher, double score, int gap = 6,
                               const std::string& subject = "S1") {
  ComparisonRecord r;
  r.kind = kind;
  r.gallery_subject = subject;
  r.probe_subject = kind == PairKind::Genuine ? subject : subject + "x";
  r.gap_months = gap;
  r.scores[matcher] = score;
  return r;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("permanence_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

/// Rows of a random-intercept (and optional random-slope) model built
/// directly as comparison records; outcome stored as score "y".
struct MixedFixture {
  int subjects = 100;
  int per_subject = 10;
  double beta0 = 5.0;
  double beta_t = -0.6;
  double beta_q = 1.2;
  double var_u0 = 4.0;
  double var_u1 = 0.0;
  double sigma = 1.0;
  std::uint64_t seed = 1;

  std::vector<ComparisonRecord> rows() const {
    Rng rng(seed);
    std::vector<ComparisonRecord> out;
    for (int s = 0; s < subjects; ++s) {
      const double u0 = rng.normal(0.0, std::sqrt(var_u0));
      const double u1 = rng.normal(0.0, std::sqrt(var_u1));
      for (int j = 0; j < per_subject; ++j) {
        ComparisonRecord r;
        r.gallery_subject = r.probe_subject = "S" + std::to_string(1000 + s);
        r.gallery_image_id = r.gallery_subject + "_g";
        r.probe_image_id = r.gallery_subject + "_" + std::to_string(j);
        r.gap_months = 6 * (j + 1);
        r.cov.q_gallery = 70.0 + 20.0 * rng.uniform();
        r.cov.q_probe = 70.0 + 20.0 * rng.uniform();
        r.gallery_age = 4 + s % 9;
        r.probe_age = r.gallery_age + r.gap_months / 12;
        r.delta_age_years = r.probe_age - r.gallery_age;
        const double t = r.gap_months;
        r.scores["y"] = beta0 + beta_t * t + beta_q * r.cov.q_gallery + u0 + u1 * t + rng.normal(0.0, sigma);
        out.push_back(std::move(r));
      }
    }
    return out;
  }
};

inline ModelSpec simple_spec(RandomStructure random = RandomStructure::InterceptOnly) {
  ModelSpec s;
  s.outcome = "y";
  s.apc_mode.reset();
  s.fixed_terms = {ContinuousTerm{"T"}, ContinuousTerm{"Q_gallery"}};
  s.random = random;
  return s;
}

}  // namespace fixtures
