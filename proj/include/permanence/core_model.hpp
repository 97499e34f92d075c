#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace permanence {

enum class Eye { Left, Right };

std::string_view to_string(Eye eye);  // "L" / "R"
std::optional<Eye> parse_eye(std::string_view text);

/// One eye image with its metadata. Quality metrics are opaque covariates and
/// may be missing (NaN); identity, timing, age and radii are mandatory.
struct CaptureRecord {
  std::string image_id;
  std::string subject_id;
  Eye eye = Eye::Left;
  int collection_index = 1;
  int capture_time_months = 0;
  int age_years = 0;
  double quality = 0.0;
  double usable_area = 0.0;
  double circularity = 0.0;
  double pupil_radius = 0.0;
  double iris_radius = 0.0;

  double dilation() const;

  friend bool operator==(const CaptureRecord&, const CaptureRecord&) = default;
};

struct Rejection {
  std::size_t line = 0;  // 1-based file line; the header is line 1
  std::string reason;
};

struct CaptureTable {
  std::vector<CaptureRecord> records;
  std::vector<Rejection> rejected;
  std::size_t input_rows = 0;
};

enum class Orientation { HigherIsBetter, LowerIsBetter };

std::string_view to_string(Orientation orientation);
std::optional<Orientation> parse_orientation(std::string_view text);

struct MatcherProfile {
  std::string name;
  Orientation orientation = Orientation::HigherIsBetter;
  double score_min = 0.0;
  double score_max = 1.0;
  double default_threshold = 0.5;

  /// Throws RangeError when the range or the default threshold is invalid.
  void validate() const;
  bool contains(double score) const { return score >= score_min && score <= score_max; }
};

enum class PairKind { Genuine, Impostor };

std::string_view to_string(PairKind kind);

/// Gallery/probe image covariates carried by every comparison.
struct PairCovariates {
  double q_gallery = 0.0, q_probe = 0.0;
  double u_gallery = 0.0, u_probe = 0.0;
  double c_gallery = 0.0, c_probe = 0.0;
  double r_gallery = 0.0, r_probe = 0.0;

  friend bool operator==(const PairCovariates&, const PairCovariates&) = default;
};

struct ComparisonRecord {
  std::string gallery_image_id;
  std::string probe_image_id;
  std::string gallery_subject;
  std::string probe_subject;
  Eye eye = Eye::Left;
  PairKind kind = PairKind::Genuine;
  int gap_months = 0;
  int delta_age_years = 0;
  int gallery_age = 0;
  int probe_age = 0;
  double dc = 1.0;
  PairCovariates cov;
  std::map<std::string, double> scores;
  // Derived columns added by analyses (stacked outcomes, matcher indicators).
  std::map<std::string, double> extra;

  friend bool operator==(const ComparisonRecord&, const ComparisonRecord&) = default;
};

struct ComparisonTable {
  std::vector<std::string> matchers;
  std::vector<ComparisonRecord> rows;
  // Pairs lacking a score for at least one declared matcher.
  std::vector<ComparisonRecord> incomplete;
};

/// Named column lookup used by model design and correlation analyses.
/// Recognised names: T, delta_A, A_gallery, A_probe, DC, Q_gallery, Q_probe,
/// U_gallery, U_probe, C_gallery, C_probe, R_gallery, R_probe, min_Q, a matcher
/// name (its score), or any key of `extra`. Returns nullopt for unknown names
/// or a missing score.
std::optional<double> column_value(const ComparisonRecord& row, std::string_view name);

struct ScoreRow {
  std::string gallery_image_id;
  std::string probe_image_id;
  std::string matcher;
  double score = 0.0;

  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

using ScoreTable = std::vector<ScoreRow>;

// Pupil-to-iris radius ratio; throws InvalidArgument unless 0 < r_pupil < r_iris.
double dilation_ratio(double r_pupil, double r_iris);

// 1 - |d_gallery - d_probe|; throws InvalidArgument for inputs outside [0, 1].
double dilation_constancy(double d_gallery, double d_probe);

inline constexpr std::string_view kCaptureHeader =
    "image_id,subject_id,eye,collection_index,capture_time_months,age_years,"
    "quality,usable_area,circularity,pupil_radius,iris_radius";
inline constexpr std::string_view kScoreHeader = "gallery_image_id,probe_image_id,matcher,score";

CaptureTable ingest_captures(const std::filesystem::path& path);
void write_captures(const std::filesystem::path& path, const std::vector<CaptureRecord>& records);

ScoreTable ingest_scores(const std::filesystem::path& path);
void write_scores(const std::filesystem::path& path, const ScoreTable& scores);

struct Finding {
  std::size_t record = 0;  // index into the validated table
  std::string image_id;
  std::string violation;
  std::string detail;
};

struct ValidationReport {
  std::vector<Finding> findings;
  std::map<std::string, std::size_t> counts;  // per violation class
  std::size_t n_records = 0;
  std::size_t n_flagged_records = 0;

  bool clean() const { return findings.empty(); }
  double flagged_fraction() const {
    return n_records == 0 ? 0.0 : static_cast<double>(n_flagged_records) / static_cast<double>(n_records);
  }
};

ValidationReport validate_dataset(const std::vector<CaptureRecord>& records);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

}  // namespace permanence
