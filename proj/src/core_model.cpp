#include "permanence/core_model.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "csv.hpp"
#include "permanence/error.hpp"

namespace permanence {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

bool in_percent_range(double v) { return std::isnan(v) || (v >= 0.0 && v <= 100.0); }

std::unordered_map<std::string, std::size_t> header_index(std::string_view header_line,
                                                          std::string_view contract,
                                                          const std::filesystem::path& path) {
  std::unordered_map<std::string, std::size_t> index;
  const auto fields = csv::split(csv::trim(header_line));
  for (std::size_t i = 0; i < fields.size(); ++i) index.emplace(std::string(csv::trim(fields[i])), i);
  for (const auto name : csv::split(contract)) {
    if (!index.contains(std::string(name))) {
      throw Error(ErrorCode::MissingColumn,
                  "missing column '" + std::string(name) + "' in " + path.string());
    }
  }
  return index;
}

}  // namespace

std::string_view to_string(Eye eye) { return eye == Eye::Left ? "L" : "R"; }

std::optional<Eye> parse_eye(std::string_view text) {
  text = csv::trim(text);
  if (text == "L") return Eye::Left;
  if (text == "R") return Eye::Right;
  return std::nullopt;
}

std::string_view to_string(Orientation orientation) {
  return orientation == Orientation::HigherIsBetter ? "higher" : "lower";
}

std::optional<Orientation> parse_orientation(std::string_view text) {
  if (text == "higher" || text == "HigherIsBetter" || text == "similarity") return Orientation::HigherIsBetter;
  if (text == "lower" || text == "LowerIsBetter" || text == "distance") return Orientation::LowerIsBetter;
  return std::nullopt;
}

std::string_view to_string(PairKind kind) { return kind == PairKind::Genuine ? "genuine" : "impostor"; }

void MatcherProfile::validate() const {
  if (!(score_min < score_max)) {
    throw Error(ErrorCode::RangeError, "matcher '" + name + "': score_min must be below score_max");
  }
  if (!(default_threshold >= score_min && default_threshold <= score_max)) {
    throw Error(ErrorCode::RangeError, "matcher '" + name + "': default threshold outside score range");
  }
}

double CaptureRecord::dilation() const { return dilation_ratio(pupil_radius, iris_radius); }

double dilation_ratio(double r_pupil, double r_iris) {
  if (!(r_pupil > 0.0) || !(r_iris > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "dilation_ratio: radii must be positive");
  }
  if (!(r_pupil < r_iris)) {
    throw Error(ErrorCode::InvalidArgument, "dilation_ratio: pupil radius must be below iris radius");
  }
  return r_pupil / r_iris;
}

double dilation_constancy(double d_gallery, double d_probe) {
  const auto ok = [](double d) { return d >= 0.0 && d <= 1.0; };
  if (!ok(d_gallery) || !ok(d_probe)) {
    throw Error(ErrorCode::InvalidArgument, "dilation_constancy: dilation ratios must lie in [0, 1]");
  }
  return 1.0 - std::abs(d_gallery - d_probe);
}

std::optional<double> column_value(const ComparisonRecord& row, std::string_view name) {
  const auto& c = row.cov;
  if (name == "T") return static_cast<double>(row.gap_months);
  if (name == "delta_A") return static_cast<double>(row.delta_age_years);
  if (name == "A_gallery") return static_cast<double>(row.gallery_age);
  if (name == "A_probe") return static_cast<double>(row.probe_age);
  if (name == "DC") return row.dc;
  if (name == "Q_gallery") return c.q_gallery;
  if (name == "Q_probe") return c.q_probe;
  if (name == "U_gallery") return c.u_gallery;
  if (name == "U_probe") return c.u_probe;
  if (name == "C_gallery") return c.c_gallery;
  if (name == "C_probe") return c.c_probe;
  if (name == "R_gallery") return c.r_gallery;
  if (name == "R_probe") return c.r_probe;
  if (name == "min_Q") return std::min(c.q_gallery, c.q_probe);
  const std::string key(name);
  if (auto it = row.extra.find(key); it != row.extra.end()) return it->second;
  if (auto it = row.scores.find(key); it != row.scores.end()) return it->second;
  return std::nullopt;
}

std::string format_double(double value) {
  if (std::isnan(value)) return "";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), ptr);
}

CaptureTable ingest_captures(const std::filesystem::path& path) {
  auto in = csv::open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, "empty capture file: " + path.string());
  const auto col = header_index(line, kCaptureHeader, path);
  const std::size_t width = csv::split(csv::trim(line)).size();

  CaptureTable table;
  std::unordered_map<std::string, std::size_t> seen;  // image_id -> line
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) continue;
    ++table.input_rows;
    const auto fields = csv::split(csv::trim(line));
    auto reject = [&](std::string reason) { table.rejected.push_back({line_no, std::move(reason)}); };
    if (fields.size() != width) {
      reject("field count");
      continue;
    }
    auto field = [&](const char* name) { return csv::trim(fields[col.at(name)]); };

    CaptureRecord r;
    r.image_id = std::string(field("image_id"));
    r.subject_id = std::string(field("subject_id"));
    if (r.image_id.empty() || r.subject_id.empty()) {
      reject("missing key");
      continue;
    }
    if (auto it = seen.find(r.image_id); it != seen.end()) {
      throw Error(ErrorCode::DuplicateKey, "duplicate image_id '" + r.image_id + "' at lines " +
                                               std::to_string(it->second) + " and " + std::to_string(line_no));
    }
    seen.emplace(r.image_id, line_no);

    const auto eye = parse_eye(field("eye"));
    if (!eye) {
      reject(field("eye").empty() ? "missing eye" : "bad value eye");
      continue;
    }
    r.eye = *eye;

    bool ok = true;
    auto read_int = [&](const char* name, int& out) {
      if (!ok) return;
      const auto text = field(name);
      if (text.empty()) {
        reject(std::string("missing ") + name);
        ok = false;
      } else if (auto v = csv::parse_number<int>(text)) {
        out = *v;
      } else {
        reject(std::string("bad value ") + name);
        ok = false;
      }
    };
    auto read_real = [&](const char* name, double& out, bool mandatory) {
      if (!ok) return;
      const auto text = field(name);
      if (text.empty()) {
        if (mandatory) {
          reject(std::string("missing ") + name);
          ok = false;
        } else {
          out = kNaN;
        }
      } else if (auto v = csv::parse_number<double>(text); v && std::isfinite(*v)) {
        out = *v;
      } else {
        reject(std::string("bad value ") + name);
        ok = false;
      }
    };
    read_int("collection_index", r.collection_index);
    read_int("capture_time_months", r.capture_time_months);
    read_int("age_years", r.age_years);
    read_real("quality", r.quality, false);
    read_real("usable_area", r.usable_area, false);
    read_real("circularity", r.circularity, false);
    read_real("pupil_radius", r.pupil_radius, true);
    read_real("iris_radius", r.iris_radius, true);
    if (!ok) continue;

    if (r.collection_index < 1) {
      reject("collection index");
      continue;
    }
    if (!in_percent_range(r.quality) || !in_percent_range(r.usable_area) || !in_percent_range(r.circularity)) {
      reject("quality bounds");
      continue;
    }
    if (!(r.pupil_radius > 0.0) || !(r.pupil_radius < r.iris_radius)) {
      reject("dilation bounds");
      continue;
    }
    table.records.push_back(std::move(r));
  }
  return table;
}

void write_captures(const std::filesystem::path& path, const std::vector<CaptureRecord>& records) {
  auto out = csv::open_output(path);
  out << kCaptureHeader << '\n';
  for (const auto& r : records) {
    out << r.image_id << ',' << r.subject_id << ',' << to_string(r.eye) << ',' << r.collection_index << ','
        << r.capture_time_months << ',' << r.age_years << ',' << format_double(r.quality) << ','
        << format_double(r.usable_area) << ',' << format_double(r.circularity) << ','
        << format_double(r.pupil_radius) << ',' << format_double(r.iris_radius) << '\n';
  }
}

ScoreTable ingest_scores(const std::filesystem::path& path) {
  auto in = csv::open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, "empty score file: " + path.string());
  const auto col = header_index(line, kScoreHeader, path);
  const std::size_t width = csv::split(csv::trim(line)).size();

  ScoreTable scores;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) continue;
    const auto fields = csv::split(csv::trim(line));
    if (fields.size() != width) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": field count");
    }
    ScoreRow row;
    row.gallery_image_id = std::string(csv::trim(fields[col.at("gallery_image_id")]));
    row.probe_image_id = std::string(csv::trim(fields[col.at("probe_image_id")]));
    row.matcher = std::string(csv::trim(fields[col.at("matcher")]));
    const auto value = csv::parse_number<double>(fields[col.at("score")]);
    if (!value || !std::isfinite(*value)) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": bad score");
    }
    row.score = *value;
    scores.push_back(std::move(row));
  }
  return scores;
}

void write_scores(const std::filesystem::path& path, const ScoreTable& scores) {
  auto out = csv::open_output(path);
  out << kScoreHeader << '\n';
  for (const auto& s : scores) {
    out << s.gallery_image_id << ',' << s.probe_image_id << ',' << s.matcher << ',' << format_double(s.score)
        << '\n';
  }
}

ValidationReport validate_dataset(const std::vector<CaptureRecord>& records) {
  ValidationReport report;
  report.n_records = records.size();
  std::set<std::size_t> flagged;
  auto flag = [&](std::size_t i, std::string violation, std::string detail) {
    flagged.insert(i);
    ++report.counts[violation];
    report.findings.push_back({i, records[i].image_id, std::move(violation), std::move(detail)});
  };

  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (!seen.insert(r.image_id).second) flag(i, "duplicate key", "image_id repeated");
    if (r.collection_index < 1) flag(i, "collection index", "collection_index < 1");
    if (!in_percent_range(r.quality) || !in_percent_range(r.usable_area) || !in_percent_range(r.circularity)) {
      flag(i, "quality bounds", "quality metric outside [0, 100]");
    }
    if (!(r.pupil_radius > 0.0) || !(r.pupil_radius < r.iris_radius)) {
      flag(i, "dilation bounds", "requires 0 < pupil_radius < iris_radius");
    }
  }

  // Capture time must increase with collection index within a subject.
  std::unordered_map<std::string, std::map<int, int>> first_time;  // subject -> collection -> time
  for (const auto& r : records) {
    auto& m = first_time[r.subject_id];
    auto [it, inserted] = m.emplace(r.collection_index, r.capture_time_months);
    if (!inserted) it->second = std::min(it->second, r.capture_time_months);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto& m = first_time[r.subject_id];
    const auto it = m.find(r.collection_index);
    if (it == m.begin()) continue;
    if (r.capture_time_months <= std::prev(it)->second) {
      flag(i, "capture time order", "capture time not after the previous collection");
    }
  }
  report.n_flagged_records = flagged.size();
  return report;
}

}  // namespace permanence
