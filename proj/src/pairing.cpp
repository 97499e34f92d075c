#include "permanence/pairing.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "csv.hpp"
#include "permanence/error.hpp"
#include "permanence/kernels.hpp"

namespace permanence {

std::vector<std::size_t> canonical_order(const std::vector<CaptureRecord>& records) {
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = records[a];
    const auto& y = records[b];
    return std::tie(x.subject_id, x.eye, x.collection_index, x.image_id) <
           std::tie(y.subject_id, y.eye, y.collection_index, y.image_id);
  });
  return order;
}

ComparisonRecord make_comparison(const CaptureRecord& gallery, const CaptureRecord& probe, PairKind kind) {
  ComparisonRecord c;
  c.gallery_image_id = gallery.image_id;
  c.probe_image_id = probe.image_id;
  c.gallery_subject = gallery.subject_id;
  c.probe_subject = probe.subject_id;
  c.eye = gallery.eye;
  c.kind = kind;
  c.gap_months = probe.capture_time_months - gallery.capture_time_months;
  c.delta_age_years = probe.age_years - gallery.age_years;
  c.gallery_age = gallery.age_years;
  c.probe_age = probe.age_years;
  c.cov.q_gallery = gallery.quality;
  c.cov.q_probe = probe.quality;
  c.cov.u_gallery = gallery.usable_area;
  c.cov.u_probe = probe.usable_area;
  c.cov.c_gallery = gallery.circularity;
  c.cov.c_probe = probe.circularity;
  c.cov.r_gallery = gallery.dilation();
  c.cov.r_probe = probe.dilation();
  c.dc = dilation_constancy(c.cov.r_gallery, c.cov.r_probe);
  return c;
}

std::vector<ComparisonRecord> generate_genuine_pairs(const std::vector<CaptureRecord>& captures) {
  const auto order = canonical_order(captures);
  std::vector<ComparisonRecord> pairs;

  // Canonical order groups each subject contiguously, each eye within it.
  std::size_t s_begin = 0;
  while (s_begin < order.size()) {
    const std::string& subject = captures[order[s_begin]].subject_id;
    std::size_t s_end = s_begin;
    int first_collection = captures[order[s_begin]].collection_index;
    while (s_end < order.size() && captures[order[s_end]].subject_id == subject) {
      first_collection = std::min(first_collection, captures[order[s_end]].collection_index);
      ++s_end;
    }
    for (std::size_t g = s_begin; g < s_end; ++g) {
      const auto& gallery = captures[order[g]];
      if (gallery.collection_index != first_collection) continue;
      for (std::size_t p = s_begin; p < s_end; ++p) {
        const auto& probe = captures[order[p]];
        if (probe.eye != gallery.eye || probe.collection_index <= first_collection) continue;
        if (probe.capture_time_months <= gallery.capture_time_months) continue;
        pairs.push_back(make_comparison(gallery, probe, PairKind::Genuine));
      }
    }
    s_begin = s_end;
  }
  return pairs;
}

std::vector<ComparisonRecord> generate_impostor_pairs(const std::vector<CaptureRecord>& captures,
                                                      const PairingConfig& cfg) {
  const auto order = canonical_order(captures);
  const std::size_t n = order.size();

  // Per eye: canonical rows of that eye, and for each canonical row the
  // [begin, end) run its subject occupies inside that list.
  std::vector<std::size_t> eye_rows[2];
  std::vector<std::size_t> run_begin(n), run_end(n);
  for (std::size_t r = 0; r < n; ++r) eye_rows[captures[order[r]].eye == Eye::Left ? 0 : 1].push_back(r);
  for (auto& rows : eye_rows) {
    std::size_t a = 0;
    while (a < rows.size()) {
      std::size_t b = a;
      const auto& subject = captures[order[rows[a]]].subject_id;
      while (b < rows.size() && captures[order[rows[b]]].subject_id == subject) ++b;
      for (std::size_t i = a; i < b; ++i) {
        run_begin[rows[i]] = a;
        run_end[rows[i]] = b;
      }
      a = b;
    }
  }

  std::vector<kernels::DrawSpec> specs(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto& rows = eye_rows[captures[order[r]].eye == Eye::Left ? 0 : 1];
    const std::uint64_t pool = rows.size() - (run_end[r] - run_begin[r]);
    specs[r] = {cfg.base_seed ^ static_cast<std::uint64_t>(r), pool,
                std::min<std::uint64_t>(pool, cfg.max_impostor_probes)};
  }
  const auto draws = kernels::parallel::impostor_draws(specs);

  std::vector<ComparisonRecord> pairs;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& gallery = captures[order[r]];
    const auto& rows = eye_rows[gallery.eye == Eye::Left ? 0 : 1];
    const std::size_t skip = run_end[r] - run_begin[r];
    for (const std::uint64_t pos : draws[r]) {
      const std::size_t j = pos < run_begin[r] ? pos : pos + skip;
      pairs.push_back(make_comparison(gallery, captures[order[rows[j]]], PairKind::Impostor));
    }
  }
  return pairs;
}

ComparisonTable attach_scores(std::vector<ComparisonRecord> pairs, const ScoreTable& scores,
                              const std::vector<MatcherProfile>& profiles) {
  auto key = [](const std::string& g, const std::string& p, const std::string& m) {
    std::string k;
    k.reserve(g.size() + p.size() + m.size() + 2);
    k.append(g).push_back('\x1f');
    k.append(p).push_back('\x1f');
    k.append(m);
    return k;
  };
  std::unordered_map<std::string, double> lookup;
  lookup.reserve(scores.size());
  for (const auto& s : scores) {
    if (!lookup.emplace(key(s.gallery_image_id, s.probe_image_id, s.matcher), s.score).second) {
      throw Error(ErrorCode::DuplicateKey, "duplicate score for " + s.gallery_image_id + " -> " +
                                               s.probe_image_id + " (" + s.matcher + ")");
    }
  }

  ComparisonTable table;
  for (const auto& p : profiles) table.matchers.push_back(p.name);
  for (auto& pair : pairs) {
    bool complete = true;
    for (const auto& profile : profiles) {
      const auto it = lookup.find(key(pair.gallery_image_id, pair.probe_image_id, profile.name));
      if (it == lookup.end()) {
        complete = false;
        continue;
      }
      if (!profile.contains(it->second)) {
        throw Error(ErrorCode::RangeError, "score " + format_double(it->second) + " for " + pair.gallery_image_id +
                                               " -> " + pair.probe_image_id + " outside range of matcher '" +
                                               profile.name + "'");
      }
      pair.scores[profile.name] = it->second;
    }
    (complete ? table.rows : table.incomplete).push_back(std::move(pair));
  }
  return table;
}

void write_pairs(const std::filesystem::path& path, const ComparisonTable& table) {
  auto out = csv::open_output(path);
  out << kPairHeader;
  for (const auto& m : table.matchers) out << ",score_" << m;
  out << '\n';
  for (const auto& r : table.rows) {
    const auto& c = r.cov;
    out << to_string(r.kind) << ',' << to_string(r.eye) << ',' << r.gallery_image_id << ',' << r.probe_image_id
        << ',' << r.gap_months << ',' << r.delta_age_years << ',' << format_double(r.dc) << ','
        << format_double(c.q_gallery) << ',' << format_double(c.q_probe) << ',' << format_double(c.u_gallery)
        << ',' << format_double(c.u_probe) << ',' << format_double(c.c_gallery) << ','
        << format_double(c.c_probe) << ',' << format_double(c.r_gallery) << ',' << format_double(c.r_probe);
    for (const auto& m : table.matchers) {
      out << ',';
      if (auto it = r.scores.find(m); it != r.scores.end()) out << format_double(it->second);
    }
    out << '\n';
  }
}

ComparisonTable read_pairs(const std::filesystem::path& path, const std::vector<CaptureRecord>& captures) {
  auto in = csv::open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::MissingColumn, "empty pair file: " + path.string());
  const auto header = csv::split(csv::trim(line));
  const auto expected = csv::split(kPairHeader);
  if (header.size() < expected.size() || !std::equal(expected.begin(), expected.end(), header.begin())) {
    throw Error(ErrorCode::MissingColumn, "pair table header mismatch in " + path.string());
  }
  ComparisonTable table;
  for (std::size_t i = expected.size(); i < header.size(); ++i) {
    const auto h = header[i];
    if (h.substr(0, 6) != "score_") throw Error(ErrorCode::MissingColumn, "unexpected column " + std::string(h));
    table.matchers.emplace_back(h.substr(6));
  }

  std::unordered_map<std::string, const CaptureRecord*> by_id;
  for (const auto& c : captures) by_id.emplace(c.image_id, &c);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (csv::trim(line).empty()) continue;
    const auto f = csv::split(csv::trim(line));
    const auto where = path.string() + ":" + std::to_string(line_no);
    if (f.size() != header.size()) throw Error(ErrorCode::ParseError, where + ": field count");
    auto num = [&](std::size_t i) {
      const auto v = csv::parse_number<double>(f[i]);
      if (!v) throw Error(ErrorCode::ParseError, where + ": bad value in column " + std::string(header[i]));
      return *v;
    };
    ComparisonRecord r;
    if (f[0] == "genuine") {
      r.kind = PairKind::Genuine;
    } else if (f[0] == "impostor") {
      r.kind = PairKind::Impostor;
    } else {
      throw Error(ErrorCode::ParseError, where + ": bad kind");
    }
    const auto eye = parse_eye(f[1]);
    if (!eye) throw Error(ErrorCode::ParseError, where + ": bad eye");
    r.eye = *eye;
    r.gallery_image_id = std::string(f[2]);
    r.probe_image_id = std::string(f[3]);
    r.gap_months = static_cast<int>(num(4));
    r.delta_age_years = static_cast<int>(num(5));
    r.dc = num(6);
    auto num_or_nan = [&](std::size_t i) {
      return csv::trim(f[i]).empty() ? std::numeric_limits<double>::quiet_NaN() : num(i);
    };
    r.cov = {num_or_nan(7), num_or_nan(8), num_or_nan(9),  num_or_nan(10),
             num_or_nan(11), num_or_nan(12), num(13), num(14)};
    for (std::size_t m = 0; m < table.matchers.size(); ++m) {
      const auto text = csv::trim(f[expected.size() + m]);
      if (!text.empty()) r.scores[table.matchers[m]] = num(expected.size() + m);
    }
    const auto g = by_id.find(r.gallery_image_id);
    const auto p = by_id.find(r.probe_image_id);
    if (g == by_id.end() || p == by_id.end()) {
      throw Error(ErrorCode::ParseError, where + ": image id not present in capture table");
    }
    r.gallery_subject = g->second->subject_id;
    r.probe_subject = p->second->subject_id;
    r.gallery_age = g->second->age_years;
    r.probe_age = p->second->age_years;
    (r.scores.size() == table.matchers.size() ? table.rows : table.incomplete).push_back(std::move(r));
  }
  return table;
}

}  // namespace permanence
