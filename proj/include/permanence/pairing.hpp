#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "permanence/core_model.hpp"

namespace permanence {

enum class EyePolicy { SameEyeOnly };

struct PairingConfig {
  std::size_t max_impostor_probes = 10;
  std::uint64_t base_seed = 0;
  EyePolicy eye_policy = EyePolicy::SameEyeOnly;
};

/// Canonical sort: (subject_id, eye, collection_index, image_id). Returns the
/// permutation into `records`.
std::vector<std::size_t> canonical_order(const std::vector<CaptureRecord>& records);

/// Fixed-gallery protocol. For each (subject, eye) the gallery is every image
/// of that eye from the subject's first attended collection; each gallery
/// image is paired with every image of the same eye from later collections.
/// Output is ordered by canonical gallery position, then probe position.
std::vector<ComparisonRecord> generate_genuine_pairs(const std::vector<CaptureRecord>& captures);

/// Every image is a gallery; its pool is all same-eye images of other
/// subjects in canonical order. min(pool, max_impostor_probes) probes are the
/// prefix of a Fisher-Yates shuffle seeded with base_seed XOR row, where row is
/// the 0-based canonical position of the gallery image. Draws use
/// std::mt19937_64 with rejection-sampled bounded integers.
std::vector<ComparisonRecord> generate_impostor_pairs(const std::vector<CaptureRecord>& captures,
                                                      const PairingConfig& cfg);

/// Joins matcher scores onto pairs. Pairs missing any declared matcher go to
/// `incomplete`; an out-of-range score throws RangeError naming the row.
ComparisonTable attach_scores(std::vector<ComparisonRecord> pairs, const ScoreTable& scores,
                              const std::vector<MatcherProfile>& profiles);

/// Builds a comparison between two captures (gap, age change, dilation
/// constancy and image covariates).
ComparisonRecord make_comparison(const CaptureRecord& gallery, const CaptureRecord& probe, PairKind kind);

// Pair table header, followed by one score_<matcher> column per matcher.
inline constexpr std::string_view kPairHeader =
    "kind,eye,gallery_image_id,probe_image_id,gap_T_months,delta_age_years,DC,Q_gallery,Q_probe,"
    "U_gallery,U_probe,C_gallery,C_probe,R_gallery,R_probe";

void write_pairs(const std::filesystem::path& path, const ComparisonTable& table);

/// Reads a pair table; subject identities and ages are joined from the
/// capture table by image id.
ComparisonTable read_pairs(const std::filesystem::path& path, const std::vector<CaptureRecord>& captures);

}  // namespace permanence
