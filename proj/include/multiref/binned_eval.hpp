#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "multiref/dataset.hpp"
#include "multiref/extractors.hpp"
#include "multiref/model.hpp"

namespace multiref {

/// Half-open bins [lo + i*width, lo + (i+1)*width) tiling [lo, hi).
struct BinSpec {
    Axis axis = Axis::Yaw;
    real lo = -60.0;
    real hi = 60.0;
    real width = 2.0;

    int bin_count() const;
    real bin_lo(int i) const { return lo + i * width; }
    real bin_hi(int i) const { return lo + (i + 1) * width; }
    void validate() const;
};

struct BinAssignment {
    std::vector<std::vector<int>> bins;  // frame indices per bin
    std::vector<int> unassigned;         // frames outside [lo, hi)
};

/// Result frames inherit the driving angles frame-by-frame.
AngleTrack annotate_results(const AngleTrack& driving_track, size_t result_frames);

BinAssignment assign_bins(const AngleTrack& track, const BinSpec& spec);

/// Per-layer arithmetic mean of raw extractor activations (averaging happens
/// before any LPIPS normalization).
struct RepresentativeFeature {
    std::vector<Tensor> layers;
};

RepresentativeFeature representative_feature(const std::vector<const Tensor*>& images,
                                             const FeatureExtractor& extractor);

/// Standard LPIPS aggregation between two representative features:
/// channel-unit-normalize, weighted squared channel differences, spatial
/// average, sum over channels and layers. Empty weights mean units.
real lpips_between(const RepresentativeFeature& a, const RepresentativeFeature& b,
                   const std::vector<std::vector<real>>& weights);

struct BinRow {
    int index = 0;
    real lo = 0.0, hi = 0.0;
    int n_true = 0, n_result = 0;
    std::optional<real> distance;  // empty when the bin is ignored
};

struct BinReport {
    std::vector<BinRow> rows;          // every bin, scored or not
    std::vector<int> ignored_bins;     // bins skipped by the empty-side rule
    std::optional<real> aggregate;     // mean over scored bins; empty = no overlap
    int scored_bins = 0;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

BinReport binned_score(const std::vector<Tensor>& true_seq, const AngleTrack& true_track,
                       const std::vector<Tensor>& result_seq, const AngleTrack& result_track,
                       const BinSpec& spec, const FeatureExtractor& extractor);

// --- pairwise motion-transfer evaluation ---------------------------------------

struct PairwiseOptions {
    /// Reference picks from the reference pattern's yaw sequence: frontal,
    /// left (-30), right (+30).
    std::vector<real> reference_yaw_targets = {0.0, -30.0, 30.0};
    std::vector<Axis> axes = {Axis::Yaw, Axis::Pitch, Axis::Roll};
    int frame_stride = 1;
    int max_pairs = 0;  // 0 = every admissible pair
    FusionMode mode = FusionMode::Patch;
    bool single_reference = false;  // frontal-only baseline
    real lo = -60.0, hi = 60.0, width = 2.0;
};

struct ReferencePick {
    int frame_index = 0;
    real target_deg = 0.0;
    real actual_deg = 0.0;
    real deviation() const { return actual_deg - target_deg; }
};

/// Nearest-angle reference frames on the pattern's yaw sequence; deviations
/// are reported to the caller (and logged by the CLI).
std::vector<ReferencePick> pick_reference_frames(const VideoSequence& yaw_seq,
                                                 const std::vector<real>& targets);

struct PairResult {
    std::string driving_pattern;
    std::string reference_pattern;
    std::vector<std::pair<Axis, BinReport>> axis_reports;
    std::vector<ReferencePick> reference_picks;
};

struct PairwiseReport {
    std::vector<PairResult> pairs;
    int admissible_pairs = 0;

    /// Per-pair-then-mean aggregate for one axis.
    std::optional<real> axis_mean(Axis axis) const;
    /// Alternative aggregate: pool scored bins across pairs.
    std::optional<real> pooled_mean(Axis axis) const;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Every ordered (driving, reference) pattern pair except same person under
/// the same illumination; scores each axis sequence with the binned metric.
PairwiseReport pairwise_evaluation(const Dataset& data, const ReenactModel& model,
                                   const FeatureExtractor& extractor,
                                   const PairwiseOptions& opts);

}  // namespace multiref
