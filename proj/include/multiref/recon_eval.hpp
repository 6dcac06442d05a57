#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "multiref/dataset.hpp"
#include "multiref/model.hpp"

namespace multiref {

/// Reference frames picked from the driving video itself. `first-mid-last`
/// keeps the enumeration order (first, last, middle); indices are stored
/// explicitly so downstream code never re-derives them.
struct ReferenceSelection {
    std::vector<int> indices;
    std::vector<Tensor> frames;
    std::string strategy;
};

ReferenceSelection select_references(const VideoSequence& seq, const std::string& strategy);

/// Mean absolute pixel difference over frames, channels and pixels.
real l1_distance(const std::vector<Tensor>& real_seq, const std::vector<Tensor>& gen_seq);
real frame_l1(const Tensor& a, const Tensor& b);

using LandmarkSet = std::vector<std::array<real, 2>>;

class LandmarkExtractor {
public:
    virtual ~LandmarkExtractor() = default;
    virtual std::optional<LandmarkSet> landmarks(const Tensor& image) const = 0;
};

class EmbeddingExtractor {
public:
    virtual ~EmbeddingExtractor() = default;
    virtual std::optional<std::vector<real>> embed(const Tensor& image) const = 0;
};

/// Scripted extractor for tests: returns preset landmark tables in call order.
class TableLandmarker : public LandmarkExtractor {
public:
    explicit TableLandmarker(std::vector<std::optional<LandmarkSet>> table)
        : table_(std::move(table)) {}
    std::optional<LandmarkSet> landmarks(const Tensor&) const override;

private:
    std::vector<std::optional<LandmarkSet>> table_;
    mutable size_t cursor_ = 0;
};

class TableEmbedder : public EmbeddingExtractor {
public:
    explicit TableEmbedder(std::vector<std::optional<std::vector<real>>> table)
        : table_(std::move(table)) {}
    std::optional<std::vector<real>> embed(const Tensor&) const override;

private:
    std::vector<std::optional<std::vector<real>>> table_;
    mutable size_t cursor_ = 0;
};

/// Average-pooled pixels as a crude identity embedding (CLI "pixel" embedder).
class PixelEmbedder : public EmbeddingExtractor {
public:
    explicit PixelEmbedder(int grid = 8) : grid_(grid) {}
    std::optional<std::vector<real>> embed(const Tensor& image) const override;

private:
    int grid_;
};

struct MetricValue {
    real value = 0.0;
    int frames_used = 0;
    int frames_skipped = 0;
};

/// Mean landmark displacement; frames where either side fails detection are
/// skipped and counted. Empty result when no frame could be scored.
std::optional<MetricValue> average_keypoint_distance(const std::vector<Tensor>& real_seq,
                                                     const std::vector<Tensor>& gen_seq,
                                                     const LandmarkExtractor& landmarker);

std::optional<MetricValue> average_euclidean_distance(const std::vector<Tensor>& real_seq,
                                                      const std::vector<Tensor>& gen_seq,
                                                      const EmbeddingExtractor& embedder);

/// Single-reference model run once per reference; per frame the candidate
/// closest (L1) to the ground-truth driving frame wins, ties to the lowest
/// reference index.
std::vector<Tensor> pseudo_multi_ref(const ReenactModel& model, const std::vector<Tensor>& refs,
                                     const std::vector<Tensor>& driving_seq, FusionMode mode);

enum class ReconMode { Single, Pseudo, Patch, Element };
ReconMode recon_mode_from_name(const std::string& s);
std::string recon_mode_name(ReconMode m);

struct SequenceScore {
    std::string sequence;
    real l1d = 0.0;
    std::optional<MetricValue> akd;
    std::optional<MetricValue> aed;
    int frames = 0;
};

struct ReconReport {
    std::string strategy;
    std::string mode;
    std::vector<SequenceScore> rows;

    int sample_count() const { return static_cast<int>(rows.size()); }
    real mean_l1d() const;
    std::optional<real> mean_akd() const;
    std::optional<real> mean_aed() const;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Runs the reconstruction protocol over every sequence of the dataset.
/// `frame_stride` subsamples driving frames (>=1); extractors may be null.
ReconReport evaluate_reconstruction(const ReenactModel& model, const Dataset& data,
                                    const std::string& strategy, ReconMode mode,
                                    const LandmarkExtractor* landmarker,
                                    const EmbeddingExtractor* embedder, int frame_stride = 1);

}  // namespace multiref
