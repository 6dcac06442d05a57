#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "multiref/tensor.hpp"

namespace multiref {

enum class Axis { Yaw, Pitch, Roll, Free };

std::string axis_name(Axis a);
Axis axis_from_name(const std::string& s);

struct Angles {
    real yaw = 0.0;
    real pitch = 0.0;
    real roll = 0.0;

    real component(Axis a) const;
};

/// Per-frame (yaw, pitch, roll) in degrees, index-aligned with a sequence.
struct AngleTrack {
    std::vector<Angles> rows;

    size_t size() const { return rows.size(); }
    bool all_finite() const;
};

AngleTrack read_track_csv(const std::filesystem::path& path);
void write_track_csv(const std::filesystem::path& path, const AngleTrack& track);

/// Ordered frames of one subject under one illumination; frames decode
/// lazily and are memoized. Loader-validated: uniform resolution, readable
/// frames, track length matching when a track is present.
class VideoSequence {
public:
    std::string pattern;       // e.g. "s00_i0"
    std::string name;          // sequence directory name
    std::string subject_id;
    std::string illumination;
    Axis axis_tag = Axis::Free;
    std::optional<AngleTrack> track;

    VideoSequence() = default;
    VideoSequence(std::vector<std::filesystem::path> frame_paths);

    size_t size() const { return frame_paths_.size(); }
    bool empty() const { return frame_paths_.empty(); }
    int resolution() const { return resolution_; }

    const Tensor& frame(size_t i) const;
    const std::filesystem::path& frame_path(size_t i) const { return frame_paths_[i]; }

    /// Decodes every frame once; returns false on the first failure.
    bool validate(std::string* error);

private:
    std::vector<std::filesystem::path> frame_paths_;
    mutable std::vector<std::optional<Tensor>> cache_;
    int resolution_ = 0;
};

struct Dataset {
    std::vector<VideoSequence> sequences;

    bool empty() const { return sequences.empty(); }
    std::vector<const VideoSequence*> by_pattern(const std::string& pattern) const;
    std::vector<std::string> patterns() const;
};

/// Layout: <root>/<pattern>/<sequence>/frame_%06d.png (+ optional track.csv).
/// Unreadable or inconsistent sequences are skipped with a warning on
/// stderr; an empty root is fatal.
Dataset load_dataset(const std::filesystem::path& root);

/// One bare sequence directory of frames (+ optional track.csv).
VideoSequence load_sequence_dir(const std::filesystem::path& dir);

}  // namespace multiref
