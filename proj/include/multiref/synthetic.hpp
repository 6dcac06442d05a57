#pragma once

#include <array>
#include <filesystem>
#include <vector>

#include "multiref/dataset.hpp"

namespace multiref {

struct AngleSegment {
    Axis axis = Axis::Yaw;
    real start_deg = -60.0;
    real end_deg = 60.0;
};

/// Parameters of the synthetic annotated head-movement dataset. Subjects are
/// parametric face sprites whose appearance changes with angle (side patches
/// rotate in and out of view), so multi-reference fusion has real signal.
struct SyntheticSpec {
    int subjects = 5;
    int frames_per_sequence = 31;
    std::vector<AngleSegment> program = {{Axis::Yaw, -60.0, 60.0},
                                         {Axis::Pitch, -40.0, 40.0},
                                         {Axis::Roll, -30.0, 30.0}};
    int resolution = 64;
    std::uint64_t seed = 1234;
    int illumination_variants = 2;
    /// Trailing subjects restricted to illumination 0 (the 5x2-1=9 pattern layout).
    int single_illum_subjects = 1;

    void validate() const;
    int pattern_count() const;
};

/// Renders one sprite frame, continuous values in [0,1], shape (3,R,R).
Tensor render_sprite(const SyntheticSpec& spec, int subject, int illum, const Angles& pose);

/// Analytic landmark positions in pixels: left eye, right eye, nose, mouth.
std::array<std::array<real, 2>, 4> sprite_landmarks(const SyntheticSpec& spec, int subject,
                                                    const Angles& pose);

/// Linear angle sweep for one segment; off-axis angles are zero.
AngleTrack program_track(const AngleSegment& seg, int frames);

/// Pattern directory names in generation order ("s00_i0", ...).
std::vector<std::string> synthetic_patterns(const SyntheticSpec& spec);

/// Writes <root>/<pattern>/<axis>/frame_%06d.png + track.csv. Deterministic:
/// the same spec produces byte-identical trees.
void generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& root);

}  // namespace multiref
