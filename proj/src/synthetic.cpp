#include "multiref/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "multiref/image.hpp"
#include "multiref/rng.hpp"

namespace multiref {

namespace fs = std::filesystem;

void SyntheticSpec::validate() const {
    if (subjects < 1) throw std::invalid_argument("synthetic: subjects must be >= 1");
    if (frames_per_sequence < 2) throw std::invalid_argument("synthetic: need >= 2 frames");
    if (resolution < 16) throw std::invalid_argument("synthetic: resolution too small");
    if (illumination_variants < 1) throw std::invalid_argument("synthetic: need >= 1 illumination");
    if (single_illum_subjects < 0 || single_illum_subjects > subjects)
        throw std::invalid_argument("synthetic: bad single_illum_subjects");
    if (program.empty()) throw std::invalid_argument("synthetic: empty angle program");
    for (const auto& seg : program) {
        if (seg.axis == Axis::Free) throw std::invalid_argument("synthetic: segment axis must be yaw/pitch/roll");
        if (seg.start_deg < -90.0 || seg.start_deg > 90.0 || seg.end_deg < -90.0 ||
            seg.end_deg > 90.0)
            throw std::invalid_argument("synthetic: angle endpoints must lie in [-90, 90]");
    }
}

int SyntheticSpec::pattern_count() const {
    const int multi = subjects - single_illum_subjects;
    return multi * illumination_variants + single_illum_subjects;
}

namespace {

constexpr real kPi = 3.14159265358979323846;

inline real deg2rad(real d) { return d * kPi / 180.0; }

struct Color {
    real r, g, b;
    Color scaled(real f) const { return {r * f, g * f, b * f}; }
};

struct SubjectStyle {
    Color background, skin, eye_left, eye_right, mouth, nose, left_patch, right_patch, brow;
    real face_radius;   // fraction of the half-canvas
    real eye_lon;       // degrees off-center
    real eye_lat;
    real eye_size;      // fraction of face radius
    real patch_lon;
    real patch_size;
    real mouth_lat;
};

Color random_color(Rng& rng, real lo, real hi) {
    return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

SubjectStyle subject_style(const SyntheticSpec& spec, int subject) {
    Rng rng(spec.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(subject) + 1);
    SubjectStyle s;
    s.background = random_color(rng, 0.05, 0.35);
    s.skin = random_color(rng, 0.45, 0.9);
    s.eye_left = random_color(rng, 0.0, 0.25);
    s.eye_right = random_color(rng, 0.0, 0.25);
    s.mouth = {rng.uniform(0.5, 0.9), rng.uniform(0.05, 0.3), rng.uniform(0.1, 0.4)};
    s.nose = s.skin.scaled(0.72);
    // side patches carry the appearance that is invisible from the far side
    s.left_patch = random_color(rng, 0.1, 1.0);
    s.right_patch = random_color(rng, 0.1, 1.0);
    s.brow = random_color(rng, 0.0, 0.4);
    s.face_radius = rng.uniform(0.58, 0.70);
    s.eye_lon = rng.uniform(16.0, 24.0);
    s.eye_lat = rng.uniform(8.0, 16.0);
    s.eye_size = rng.uniform(0.10, 0.14);
    s.patch_lon = rng.uniform(42.0, 52.0);
    s.patch_size = rng.uniform(0.16, 0.22);
    s.mouth_lat = rng.uniform(-40.0, -30.0);
    return s;
}

struct Projected {
    real x, y;     // pixels
    real depth;    // cos of effective azimuth/elevation product
    bool visible;
    real foreshorten;
};

// Feature at (lon,lat) on the head, head posed by (yaw,pitch,roll). Orthographic.
Projected project_feature(real lon, real lat, const Angles& pose, real cx, real cy,
                          real radius_px) {
    const real az = deg2rad(lon + pose.yaw);
    const real el = deg2rad(lat + pose.pitch);
    const real px = std::sin(az) * std::cos(deg2rad(lat));
    const real py = std::sin(el);
    const real depth = std::cos(az) * std::cos(el);
    const real rr = deg2rad(pose.roll);
    const real xr = std::cos(rr) * px - std::sin(rr) * py;
    const real yr = std::sin(rr) * px + std::cos(rr) * py;
    Projected p;
    p.x = cx + radius_px * xr;
    p.y = cy - radius_px * yr;
    p.depth = depth;
    p.visible = depth > 0.04;
    p.foreshorten = 0.55 + 0.45 * std::max<real>(depth, 0.0);
    return p;
}

inline real smooth_edge(real signed_dist, real soft) {
    // 1 inside, 0 outside, linear ramp across `soft` pixels
    const real t = 0.5 - signed_dist / soft;
    return t < 0.0 ? 0.0 : (t > 1.0 ? 1.0 : t);
}

struct Canvas {
    int R;
    std::vector<real> px;  // (3,R,R)

    explicit Canvas(int res, const Color& bg) : R(res), px(3 * static_cast<size_t>(res) * res) {
        for (int i = 0; i < R; ++i)
            for (int j = 0; j < R; ++j) {
                const real grad = 1.0 - 0.15 * static_cast<real>(i) / R;
                set(i, j, {bg.r * grad, bg.g * grad, bg.b * grad}, 1.0);
            }
    }

    void set(int i, int j, const Color& c, real alpha) {
        const size_t n = static_cast<size_t>(R) * R;
        const size_t idx = static_cast<size_t>(i) * R + j;
        px[idx] = px[idx] * (1 - alpha) + c.r * alpha;
        px[n + idx] = px[n + idx] * (1 - alpha) + c.g * alpha;
        px[2 * n + idx] = px[2 * n + idx] * (1 - alpha) + c.b * alpha;
    }

    void blend(real x, real y, real rx, real ry, const Color& c, real alpha_scale = 1.0) {
        const int i0 = std::max(0, static_cast<int>(std::floor(y - ry - 2)));
        const int i1 = std::min(R - 1, static_cast<int>(std::ceil(y + ry + 2)));
        const int j0 = std::max(0, static_cast<int>(std::floor(x - rx - 2)));
        const int j1 = std::min(R - 1, static_cast<int>(std::ceil(x + rx + 2)));
        for (int i = i0; i <= i1; ++i)
            for (int j = j0; j <= j1; ++j) {
                const real dx = (j - x) / rx;
                const real dy = (i - y) / ry;
                const real q = std::sqrt(dx * dx + dy * dy) - 1.0;
                const real a = smooth_edge(q * std::min(rx, ry), 1.2) * alpha_scale;
                if (a > 0.0) set(i, j, c, a);
            }
    }
};

}  // namespace

Tensor render_sprite(const SyntheticSpec& spec, int subject, int illum, const Angles& pose) {
    spec.validate();
    if (subject < 0 || subject >= spec.subjects)
        throw std::invalid_argument("render_sprite: subject out of range");
    const SubjectStyle s = subject_style(spec, subject);
    const int R = spec.resolution;
    const real half = R / 2.0;
    const real radius = s.face_radius * half;
    const real cx = half + 0.16 * radius * std::sin(deg2rad(pose.yaw));
    const real cy = half - 0.16 * radius * std::sin(deg2rad(pose.pitch));

    Canvas canvas(R, s.background);

    // head ellipse, rolled, slightly foreshortened by yaw/pitch
    const real a = radius * (0.80 + 0.20 * std::cos(deg2rad(pose.yaw)));
    const real b = radius * (1.02 + 0.10 * std::cos(deg2rad(pose.pitch)));
    const real rr = deg2rad(pose.roll);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j) {
            const real dx = j - cx, dy = i - cy;
            const real u = (std::cos(rr) * dx + std::sin(rr) * dy) / a;
            const real v = (-std::sin(rr) * dx + std::cos(rr) * dy) / b;
            const real q = std::sqrt(u * u + v * v) - 1.0;
            const real alpha = smooth_edge(q * std::min(a, b), 1.2);
            if (alpha <= 0.0) continue;
            // lateral shading keyed to yaw, vertical to pitch
            const real shade = 1.0 + 0.35 * std::sin(deg2rad(pose.yaw)) * u -
                               0.18 * std::sin(deg2rad(pose.pitch)) * v;
            canvas.set(i, j, s.skin.scaled(std::max<real>(shade, 0.15)), alpha);
        }

    struct Feat {
        real lon, lat, size;
        Color color;
        real aspect;  // ry = rx * aspect
    };
    const std::vector<Feat> feats = {
        {-s.patch_lon, -6.0, s.patch_size, s.left_patch, 1.2},
        {+s.patch_lon, -6.0, s.patch_size, s.right_patch, 1.2},
        {0.0, 46.0, 0.13, s.brow, 0.55},
        {-s.eye_lon, s.eye_lat, s.eye_size, s.eye_left, 0.8},
        {+s.eye_lon, s.eye_lat, s.eye_size, s.eye_right, 0.8},
        {0.0, -6.0, 0.085, s.nose, 1.25},
        {0.0, s.mouth_lat, 0.16, s.mouth, 0.45},
    };
    for (const auto& f : feats) {
        const Projected p = project_feature(f.lon, f.lat, pose, cx, cy, radius * 0.92);
        if (!p.visible) continue;
        const real rx = f.size * radius * p.foreshorten;
        const real ry = f.size * radius * f.aspect;
        canvas.blend(p.x, p.y, std::max<real>(rx, 0.6), std::max<real>(ry, 0.6), f.color);
    }

    // illumination variants: global brightness and color temperature
    real fr = 1.0, fg = 1.0, fb = 1.0;
    if (illum > 0) {
        const real bright = 1.0 - 0.18 * illum;
        fr = bright * 1.07;
        fg = bright;
        fb = bright * 0.90;
    }

    Tensor out({3, R, R});
    const size_t n = static_cast<size_t>(R) * R;
    for (size_t i = 0; i < n; ++i) {
        out[i] = std::min<real>(1.0, std::max<real>(0.0, canvas.px[i] * fr));
        out[n + i] = std::min<real>(1.0, std::max<real>(0.0, canvas.px[n + i] * fg));
        out[2 * n + i] = std::min<real>(1.0, std::max<real>(0.0, canvas.px[2 * n + i] * fb));
    }
    return out;
}

std::array<std::array<real, 2>, 4> sprite_landmarks(const SyntheticSpec& spec, int subject,
                                                    const Angles& pose) {
    const SubjectStyle s = subject_style(spec, subject);
    const int R = spec.resolution;
    const real half = R / 2.0;
    const real radius = s.face_radius * half;
    const real cx = half + 0.16 * radius * std::sin(deg2rad(pose.yaw));
    const real cy = half - 0.16 * radius * std::sin(deg2rad(pose.pitch));
    const real fr = radius * 0.92;

    std::array<std::array<real, 2>, 4> out;
    const Projected le = project_feature(-s.eye_lon, s.eye_lat, pose, cx, cy, fr);
    const Projected re = project_feature(+s.eye_lon, s.eye_lat, pose, cx, cy, fr);
    const Projected no = project_feature(0.0, -6.0, pose, cx, cy, fr);
    const Projected mo = project_feature(0.0, s.mouth_lat, pose, cx, cy, fr);
    out[0] = {le.x, le.y};
    out[1] = {re.x, re.y};
    out[2] = {no.x, no.y};
    out[3] = {mo.x, mo.y};
    return out;
}

AngleTrack program_track(const AngleSegment& seg, int frames) {
    AngleTrack t;
    t.rows.resize(static_cast<size_t>(frames));
    for (int i = 0; i < frames; ++i) {
        const real v = seg.start_deg +
                       (seg.end_deg - seg.start_deg) * static_cast<real>(i) / (frames - 1);
        Angles a;
        switch (seg.axis) {
            case Axis::Yaw: a.yaw = v; break;
            case Axis::Pitch: a.pitch = v; break;
            case Axis::Roll: a.roll = v; break;
            case Axis::Free: break;
        }
        t.rows[static_cast<size_t>(i)] = a;
    }
    return t;
}

std::vector<std::string> synthetic_patterns(const SyntheticSpec& spec) {
    std::vector<std::string> out;
    char buf[64];
    for (int s = 0; s < spec.subjects; ++s) {
        const bool single = s >= spec.subjects - spec.single_illum_subjects;
        const int illums = single ? 1 : spec.illumination_variants;
        for (int i = 0; i < illums; ++i) {
            std::snprintf(buf, sizeof(buf), "s%02d_i%d", s, i);
            out.emplace_back(buf);
        }
    }
    return out;
}

void generate_synthetic(const SyntheticSpec& spec, const fs::path& root) {
    spec.validate();
    fs::create_directories(root);
    char buf[64];
    for (int s = 0; s < spec.subjects; ++s) {
        const bool single = s >= spec.subjects - spec.single_illum_subjects;
        const int illums = single ? 1 : spec.illumination_variants;
        for (int il = 0; il < illums; ++il) {
            std::snprintf(buf, sizeof(buf), "s%02d_i%d", s, il);
            const fs::path pdir = root / buf;
            // one sequence per program segment; repeated axes get a suffix
            std::vector<int> axis_seen(4, 0);
            for (const auto& seg : spec.program) {
                std::string seq_name = axis_name(seg.axis);
                const int seen = axis_seen[static_cast<int>(seg.axis)]++;
                if (seen > 0) seq_name += "_" + std::to_string(seen + 1);
                const fs::path sdir = pdir / seq_name;
                fs::create_directories(sdir);
                const AngleTrack track = program_track(seg, spec.frames_per_sequence);
                for (int f = 0; f < spec.frames_per_sequence; ++f) {
                    const Tensor img =
                        render_sprite(spec, s, il, track.rows[static_cast<size_t>(f)]);
                    std::snprintf(buf, sizeof(buf), "frame_%06d.png", f);
                    write_png(sdir / buf, img);
                }
                write_track_csv(sdir / "track.csv", track);
            }
        }
    }
}

}  // namespace multiref
