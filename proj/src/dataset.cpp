#include "multiref/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "multiref/image.hpp"

namespace multiref {

namespace fs = std::filesystem;

std::string axis_name(Axis a) {
    switch (a) {
        case Axis::Yaw: return "yaw";
        case Axis::Pitch: return "pitch";
        case Axis::Roll: return "roll";
        case Axis::Free: return "free";
    }
    return "free";
}

Axis axis_from_name(const std::string& s) {
    if (s == "yaw") return Axis::Yaw;
    if (s == "pitch") return Axis::Pitch;
    if (s == "roll") return Axis::Roll;
    if (s == "free") return Axis::Free;
    throw std::invalid_argument("unknown axis: " + s);
}

real Angles::component(Axis a) const {
    switch (a) {
        case Axis::Yaw: return yaw;
        case Axis::Pitch: return pitch;
        case Axis::Roll: return roll;
        case Axis::Free: throw std::invalid_argument("'free' sequences carry no scalar angle");
    }
    return 0.0;
}

bool AngleTrack::all_finite() const {
    for (const auto& r : rows)
        if (!std::isfinite(r.yaw) || !std::isfinite(r.pitch) || !std::isfinite(r.roll))
            return false;
    return true;
}

AngleTrack read_track_csv(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open " + path.string());
    std::string line;
    if (!std::getline(is, line)) throw io_error("empty track file " + path.string());
    // header: frame,yaw,pitch,roll
    AngleTrack track;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 4) throw io_error("bad track row in " + path.string() + ": " + line);
        Angles a;
        a.yaw = std::stod(cells[1]);
        a.pitch = std::stod(cells[2]);
        a.roll = std::stod(cells[3]);
        track.rows.push_back(a);
    }
    if (!track.all_finite()) throw io_error("non-finite angles in " + path.string());
    return track;
}

void write_track_csv(const fs::path& path, const AngleTrack& track) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot create " + path.string());
    os << "frame,yaw,pitch,roll\n";
    char buf[128];
    for (size_t i = 0; i < track.rows.size(); ++i) {
        const auto& r = track.rows[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f\n", i, r.yaw, r.pitch, r.roll);
        os << buf;
    }
    if (!os) throw io_error("failed writing " + path.string());
}

VideoSequence::VideoSequence(std::vector<fs::path> frame_paths)
    : frame_paths_(std::move(frame_paths)), cache_(frame_paths_.size()) {}

const Tensor& VideoSequence::frame(size_t i) const {
    if (i >= frame_paths_.size()) throw std::invalid_argument("frame index out of range");
    if (!cache_[i]) cache_[i] = read_png(frame_paths_[i]);
    return *cache_[i];
}

bool VideoSequence::validate(std::string* error) {
    if (frame_paths_.empty()) {
        if (error) *error = "no frames";
        return false;
    }
    for (const auto& p : frame_paths_) {
        try {
            Tensor t = read_png(p);
            if (t.dim(1) != t.dim(2)) {
                if (error) *error = "non-square frame " + p.string();
                return false;
            }
            if (resolution_ == 0) resolution_ = t.dim(1);
            if (t.dim(1) != resolution_) {
                if (error) *error = "resolution mismatch at " + p.string();
                return false;
            }
        } catch (const std::exception& e) {
            if (error) *error = e.what();
            return false;
        }
    }
    if (track && track->size() != frame_paths_.size()) {
        if (error)
            *error = "track length " + std::to_string(track->size()) + " != frame count " +
                     std::to_string(frame_paths_.size());
        return false;
    }
    return true;
}

std::vector<const VideoSequence*> Dataset::by_pattern(const std::string& pattern) const {
    std::vector<const VideoSequence*> out;
    for (const auto& s : sequences)
        if (s.pattern == pattern) out.push_back(&s);
    return out;
}

std::vector<std::string> Dataset::patterns() const {
    std::vector<std::string> out;
    for (const auto& s : sequences)
        if (std::find(out.begin(), out.end(), s.pattern) == out.end()) out.push_back(s.pattern);
    return out;
}

namespace {

std::vector<fs::path> sorted_frame_files(const fs::path& dir) {
    std::vector<fs::path> frames;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        if (name.rfind("frame_", 0) == 0 && e.path().extension() == ".png")
            frames.push_back(e.path());
    }
    std::sort(frames.begin(), frames.end());
    return frames;
}

void parse_pattern_tags(const std::string& pattern, std::string* subject, std::string* illum) {
    // convention: s<NN>_i<M>; anything else keeps the raw name as subject id
    if (pattern.size() >= 4 && pattern[0] == 's') {
        const auto us = pattern.find("_i");
        if (us != std::string::npos) {
            *subject = pattern.substr(0, us);
            *illum = pattern.substr(us + 2);
            return;
        }
    }
    *subject = pattern;
    *illum = "";
}

Axis axis_tag_from_dir(const std::string& name) {
    for (Axis a : {Axis::Yaw, Axis::Pitch, Axis::Roll})
        if (name.rfind(axis_name(a), 0) == 0) return a;
    return Axis::Free;
}

std::optional<VideoSequence> load_one_sequence(const fs::path& seq_dir, const std::string& pattern) {
    auto frames = sorted_frame_files(seq_dir);
    if (frames.empty()) return std::nullopt;
    VideoSequence seq(std::move(frames));
    seq.pattern = pattern;
    seq.name = seq_dir.filename().string();
    parse_pattern_tags(pattern, &seq.subject_id, &seq.illumination);
    seq.axis_tag = axis_tag_from_dir(seq.name);
    const fs::path track_path = seq_dir / "track.csv";
    if (fs::exists(track_path)) seq.track = read_track_csv(track_path);
    std::string err;
    if (!seq.validate(&err)) {
        std::cerr << "warning: skipping sequence " << seq_dir.string() << ": " << err << "\n";
        return std::nullopt;
    }
    return seq;
}

}  // namespace

Dataset load_dataset(const fs::path& root) {
    if (!fs::exists(root) || !fs::is_directory(root))
        throw io_error("dataset root does not exist: " + root.string());

    std::vector<fs::path> pattern_dirs;
    for (const auto& e : fs::directory_iterator(root))
        if (e.is_directory()) pattern_dirs.push_back(e.path());
    std::sort(pattern_dirs.begin(), pattern_dirs.end());

    Dataset ds;
    for (const auto& pdir : pattern_dirs) {
        std::vector<fs::path> seq_dirs;
        for (const auto& e : fs::directory_iterator(pdir))
            if (e.is_directory()) seq_dirs.push_back(e.path());
        std::sort(seq_dirs.begin(), seq_dirs.end());
        for (const auto& sdir : seq_dirs) {
            auto seq = load_one_sequence(sdir, pdir.filename().string());
            if (seq) ds.sequences.push_back(std::move(*seq));
        }
    }
    if (ds.empty()) throw io_error("dataset root contains no usable sequences: " + root.string());
    return ds;
}

VideoSequence load_sequence_dir(const fs::path& dir) {
    if (!fs::exists(dir) || !fs::is_directory(dir))
        throw io_error("sequence directory does not exist: " + dir.string());
    auto seq = load_one_sequence(dir, dir.parent_path().filename().string());
    if (!seq) throw io_error("no usable frames in " + dir.string());
    return std::move(*seq);
}

}  // namespace multiref
