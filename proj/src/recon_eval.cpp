#include "multiref/recon_eval.hpp"

#include <cmath>
#include <sstream>

namespace multiref {

ReferenceSelection select_references(const VideoSequence& seq, const std::string& strategy) {
    const int T = static_cast<int>(seq.size());
    if (T < 1) throw std::invalid_argument("select_references: empty sequence");
    ReferenceSelection sel;
    sel.strategy = strategy;
    if (strategy == "first") {
        sel.indices = {0};
    } else if (strategy == "first-mid-last") {
        // enumeration order of the protocol: first, last, middle
        sel.indices = {0, T - 1, (T - 1) / 2};
    } else {
        throw std::invalid_argument("unknown reference strategy: " + strategy);
    }
    for (int idx : sel.indices) sel.frames.push_back(seq.frame(static_cast<size_t>(idx)));
    return sel;
}

real frame_l1(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("frame_l1: shape mismatch");
    real s = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) s += std::fabs(a[i] - b[i]);
    return s / static_cast<real>(a.numel());
}

real l1_distance(const std::vector<Tensor>& real_seq, const std::vector<Tensor>& gen_seq) {
    if (real_seq.size() != gen_seq.size())
        throw std::invalid_argument("l1_distance: sequence length mismatch");
    if (real_seq.empty()) throw std::invalid_argument("l1_distance: empty sequences");
    real s = 0.0;
    for (size_t i = 0; i < real_seq.size(); ++i) s += frame_l1(real_seq[i], gen_seq[i]);
    return s / static_cast<real>(real_seq.size());
}

std::optional<LandmarkSet> TableLandmarker::landmarks(const Tensor&) const {
    if (cursor_ >= table_.size()) throw std::invalid_argument("TableLandmarker exhausted");
    return table_[cursor_++];
}

std::optional<std::vector<real>> TableEmbedder::embed(const Tensor&) const {
    if (cursor_ >= table_.size()) throw std::invalid_argument("TableEmbedder exhausted");
    return table_[cursor_++];
}

std::optional<std::vector<real>> PixelEmbedder::embed(const Tensor& image) const {
    if (image.ndim() != 3) return std::nullopt;
    const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
    if (H < grid_ || W < grid_) return std::nullopt;
    std::vector<real> emb(static_cast<size_t>(C) * grid_ * grid_, 0.0);
    for (int c = 0; c < C; ++c)
        for (int gi = 0; gi < grid_; ++gi)
            for (int gj = 0; gj < grid_; ++gj) {
                const int i0 = gi * H / grid_, i1 = (gi + 1) * H / grid_;
                const int j0 = gj * W / grid_, j1 = (gj + 1) * W / grid_;
                real s = 0.0;
                for (int i = i0; i < i1; ++i)
                    for (int j = j0; j < j1; ++j) s += image.at(c, i, j);
                emb[(static_cast<size_t>(c) * grid_ + gi) * grid_ + gj] =
                    s / static_cast<real>((i1 - i0) * (j1 - j0));
            }
    return emb;
}

std::optional<MetricValue> average_keypoint_distance(const std::vector<Tensor>& real_seq,
                                                     const std::vector<Tensor>& gen_seq,
                                                     const LandmarkExtractor& landmarker) {
    if (real_seq.size() != gen_seq.size())
        throw std::invalid_argument("AKD: sequence length mismatch");
    MetricValue mv;
    real accum = 0.0;
    for (size_t f = 0; f < real_seq.size(); ++f) {
        const auto lr = landmarker.landmarks(real_seq[f]);
        const auto lg = landmarker.landmarks(gen_seq[f]);
        if (!lr || !lg || lr->size() != lg->size() || lr->empty()) {
            ++mv.frames_skipped;
            continue;
        }
        real d = 0.0;
        for (size_t p = 0; p < lr->size(); ++p) {
            const real dx = (*lr)[p][0] - (*lg)[p][0];
            const real dy = (*lr)[p][1] - (*lg)[p][1];
            d += std::sqrt(dx * dx + dy * dy);
        }
        accum += d / static_cast<real>(lr->size());
        ++mv.frames_used;
    }
    if (mv.frames_used == 0) return std::nullopt;
    mv.value = accum / static_cast<real>(mv.frames_used);
    return mv;
}

std::optional<MetricValue> average_euclidean_distance(const std::vector<Tensor>& real_seq,
                                                      const std::vector<Tensor>& gen_seq,
                                                      const EmbeddingExtractor& embedder) {
    if (real_seq.size() != gen_seq.size())
        throw std::invalid_argument("AED: sequence length mismatch");
    MetricValue mv;
    real accum = 0.0;
    for (size_t f = 0; f < real_seq.size(); ++f) {
        const auto er = embedder.embed(real_seq[f]);
        const auto eg = embedder.embed(gen_seq[f]);
        if (!er || !eg || er->size() != eg->size() || er->empty()) {
            ++mv.frames_skipped;
            continue;
        }
        real d = 0.0;
        for (size_t i = 0; i < er->size(); ++i) {
            const real diff = (*er)[i] - (*eg)[i];
            d += diff * diff;
        }
        accum += std::sqrt(d);
        ++mv.frames_used;
    }
    if (mv.frames_used == 0) return std::nullopt;
    mv.value = accum / static_cast<real>(mv.frames_used);
    return mv;
}

std::vector<Tensor> pseudo_multi_ref(const ReenactModel& model, const std::vector<Tensor>& refs,
                                     const std::vector<Tensor>& driving_seq, FusionMode mode) {
    if (refs.empty()) throw std::invalid_argument("pseudo_multi_ref: empty reference list");
    std::vector<Tensor> out;
    out.reserve(driving_seq.size());
    for (const Tensor& drv : driving_seq) {
        Tensor best;
        real best_l1 = 0.0;
        for (size_t k = 0; k < refs.size(); ++k) {
            Tensor cand = model.reenact({refs[k]}, drv, mode);
            const real d = frame_l1(cand, drv);
            if (k == 0 || d < best_l1) {
                best = std::move(cand);
                best_l1 = d;
            }
        }
        out.push_back(std::move(best));
    }
    return out;
}

ReconMode recon_mode_from_name(const std::string& s) {
    if (s == "single") return ReconMode::Single;
    if (s == "pseudo") return ReconMode::Pseudo;
    if (s == "patch") return ReconMode::Patch;
    if (s == "element") return ReconMode::Element;
    throw std::invalid_argument("unknown recon mode: " + s);
}

std::string recon_mode_name(ReconMode m) {
    switch (m) {
        case ReconMode::Single: return "single";
        case ReconMode::Pseudo: return "pseudo";
        case ReconMode::Patch: return "patch";
        case ReconMode::Element: return "element";
    }
    return "?";
}

real ReconReport::mean_l1d() const {
    real s = 0.0;
    for (const auto& r : rows) s += r.l1d;
    return rows.empty() ? 0.0 : s / static_cast<real>(rows.size());
}

namespace {

std::optional<real> mean_metric(const std::vector<SequenceScore>& rows, bool akd) {
    real s = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        const auto& m = akd ? r.akd : r.aed;
        if (m) {
            s += m->value;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return s / static_cast<real>(n);
}

}  // namespace

std::optional<real> ReconReport::mean_akd() const { return mean_metric(rows, true); }
std::optional<real> ReconReport::mean_aed() const { return mean_metric(rows, false); }

nlohmann::json ReconReport::to_json() const {
    nlohmann::json j;
    j["strategy"] = strategy;
    j["mode"] = mode;
    j["samples"] = sample_count();
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json rj;
        rj["sequence"] = r.sequence;
        rj["frames"] = r.frames;
        rj["L1D"] = r.l1d;
        if (r.akd) {
            rj["AKD"] = r.akd->value;
            rj["AKD_skipped"] = r.akd->frames_skipped;
        }
        if (r.aed) {
            rj["AED"] = r.aed->value;
            rj["AED_skipped"] = r.aed->frames_skipped;
        }
        rows_j.push_back(rj);
    }
    j["sequences"] = rows_j;
    j["L1D"] = mean_l1d();
    if (auto v = mean_akd()) j["AKD"] = *v;
    if (auto v = mean_aed()) j["AED"] = *v;
    return j;
}

std::string ReconReport::to_text() const {
    std::ostringstream os;
    os << "reconstruction report  strategy=" << strategy << "  mode=" << mode
       << "  samples=" << sample_count() << "\n";
    os << "sequence                          frames      L1D        AKD        AED\n";
    char buf[256];
    auto fmt_opt = [](const std::optional<MetricValue>& m) {
        if (!m) return std::string("    absent");
        char b[32];
        std::snprintf(b, sizeof(b), "%10.6f", m->value);
        return std::string(b);
    };
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-32s %6d %10.6f %s %s\n", r.sequence.c_str(), r.frames,
                      r.l1d, fmt_opt(r.akd).c_str(), fmt_opt(r.aed).c_str());
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%-32s %6s %10.6f", "mean", "", mean_l1d());
    os << buf;
    if (auto v = mean_akd()) {
        std::snprintf(buf, sizeof(buf), " %10.6f", *v);
        os << buf;
    } else {
        os << "     absent";
    }
    if (auto v = mean_aed()) {
        std::snprintf(buf, sizeof(buf), " %10.6f", *v);
        os << buf;
    } else {
        os << "     absent";
    }
    os << "\n";
    return os.str();
}

ReconReport evaluate_reconstruction(const ReenactModel& model, const Dataset& data,
                                    const std::string& strategy, ReconMode mode,
                                    const LandmarkExtractor* landmarker,
                                    const EmbeddingExtractor* embedder, int frame_stride) {
    if (frame_stride < 1) throw std::invalid_argument("frame_stride must be >= 1");
    ReconReport report;
    report.strategy = strategy;
    report.mode = recon_mode_name(mode);
    for (const auto& seq : data.sequences) {
        ReferenceSelection sel = select_references(seq, strategy);
        std::vector<Tensor> driving;
        for (size_t f = 0; f < seq.size(); f += static_cast<size_t>(frame_stride))
            driving.push_back(seq.frame(f));

        std::vector<Tensor> generated;
        generated.reserve(driving.size());
        switch (mode) {
            case ReconMode::Single:
                for (const auto& d : driving)
                    generated.push_back(model.reenact({sel.frames[0]}, d));
                break;
            case ReconMode::Pseudo:
                generated = pseudo_multi_ref(model, sel.frames, driving,
                                             model.config().fusion_mode);
                break;
            case ReconMode::Patch:
                for (const auto& d : driving)
                    generated.push_back(model.reenact(sel.frames, d, FusionMode::Patch));
                break;
            case ReconMode::Element:
                for (const auto& d : driving)
                    generated.push_back(model.reenact(sel.frames, d, FusionMode::Element));
                break;
        }

        SequenceScore row;
        row.sequence = seq.pattern + "/" + seq.name;
        row.frames = static_cast<int>(driving.size());
        row.l1d = l1_distance(driving, generated);
        if (landmarker) row.akd = average_keypoint_distance(driving, generated, *landmarker);
        if (embedder) row.aed = average_euclidean_distance(driving, generated, *embedder);
        report.rows.push_back(std::move(row));
    }
    return report;
}

}  // namespace multiref
