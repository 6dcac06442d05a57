#include "multiref/binned_eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace multiref {

int BinSpec::bin_count() const {
    return static_cast<int>(std::lround((hi - lo) / width));
}

void BinSpec::validate() const {
    if (width <= 0.0) throw std::invalid_argument("bin spec: width must be positive");
    if (hi <= lo) throw std::invalid_argument("bin spec: hi must exceed lo");
    const real ratio = (hi - lo) / width;
    if (std::fabs(ratio - std::lround(ratio)) > 1e-9)
        throw std::invalid_argument("bin spec: (hi - lo) must be divisible by width");
    if (axis == Axis::Free) throw std::invalid_argument("bin spec: axis must be yaw/pitch/roll");
}

AngleTrack annotate_results(const AngleTrack& driving_track, size_t result_frames) {
    if (driving_track.size() != result_frames)
        throw std::invalid_argument("annotate_results: track length " +
                                    std::to_string(driving_track.size()) +
                                    " does not match result frames " +
                                    std::to_string(result_frames));
    return driving_track;
}

BinAssignment assign_bins(const AngleTrack& track, const BinSpec& spec) {
    spec.validate();
    BinAssignment out;
    out.bins.assign(static_cast<size_t>(spec.bin_count()), {});
    for (size_t f = 0; f < track.size(); ++f) {
        const real a = track.rows[f].component(spec.axis);
        if (a >= spec.lo && a < spec.hi) {
            int idx = static_cast<int>(std::floor((a - spec.lo) / spec.width));
            if (idx >= spec.bin_count()) idx = spec.bin_count() - 1;  // guard FP edge at hi
            out.bins[static_cast<size_t>(idx)].push_back(static_cast<int>(f));
        } else {
            out.unassigned.push_back(static_cast<int>(f));
        }
    }
    return out;
}

RepresentativeFeature representative_feature(const std::vector<const Tensor*>& images,
                                             const FeatureExtractor& extractor) {
    if (images.empty())
        throw std::invalid_argument("representative_feature: empty image list "
                                    "(apply the ignore rule before calling)");
    RepresentativeFeature rep;
    for (size_t n = 0; n < images.size(); ++n) {
        std::vector<Tensor> feats = extractor.extract(*images[n]);
        if (n == 0) {
            rep.layers = std::move(feats);
        } else {
            if (feats.size() != rep.layers.size())
                throw std::invalid_argument("extractor produced inconsistent layer counts");
            for (size_t l = 0; l < feats.size(); ++l) rep.layers[l].add_(feats[l]);
        }
    }
    const real inv = 1.0 / static_cast<real>(images.size());
    for (auto& l : rep.layers) l.scale_(inv);
    return rep;
}

real lpips_between(const RepresentativeFeature& a, const RepresentativeFeature& b,
                   const std::vector<std::vector<real>>& weights) {
    if (a.layers.size() != b.layers.size())
        throw std::invalid_argument("lpips_between: layer count mismatch");
    if (a.layers.empty()) throw std::invalid_argument("lpips_between: no layers");
    real total = 0.0;
    for (size_t l = 0; l < a.layers.size(); ++l) {
        const Tensor& fa = a.layers[l];
        const Tensor& fb = b.layers[l];
        if (!fa.same_shape(fb)) throw std::invalid_argument("lpips_between: layer shape mismatch");
        if (fa.ndim() != 3) throw std::invalid_argument("lpips_between: layers must be (C,H,W)");
        const int C = fa.dim(0), H = fa.dim(1), W = fa.dim(2);
        const std::vector<real>* w = nullptr;
        if (!weights.empty()) {
            if (weights.size() != a.layers.size())
                throw std::invalid_argument("lpips_between: weight layer count mismatch");
            w = &weights[l];
            if (static_cast<int>(w->size()) != C)
                throw std::invalid_argument("lpips_between: weight channel count mismatch");
        }
        real layer_sum = 0.0;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                real na = 0.0, nb = 0.0;
                for (int c = 0; c < C; ++c) {
                    na += fa.at(c, i, j) * fa.at(c, i, j);
                    nb += fb.at(c, i, j) * fb.at(c, i, j);
                }
                na = std::sqrt(na) + 1e-10;
                nb = std::sqrt(nb) + 1e-10;
                for (int c = 0; c < C; ++c) {
                    const real d = fa.at(c, i, j) / na - fb.at(c, i, j) / nb;
                    const real wc = w ? (*w)[static_cast<size_t>(c)] : 1.0;
                    layer_sum += wc * d * d;
                }
            }
        }
        total += layer_sum / static_cast<real>(H * W);
    }
    return total;
}

nlohmann::json BinReport::to_json() const {
    nlohmann::json j;
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json rj;
        rj["bin"] = r.index;
        rj["lo"] = r.lo;
        rj["hi"] = r.hi;
        rj["n_true"] = r.n_true;
        rj["n_result"] = r.n_result;
        if (r.distance) rj["distance"] = *r.distance;
        rows_j.push_back(rj);
    }
    j["bins"] = rows_j;
    j["ignored_bins"] = ignored_bins;
    j["scored_bins"] = scored_bins;
    if (aggregate)
        j["aggregate"] = *aggregate;
    else
        j["aggregate"] = nullptr;
    j["no_overlap"] = !aggregate.has_value();
    return j;
}

std::string BinReport::to_text() const {
    std::ostringstream os;
    os << "bin        range            n_true  n_result  distance\n";
    char buf[160];
    for (const auto& r : rows) {
        if (r.n_true == 0 && r.n_result == 0) continue;
        if (r.distance)
            std::snprintf(buf, sizeof(buf), "%4d  [%7.2f, %7.2f)  %6d  %8d  %10.6f\n", r.index,
                          r.lo, r.hi, r.n_true, r.n_result, *r.distance);
        else
            std::snprintf(buf, sizeof(buf), "%4d  [%7.2f, %7.2f)  %6d  %8d  %10s\n", r.index, r.lo,
                          r.hi, r.n_true, r.n_result, "ignored");
        os << buf;
    }
    os << "scored bins: " << scored_bins << "\n";
    if (aggregate)
        os << "aggregate: " << *aggregate << "\n";
    else
        os << "aggregate: no overlapping bins\n";
    return os.str();
}

BinReport binned_score(const std::vector<Tensor>& true_seq, const AngleTrack& true_track,
                       const std::vector<Tensor>& result_seq, const AngleTrack& result_track,
                       const BinSpec& spec, const FeatureExtractor& extractor) {
    if (true_seq.size() != true_track.size())
        throw std::invalid_argument("binned_score: true track length mismatch");
    if (result_seq.size() != result_track.size())
        throw std::invalid_argument("binned_score: result track length mismatch");
    const BinAssignment at = assign_bins(true_track, spec);
    const BinAssignment ar = assign_bins(result_track, spec);

    BinReport report;
    real sum = 0.0;
    for (int b = 0; b < spec.bin_count(); ++b) {
        BinRow row;
        row.index = b;
        row.lo = spec.bin_lo(b);
        row.hi = spec.bin_hi(b);
        const auto& ti = at.bins[static_cast<size_t>(b)];
        const auto& ri = ar.bins[static_cast<size_t>(b)];
        row.n_true = static_cast<int>(ti.size());
        row.n_result = static_cast<int>(ri.size());
        if (ti.empty() || ri.empty()) {
            report.ignored_bins.push_back(b);
        } else {
            std::vector<const Tensor*> t_imgs, r_imgs;
            for (int f : ti) t_imgs.push_back(&true_seq[static_cast<size_t>(f)]);
            for (int f : ri) r_imgs.push_back(&result_seq[static_cast<size_t>(f)]);
            const RepresentativeFeature rt = representative_feature(t_imgs, extractor);
            const RepresentativeFeature rr = representative_feature(r_imgs, extractor);
            row.distance = lpips_between(rt, rr, extractor.lpips_weights());
            sum += *row.distance;
            ++report.scored_bins;
        }
        report.rows.push_back(row);
    }
    if (report.scored_bins > 0) report.aggregate = sum / static_cast<real>(report.scored_bins);
    return report;
}

// --- pairwise evaluation ---------------------------------------------------------

std::vector<ReferencePick> pick_reference_frames(const VideoSequence& yaw_seq,
                                                 const std::vector<real>& targets) {
    if (!yaw_seq.track) throw std::invalid_argument("reference sequence has no angle track");
    std::vector<ReferencePick> picks;
    for (real target : targets) {
        ReferencePick best;
        best.target_deg = target;
        real best_d = 0.0;
        bool first = true;
        for (size_t f = 0; f < yaw_seq.track->size(); ++f) {
            const real a = yaw_seq.track->rows[f].yaw;
            const real d = std::fabs(a - target);
            if (first || d < best_d) {
                best.frame_index = static_cast<int>(f);
                best.actual_deg = a;
                best_d = d;
                first = false;
            }
        }
        picks.push_back(best);
    }
    return picks;
}

std::optional<real> PairwiseReport::axis_mean(Axis axis) const {
    real s = 0.0;
    int n = 0;
    for (const auto& p : pairs)
        for (const auto& [a, rep] : p.axis_reports)
            if (a == axis && rep.aggregate) {
                s += *rep.aggregate;
                ++n;
            }
    if (n == 0) return std::nullopt;
    return s / static_cast<real>(n);
}

std::optional<real> PairwiseReport::pooled_mean(Axis axis) const {
    real s = 0.0;
    int n = 0;
    for (const auto& p : pairs)
        for (const auto& [a, rep] : p.axis_reports)
            if (a == axis)
                for (const auto& row : rep.rows)
                    if (row.distance) {
                        s += *row.distance;
                        ++n;
                    }
    if (n == 0) return std::nullopt;
    return s / static_cast<real>(n);
}

nlohmann::json PairwiseReport::to_json() const {
    nlohmann::json j;
    j["admissible_pairs"] = admissible_pairs;
    j["evaluated_pairs"] = static_cast<int>(pairs.size());
    nlohmann::json pj = nlohmann::json::array();
    for (const auto& p : pairs) {
        nlohmann::json e;
        e["driving"] = p.driving_pattern;
        e["reference"] = p.reference_pattern;
        for (const auto& [a, rep] : p.axis_reports) {
            e[axis_name(a)] = rep.aggregate ? nlohmann::json(*rep.aggregate) : nlohmann::json();
        }
        nlohmann::json devs = nlohmann::json::array();
        for (const auto& pick : p.reference_picks) devs.push_back(pick.deviation());
        e["reference_angle_deviation"] = devs;
        pj.push_back(e);
    }
    j["pairs"] = pj;
    for (Axis a : {Axis::Yaw, Axis::Pitch, Axis::Roll}) {
        if (auto m = axis_mean(a)) j[axis_name(a)] = *m;
        if (auto m = pooled_mean(a)) j[axis_name(a) + "_pooled"] = *m;
    }
    return j;
}

std::string PairwiseReport::to_text() const {
    std::ostringstream os;
    os << "pairwise motion-transfer report  pairs=" << pairs.size() << "/" << admissible_pairs
       << "\n";
    os << "driving        reference        yaw        pitch      roll\n";
    char buf[200];
    auto fmt = [](const std::vector<std::pair<Axis, BinReport>>& reps, Axis a) {
        for (const auto& [ax, rep] : reps)
            if (ax == a && rep.aggregate) {
                char b[32];
                std::snprintf(b, sizeof(b), "%10.6f", *rep.aggregate);
                return std::string(b);
            }
        return std::string("         -");
    };
    for (const auto& p : pairs) {
        std::snprintf(buf, sizeof(buf), "%-14s %-14s %s %s %s\n", p.driving_pattern.c_str(),
                      p.reference_pattern.c_str(), fmt(p.axis_reports, Axis::Yaw).c_str(),
                      fmt(p.axis_reports, Axis::Pitch).c_str(),
                      fmt(p.axis_reports, Axis::Roll).c_str());
        os << buf;
    }
    for (Axis a : {Axis::Yaw, Axis::Pitch, Axis::Roll}) {
        if (auto m = axis_mean(a)) os << "mean " << axis_name(a) << ": " << *m << "\n";
    }
    return os.str();
}

PairwiseReport pairwise_evaluation(const Dataset& data, const ReenactModel& model,
                                   const FeatureExtractor& extractor,
                                   const PairwiseOptions& opts) {
    const auto patterns = data.patterns();
    if (patterns.size() < 2)
        throw std::invalid_argument("pairwise evaluation needs at least two patterns");

    struct PatternInfo {
        std::string name, subject, illum;
        const VideoSequence* yaw_seq = nullptr;
        std::vector<const VideoSequence*> sequences;
    };
    std::vector<PatternInfo> infos;
    for (const auto& pname : patterns) {
        PatternInfo info;
        info.name = pname;
        info.sequences = data.by_pattern(pname);
        info.subject = info.sequences.front()->subject_id;
        info.illum = info.sequences.front()->illumination;
        for (const auto* s : info.sequences)
            if (s->axis_tag == Axis::Yaw && s->track && !info.yaw_seq) info.yaw_seq = s;
        infos.push_back(std::move(info));
    }

    PairwiseReport report;
    for (const auto& drv : infos) {
        for (const auto& ref : infos) {
            if (drv.subject == ref.subject && drv.illum == ref.illum) continue;  // excluded pair
            ++report.admissible_pairs;
            if (opts.max_pairs > 0 && static_cast<int>(report.pairs.size()) >= opts.max_pairs)
                continue;
            if (!ref.yaw_seq)
                throw std::invalid_argument("pattern " + ref.name + " has no yaw sequence for references");

            const auto picks = pick_reference_frames(*ref.yaw_seq, opts.reference_yaw_targets);
            std::vector<Tensor> refs;
            for (const auto& p : picks)
                refs.push_back(ref.yaw_seq->frame(static_cast<size_t>(p.frame_index)));
            if (opts.single_reference) refs.resize(1);  // frontal only

            PairResult pr;
            pr.driving_pattern = drv.name;
            pr.reference_pattern = ref.name;
            pr.reference_picks = picks;

            for (Axis axis : opts.axes) {
                const VideoSequence* drv_seq = nullptr;
                const VideoSequence* true_seq = nullptr;
                for (const auto* s : drv.sequences)
                    if (s->axis_tag == axis && s->track) drv_seq = s;
                for (const auto* s : ref.sequences)
                    if (s->axis_tag == axis && s->track) true_seq = s;
                if (!drv_seq || !true_seq) continue;

                std::vector<Tensor> result;
                AngleTrack strided_track;
                for (size_t f = 0; f < drv_seq->size(); f += static_cast<size_t>(opts.frame_stride)) {
                    result.push_back(model.reenact(refs, drv_seq->frame(f), opts.mode));
                    strided_track.rows.push_back(drv_seq->track->rows[f]);
                }
                const AngleTrack result_track = annotate_results(strided_track, result.size());

                std::vector<Tensor> true_frames;
                for (size_t f = 0; f < true_seq->size(); ++f) true_frames.push_back(true_seq->frame(f));

                BinSpec spec;
                spec.axis = axis;
                spec.lo = opts.lo;
                spec.hi = opts.hi;
                spec.width = opts.width;
                pr.axis_reports.emplace_back(
                    axis, binned_score(true_frames, *true_seq->track, result, result_track, spec,
                                       extractor));
            }
            report.pairs.push_back(std::move(pr));
        }
    }
    return report;
}

}  // namespace multiref
