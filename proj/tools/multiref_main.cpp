#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "multiref/binned_eval.hpp"
#include "multiref/config_io.hpp"
#include "multiref/fusion.hpp"
#include "multiref/image.hpp"
#include "multiref/recon_eval.hpp"
#include "multiref/synthetic.hpp"
#include "multiref/training.hpp"

namespace fs = std::filesystem;
using namespace multiref;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

void write_report_files(const fs::path& path, const std::string& text, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw io_error("cannot create report file " + path.string());
    os << text;
    std::ofstream js(path.string() + ".json");
    js << j.dump(2) << "\n";
}

int run_synth(const std::string& out_dir, const std::string& config_path,
              const std::string& preset, int subjects, int illums, int frames, int resolution,
              std::uint64_t seed, bool have_seed) {
    AppConfig cfg = load_app_config(config_path.empty() ? fs::path() : fs::path(config_path),
                                    preset);
    SyntheticSpec spec = cfg.synth;
    if (subjects > 0) spec.subjects = subjects;
    if (illums > 0) spec.illumination_variants = illums;
    if (frames > 0) spec.frames_per_sequence = frames;
    if (resolution > 0) spec.resolution = resolution;
    if (have_seed) spec.seed = seed;
    generate_synthetic(spec, out_dir);
    std::cout << "generated " << spec.pattern_count() << " patterns under " << out_dir << "\n";
    return 0;
}

int run_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume, const std::string& preset,
              const std::string& mode, int k, std::uint64_t seed, bool have_seed) {
    AppConfig cfg = load_app_config(config_path.empty() ? fs::path() : fs::path(config_path),
                                    preset);
    TrainConfig tc = cfg.train;
    if (!mode.empty()) tc.model.fusion_mode = fusion_mode_from_name(mode);
    if (k > 0) tc.K = k;
    if (have_seed) tc.seed = seed;
    tc.validate();

    Dataset data = load_dataset(data_dir);
    ReenactModel model(tc.model);
    Trainer trainer(model, tc);
    if (!resume.empty()) trainer.resume(resume);
    const fs::path last = trainer.fit(data, out_dir, &std::cout);
    std::cout << "final checkpoint: " << last.string() << "\n";
    return 0;
}

int run_reenact(const std::string& ckpt, const std::string& refs_arg,
                const std::string& driving_dir, const std::string& mode,
                const std::string& out_dir) {
    auto model = load_model(ckpt);
    const FusionMode fmode =
        mode.empty() ? model->config().fusion_mode : fusion_mode_from_name(mode);

    std::vector<Tensor> refs;
    for (const auto& p : split_commas(refs_arg)) refs.push_back(read_png(p));
    if (refs.empty()) throw std::invalid_argument("reenact: no reference images given");

    VideoSequence driving = load_sequence_dir(driving_dir);
    fs::create_directories(out_dir);
    char buf[64];
    for (size_t f = 0; f < driving.size(); ++f) {
        const Tensor out = model->reenact(refs, driving.frame(f), fmode);
        std::snprintf(buf, sizeof(buf), "frame_%06d.png", static_cast<int>(f));
        write_png(fs::path(out_dir) / buf, out);
    }
    if (driving.track) {
        const AngleTrack annotated = annotate_results(*driving.track, driving.size());
        write_track_csv(fs::path(out_dir) / "track.csv", annotated);
    }
    std::cout << "reenacted " << driving.size() << " frames (K=" << refs.size() << ", "
              << fusion_mode_name(fmode) << ") into " << out_dir << "\n";
    return 0;
}

int run_eval_recon(const std::string& ckpt, const std::string& data_dir,
                   const std::string& strategy, const std::string& mode_name,
                   const std::string& report_path, int stride, const std::string& embedder_name) {
    auto model = load_model(ckpt);
    Dataset data = load_dataset(data_dir);
    const ReconMode mode = recon_mode_from_name(mode_name);

    std::unique_ptr<EmbeddingExtractor> embedder;
    if (embedder_name == "pixel") embedder = std::make_unique<PixelEmbedder>();
    else if (embedder_name != "none")
        throw std::invalid_argument("unknown embedder: " + embedder_name);

    ReconReport report = evaluate_reconstruction(*model, data, strategy, mode, nullptr,
                                                 embedder.get(), stride);
    write_report_files(report_path, report.to_text(), report.to_json());
    std::cout << report.to_text();
    return 0;
}

int run_eval_binned(const std::string& true_dir, const std::string& result_dir,
                    const std::string& axis_arg, real lo, real hi, real width,
                    const std::string& extractor_name, const std::string& weights,
                    const std::string& report_path, int stride) {
    VideoSequence true_seq = load_sequence_dir(true_dir);
    VideoSequence result_seq = load_sequence_dir(result_dir);
    if (!true_seq.track) throw std::invalid_argument("true sequence has no track.csv");
    if (!result_seq.track) throw std::invalid_argument("result sequence has no track.csv");

    BinSpec spec;
    spec.axis = axis_from_name(axis_arg);
    spec.lo = lo;
    spec.hi = hi;
    spec.width = width;
    spec.validate();

    auto extractor = make_extractor(extractor_name,
                                    weights.empty() ? std::nullopt
                                                    : std::optional<fs::path>(weights));

    std::vector<Tensor> t_frames, r_frames;
    AngleTrack t_track, r_track;
    for (size_t f = 0; f < true_seq.size(); f += static_cast<size_t>(stride)) {
        t_frames.push_back(true_seq.frame(f));
        t_track.rows.push_back(true_seq.track->rows[f]);
    }
    for (size_t f = 0; f < result_seq.size(); f += static_cast<size_t>(stride)) {
        r_frames.push_back(result_seq.frame(f));
        r_track.rows.push_back(result_seq.track->rows[f]);
    }

    BinReport report = binned_score(t_frames, t_track, r_frames, r_track, spec, *extractor);
    write_report_files(report_path, report.to_text(), report.to_json());
    std::cout << report.to_text();
    return 0;
}

int run_visualize(const std::string& ckpt, const std::string& refs_arg,
                  const std::string& driving_path, const std::string& mode,
                  const std::string& out_png, const std::string& masks_npy) {
    auto model = load_model(ckpt);
    const FusionMode fmode =
        mode.empty() ? model->config().fusion_mode : fusion_mode_from_name(mode);
    std::vector<Tensor> refs;
    for (const auto& p : split_commas(refs_arg)) refs.push_back(read_png(p));
    const Tensor driving = read_png(driving_path);
    MaskVisualization vis = visualize_masks(*model, refs, driving, fmode);
    write_mask_visualization(vis, out_png,
                             masks_npy.empty() ? std::nullopt
                                               : std::optional<fs::path>(masks_npy));
    std::cout << "wrote " << out_png << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-reference face reenactment: training, inference and evaluation"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate the synthetic annotated dataset");
    std::string s_out, s_config, s_preset = "desk";
    int s_subjects = 0, s_illums = 0, s_frames = 0, s_resolution = 0;
    std::uint64_t s_seed = 0;
    synth->add_option("--out", s_out, "output dataset root")->required();
    synth->add_option("--config", s_config, "config file (synth section)");
    synth->add_option("--preset", s_preset, "desk|paper");
    synth->add_option("--subjects", s_subjects);
    synth->add_option("--illums", s_illums);
    synth->add_option("--frames", s_frames);
    synth->add_option("--resolution", s_resolution);
    auto* s_seed_opt = synth->add_option("--seed", s_seed);

    // train
    auto* train = app.add_subcommand("train", "two-stage training");
    std::string t_config, t_data, t_out, t_resume, t_preset = "desk", t_mode;
    int t_k = 0;
    std::uint64_t t_seed = 0;
    train->add_option("--config", t_config, "config file");
    train->add_option("--data", t_data, "dataset root")->required();
    train->add_option("--out", t_out, "output directory")->required();
    train->add_option("--resume", t_resume, "checkpoint to resume from");
    train->add_option("--preset", t_preset, "desk|paper");
    train->add_option("--mode", t_mode, "patch|element fusion mode");
    train->add_option("--k", t_k, "number of reference frames");
    auto* t_seed_opt = train->add_option("--seed", t_seed);

    // reenact
    auto* reenact = app.add_subcommand("reenact", "drive references with a frame sequence");
    std::string r_ckpt, r_refs, r_driving, r_mode, r_out;
    reenact->add_option("--ckpt", r_ckpt)->required();
    reenact->add_option("--refs", r_refs, "comma-separated reference images")->required();
    reenact->add_option("--driving", r_driving, "driving sequence directory")->required();
    reenact->add_option("--mode", r_mode, "patch|element");
    reenact->add_option("--out", r_out)->required();

    // eval-recon
    auto* erec = app.add_subcommand("eval-recon", "reconstruction metrics (L1D/AKD/AED)");
    std::string e_ckpt, e_data, e_refs = "first-mid-last", e_mode = "patch", e_report,
                e_embedder = "none";
    int e_stride = 1;
    erec->add_option("--ckpt", e_ckpt)->required();
    erec->add_option("--data", e_data)->required();
    erec->add_option("--refs", e_refs, "first-mid-last|first");
    erec->add_option("--mode", e_mode, "patch|element|single|pseudo");
    erec->add_option("--report", e_report)->required();
    erec->add_option("--stride", e_stride, "driving frame stride");
    erec->add_option("--embedder", e_embedder, "none|pixel (AED)");

    // eval-binned
    auto* ebin = app.add_subcommand("eval-binned", "bin-based angle-wise perceptual metric");
    std::string b_true, b_result, b_axis = "yaw", b_extractor = "identity", b_weights, b_report;
    real b_lo = -60.0, b_hi = 60.0, b_width = 2.0;
    int b_stride = 1;
    ebin->add_option("--true", b_true, "true sequence dir (frames + track.csv)")->required();
    ebin->add_option("--result", b_result, "result sequence dir (frames + track.csv)")->required();
    ebin->add_option("--axis", b_axis, "yaw|pitch|roll");
    ebin->add_option("--lo", b_lo);
    ebin->add_option("--hi", b_hi);
    ebin->add_option("--width", b_width);
    ebin->add_option("--extractor", b_extractor, "alexnet|identity|tinyconv");
    ebin->add_option("--weights", b_weights, "extractor weight blob");
    ebin->add_option("--report", b_report)->required();
    ebin->add_option("--stride", b_stride);

    // visualize-masks
    auto* vis = app.add_subcommand("visualize-masks", "per-reference fusion mask grid");
    std::string v_ckpt, v_refs, v_driving, v_mode, v_out, v_npy;
    vis->add_option("--ckpt", v_ckpt)->required();
    vis->add_option("--refs", v_refs, "comma-separated reference images")->required();
    vis->add_option("--driving", v_driving, "driving frame image")->required();
    vis->add_option("--mode", v_mode, "patch|element");
    vis->add_option("--out", v_out, "output grid png")->required();
    vis->add_option("--export-masks", v_npy, "also dump masks as .npy");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);  // prints message + usage
        return 2;
    }

    try {
        if (synth->parsed())
            return run_synth(s_out, s_config, s_preset, s_subjects, s_illums, s_frames,
                             s_resolution, s_seed, s_seed_opt->count() > 0);
        if (train->parsed())
            return run_train(t_config, t_data, t_out, t_resume, t_preset, t_mode, t_k, t_seed,
                             t_seed_opt->count() > 0);
        if (reenact->parsed()) return run_reenact(r_ckpt, r_refs, r_driving, r_mode, r_out);
        if (erec->parsed())
            return run_eval_recon(e_ckpt, e_data, e_refs, e_mode, e_report, e_stride, e_embedder);
        if (ebin->parsed())
            return run_eval_binned(b_true, b_result, b_axis, b_lo, b_hi, b_width, b_extractor,
                                   b_weights, b_report, b_stride);
        if (vis->parsed()) return run_visualize(v_ckpt, v_refs, v_driving, v_mode, v_out, v_npy);
    } catch (const config_error& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return 1;
    } catch (const contract_violation& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 1;
    } catch (const io_error& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid argument: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
