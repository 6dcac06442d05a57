#include "multiref/config_io.hpp"

#include <fstream>

namespace multiref {

using nlohmann::json;

namespace {

template <class T>
void get_if(const json& j, const char* key, T* out) {
    if (j.contains(key)) *out = j.at(key).get<T>();
}

}  // namespace

json model_config_to_json(const ModelConfig& c) {
    json j;
    j["resolution"] = c.resolution;
    j["image_channels"] = c.image_channels;
    j["num_keypoints"] = c.num_keypoints;
    j["enc_base_channels"] = c.enc_base_channels;
    j["enc_down_blocks"] = c.enc_down_blocks;
    j["enc_max_channels"] = c.enc_max_channels;
    j["dec_res_blocks"] = c.dec_res_blocks;
    j["kp_downscale"] = c.kp_downscale;
    j["kp_base_channels"] = c.kp_base_channels;
    j["kp_blocks"] = c.kp_blocks;
    j["kp_max_channels"] = c.kp_max_channels;
    j["kp_temperature"] = c.kp_temperature;
    j["dm_base_channels"] = c.dm_base_channels;
    j["dm_blocks"] = c.dm_blocks;
    j["dm_max_channels"] = c.dm_max_channels;
    j["dm_kp_variance"] = c.dm_kp_variance;
    j["fusion_kernel"] = c.fusion_kernel;
    j["fusion_mode"] = fusion_mode_name(c.fusion_mode);
    j["disc_base_channels"] = c.disc_base_channels;
    j["disc_blocks"] = c.disc_blocks;
    j["disc_max_channels"] = c.disc_max_channels;
    j["init_seed"] = c.init_seed;
    return j;
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    get_if(j, "resolution", &c.resolution);
    get_if(j, "image_channels", &c.image_channels);
    get_if(j, "num_keypoints", &c.num_keypoints);
    get_if(j, "enc_base_channels", &c.enc_base_channels);
    get_if(j, "enc_down_blocks", &c.enc_down_blocks);
    get_if(j, "enc_max_channels", &c.enc_max_channels);
    get_if(j, "dec_res_blocks", &c.dec_res_blocks);
    get_if(j, "kp_downscale", &c.kp_downscale);
    get_if(j, "kp_base_channels", &c.kp_base_channels);
    get_if(j, "kp_blocks", &c.kp_blocks);
    get_if(j, "kp_max_channels", &c.kp_max_channels);
    get_if(j, "kp_temperature", &c.kp_temperature);
    get_if(j, "dm_base_channels", &c.dm_base_channels);
    get_if(j, "dm_blocks", &c.dm_blocks);
    get_if(j, "dm_max_channels", &c.dm_max_channels);
    get_if(j, "dm_kp_variance", &c.dm_kp_variance);
    get_if(j, "fusion_kernel", &c.fusion_kernel);
    if (j.contains("fusion_mode")) c.fusion_mode = fusion_mode_from_name(j.at("fusion_mode"));
    get_if(j, "disc_base_channels", &c.disc_base_channels);
    get_if(j, "disc_blocks", &c.disc_blocks);
    get_if(j, "disc_max_channels", &c.disc_max_channels);
    get_if(j, "init_seed", &c.init_seed);
    return c;
}

json train_config_to_json(const TrainConfig& c) {
    json j;
    j["K"] = c.K;
    j["stage1_epochs"] = c.stage1_epochs;
    j["stage2_epochs"] = c.stage2_epochs;
    j["batch_size"] = c.batch_size;
    j["lr"] = c.lr;
    j["decay_epochs"] = c.decay_epochs;
    j["decay_factor"] = c.decay_factor;
    j["decay_mode"] = c.decay_mode == TrainConfig::DecayMode::Step ? "step" : "linear";
    j["samples_per_video"] = c.samples_per_video;
    j["seed"] = c.seed;
    j["w_perceptual"] = c.w_perceptual;
    j["w_equiv_value"] = c.w_equiv_value;
    j["w_equiv_jacobian"] = c.w_equiv_jacobian;
    j["w_gan"] = c.w_gan;
    j["w_feature_matching"] = c.w_feature_matching;
    j["perceptual_scales"] = c.perceptual_scales;
    j["sigma_affine"] = c.sigma_affine;
    j["perceptual_extractor"] = c.perceptual_extractor;
    j["checkpoint_every"] = c.checkpoint_every;
    j["adam_beta1"] = c.adam_beta1;
    j["adam_beta2"] = c.adam_beta2;
    j["adam_eps"] = c.adam_eps;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    get_if(j, "K", &c.K);
    get_if(j, "stage1_epochs", &c.stage1_epochs);
    get_if(j, "stage2_epochs", &c.stage2_epochs);
    get_if(j, "batch_size", &c.batch_size);
    get_if(j, "lr", &c.lr);
    get_if(j, "decay_epochs", &c.decay_epochs);
    get_if(j, "decay_factor", &c.decay_factor);
    if (j.contains("decay_mode")) {
        const std::string m = j.at("decay_mode");
        if (m == "step")
            c.decay_mode = TrainConfig::DecayMode::Step;
        else if (m == "linear")
            c.decay_mode = TrainConfig::DecayMode::Linear;
        else
            throw config_error("unknown decay mode: " + m);
    }
    get_if(j, "samples_per_video", &c.samples_per_video);
    get_if(j, "seed", &c.seed);
    get_if(j, "w_perceptual", &c.w_perceptual);
    get_if(j, "w_equiv_value", &c.w_equiv_value);
    get_if(j, "w_equiv_jacobian", &c.w_equiv_jacobian);
    get_if(j, "w_gan", &c.w_gan);
    get_if(j, "w_feature_matching", &c.w_feature_matching);
    get_if(j, "perceptual_scales", &c.perceptual_scales);
    get_if(j, "sigma_affine", &c.sigma_affine);
    get_if(j, "perceptual_extractor", &c.perceptual_extractor);
    get_if(j, "checkpoint_every", &c.checkpoint_every);
    get_if(j, "adam_beta1", &c.adam_beta1);
    get_if(j, "adam_beta2", &c.adam_beta2);
    get_if(j, "adam_eps", &c.adam_eps);
    return c;
}

json synthetic_spec_to_json(const SyntheticSpec& s) {
    json j;
    j["subjects"] = s.subjects;
    j["frames_per_sequence"] = s.frames_per_sequence;
    j["resolution"] = s.resolution;
    j["seed"] = s.seed;
    j["illumination_variants"] = s.illumination_variants;
    j["single_illum_subjects"] = s.single_illum_subjects;
    json prog = json::array();
    for (const auto& seg : s.program)
        prog.push_back({{"axis", axis_name(seg.axis)}, {"start", seg.start_deg}, {"end", seg.end_deg}});
    j["program"] = prog;
    return j;
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
    SyntheticSpec s;
    get_if(j, "subjects", &s.subjects);
    get_if(j, "frames_per_sequence", &s.frames_per_sequence);
    get_if(j, "resolution", &s.resolution);
    get_if(j, "seed", &s.seed);
    get_if(j, "illumination_variants", &s.illumination_variants);
    get_if(j, "single_illum_subjects", &s.single_illum_subjects);
    if (j.contains("program")) {
        s.program.clear();
        for (const auto& e : j.at("program")) {
            AngleSegment seg;
            seg.axis = axis_from_name(e.at("axis"));
            seg.start_deg = e.at("start");
            seg.end_deg = e.at("end");
            s.program.push_back(seg);
        }
    }
    return s;
}

AppConfig preset_app_config(const std::string& preset) {
    AppConfig cfg;
    if (preset == "desk") {
        cfg.train = TrainConfig::desk();
    } else if (preset == "paper") {
        cfg.train = TrainConfig::paper();
        cfg.synth.resolution = cfg.train.model.resolution;
    } else {
        throw config_error("unknown preset: " + preset + " (expected desk|paper)");
    }
    return cfg;
}

AppConfig load_app_config(const std::filesystem::path& path, const std::string& preset) {
    AppConfig cfg = preset_app_config(preset);
    if (path.empty()) return cfg;
    std::ifstream is(path);
    if (!is) throw io_error("cannot open config file " + path.string());
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw config_error("bad config file " + path.string() + ": " + e.what());
    }
    if (j.contains("train")) {
        json merged = train_config_to_json(cfg.train);
        merged.update(j.at("train"));
        cfg.train = train_config_from_json(merged);
    }
    json model_merged = model_config_to_json(cfg.train.model);
    if (j.contains("model")) model_merged.update(j.at("model"));
    cfg.train.model = model_config_from_json(model_merged);
    if (j.contains("synth")) {
        json merged = synthetic_spec_to_json(cfg.synth);
        merged.update(j.at("synth"));
        cfg.synth = synthetic_spec_from_json(merged);
    }
    return cfg;
}

}  // namespace multiref
