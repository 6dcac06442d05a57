#pragma once

#include <filesystem>

#include <json.hpp>

#include "multiref/model.hpp"
#include "multiref/synthetic.hpp"
#include "multiref/training.hpp"

namespace multiref {

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

nlohmann::json synthetic_spec_to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

/// Shared config file: {"model": {...}, "train": {...}, "synth": {...}},
/// every section and key optional on top of the named preset.
struct AppConfig {
    TrainConfig train;     // embeds the model section
    SyntheticSpec synth;
};

AppConfig load_app_config(const std::filesystem::path& path, const std::string& preset = "desk");
AppConfig preset_app_config(const std::string& preset);

}  // namespace multiref
