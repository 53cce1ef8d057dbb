#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "starformer/trainer.hpp"

namespace starformer {

nlohmann::json to_json(const ModelConfig& cfg);
nlohmann::json to_json(const MaskConfig& cfg);
nlohmann::json to_json(const LossConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);

// Each parser starts from `base` and overrides only the keys present, so
// callers control the defaults for omitted fields.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
MaskConfig mask_config_from_json(const nlohmann::json& j, MaskConfig base = {});
LossConfig loss_config_from_json(const nlohmann::json& j, LossConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// Full run description: training hyperparameters plus data paths and the
// output directory. Loaded from one declarative JSON file, with repeatable
// dotted-key overrides ("mask.strategy=none"); unknown keys are rejected so
// typos fail before any work starts.
struct RunConfig {
    TrainConfig train;
    std::string dataset_path;
    std::string test_dataset_path; // optional held-out set evaluated after training
    std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
    std::uint64_t split_seed = 1;
    std::string out_dir = "out";

    // model fields left at 0 are resolved from the dataset at train time
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig load(const std::string& path, const std::vector<std::string>& overrides);
    nlohmann::json to_json() const;
    void validate() const;
};

// Applies "dotted.path=value" onto a JSON tree; the value parses as JSON when
// possible and falls back to a string.
void apply_override(nlohmann::json& tree, const std::string& assignment);

} // namespace starformer
