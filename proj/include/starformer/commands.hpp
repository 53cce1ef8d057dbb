#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "starformer/run_config.hpp"

namespace starformer {

// CLI command bodies. Each throws on failure (ConfigError/DataError/... for
// validation problems, NumericError for runtime numeric ones); the binary
// maps exception kinds onto exit codes. No command leaves a partial artifact
// behind: outputs are staged and renamed into place.

// Reads a synthetic-dataset spec (JSON), writes the dataset as JSONL, and
// reports sample/class/shape statistics.
void synth_command(const std::string& spec_path, const std::string& out_path, std::ostream& info);

struct TrainOutcome {
    std::string checkpoint_path;
    std::string history_path;
    std::string config_path;
    Metrics final_metrics; // on the held-out test set when one exists
    bool has_test_metrics = false;
};

// Full training run driven by a config file plus dotted overrides: loads and
// splits the dataset, trains, and writes checkpoint + history CSV + the
// resolved config snapshot into the output directory.
TrainOutcome train_command(const std::string& config_path, const std::vector<std::string>& overrides,
                           std::optional<std::uint64_t> seed_override,
                           const std::string& out_override, std::ostream& info);

// Evaluates a checkpoint on a dataset file and emits the metrics as JSON.
Metrics eval_command(const std::string& checkpoint_path, const std::string& dataset_path,
                     std::ostream& out);

enum class ExportKind { kEmbeddings, kMasks, kSigma };
ExportKind export_kind_from_string(const std::string& what);

// Writes one CSV under out_dir: pooled embeddings (id, label, values), the
// regional masks (id, then 0/1 per timestep), or the importance scores
// (id, then one score per timestep). Mask hyperparameters come from the
// optional config file and overrides.
std::string export_command(const std::string& checkpoint_path, const std::string& dataset_path,
                           ExportKind what, const std::string& out_dir,
                           const std::string& config_path,
                           const std::vector<std::string>& overrides, std::ostream& info);

} // namespace starformer
