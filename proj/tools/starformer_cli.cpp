#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "starformer/commands.hpp"

namespace {

// exit codes: 0 success, 1 validation failure, 2 runtime/numeric failure
constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"starformer: sequence classification with attention-guided regional masking"};
    app.require_subcommand(1);

    std::string config_path, out_path, spec_path, checkpoint_path, dataset_path, what;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "declarative run config (JSON)");
        cmd->add_option("--set", overrides, "dotted override, e.g. mask.strategy=none")
            ->take_all();
        cmd->add_option("--seed", seed, "seed override");
        cmd->add_option("--out", out_path, "output path or directory");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic motif dataset");
    synth->add_option("--spec", spec_path, "synthetic spec file (JSON)")->required();
    add_common(synth);

    CLI::App* train = app.add_subcommand("train", "train a model from a run config");
    add_common(train);

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    eval->add_option("--data", dataset_path, "dataset file (JSONL)")->required();
    add_common(eval);

    CLI::App* exp = app.add_subcommand("export", "export embeddings, masks, or sigma as CSV");
    exp->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
    exp->add_option("--data", dataset_path, "dataset file (JSONL)")->required();
    exp->add_option("--what", what, "embeddings|masks|sigma")->required();
    add_common(exp);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kValidation;
    }

    try {
        if (synth->parsed()) {
            if (out_path.empty()) throw starformer::ConfigError("synth: --out is required");
            starformer::synth_command(spec_path, out_path, std::cout);
        } else if (train->parsed()) {
            if (config_path.empty()) throw starformer::ConfigError("train: --config is required");
            starformer::train_command(config_path, overrides, seed, out_path, std::cout);
        } else if (eval->parsed()) {
            starformer::eval_command(checkpoint_path, dataset_path, std::cout);
        } else if (exp->parsed()) {
            if (out_path.empty()) throw starformer::ConfigError("export: --out is required");
            starformer::export_command(checkpoint_path, dataset_path,
                                       starformer::export_kind_from_string(what), out_path,
                                       config_path, overrides, std::cout);
        }
    } catch (const starformer::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const starformer::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const starformer::FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const starformer::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const starformer::ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kRuntime;
    }
    return kOk;
}
