#include "starformer/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace starformer {

using nlohmann::json;

namespace {

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string staging = path + ".tmp";
    {
        std::ofstream f(staging, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + staging);
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f.good()) throw DataError("write failed for " + staging);
    }
    if (std::rename(staging.c_str(), path.c_str()) != 0) {
        throw DataError("cannot move " + staging + " into place");
    }
}

std::string fmt(double v) {
    std::ostringstream s;
    s << std::setprecision(17) << v;
    return s.str();
}

json metrics_to_json(const Metrics& m) {
    json j;
    j["accuracy"] = m.accuracy;
    j["precision"] = m.precision;
    j["recall"] = m.recall;
    j["f1"] = m.f1;
    j["f0.5"] = m.f_half;
    json confusion = json::array();
    for (std::int64_t t = 0; t < m.num_classes; ++t) {
        json row = json::array();
        for (std::int64_t p = 0; p < m.num_classes; ++p) row.push_back(m.count(t, p));
        confusion.push_back(row);
    }
    j["confusion"] = confusion;
    return j;
}

Dataset load_for_model(const std::string& path, const TrainerState& state) {
    Dataset ds = load_dataset(path);
    if (ds.feature_dim != state.model.input_dim) {
        throw ConfigError("dataset " + path + " has " + std::to_string(ds.feature_dim) +
                          " channels, model expects " + std::to_string(state.model.input_dim));
    }
    if (ds.num_classes > state.model.num_classes) {
        throw ConfigError("dataset " + path + " has " + std::to_string(ds.num_classes) +
                          " classes, model expects " + std::to_string(state.model.num_classes));
    }
    if (ds.max_length() > state.model.max_len) {
        throw ConfigError("dataset " + path + " has sequences up to " +
                          std::to_string(ds.max_length()) + " steps, model expects at most " +
                          std::to_string(state.model.max_len));
    }
    if (!state.norm_mean.empty()) {
        ds = normalize_with(ds, state.norm_mean, state.norm_std);
    }
    return ds;
}

} // namespace

void synth_command(const std::string& spec_path, const std::string& out_path, std::ostream& info) {
    std::ifstream in(spec_path);
    if (!in) throw ConfigError("cannot open spec file: " + spec_path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("spec " + spec_path + ": " + e.what());
    }
    SyntheticSpec spec;
    json rest = j;
    auto take = [&rest](const char* key, auto& into) {
        if (rest.contains(key)) {
            into = rest[key].get<std::decay_t<decltype(into)>>();
            rest.erase(key);
        }
    };
    take("num_classes", spec.num_classes);
    take("n_per_class", spec.n_per_class);
    take("length", spec.length);
    take("dim", spec.dim);
    take("noise_std", spec.noise_std);
    take("irregular", spec.irregular);
    take("drift", spec.drift);
    take("seed", spec.seed);
    if (!rest.empty()) {
        throw ConfigError("spec " + spec_path + ": unknown key '" + rest.begin().key() + "'");
    }
    spec.validate();

    Dataset ds = generate_synthetic_motif(spec);
    save_dataset(ds, out_path);

    std::vector<std::int64_t> lengths;
    for (const auto& s : ds.samples) lengths.push_back(s.length());
    std::sort(lengths.begin(), lengths.end());
    info << "wrote " << out_path << ": M=" << ds.size() << " C=" << ds.num_classes
         << " D=" << ds.feature_dim << (spec.irregular ? " (+time channel on load)" : "")
         << " length min/median/max=" << lengths.front() << "/" << lengths[lengths.size() / 2]
         << "/" << lengths.back() << "\n";
}

TrainOutcome train_command(const std::string& config_path, const std::vector<std::string>& overrides,
                           std::optional<std::uint64_t> seed_override,
                           const std::string& out_override, std::ostream& info) {
    RunConfig run = RunConfig::load(config_path, overrides);
    if (seed_override) run.train.seed = *seed_override;
    if (!out_override.empty()) run.out_dir = out_override;
    run.validate();

    Dataset ds = load_dataset(run.dataset_path);
    ModelConfig& model = run.train.model;
    if (model.num_classes == 0) model.num_classes = std::max<std::int64_t>(ds.num_classes, 2);
    if (model.input_dim == 0) model.input_dim = ds.feature_dim;
    if (model.max_len == 0) model.max_len = ds.max_length();
    if (model.num_classes < ds.num_classes) {
        throw ConfigError("model.num_classes " + std::to_string(model.num_classes) +
                          " below dataset classes " + std::to_string(ds.num_classes));
    }
    if (model.input_dim != ds.feature_dim) {
        throw ConfigError("model.input_dim " + std::to_string(model.input_dim) +
                          " vs dataset channels " + std::to_string(ds.feature_dim));
    }
    if (model.max_len < ds.max_length()) {
        throw ConfigError("model.max_len " + std::to_string(model.max_len) +
                          " below dataset max length " + std::to_string(ds.max_length()));
    }
    model = model.resolved();
    run.train.validate();

    auto split = split_and_normalize(ds, run.split_ratios, run.split_seed);
    info << "dataset " << run.dataset_path << ": " << ds.size() << " samples, "
         << split.train.size() << "/" << split.val.size() << "/" << split.test.size()
         << " train/val/test\n";

    TrainResult result = train_loop(split.train, split.val, run.train);
    for (const auto& rec : result.history) {
        info << "epoch " << rec.epoch << ": train_loss=" << rec.train_loss;
        if (rec.has_val) info << " val_acc=" << rec.val.accuracy;
        info << "\n";
    }

    std::filesystem::create_directories(run.out_dir);
    TrainOutcome outcome;

    // checkpoint carries the retained parameters and the train-split
    // normalization statistics
    TrainerState to_save;
    to_save.model = result.state.model;
    to_save.params = result.best_params;
    to_save.norm_mean = split.channel_mean;
    to_save.norm_std = split.channel_std;
    outcome.checkpoint_path = (std::filesystem::path(run.out_dir) / "model.strf").string();
    save_checkpoint(to_save, outcome.checkpoint_path);

    std::string csv = "epoch,train_loss,val_accuracy,val_f1,val_f0.5\n";
    for (const auto& rec : result.history) {
        csv += std::to_string(rec.epoch) + "," + fmt(rec.train_loss);
        if (rec.has_val) {
            csv += "," + fmt(rec.val.accuracy) + "," + fmt(rec.val.f1) + "," + fmt(rec.val.f_half);
        } else {
            csv += ",,,";
        }
        csv += "\n";
    }
    outcome.history_path = (std::filesystem::path(run.out_dir) / "history.csv").string();
    write_file_atomic(outcome.history_path, csv);

    outcome.config_path = (std::filesystem::path(run.out_dir) / "config.json").string();
    write_file_atomic(outcome.config_path, run.to_json().dump(2) + "\n");

    if (!run.test_dataset_path.empty()) {
        Dataset test = load_for_model(run.test_dataset_path, to_save);
        outcome.final_metrics = evaluate(test, to_save);
        outcome.has_test_metrics = true;
        info << "test: " << metrics_to_json(outcome.final_metrics).dump() << "\n";
    } else if (split.test.size() > 0) {
        outcome.final_metrics = evaluate(split.test, to_save);
        outcome.has_test_metrics = true;
        info << "test: " << metrics_to_json(outcome.final_metrics).dump() << "\n";
    }
    return outcome;
}

Metrics eval_command(const std::string& checkpoint_path, const std::string& dataset_path,
                     std::ostream& out) {
    TrainerState state = load_checkpoint(checkpoint_path);
    Dataset ds = load_for_model(dataset_path, state);
    Metrics m = evaluate(ds, state);
    out << metrics_to_json(m).dump(2) << "\n";
    return m;
}

ExportKind export_kind_from_string(const std::string& what) {
    if (what == "embeddings") return ExportKind::kEmbeddings;
    if (what == "masks") return ExportKind::kMasks;
    if (what == "sigma") return ExportKind::kSigma;
    throw ConfigError("export: unknown kind '" + what + "' (embeddings|masks|sigma)");
}

std::string export_command(const std::string& checkpoint_path, const std::string& dataset_path,
                           ExportKind what, const std::string& out_dir,
                           const std::string& config_path,
                           const std::vector<std::string>& overrides, std::ostream& info) {
    TrainerState state = load_checkpoint(checkpoint_path);
    Dataset ds = load_for_model(dataset_path, state);

    MaskConfig mask_cfg;
    std::uint64_t mask_seed = 1;
    if (!config_path.empty()) {
        RunConfig run = RunConfig::load(config_path, overrides);
        mask_cfg = run.train.mask;
        mask_seed = run.train.seed;
    } else if (!overrides.empty()) {
        json tree = json::object();
        for (const auto& o : overrides) apply_override(tree, o);
        if (tree.contains("mask")) mask_cfg = mask_config_from_json(tree["mask"]);
        if (tree.contains("seed")) mask_seed = tree["seed"].get<std::uint64_t>();
    }
    mask_cfg.validate();

    std::filesystem::create_directories(out_dir);
    const char* filename = what == ExportKind::kEmbeddings ? "embeddings.csv"
                           : what == ExportKind::kMasks    ? "masks.csv"
                                                           : "sigma.csv";
    const std::string out_path = (std::filesystem::path(out_dir) / filename).string();

    std::string csv;
    BatchIterator batches(ds, 64);
    std::int64_t step = 0;
    while (auto batch = batches.next()) {
        EncoderOutput out = encoder_forward(*batch, state.params, state.model, /*train=*/false);
        if (what == ExportKind::kEmbeddings) {
            Tensor pooled = pooled_embedding(out.hidden, batch->valid);
            const std::int64_t f = pooled.extent(1);
            for (std::int64_t i = 0; i < batch->batch_size(); ++i) {
                csv += batch->ids[static_cast<std::size_t>(i)] + "," +
                       std::to_string(batch->labels[static_cast<std::size_t>(i)]);
                for (std::int64_t c = 0; c < f; ++c) csv += "," + fmt(pooled[i * f + c]);
                csv += "\n";
            }
        } else {
            Tensor rolled = aggregate_attention_rollout(out.attn, batch->valid);
            ImportanceScores scores = attention_scores(rolled, batch->valid);
            const std::int64_t n = batch->max_len();
            if (what == ExportKind::kSigma) {
                for (std::int64_t i = 0; i < batch->batch_size(); ++i) {
                    csv += batch->ids[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < batch->lengths[static_cast<std::size_t>(i)]; ++j) {
                        csv += "," + fmt(scores.sigma[i * n + j]);
                    }
                    csv += "\n";
                }
            } else {
                RegionalMask mask = build_regional_mask(
                    scores, mask_cfg, derive_seed(mask_seed, 0x4D61,
                                                  static_cast<std::uint64_t>(step)));
                for (std::int64_t i = 0; i < batch->batch_size(); ++i) {
                    csv += batch->ids[static_cast<std::size_t>(i)];
                    for (std::int64_t j = 0; j < batch->lengths[static_cast<std::size_t>(i)]; ++j) {
                        csv += mask.masked.at(i, j) ? ",1" : ",0";
                    }
                    csv += "\n";
                }
            }
        }
        ++step;
    }
    write_file_atomic(out_path, csv);
    info << "wrote " << out_path << " (" << ds.size() << " rows)\n";
    return out_path;
}

} // namespace starformer
