#include "starformer/run_config.hpp"

#include <cmath>
#include <fstream>

namespace starformer {

using nlohmann::json;

namespace {

// Pulls known keys out of `j`, erroring on leftovers so misspelled options
// never pass silently.
class FieldReader {
public:
    FieldReader(const json& j, std::string scope) : scope_(std::move(scope)) {
        if (!j.is_object()) throw ConfigError(scope_ + ": expected an object");
        remaining_ = j;
    }

    template <typename T>
    void get(const char* key, T& into) {
        if (!remaining_.contains(key)) return;
        try {
            into = remaining_[key].get<T>();
        } catch (const json::exception&) {
            throw ConfigError(scope_ + "." + key + ": wrong type");
        }
        remaining_.erase(key);
    }

    json take(const char* key) {
        json out;
        if (remaining_.contains(key)) {
            out = remaining_[key];
            remaining_.erase(key);
        }
        return out;
    }

    void finish() const {
        if (!remaining_.empty()) {
            throw ConfigError(scope_ + ": unknown key '" + remaining_.begin().key() + "'");
        }
    }

private:
    std::string scope_;
    json remaining_;
};

} // namespace

json to_json(const ModelConfig& cfg) {
    return json{{"num_layers", cfg.num_layers},
                {"model_dim", cfg.model_dim},
                {"num_heads", cfg.num_heads},
                {"ff_dim", cfg.ff_dim},
                {"head_hidden", cfg.head_hidden},
                {"num_classes", cfg.num_classes},
                {"input_dim", cfg.input_dim},
                {"max_len", cfg.max_len},
                {"dropout_rate", cfg.dropout_rate},
                {"activation", to_string(cfg.activation)},
                {"binary_head", cfg.binary_head}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig base) {
    ModelConfig cfg = base;
    FieldReader r(j, "model");
    r.get("num_layers", cfg.num_layers);
    r.get("model_dim", cfg.model_dim);
    r.get("num_heads", cfg.num_heads);
    r.get("ff_dim", cfg.ff_dim);
    r.get("head_hidden", cfg.head_hidden);
    r.get("num_classes", cfg.num_classes);
    r.get("input_dim", cfg.input_dim);
    r.get("max_len", cfg.max_len);
    r.get("dropout_rate", cfg.dropout_rate);
    std::string activation = to_string(cfg.activation);
    r.get("activation", activation);
    cfg.activation = activation_from_string(activation);
    r.get("binary_head", cfg.binary_head);
    r.finish();
    return cfg;
}

json to_json(const MaskConfig& cfg) {
    return json{{"strategy", to_string(cfg.strategy)},
                {"phi", cfg.phi},
                {"zeta", cfg.zeta},
                {"gamma", cfg.gamma}};
}

MaskConfig mask_config_from_json(const json& j, MaskConfig base) {
    MaskConfig cfg = base;
    FieldReader r(j, "mask");
    std::string strategy = to_string(cfg.strategy);
    r.get("strategy", strategy);
    cfg.strategy = mask_strategy_from_string(strategy);
    r.get("phi", cfg.phi);
    r.get("zeta", cfg.zeta);
    r.get("gamma", cfg.gamma);
    r.finish();
    return cfg;
}

json to_json(const LossConfig& cfg) {
    return json{{"tau", cfg.tau},
                {"lambda_cl", cfg.lambda_cl},
                {"lambda_fuse", cfg.lambda_fuse},
                {"eps", cfg.eps}};
}

LossConfig loss_config_from_json(const json& j, LossConfig base) {
    LossConfig cfg = base;
    FieldReader r(j, "loss");
    r.get("tau", cfg.tau);
    r.get("lambda_cl", cfg.lambda_cl);
    r.get("lambda_fuse", cfg.lambda_fuse);
    r.get("eps", cfg.eps);
    r.finish();
    return cfg;
}

json to_json(const TrainConfig& cfg) {
    json j{{"epochs", cfg.epochs},
           {"batch_size", cfg.batch_size},
           {"learning_rate", cfg.learning_rate},
           {"seed", cfg.seed},
           {"model", to_json(cfg.model)},
           {"mask", to_json(cfg.mask)},
           {"loss", to_json(cfg.loss)}};
    if (cfg.grad_clip) {
        j["grad_clip"] = *cfg.grad_clip;
    } else {
        j["grad_clip"] = 0.0;
    }
    return j;
}

TrainConfig train_config_from_json(const json& j, TrainConfig base) {
    TrainConfig cfg = std::move(base);
    FieldReader r(j, "train");
    r.get("epochs", cfg.epochs);
    r.get("batch_size", cfg.batch_size);
    r.get("learning_rate", cfg.learning_rate);
    r.get("seed", cfg.seed);
    double clip = cfg.grad_clip ? *cfg.grad_clip : 0.0;
    r.get("grad_clip", clip);
    cfg.grad_clip = clip > 0.0 ? std::optional<double>(clip) : std::nullopt;
    json model = r.take("model");
    if (!model.is_null()) cfg.model = model_config_from_json(model, cfg.model);
    json mask = r.take("mask");
    if (!mask.is_null()) cfg.mask = mask_config_from_json(mask, cfg.mask);
    json loss = r.take("loss");
    if (!loss.is_null()) cfg.loss = loss_config_from_json(loss, cfg.loss);
    r.finish();
    return cfg;
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig cfg;
    // dataset-derived unless the config pins them
    cfg.train.model.num_classes = 0;
    cfg.train.model.input_dim = 0;
    cfg.train.model.max_len = 0;
    FieldReader r(j, "run");
    r.get("dataset", cfg.dataset_path);
    r.get("test_dataset", cfg.test_dataset_path);
    std::vector<double> ratios(cfg.split_ratios.begin(), cfg.split_ratios.end());
    r.get("split_ratios", ratios);
    if (ratios.size() != 3) throw ConfigError("run.split_ratios: need exactly 3 values");
    std::copy(ratios.begin(), ratios.end(), cfg.split_ratios.begin());
    r.get("split_seed", cfg.split_seed);
    r.get("out_dir", cfg.out_dir);
    json rest = r.take("model");
    json mask = r.take("mask");
    json loss = r.take("loss");
    json train = json::object();
    for (const char* key : {"epochs", "batch_size", "learning_rate", "seed", "grad_clip"}) {
        json v = r.take(key);
        if (!v.is_null()) train[key] = v;
    }
    if (!rest.is_null()) train["model"] = rest;
    if (!mask.is_null()) train["mask"] = mask;
    if (!loss.is_null()) train["loss"] = loss;
    cfg.train = train_config_from_json(train, cfg.train);
    r.finish();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    json tree;
    try {
        tree = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    for (const auto& assignment : overrides) apply_override(tree, assignment);
    return from_json(tree);
}

json RunConfig::to_json() const {
    json j = starformer::to_json(train);
    j["dataset"] = dataset_path;
    if (!test_dataset_path.empty()) j["test_dataset"] = test_dataset_path;
    j["split_ratios"] = split_ratios;
    j["split_seed"] = split_seed;
    j["out_dir"] = out_dir;
    return j;
}

void RunConfig::validate() const {
    // model extents may still be 0 (dataset-derived); the trainer validates
    // the fully resolved config once the data is known
    if (train.epochs < 0) throw ConfigError("train.epochs: must be non-negative");
    if (train.batch_size < 1) throw ConfigError("train.batch_size: must be positive");
    if (train.learning_rate < 0.0) throw ConfigError("train.learning_rate: must be non-negative");
    train.mask.validate();
    train.loss.validate();
    if (dataset_path.empty()) throw ConfigError("run.dataset: required");
    if (out_dir.empty()) throw ConfigError("run.out_dir: required");
    double total = 0.0;
    for (double r : split_ratios) {
        if (r < 0.0) throw ConfigError("run.split_ratios: negative entry");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ConfigError("run.split_ratios: must sum to 1");
}

void apply_override(json& tree, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw ConfigError("override '" + assignment + "': expected key.path=value");
    }
    const std::string path = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    json value;
    try {
        value = json::parse(raw);
    } catch (const json::parse_error&) {
        value = raw; // bare strings like "darem" arrive unquoted
    }

    json* node = &tree;
    std::size_t begin = 0;
    for (;;) {
        const auto dot = path.find('.', begin);
        const std::string key = path.substr(begin, dot - begin);
        if (key.empty()) throw ConfigError("override '" + assignment + "': empty key segment");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        node = &(*node)[key];
        begin = dot + 1;
    }
}

} // namespace starformer
