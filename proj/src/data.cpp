#include "starformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace starformer {

using nlohmann::json;

std::int64_t Dataset::max_length() const {
    std::int64_t n = 0;
    for (const auto& s : samples) n = std::max(n, s.length());
    return n;
}

void Dataset::validate() const {
    if (samples.empty()) throw DataError("dataset '" + name + "': no samples");
    if (num_classes < 1) throw DataError("dataset '" + name + "': num_classes must be positive");
    for (const auto& s : samples) {
        if (s.length() < 1) throw DataError("sample '" + s.id + "': empty sequence");
        if (s.dim() != feature_dim) {
            throw DataError("sample '" + s.id + "': feature dim " + std::to_string(s.dim()) +
                            " vs dataset " + std::to_string(feature_dim));
        }
        if (s.label < 0 || s.label >= num_classes) {
            throw DataError("sample '" + s.id + "': label " + std::to_string(s.label) +
                            " outside [0, " + std::to_string(num_classes) + ")");
        }
        if (!s.timestamps.empty()) {
            if (static_cast<std::int64_t>(s.timestamps.size()) != s.length()) {
                throw DataError("sample '" + s.id + "': " + std::to_string(s.timestamps.size()) +
                                " timestamps for " + std::to_string(s.length()) + " steps");
            }
            for (std::size_t j = 1; j < s.timestamps.size(); ++j) {
                if (!(s.timestamps[j] > s.timestamps[j - 1])) {
                    throw DataError("sample '" + s.id + "': timestamps not strictly increasing");
                }
            }
        }
        for (const auto& row : s.features) {
            if (static_cast<std::int64_t>(row.size()) != feature_dim) {
                throw DataError("sample '" + s.id + "': ragged feature rows");
            }
            for (double v : row) {
                if (!std::isfinite(v)) throw DataError("sample '" + s.id + "': non-finite value");
            }
        }
    }
}

namespace {

SequenceSample parse_record(const json& rec, std::int64_t line_no,
                            std::optional<std::int64_t> declared_classes) {
    const std::string where = "line " + std::to_string(line_no);
    if (!rec.is_object() || !rec.contains("label") || !rec.contains("x")) {
        throw DataError(where + ": record needs at least 'label' and 'x'");
    }
    SequenceSample s;
    if (rec.contains("id")) {
        s.id = rec["id"].is_string() ? rec["id"].get<std::string>() : rec["id"].dump();
    } else {
        s.id = "line" + std::to_string(line_no);
    }
    if (!rec["label"].is_number_integer() || rec["label"].get<std::int64_t>() < 0) {
        throw DataError(where + ": label must be a non-negative integer");
    }
    s.label = rec["label"].get<std::int64_t>();
    if (declared_classes && s.label >= *declared_classes) {
        throw DataError(where + ": label " + std::to_string(s.label) + " >= num_classes " +
                        std::to_string(*declared_classes));
    }
    if (!rec["x"].is_array() || rec["x"].empty()) {
        throw DataError(where + ": 'x' must be a non-empty array of rows");
    }
    for (const auto& row : rec["x"]) {
        if (!row.is_array() || row.empty()) throw DataError(where + ": feature rows must be arrays");
        std::vector<double> values;
        for (const auto& v : row) {
            if (!v.is_number()) throw DataError(where + ": feature values must be numbers");
            values.push_back(v.get<double>());
        }
        s.features.push_back(std::move(values));
    }
    if (rec.contains("t")) {
        if (!rec["t"].is_array() || rec["t"].size() != rec["x"].size()) {
            throw DataError(where + ": 't' must parallel 'x'");
        }
        for (const auto& v : rec["t"]) s.timestamps.push_back(v.get<double>());
        for (std::size_t j = 1; j < s.timestamps.size(); ++j) {
            if (!(s.timestamps[j] > s.timestamps[j - 1])) {
                throw DataError(where + ": timestamps not strictly increasing");
            }
        }
    }
    return s;
}

} // namespace

Dataset load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file: " + path);

    Dataset ds;
    ds.name = path;
    std::optional<std::int64_t> declared_classes;
    std::string line;
    std::int64_t line_no = 0;
    bool any_time = false, any_plain = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::parse_error& e) {
            throw DataError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (rec.is_object() && rec.contains("meta")) {
            const auto& meta = rec["meta"];
            if (meta.contains("num_classes")) {
                declared_classes = meta["num_classes"].get<std::int64_t>();
            }
            if (meta.contains("name")) ds.name = meta["name"].get<std::string>();
            continue;
        }
        SequenceSample s = parse_record(rec, line_no, declared_classes);
        (s.timestamps.empty() ? any_plain : any_time) = true;
        if (ds.samples.empty()) {
            ds.feature_dim = s.dim();
        } else if (s.dim() != ds.feature_dim) {
            throw DataError("line " + std::to_string(line_no) + ": feature dim " +
                            std::to_string(s.dim()) + " vs " + std::to_string(ds.feature_dim));
        }
        ds.samples.push_back(std::move(s));
    }
    if (ds.samples.empty()) throw DataError("dataset file has no records: " + path);
    if (any_time && any_plain) {
        throw DataError("dataset mixes records with and without timestamps: " + path);
    }
    if (declared_classes) {
        ds.num_classes = *declared_classes;
    } else {
        for (const auto& s : ds.samples) ds.num_classes = std::max(ds.num_classes, s.label + 1);
    }
    ds.validate();
    return any_time ? append_time_channel(ds) : ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
    // stage and rename so failures never leave a partial file
    const std::string staging = path + ".tmp";
    {
        std::ofstream out(staging, std::ios::trunc);
        if (!out) throw DataError("cannot write dataset file: " + staging);
        json meta;
        meta["meta"]["num_classes"] = ds.num_classes;
        meta["meta"]["name"] = ds.name;
        out << meta.dump() << '\n';
        for (const auto& s : ds.samples) {
            json rec;
            rec["id"] = s.id;
            rec["label"] = s.label;
            if (!s.timestamps.empty()) rec["t"] = s.timestamps;
            rec["x"] = s.features;
            out << rec.dump() << '\n';
        }
        if (!out.good()) throw DataError("failed while writing: " + staging);
    }
    if (std::rename(staging.c_str(), path.c_str()) != 0) {
        throw DataError("cannot move " + staging + " to " + path);
    }
}

Dataset append_time_channel(const Dataset& ds) {
    bool any = false;
    for (const auto& s : ds.samples) any = any || !s.timestamps.empty();
    if (!any) return ds;

    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (const auto& s : ds.samples) {
        for (double t : s.timestamps) {
            lo = std::min(lo, t);
            hi = std::max(hi, t);
        }
    }
    const double range = hi > lo ? hi - lo : 1.0;

    Dataset out = ds;
    out.feature_dim = ds.feature_dim + 1;
    for (auto& s : out.samples) {
        for (std::size_t j = 0; j < s.features.size(); ++j) {
            s.features[j].push_back((s.timestamps[j] - lo) / range);
        }
        s.timestamps.clear();
    }
    return out;
}

void SyntheticSpec::validate() const {
    if (num_classes < 2) {
        throw ConfigError("synthetic.num_classes: need at least 2, got " +
                          std::to_string(num_classes));
    }
    if (length < 16) {
        throw ConfigError("synthetic.length: need at least 16, got " + std::to_string(length));
    }
    if (n_per_class < 1) throw ConfigError("synthetic.n_per_class: must be positive");
    if (dim < 1) throw ConfigError("synthetic.dim: must be positive");
    if (noise_std < 0.0) throw ConfigError("synthetic.noise_std: must be non-negative");
}

Dataset generate_synthetic_motif(const SyntheticSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0x53594E54)); // synth stream
    Dataset ds;
    ds.num_classes = spec.num_classes;
    ds.feature_dim = spec.dim;
    ds.name = "synthetic-motif";

    const double width = static_cast<double>(spec.length) / 8.0;
    const double amplitude = spec.noise_std > 0.0 ? 3.0 * spec.noise_std : 1.0;
    std::int64_t next_id = 0;
    for (std::int64_t label = 0; label < spec.num_classes; ++label) {
        const double center = static_cast<double>((label + 1) * spec.length) /
                              static_cast<double>(spec.num_classes + 1);
        const std::int64_t channel = label % spec.dim;
        for (std::int64_t i = 0; i < spec.n_per_class; ++i) {
            SequenceSample s;
            s.id = "s" + std::to_string(next_id++);
            s.label = label;
            s.features.assign(static_cast<std::size_t>(spec.length),
                              std::vector<double>(static_cast<std::size_t>(spec.dim), 0.0));
            for (auto& row : s.features) {
                for (auto& v : row) v = rng.normal(0.0, spec.noise_std);
            }
            for (std::int64_t j = 0; j < spec.length; ++j) {
                const double d = static_cast<double>(j) - center;
                s.features[static_cast<std::size_t>(j)][static_cast<std::size_t>(channel)] +=
                    amplitude * std::exp(-d * d / (2.0 * width * width));
            }
            if (spec.drift) {
                for (std::int64_t c = 0; c < spec.dim; ++c) {
                    double walk = 0.0;
                    for (std::int64_t j = 0; j < spec.length; ++j) {
                        walk += rng.normal(0.0, spec.noise_std / 4.0);
                        s.features[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)] +=
                            walk;
                    }
                }
            }
            if (spec.irregular) {
                s.timestamps.resize(static_cast<std::size_t>(spec.length));
                for (auto& t : s.timestamps) t = rng.uniform();
                std::sort(s.timestamps.begin(), s.timestamps.end());
                // sorted uniforms can collide; nudge ties forward to keep the
                // strict-increase invariant
                for (std::size_t j = 1; j < s.timestamps.size(); ++j) {
                    if (s.timestamps[j] <= s.timestamps[j - 1]) {
                        s.timestamps[j] = std::nextafter(s.timestamps[j - 1], 2.0);
                    }
                }
            }
            ds.samples.push_back(std::move(s));
        }
    }
    ds.validate();
    return ds;
}

SplitResult split_and_normalize(const Dataset& ds, const std::array<double, 3>& ratios,
                                std::uint64_t seed) {
    ds.validate();
    double total = 0.0;
    for (double r : ratios) {
        if (r < 0.0) throw ContractError("split: ratios must be non-negative");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ContractError("split: ratios must sum to 1");
    if (ratios[0] <= 0.0) throw ContractError("split: train ratio must be positive");

    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(ds.num_classes));
    for (std::int64_t i = 0; i < ds.size(); ++i) {
        by_class[static_cast<std::size_t>(ds.samples[static_cast<std::size_t>(i)].label)]
            .push_back(i);
    }

    Rng rng(derive_seed(seed, 0x53504C54)); // split stream
    std::array<std::vector<std::int64_t>, 3> picks;
    for (auto& group : by_class) {
        if (group.empty()) continue;
        rng.shuffle(group);
        const std::int64_t m = static_cast<std::int64_t>(group.size());
        // largest-remainder allocation keeps every split within one sample
        // of the exact class proportion
        std::array<std::int64_t, 3> counts{};
        std::array<double, 3> frac{};
        std::int64_t assigned = 0;
        for (int k = 0; k < 3; ++k) {
            const double want = ratios[static_cast<std::size_t>(k)] * static_cast<double>(m);
            counts[static_cast<std::size_t>(k)] = static_cast<std::int64_t>(std::floor(want));
            frac[static_cast<std::size_t>(k)] = want - std::floor(want);
            assigned += counts[static_cast<std::size_t>(k)];
        }
        while (assigned < m) {
            int best = 0;
            for (int k = 1; k < 3; ++k) {
                if (frac[static_cast<std::size_t>(k)] > frac[static_cast<std::size_t>(best)]) {
                    best = k;
                }
            }
            frac[static_cast<std::size_t>(best)] = -1.0;
            ++counts[static_cast<std::size_t>(best)];
            ++assigned;
        }
        if (counts[0] == 0) {
            throw DataError("split: class " +
                            std::to_string(ds.samples[static_cast<std::size_t>(group[0])].label) +
                            " has no training samples under these ratios");
        }
        std::size_t cursor = 0;
        for (int k = 0; k < 3; ++k) {
            for (std::int64_t c = 0; c < counts[static_cast<std::size_t>(k)]; ++c) {
                picks[static_cast<std::size_t>(k)].push_back(group[cursor++]);
            }
        }
    }

    SplitResult out;
    Dataset* splits[3] = {&out.train, &out.val, &out.test};
    for (int k = 0; k < 3; ++k) {
        splits[k]->num_classes = ds.num_classes;
        splits[k]->feature_dim = ds.feature_dim;
        splits[k]->name = ds.name;
        std::sort(picks[static_cast<std::size_t>(k)].begin(),
                  picks[static_cast<std::size_t>(k)].end());
        for (auto i : picks[static_cast<std::size_t>(k)]) {
            splits[k]->samples.push_back(ds.samples[static_cast<std::size_t>(i)]);
        }
    }

    // channel statistics over every train timestep
    const std::int64_t d = ds.feature_dim;
    out.channel_mean.assign(static_cast<std::size_t>(d), 0.0);
    out.channel_std.assign(static_cast<std::size_t>(d), 0.0);
    std::int64_t count = 0;
    for (const auto& s : out.train.samples) {
        for (const auto& row : s.features) {
            for (std::int64_t c = 0; c < d; ++c) {
                out.channel_mean[static_cast<std::size_t>(c)] += row[static_cast<std::size_t>(c)];
            }
            ++count;
        }
    }
    for (auto& m : out.channel_mean) m /= static_cast<double>(count);
    for (const auto& s : out.train.samples) {
        for (const auto& row : s.features) {
            for (std::int64_t c = 0; c < d; ++c) {
                const double diff =
                    row[static_cast<std::size_t>(c)] - out.channel_mean[static_cast<std::size_t>(c)];
                out.channel_std[static_cast<std::size_t>(c)] += diff * diff;
            }
        }
    }
    for (auto& v : out.channel_std) {
        v = std::sqrt(v / static_cast<double>(count));
        if (v == 0.0) v = 1.0; // constant channel: leave it centered
    }
    for (int k = 0; k < 3; ++k) {
        if (!splits[k]->samples.empty()) {
            *splits[k] = normalize_with(*splits[k], out.channel_mean, out.channel_std);
        }
    }
    return out;
}

Dataset normalize_with(const Dataset& ds, const std::vector<double>& mean,
                       const std::vector<double>& stddev) {
    if (static_cast<std::int64_t>(mean.size()) != ds.feature_dim ||
        stddev.size() != mean.size()) {
        throw ShapeError("normalize: statistics for " + std::to_string(mean.size()) +
                         " channels vs dataset dim " + std::to_string(ds.feature_dim));
    }
    Dataset out = ds;
    for (auto& s : out.samples) {
        for (auto& row : s.features) {
            for (std::size_t c = 0; c < row.size(); ++c) {
                row[c] = (row[c] - mean[c]) / stddev[c];
            }
        }
    }
    return out;
}

SequenceBatch make_batch(const Dataset& ds, const std::vector<std::int64_t>& indices) {
    if (indices.empty()) throw ContractError("make_batch: no samples selected");
    const std::int64_t b = static_cast<std::int64_t>(indices.size());
    std::int64_t n = 0;
    for (auto i : indices) n = std::max(n, ds.samples[static_cast<std::size_t>(i)].length());

    SequenceBatch batch;
    batch.values = Tensor(Shape{b, n, ds.feature_dim});
    batch.valid = BoolMask(Shape{b, n});
    for (std::int64_t r = 0; r < b; ++r) {
        const auto& s = ds.samples[static_cast<std::size_t>(indices[static_cast<std::size_t>(r)])];
        batch.lengths.push_back(s.length());
        batch.labels.push_back(s.label);
        batch.ids.push_back(s.id);
        for (std::int64_t j = 0; j < s.length(); ++j) {
            batch.valid.set(r, j, true);
            for (std::int64_t c = 0; c < ds.feature_dim; ++c) {
                batch.values[(r * n + j) * ds.feature_dim + c] =
                    s.features[static_cast<std::size_t>(j)][static_cast<std::size_t>(c)];
            }
        }
    }
    return batch;
}

BatchIterator::BatchIterator(const Dataset& ds, std::int64_t batch_size,
                             std::optional<std::uint64_t> shuffle_seed)
    : ds_(&ds), batch_size_(batch_size) {
    if (batch_size_ < 1) throw ContractError("batch_iterator: batch size must be positive");
    order_.resize(static_cast<std::size_t>(ds.size()));
    for (std::int64_t i = 0; i < ds.size(); ++i) order_[static_cast<std::size_t>(i)] = i;
    if (shuffle_seed) {
        Rng rng(derive_seed(*shuffle_seed, 0x42415443)); // batch stream
        rng.shuffle(order_);
    }
}

std::optional<SequenceBatch> BatchIterator::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t end = std::min(cursor_ + static_cast<std::size_t>(batch_size_),
                                     order_.size());
    std::vector<std::int64_t> indices(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                                      order_.begin() + static_cast<std::ptrdiff_t>(end));
    cursor_ = end;
    return make_batch(*ds_, indices);
}

void BatchIterator::reset() { cursor_ = 0; }

} // namespace starformer
