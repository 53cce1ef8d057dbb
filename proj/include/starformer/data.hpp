#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "starformer/encoder.hpp"

namespace starformer {

// One labeled sequence. Features are [n][D]; timestamps, when present, are
// strictly increasing and later folded into the features as an extra channel.
struct SequenceSample {
    std::string id;
    std::int64_t label = 0;
    std::vector<double> timestamps;          // empty when absent
    std::vector<std::vector<double>> features;

    std::int64_t length() const { return static_cast<std::int64_t>(features.size()); }
    std::int64_t dim() const {
        return features.empty() ? 0 : static_cast<std::int64_t>(features.front().size());
    }
};

struct Dataset {
    std::vector<SequenceSample> samples;
    std::int64_t num_classes = 0;
    std::int64_t feature_dim = 0;
    std::string name;

    std::int64_t size() const { return static_cast<std::int64_t>(samples.size()); }
    std::int64_t max_length() const;
    void validate() const; // throws DataError on any invariant violation
};

// Line-delimited records {"id", "label", "t"?, "x"}; an optional first line
// {"meta": {...}} may declare num_classes and a name. Timestamps, when
// present anywhere in the file, are min-max scaled to [0, 1] over the whole
// dataset and appended as an extra feature channel.
Dataset load_dataset(const std::string& path);

// Writes the raw record form (timestamps separate from features).
void save_dataset(const Dataset& ds, const std::string& path);

// Folds timestamps into the feature channels; no-op when none are present.
Dataset append_time_channel(const Dataset& ds);

struct SyntheticSpec {
    std::int64_t num_classes = 4;
    std::int64_t n_per_class = 50;
    std::int64_t length = 64;
    std::int64_t dim = 2;
    double noise_std = 0.5;
    bool irregular = false;
    bool drift = false;
    std::uint64_t seed = 1;

    void validate() const;
};

// Gaussian noise plus one class-specific Gaussian-bump motif per sequence
// (class-specific center and channel). drift adds a per-channel random-walk
// mean; irregular attaches sorted uniform timestamps. Fully seeded.
Dataset generate_synthetic_motif(const SyntheticSpec& spec);

struct SplitResult {
    Dataset train, val, test;
    std::vector<double> channel_mean, channel_std; // fit on train only
};

// Stratified-by-label shuffle split followed by per-channel standardization
// with train-only statistics applied to every split.
SplitResult split_and_normalize(const Dataset& ds, const std::array<double, 3>& ratios,
                                std::uint64_t seed);

// Applies previously fitted normalization statistics (evaluation path).
Dataset normalize_with(const Dataset& ds, const std::vector<double>& mean,
                       const std::vector<double>& stddev);

// Seeded shuffled batching; each batch is padded to its own longest sequence
// and the final short batch is emitted as-is. Without a shuffle seed the
// dataset order is kept (evaluation/export path).
class BatchIterator {
public:
    BatchIterator(const Dataset& ds, std::int64_t batch_size,
                  std::optional<std::uint64_t> shuffle_seed = std::nullopt);

    std::optional<SequenceBatch> next();
    void reset();

private:
    const Dataset* ds_;
    std::int64_t batch_size_;
    std::vector<std::int64_t> order_;
    std::size_t cursor_ = 0;
};

SequenceBatch make_batch(const Dataset& ds, const std::vector<std::int64_t>& indices);

} // namespace starformer
