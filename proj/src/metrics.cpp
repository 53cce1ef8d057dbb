#include "starformer/trainer.hpp"

namespace starformer {

std::int64_t Metrics::total() const {
    std::int64_t n = 0;
    for (auto c : confusion) n += c;
    return n;
}

Metrics metrics_from_confusion(const std::vector<std::int64_t>& confusion,
                               std::int64_t num_classes) {
    if (static_cast<std::int64_t>(confusion.size()) != num_classes * num_classes) {
        throw ContractError("metrics: confusion size " + std::to_string(confusion.size()) +
                            " vs " + std::to_string(num_classes) + " classes");
    }
    Metrics m;
    m.num_classes = num_classes;
    m.confusion = confusion;
    const std::int64_t total = m.total();
    if (total == 0) throw ContractError("metrics: empty confusion matrix");

    std::int64_t diagonal = 0;
    double precision_sum = 0.0, recall_sum = 0.0, f1_sum = 0.0, fhalf_sum = 0.0;
    constexpr double beta_sq = 0.25; // beta = 0.5 weighs precision over recall
    for (std::int64_t c = 0; c < num_classes; ++c) {
        const std::int64_t tp = confusion[static_cast<std::size_t>(c * num_classes + c)];
        std::int64_t row = 0, col = 0;
        for (std::int64_t k = 0; k < num_classes; ++k) {
            row += confusion[static_cast<std::size_t>(c * num_classes + k)];
            col += confusion[static_cast<std::size_t>(k * num_classes + c)];
        }
        diagonal += tp;
        const double p = col > 0 ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
        const double r = row > 0 ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
        precision_sum += p;
        recall_sum += r;
        f1_sum += (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        const double denom = beta_sq * p + r;
        fhalf_sum += denom > 0.0 ? (1.0 + beta_sq) * p * r / denom : 0.0;
    }
    const double k = static_cast<double>(num_classes);
    m.accuracy = static_cast<double>(diagonal) / static_cast<double>(total);
    m.precision = precision_sum / k;
    m.recall = recall_sum / k;
    m.f1 = f1_sum / k;
    m.f_half = fhalf_sum / k;
    return m;
}

} // namespace starformer
