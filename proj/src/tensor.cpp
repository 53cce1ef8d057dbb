#include "starformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace starformer {

namespace detail {

namespace {
// exact-size buckets: training re-requests identical shapes every step
thread_local std::unordered_map<std::size_t, std::vector<std::vector<double>>> g_buffer_pool;
thread_local std::size_t g_pool_bytes = 0;
constexpr std::size_t kPoolByteLimit = std::size_t{256} << 20;
constexpr std::size_t kMinPooledElements = 512;
} // namespace

std::vector<double> acquire_buffer(std::size_t n, double fill) {
    if (n >= kMinPooledElements) {
        auto it = g_buffer_pool.find(n);
        if (it != g_buffer_pool.end() && !it->second.empty()) {
            std::vector<double> v = std::move(it->second.back());
            it->second.pop_back();
            g_pool_bytes -= n * sizeof(double);
            std::fill(v.begin(), v.end(), fill);
            return v;
        }
    }
    return std::vector<double>(n, fill);
}

void release_buffer(std::vector<double>&& v) {
    const std::size_t n = v.size();
    if (n < kMinPooledElements || n * sizeof(double) + g_pool_bytes > kPoolByteLimit) return;
    g_pool_bytes += n * sizeof(double);
    g_buffer_pool[n].push_back(std::move(v));
}

} // namespace detail

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
    std::vector<std::int64_t> strides(s.size(), 1);
    for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i) {
        strides[static_cast<std::size_t>(i)] =
            strides[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
    }
    return strides;
}

void Tape::backward(Tensor& root) const {
    if (root.numel() != 1) {
        throw ContractError("backward: root " + shape_str(root.shape()) + " is not a scalar");
    }
    if (root.tape() != this) {
        throw ContractError("backward: root was not produced on this tape");
    }
    auto& rd = root.mutable_data();
    rd.ensure_grad();
    rd.grad[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        it->backward();
    }
}

namespace {
thread_local Tape* g_active_tape = nullptr;
bool g_finite_checks = true;
} // namespace

Tape* active_tape() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

bool finite_checks_enabled() { return g_finite_checks; }
void set_finite_checks(bool enabled) { g_finite_checks = enabled; }

void check_finite(const Tensor& t, const char* op) {
    if (!g_finite_checks) return;
    const double* p = t.data();
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            throw NumericError(std::string(op) + ": non-finite value at index " +
                               std::to_string(i));
        }
    }
}

} // namespace starformer
