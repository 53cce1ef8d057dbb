#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "starformer/error.hpp"

namespace starformer {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

// Row-major strides for a shape; broadcast dims get stride 0 elsewhere.
std::vector<std::int64_t> row_major_strides(const Shape& s);

// Boolean companion to Tensor (validity masks, attention masks, regional
// masks). Kept separate from Tensor so masks can never leak into arithmetic.
struct BoolMask {
    Shape shape;
    std::vector<std::uint8_t> data;

    BoolMask() = default;
    BoolMask(Shape s, bool fill = false)
        : shape(std::move(s)),
          data(static_cast<std::size_t>(shape_numel(shape)), fill ? 1 : 0) {}

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    bool at(std::int64_t i) const { return data[static_cast<std::size_t>(i)] != 0; }
    void set(std::int64_t i, bool v) { data[static_cast<std::size_t>(i)] = v ? 1 : 0; }
    // 2-d convenience (B x N masks are the common case)
    bool at(std::int64_t i, std::int64_t j) const { return at(i * shape.at(1) + j); }
    void set(std::int64_t i, std::int64_t j, bool v) { set(i * shape.at(1) + j, v); }

    std::int64_t count() const {
        std::int64_t c = 0;
        for (auto v : data) c += v != 0;
        return c;
    }
};

class Tape;

namespace detail {

// Training builds the same tensor shapes step after step; recycling their
// buffers through a thread-local pool avoids re-faulting fresh pages each
// step. acquire returns a filled buffer, release parks one for reuse.
std::vector<double> acquire_buffer(std::size_t n, double fill);
void release_buffer(std::vector<double>&& v);

struct TensorData {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until a gradient is accumulated
    bool requires_grad = false;
    const Tape* tape = nullptr; // tape that produced this value, if any

    TensorData() = default;
    TensorData(const TensorData&) = default;
    TensorData& operator=(const TensorData&) = default;
    ~TensorData() {
        release_buffer(std::move(value));
        release_buffer(std::move(grad));
    }

    void ensure_grad() {
        if (grad.empty()) grad = acquire_buffer(value.size(), 0.0);
    }
};

} // namespace detail

// Dense n-dimensional array of doubles, an optional node in a reverse-mode
// tape. Rank-0 tensors are scalars (one element). Values are treated as
// immutable once an operation has consumed them; gradients accumulate until
// zero_grad().
class Tensor {
public:
    Tensor() : d_(std::make_shared<detail::TensorData>()) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        check_extents(d_->shape);
        d_->value =
            detail::acquire_buffer(static_cast<std::size_t>(shape_numel(d_->shape)), fill);
    }

    Tensor(Shape shape, std::vector<double> values)
        : d_(std::make_shared<detail::TensorData>()) {
        d_->shape = std::move(shape);
        check_extents(d_->shape);
        if (shape_numel(d_->shape) != static_cast<std::int64_t>(values.size())) {
            throw ShapeError("tensor: " + shape_str(d_->shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
        }
        d_->value = std::move(values);
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
    static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }

    const Shape& shape() const { return d_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(d_->shape.size()); }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->value.size()); }
    std::int64_t extent(std::int64_t axis) const { return d_->shape.at(static_cast<std::size_t>(axis)); }

    double* data() { return d_->value.data(); }
    const double* data() const { return d_->value.data(); }
    const std::vector<double>& values() const { return d_->value; }

    double operator[](std::int64_t i) const { return d_->value[static_cast<std::size_t>(i)]; }
    double& operator[](std::int64_t i) { return d_->value[static_cast<std::size_t>(i)]; }

    // multi-index access, mostly for tests and small host-side code
    double at(std::initializer_list<std::int64_t> idx) const { return d_->value[offset(idx)]; }
    double& at(std::initializer_list<std::int64_t> idx) { return d_->value[offset(idx)]; }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item(): tensor " + shape_str(shape()) + " is not a scalar");
        }
        return d_->value[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        d_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw ContractError("grad(): no gradient has been accumulated");
        return d_->grad;
    }
    void zero_grad() {
        if (has_grad()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    // Same values, detached from any tape and gradient.
    Tensor detach() const {
        Tensor t(d_->shape, d_->value);
        return t;
    }

    bool same_object(const Tensor& other) const { return d_ == other.d_; }

    const Tape* tape() const { return d_->tape; }

    // internals shared with the op layer
    detail::TensorData& mutable_data() { return *d_; }
    const detail::TensorData& internal() const { return *d_; }
    std::shared_ptr<detail::TensorData> handle() const { return d_; }

private:
    static void check_extents(const Shape& s) {
        for (auto e : s) {
            if (e < 0) throw ShapeError("tensor: negative extent in " + shape_str(s));
        }
    }

    std::size_t offset(std::initializer_list<std::int64_t> idx) const {
        if (static_cast<std::int64_t>(idx.size()) != rank()) {
            throw ShapeError("index rank " + std::to_string(idx.size()) + " vs tensor " +
                             shape_str(shape()));
        }
        std::size_t off = 0;
        std::int64_t axis = 0;
        for (auto i : idx) {
            off = off * static_cast<std::size_t>(d_->shape[static_cast<std::size_t>(axis)]) +
                  static_cast<std::size_t>(i);
            ++axis;
        }
        return off;
    }

    std::shared_ptr<detail::TensorData> d_;
};

// Reverse-mode tape. Operations append themselves during the forward pass,
// which makes the recorded order a topological order by construction;
// backward() replays the rules once, in reverse. Single-writer: one tape is
// active per thread at a time.
class Tape {
public:
    struct Record {
        const char* op;
        std::function<void()> backward;
    };

    void record(const char* op, std::function<void()> backward) {
        records_.push_back({op, std::move(backward)});
    }

    std::size_t size() const { return records_.size(); }

    // Seeds d(root)/d(root) = 1 and replays every rule in reverse order.
    // Gradients accumulate additively into each tensor's grad buffer.
    void backward(Tensor& root) const;

private:
    std::vector<Record> records_;
};

Tape* active_tape();

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Hard-error scan for NaN/Inf in freshly computed values. Enabled by default;
// can be switched off for long training runs where the trainer's own loss
// check suffices.
bool finite_checks_enabled();
void set_finite_checks(bool enabled);
void check_finite(const Tensor& t, const char* op);

} // namespace starformer
