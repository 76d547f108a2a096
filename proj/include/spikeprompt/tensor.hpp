#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spikeprompt/errors.hpp"
#include "spikeprompt/rng.hpp"

namespace spikeprompt {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    if (s.empty()) throw ShapeError("empty shape");
    for (auto d : s) {
        if (d < 1) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    }
}

/// Dense 64-bit float storage plus gradient state. Row-major layout throughout;
/// checkpoints and dataset containers rely on it.
struct TensorData {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily; empty means "no gradient yet"
    bool requires_grad = false;

    // Tape bookkeeping. epoch identifies which tape (if any) produced this
    // value; node_id is the producing node's position on that tape.
    std::uint64_t epoch = 0;
    std::int64_t node_id = -1;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

class Tape;

/// Value-semantics handle over shared tensor storage.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

    static Tensor zeros(const Shape& shape) {
        check_shape_valid(shape);
        auto d = std::make_shared<TensorData>();
        d->shape = shape;
        d->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
        return Tensor(std::move(d));
    }

    static Tensor full(const Shape& shape, double value) {
        Tensor t = zeros(shape);
        for (auto& v : t.d_->data) v = value;
        return t;
    }

    /// Seeded normal init; byte-reproducible for a fixed seed.
    static Tensor randn(const Shape& shape, std::uint64_t seed, double std_dev) {
        if (std_dev <= 0.0) throw ParamError("randn: std must be > 0");
        Tensor t = zeros(shape);
        Rng rng(seed);
        for (auto& v : t.d_->data) v = std_dev * rng.normal();
        return t;
    }

    static Tensor from_data(const Shape& shape, std::vector<double> values) {
        check_shape_valid(shape);
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
            throw ShapeError("from_data: value count does not match shape " + shape_str(shape));
        }
        auto d = std::make_shared<TensorData>();
        d->shape = shape;
        d->data = std::move(values);
        return Tensor(std::move(d));
    }

    static Tensor scalar(double v) { return from_data({1}, {v}); }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(d_->data.size()); }
    std::int64_t rank() const { return static_cast<std::int64_t>(d_->shape.size()); }
    std::int64_t rows() const { return d_->shape[0]; }
    std::int64_t cols() const {
        if (rank() != 2) throw ShapeError("cols() on non-matrix " + shape_str(shape()));
        return d_->shape[1];
    }

    double* data() { return d_->data.data(); }
    const double* data() const { return d_->data.data(); }
    std::vector<double>& vec() { return d_->data; }
    const std::vector<double>& vec() const { return d_->data; }

    double value() const {
        if (numel() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
        return d_->data[0];
    }

    double at(std::int64_t i) const { return d_->data[static_cast<std::size_t>(i)]; }
    double at(std::int64_t i, std::int64_t j) const {
        return d_->data[static_cast<std::size_t>(i * d_->shape[1] + j)];
    }
    double& at(std::int64_t i) { return d_->data[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t i, std::int64_t j) {
        return d_->data[static_cast<std::size_t>(i * d_->shape[1] + j)];
    }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        if (rg) d_->ensure_grad();
        return *this;
    }

    bool has_grad() const { return !d_->grad.empty(); }
    double* grad() { d_->ensure_grad(); return d_->grad.data(); }
    const std::vector<double>& grad_vec() const { return d_->grad; }
    void zero_grad() {
        d_->ensure_grad();
        std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    /// Deep copy of values only: no grad, no tape lineage.
    Tensor detach() const {
        auto d = std::make_shared<TensorData>();
        d->shape = d_->shape;
        d->data = d_->data;
        return Tensor(std::move(d));
    }

    bool same_values(const Tensor& o) const {
        return d_->shape == o.d_->shape &&
               std::memcmp(d_->data.data(), o.d_->data.data(), d_->data.size() * sizeof(double)) == 0;
    }

    std::shared_ptr<TensorData> impl() const { return d_; }

  private:
    std::shared_ptr<TensorData> d_;
};

inline bool has_nan(const Tensor& t) {
    for (double v : t.vec()) {
        if (std::isnan(v)) return true;
    }
    return false;
}

/// Define-by-run gradient tape. Constructing a Tape makes it the active tape
/// for the current thread; every differentiable op records onto it while it
/// lives. Rebuilt per forward pass; backward may run once per tape.
class Tape {
  public:
    struct Node {
        std::vector<std::shared_ptr<TensorData>> inputs;
        std::shared_ptr<TensorData> output;
        std::function<void()> backward;
        std::int64_t id = 0;
    };

    Tape() {
        if (active_ != nullptr) throw TapeError("nested tapes are not supported");
        epoch_ = ++epoch_counter_;
        active_ = this;
    }
    ~Tape() { active_ = nullptr; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    std::uint64_t epoch() const { return epoch_; }
    std::int64_t next_id() const { return next_id_; }
    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void record(std::vector<std::shared_ptr<TensorData>> inputs,
                std::shared_ptr<TensorData> output,
                std::function<void()> backward_fn) {
        // Topological order holds by construction; guard it anyway.
        for (const auto& in : inputs) {
            if (in->epoch == epoch_ && in->node_id >= next_id_) {
                throw TapeError("tape node recorded before its input");
            }
        }
        output->epoch = epoch_;
        output->node_id = next_id_;
        nodes_.push_back(Node{std::move(inputs), std::move(output), std::move(backward_fn), next_id_});
        ++next_id_;
    }

    /// Seeds d(loss)/d(loss) = 1 and runs all recorded backward rules in
    /// reverse order. Gradients accumulate into every participating tensor.
    void backward(const Tensor& loss) {
        if (consumed_) throw TapeError("backward already ran on this tape");
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
        }
        consumed_ = true;
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward();
        }
    }

  private:
    std::vector<Node> nodes_;
    std::int64_t next_id_ = 0;
    std::uint64_t epoch_ = 0;
    bool consumed_ = false;

    static inline thread_local Tape* active_ = nullptr;
    static inline thread_local std::uint64_t epoch_counter_ = 0;
};

inline void backward(const Tensor& loss) {
    Tape* t = Tape::active();
    if (t == nullptr) throw TapeError("backward called with no active tape");
    t->backward(loss);
}

/// True when gradients must be tracked/accumulated for this tensor under the
/// given tape: trainable leaves always, intermediates only on their own tape.
inline bool needs_grad(const std::shared_ptr<TensorData>& d, const Tape* tape) {
    if (d->requires_grad) return true;
    return tape != nullptr && d->epoch == tape->epoch() && d->node_id >= 0;
}

inline bool needs_grad(const Tensor& t, const Tape* tape) { return needs_grad(t.impl(), tape); }

/// p <- p - lr * (grad + weight_decay * p), then zero the gradient.
inline void sgd_step(std::vector<Tensor>& params, double lr, double weight_decay) {
    for (auto& p : params) {
        auto d = p.impl();
        d->ensure_grad();
        for (std::size_t i = 0; i < d->data.size(); ++i) {
            d->data[i] -= lr * (d->grad[i] + weight_decay * d->data[i]);
            d->grad[i] = 0.0;
        }
    }
}

}  // namespace spikeprompt
