#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "echoatt/errors.hpp"
#include "echoatt/rng.hpp"

namespace echoatt {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

inline void check_shape_valid(const Shape& shape) {
    for (int d : shape) {
        if (d < 1) throw DimensionError("invalid tensor shape " + shape_str(shape) + ": all dimensions must be >= 1");
    }
}

struct TensorNode {
    Shape shape;
    std::shared_ptr<std::vector<double>> data;  // shared so reshape can alias storage
    std::unique_ptr<std::vector<double>> grad;  // lazily allocated, same length as data
    bool requires_grad = false;
    std::string name;  // parameter name, used in diagnostics
};

// Dense f64 tensor handle with reverse-mode autodiff. Value semantics on the
// handle; the underlying node is shared. Data is row-major and immutable after
// forward construction except for gradient accumulation and optimizer updates.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        check_shape_valid(shape);
        auto node = std::make_shared<TensorNode>();
        node->data = std::make_shared<std::vector<double>>(static_cast<size_t>(shape_numel(shape)), 0.0);
        node->shape = std::move(shape);
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, double value) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.data()) x = value;
        return t;
    }

    static Tensor scalar(double value) { return full({1}, value); }

    static Tensor from_data(Shape shape, std::vector<double> values) {
        check_shape_valid(shape);
        if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
            throw DimensionError("data length " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data = std::make_shared<std::vector<double>>(std::move(values));
        return Tensor(std::move(node));
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        for (double& x : t.data()) x = rng.normal(0.0, stddev);
        return t;
    }

    // Create a tensor sharing the storage of `other` under a new shape.
    static Tensor alias(const Tensor& other, Shape shape) {
        check_shape_valid(shape);
        if (shape_numel(shape) != other.numel()) {
            throw DimensionError("cannot view " + shape_str(other.shape()) + " as " + shape_str(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->data = other.node_->data;
        return Tensor(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->data->size()); }

    std::vector<double>& data() { return *node_->data; }
    const std::vector<double>& data() const { return *node_->data; }
    double* ptr() { return node_->data->data(); }
    const double* ptr() const { return node_->data->data(); }
    double value() const {
        if (numel() != 1) throw ContractError("value() requires a scalar tensor, got shape " + shape_str(shape()));
        return (*node_->data)[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        node_->requires_grad = v;
        return *this;
    }

    const std::string& name() const { return node_->name; }
    Tensor& set_name(std::string name) {
        node_->name = std::move(name);
        return *this;
    }

    bool has_grad() const { return node_->grad != nullptr; }
    std::vector<double>& grad() {
        ensure_grad();
        return *node_->grad;
    }
    const std::vector<double>& grad() const {
        if (!node_->grad) throw ContractError("gradient not populated for tensor " + node_->name);
        return *node_->grad;
    }

    // Mutable gradient pointer for accumulation; allocates a zeroed buffer on
    // first use. Gradient accumulation is permitted through const handles.
    double* grad_data() const {
        ensure_grad();
        return node_->grad->data();
    }

    void ensure_grad() const {
        if (!node_->grad) node_->grad = std::make_unique<std::vector<double>>(node_->data->size(), 0.0);
    }

    void zero_grad() {
        if (node_->grad) std::fill(node_->grad->begin(), node_->grad->end(), 0.0);
    }

    std::shared_ptr<TensorNode> node() const { return node_; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }
    bool same_storage(const Tensor& other) const { return node_->data == other.node_->data; }

    // Deep copy of data (grad not copied). The copy is a leaf.
    Tensor clone() const {
        auto node = std::make_shared<TensorNode>();
        node->shape = node_->shape;
        node->data = std::make_shared<std::vector<double>>(*node_->data);
        node->requires_grad = node_->requires_grad;
        node->name = node_->name;
        return Tensor(std::move(node));
    }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;
};

// Tape-based compute graph. Operations append records in execution order;
// backward visits them in exact reverse insertion order, which is a valid
// topological order because inputs always precede their consumers.
class Tape {
public:
    struct Entry {
        std::shared_ptr<TensorNode> out;
        std::function<void()> backward;
    };

    void record(const Tensor& out, std::function<void()> backward) {
        entries_.push_back(Entry{out.node(), std::move(backward)});
    }

    size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and propagates. Gradients of leaf tensors
    // accumulate across calls; intermediate gradients are reset per call.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& e : entries_) {
            if (!e.out->grad) {
                e.out->grad = std::make_unique<std::vector<double>>(e.out->data->size(), 0.0);
            } else {
                std::fill(e.out->grad->begin(), e.out->grad->end(), 0.0);
            }
        }
        loss.ensure_grad();
        (*loss.node()->grad)[0] = 1.0;
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            it->backward();
        }
    }

    void clear() { entries_.clear(); }

private:
    std::vector<Entry> entries_;
};

namespace detail {
inline Tape*& active_tape_slot() {
    thread_local Tape* tape = nullptr;
    return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

// RAII scope making a tape the recording target for ops on this thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = &tape; }
    ~TapeScope() { detail::active_tape_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// RAII scope disabling gradient recording (teacher forwards, benchmarking).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
    ~NoGradScope() { detail::active_tape_slot() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* prev_;
};

}  // namespace echoatt
