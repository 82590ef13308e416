#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pdiff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
};

/// Dense row-major tensor. Value-semantic handle over shared storage; copies
/// alias, clone() makes a deep copy.
class Tensor {
public:
    Tensor() : impl_(std::make_shared<TensorData>()) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : impl_(std::make_shared<TensorData>()) {
        impl_->shape = std::move(shape);
        impl_->values.assign(numel(impl_->shape), 0.0);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : impl_(std::make_shared<TensorData>()) {
        if (numel(shape) != values.size()) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        }
        impl_->shape = std::move(shape);
        impl_->values = std::move(values);
        impl_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::initializer_list<double> values, bool requires_grad = false)
        : Tensor(std::move(shape), std::vector<double>(values), requires_grad) {}

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.values()) x = v;
        return t;
    }

    const Shape& shape() const { return impl_->shape; }
    std::size_t size() const { return impl_->values.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rank() const { return impl_->shape.size(); }

    std::vector<double>& values() { return impl_->values; }
    const std::vector<double>& values() const { return impl_->values; }
    double* data() { return impl_->values.data(); }
    const double* data() const { return impl_->values.data(); }

    double item() const {
        if (size() != 1) {
            throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
        }
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool has_grad() const { return !impl_->grad.empty(); }

    /// Gradient buffer, allocated zeroed on first use.
    std::vector<double>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
        return impl_->grad;
    }
    const std::vector<double>& grad() const {
        if (impl_->grad.empty()) {
            static const std::vector<double> empty;
            return empty;
        }
        return impl_->grad;
    }

    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    Tensor clone() const {
        Tensor t;
        t.impl_->shape = impl_->shape;
        t.impl_->values = impl_->values;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    const std::shared_ptr<TensorData>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorData> impl_;
};

/// Records primitive operations in execution order (already topological) so a
/// single reverse sweep yields exact gradients.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }
    std::size_t size() const { return nodes_.size(); }

    void record(std::string op, std::shared_ptr<TensorData> output, std::function<void()> backward) {
        nodes_.push_back(Node{std::move(op), std::move(backward)});
        produced_.insert(output.get());
        outputs_.push_back(std::move(output));
    }

    bool produced(const TensorData* t) const { return produced_.count(t) > 0; }

    void clear() {
        nodes_.clear();
        outputs_.clear();
        produced_.clear();
    }

    /// Reverse sweep from a scalar loss; the tape is consumed.
    void backward(Tensor& loss) {
        if (loss.size() != 1) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(loss.shape()));
        }
        if (!produced(loss.impl().get())) {
            throw std::invalid_argument("backward: loss is detached from this tape");
        }
        loss.grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward();
        }
        clear();
    }

private:
    struct Node {
        std::string op;
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::shared_ptr<TensorData>> outputs_;
    std::unordered_set<const TensorData*> produced_;
    bool recording_ = true;
};

inline void backward(Tape& tape, Tensor loss) { tape.backward(loss); }

namespace detail {

inline std::vector<double>& grad_of(const std::shared_ptr<TensorData>& t) {
    if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
    return t->grad;
}

[[noreturn]] inline void shape_error(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

}  // namespace detail

}  // namespace pdiff
