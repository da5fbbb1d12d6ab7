#pragma once

// Dense row-major float64 tensor and the reverse-mode tape it can record onto.
// Tensors are cheap handles (shape + shared buffer); treat them as immutable
// once produced by an op. A Tape is single-threaded and cleared per step.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "ssvos/errors.hpp"

namespace ssvos {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    return s.empty() ? "scalar" : os.str();
}

class Tape;

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(checked_numel(shape_), 0.0)) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(std::move(values))) {
        if (static_cast<int64_t>(data_->size()) != checked_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data()) v = dist(rng);
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

    std::vector<double>& data() { return *data_; }
    const std::vector<double>& data() const { return *data_; }
    double* ptr() { return data_->data(); }
    const double* ptr() const { return data_->data(); }
    const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

    double at(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    bool requires_grad() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    int node() const { return node_; }

    // Same buffer and tape node under a new shape; numel must be unchanged.
    Tensor reshaped(Shape shape) const {
        if (shape_numel(shape) != numel())
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                             " changes element count");
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    // Deep copy detached from any tape.
    Tensor clone() const {
        return Tensor(shape_, *data_);
    }

    bool all_finite() const {
        for (double v : *data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    friend class Tape;

    static int64_t checked_numel(const Shape& s) {
        for (int e : s)
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
        return shape_numel(s);
    }

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

// Reverse-mode tape. Nodes are recorded in execution order, which is a
// topological order by construction; backward walks them in reverse and runs
// only nodes whose gradient buffer was touched, so every reachable node is
// visited exactly once.
class Tape {
public:
    // Registers t as a differentiable leaf and returns a handle attached to
    // this tape. Leaves have no backward function; their gradients are read
    // back with grad().
    Tensor watch(const Tensor& t) {
        Tensor out = t;
        out.tape_ = this;
        out.node_ = add_node(t.numel(), nullptr);
        return out;
    }

    // Called by ops: makes `out` the product of a recorded node. The backward
    // closure is installed afterwards so it can capture the returned id.
    int attach_node(Tensor& out) {
        out.tape_ = this;
        out.node_ = add_node(out.numel(), nullptr);
        return out.node_;
    }

    void set_backward(int node, std::function<void(Tape&)> fn) {
        nodes_[static_cast<size_t>(node)].backward = std::move(fn);
    }

    int num_nodes() const { return static_cast<int>(nodes_.size()); }

    // Gradient buffer for a node, allocated (zeroed) on first touch.
    double* grad_buf(int node) {
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0);
        return g.data();
    }

    void backward(const Tensor& scalar_out) {
        if (scalar_out.tape_ != this || scalar_out.node_ < 0)
            throw ContractError("backward target is not attached to this tape");
        if (scalar_out.numel() != 1)
            throw ContractError("backward target must be a scalar, got shape " +
                                shape_str(scalar_out.shape()));
        grads_.assign(nodes_.size(), {});
        grad_buf(scalar_out.node_)[0] = 1.0;
        for (int i = scalar_out.node_; i >= 0; --i) {
            auto& n = nodes_[static_cast<size_t>(i)];
            if (!grads_[static_cast<size_t>(i)].empty() && n.backward) n.backward(*this);
        }
    }

    // Gradient of the last backward() w.r.t. a tensor on this tape.
    std::vector<double> grad(const Tensor& t) const {
        if (t.tape_ != this || t.node_ < 0)
            throw ContractError("grad() of a tensor not attached to this tape");
        const auto& g = grads_[static_cast<size_t>(t.node_)];
        if (g.empty()) return std::vector<double>(static_cast<size_t>(t.numel()), 0.0);
        return g;
    }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }

private:
    struct Node {
        int64_t numel;
        std::function<void(Tape&)> backward;
    };

    int add_node(int64_t numel, std::function<void(Tape&)> fn) {
        nodes_.push_back(Node{numel, std::move(fn)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

// Resolves the common tape of a set of op inputs (nullptr when none recorded).
inline Tape* common_tape(std::initializer_list<const Tensor*> ins) {
    Tape* tp = nullptr;
    for (const Tensor* t : ins) {
        if (!t->requires_grad()) continue;
        if (tp && t->tape() != tp)
            throw ContractError("op inputs recorded on two different tapes");
        tp = t->tape();
    }
    return tp;
}

} // namespace ssvos
