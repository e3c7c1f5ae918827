#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "mmfl/tensor.hpp"

namespace mmfl {

// Reverse-mode autodiff over a dynamically recorded tape.
//
// Each Var wraps a graph node holding its value, a lazily allocated gradient,
// its parents and a closure that routes the node's gradient to the parents.
// While grad recording is disabled (NoGradGuard) ops produce leaf nodes with
// no parents, so inference holds no tape and frees activations eagerly.

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer() {
        if (!grad.defined()) grad = Tensor::zeros(value.shape());
        return grad;
    }
};

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class Var {
public:
    Var() = default;

    explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad && grad_enabled();
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::vector<int>& shape() const { return node_->value.shape(); }
    std::shared_ptr<Node> node() const { return node_; }

    void zero_grad() {
        if (node_) node_->grad = Tensor();
    }

    // Backpropagate from this scalar through the recorded tape.
    void backward() const;

    static Var from_node(std::shared_ptr<Node> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<Node> node_;
};

// Build an op result node. When grad recording is off or no parent needs a
// gradient, parents and the backward closure are dropped.
inline Var make_op(Tensor value, std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(Node&)> backward_fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool need = false;
    if (grad_enabled()) {
        for (const auto& p : parents)
            if (p && p->requires_grad) need = true;
    }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Var::from_node(std::move(n));
}

// Accumulate t into the parent's gradient buffer.
inline void accumulate(const std::shared_ptr<Node>& parent, const Tensor& t) {
    if (!parent || !parent->requires_grad) return;
    Tensor& g = parent->grad_buffer();
    require(g.numel() == t.numel(), "gradient shape mismatch");
    double* gd = g.data();
    const double* td = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i) gd[i] += td[i];
}

}  // namespace mmfl
