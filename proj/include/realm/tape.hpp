// Reverse-mode autodiff tape.
//
// Forward ops append nodes in execution order; backward() seeds the scalar
// loss with grad 1 and sweeps the tape in reverse, invoking each node's
// hand-written backward closure. Intermediate values and grads are released
// as soon as the sweep passes them so peak memory stays near one forward
// pass. Leaves (parameters, inputs) keep their grads for the optimizer.

#pragma once

#include <array>
#include <deque>
#include <functional>
#include <initializer_list>

#include "realm/tensor.hpp"

namespace realm {

template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily during backward
        std::array<Node*, 5> parent{};
        int n_parent = 0;
        std::function<void(Tape&, Node&)> back;  // empty for leaves / no-grad paths
        const char* op = "leaf";
        bool needs_grad = false;
        bool is_leaf = true;
    };

    explicit Tape(bool grad_enabled = true) : grad_on_(grad_enabled) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const { return grad_on_; }
    size_t size() const { return nodes_.size(); }

    Node* leaf(Tensor<T> v, bool needs_grad, const char* name = "leaf") {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(v);
        n.op = name;
        n.needs_grad = needs_grad && grad_on_;
        n.is_leaf = true;
        return &n;
    }

    Node* make(Tensor<T> v, const char* op, std::initializer_list<Node*> parents,
               std::function<void(Tape&, Node&)> back) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(v);
        n.op = op;
        n.is_leaf = false;
        for (Node* p : parents) {
            if (n.n_parent >= 5) fail("tape: too many parents");
            n.parent[n.n_parent++] = p;
            if (p && p->needs_grad) n.needs_grad = true;
        }
        if (grad_on_ && n.needs_grad) n.back = std::move(back);
        return &n;
    }

    // Accumulation target for a node's gradient, allocated on first touch.
    Tensor<T>& grad_of(Node* n) {
        if (n->grad.data.empty()) n->grad = Tensor<T>::zeros(n->value.shape);
        return n->grad;
    }

    void backward(Node* loss) {
        if (!grad_on_) fail("tape: backward() on a no-grad tape");
        if (!loss->value.is_scalar()) fail("tape: loss must be a scalar, got shape " + shape_str(loss->value.shape));
        if (!std::isfinite(static_cast<double>(loss->value[0]))) {
            // name the op that first produced a non-finite value
            for (Node& n : nodes_) {
                if (!n.value.all_finite())
                    fail(std::string("tape: non-finite loss; first non-finite value produced by op '") + n.op + "'");
            }
            fail("tape: non-finite loss (source op not identified)");
        }
        loss->grad = Tensor<T>::scalar(T(1));
        bool seen_loss = false;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = *it;
            if (&n == loss) seen_loss = true;
            if (!seen_loss) continue;  // nodes recorded after the loss are not its ancestors
            if (!n.needs_grad || n.grad.data.empty()) continue;
            if (n.back) n.back(*this, n);
            if (!n.is_leaf) {
                n.value.release();
                n.grad.release();
                n.back = nullptr;
            }
        }
    }

private:
    std::deque<Node> nodes_;
    bool grad_on_;
};

template <typename T>
using NodePtr = typename Tape<T>::Node*;

}  // namespace realm
