#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dualseg/errors.hpp"

namespace dualseg {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

enum class Mode { train, eval };

// One vertex of the autodiff graph. Leaves have no backward function.
// Interior nodes hold their inputs and a closure that reads `grad` and
// accumulates into the inputs' grads.
template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    // Returns the gradient buffer, zero-filled on first use.
    std::vector<T>& grad_buffer() {
        if (grad.empty()) {
            grad.assign(value.size(), T(0));
        }
        return grad;
    }
};

// Thread-local switch: while disabled, ops record no graph.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Dense row-major tensor. Copies share the underlying node (handle
// semantics), matching how a tensor is referenced from several graph nodes.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t dim(int axis) const;
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->value.size()); }

    std::span<const T> data() const { return node_->value; }
    // In-place access; only meaningful for leaves (parameters, inputs).
    std::span<T> mutable_data() { return node_->value; }
    T operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }
    T item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }
    bool is_leaf() const { return !node_->backward; }

    // Copy of the values as a new leaf, cut from the graph.
    Tensor detach() const;
    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->value.begin(), node_->value.end());
        return Tensor<U>(node_->shape, std::move(out), node_->requires_grad);
    }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

// Topological record of the ops reachable from a root, inputs first.
template <typename T>
class Tape {
public:
    static Tape record(const Tensor<T>& root);

    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node<T>*>& nodes() const { return nodes_; }

private:
    std::vector<Node<T>*> nodes_;
};

// Reverse-mode sweep from a scalar loss. Gradients accumulate (+=) into
// every requires_grad tensor reachable from `loss`. The interior of the
// graph is consumed: closures and intermediate grads are released.
template <typename T>
void backward(const Tensor<T>& loss);

// Builds an op result. Checks finiteness and, when grad mode is on and any
// input requires grad, links the node into the graph with `backward_fn`.
// Undefined inputs (optional operands) are skipped.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> backward_fn);

// Accumulates `g` into `node`'s gradient if it participates in the graph.
template <typename T>
void accumulate_grad(Node<T>& node, std::span<const T> g);

}  // namespace dualseg
