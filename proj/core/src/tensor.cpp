#include "mteeg/tensor.hpp"

#include <algorithm>
#include <unordered_set>
#include <utility>

namespace mteeg {

std::int64_t shape_product(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        n *= d;
    }
    return n;
}

TensorPtr Tensor::create(std::vector<std::int64_t> shape, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    for (std::int64_t d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor dims must be positive");
        }
    }
    const auto n = static_cast<std::size_t>(shape_product(shape));
    t->shape = std::move(shape);
    t->data.assign(n, 0.0);
    t->requires_grad = requires_grad;
    if (requires_grad) {
        t->grad.assign(n, 0.0);
    }
    return t;
}

TensorPtr Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> values,
                            bool requires_grad) {
    if (shape_product(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("data length does not match shape");
    }
    auto t = create(std::move(shape), requires_grad);
    t->data = std::move(values);
    return t;
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return from_data({1}, {value}, requires_grad);
}

TensorPtr Tensor::zeros_like(const Tensor& other) {
    return create(other.shape, other.requires_grad);
}

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("item() requires a single-element tensor");
    }
    return data[0];
}

void Tensor::set_requires_grad(bool value) {
    requires_grad = value;
    if (value) {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    } else {
        grad.clear();
    }
}

void Tensor::zero_grad() {
    if (requires_grad) {
        std::fill(grad.begin(), grad.end(), 0.0);
    }
}

void Tensor::accumulate_grad(const std::vector<double>& g) {
    if (!requires_grad) {
        return;
    }
    if (g.size() != grad.size()) {
        throw ShapeError("gradient size mismatch");
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        grad[i] += g[i];
    }
}

std::vector<Tensor*> Tensor::topo_order() {
    // Iterative post-order DFS; graphs can be a few thousand nodes deep.
    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(this, 0);
    visited.insert(this);
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Tensor* child = node->parents[next_child].get();
            ++next_child;
            if (child != nullptr && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

void Tensor::backward() {
    if (size() != 1) {
        throw ShapeError("backward() without a seed requires a scalar output");
    }
    backward({1.0});
}

void Tensor::backward(const std::vector<double>& seed) {
    if (!requires_grad) {
        throw StateError("backward() on a tensor that does not require gradients");
    }
    if (seed.size() != data.size()) {
        throw ShapeError("backward seed size mismatch");
    }
    auto order = topo_order();
    accumulate_grad(seed);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor* node = *it;
        if (node->backward_fn && node->requires_grad) {
            node->backward_fn(*node);
        }
    }
}

void Tensor::detach_graph() {
    auto order = topo_order();
    for (Tensor* node : order) {
        node->parents.clear();
        node->backward_fn = nullptr;
    }
}

}  // namespace mteeg
