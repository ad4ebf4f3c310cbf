#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mteeg/errors.hpp"

namespace mteeg {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

/// Dense row-major tensor of 64-bit floats with an optional gradient buffer.
///
/// Tensors double as nodes of a dynamically built computation graph: ops
/// record their inputs in `parents` and a closure in `backward_fn` that
/// propagates `grad` into the parents. Gradient accumulation is additive;
/// callers zero grads between steps.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // same size as data iff requires_grad, else empty
    bool requires_grad = false;

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;

    static TensorPtr create(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr from_data(std::vector<std::int64_t> shape, std::vector<double> values,
                               bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);
    static TensorPtr zeros_like(const Tensor& other);

    std::int64_t size() const noexcept { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rank() const noexcept { return static_cast<std::int64_t>(shape.size()); }
    std::int64_t dim(std::size_t axis) const { return shape.at(axis); }

    double& at(std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
    double at(std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }
    double& at(std::int64_t i, std::int64_t j) {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }
    double at(std::int64_t i, std::int64_t j) const {
        return data[static_cast<std::size_t>(i * shape[1] + j)];
    }

    double item() const;

    void set_requires_grad(bool value);
    void zero_grad();
    void accumulate_grad(const std::vector<double>& g);

    /// Reverse-mode sweep from this node. Scalar outputs seed with 1; larger
    /// outputs require an explicit seed of matching size.
    void backward();
    void backward(const std::vector<double>& seed);

    /// Drops graph edges (parents and closures) reachable from this node.
    void detach_graph();

private:
    std::vector<Tensor*> topo_order();
};

std::int64_t shape_product(const std::vector<std::int64_t>& shape);

/// Named model parameter. Frozen parameters never receive optimizer updates.
struct Parameter {
    TensorPtr value;
    bool frozen = false;
    std::string name;

    Parameter() = default;
    Parameter(TensorPtr v, bool is_frozen, std::string param_name)
        : value(std::move(v)), frozen(is_frozen), name(std::move(param_name)) {}
};

}  // namespace mteeg
