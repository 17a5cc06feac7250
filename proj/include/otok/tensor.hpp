// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is an immutable handle to a graph node. Ops record their inputs and
// an adjoint rule whenever any input requires a gradient (and grad mode is on);
// backward() walks the recorded graph in reverse topological order.

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace otok {

using Real = double;
using Shape = std::vector<std::int64_t>;

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericFault : public Error {
public:
    using Error::Error;
};

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node;

// grad_in[i] is null when input i does not need a gradient.
using BackwardFn = std::function<void(const Node& self, std::span<const Real> grad_out,
                                      std::span<std::vector<Real>* const> grad_in)>;

struct Node {
    Shape shape;
    std::vector<Real> value;
    bool requires_grad = false;
    std::string_view kind = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    BackwardFn backward;
};

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<Real> values);
    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, Real value);
    static Tensor scalar(Real value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::int64_t dim(std::int64_t axis) const;
    std::int64_t rank() const { return static_cast<std::int64_t>(shape().size()); }
    std::int64_t numel() const { return shape_numel(shape()); }
    std::span<const Real> data() const;
    Real item() const;
    Real at(std::initializer_list<std::int64_t> index) const;

    bool requires_grad() const;
    bool is_leaf() const;
    std::string_view kind() const;

    // Only valid on leaves; used to mark parameters.
    Tensor& set_requires_grad(bool flag);

    // Overwrites a leaf's values in place (optimizer updates, checkpoint loads).
    // The leaf must not be referenced by a live graph that will be differentiated.
    void assign(std::span<const Real> values) const;

    // New leaf sharing no history with this tensor.
    Tensor detach() const;

    const detail::Node* id() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

    static Tensor from_node(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

class Gradients;
Gradients backward(const Tensor& output);

// Topologically ordered view of the subgraph reachable from an output.
class Graph {
public:
    explicit Graph(const Tensor& output);

    const std::vector<const detail::Node*>& nodes() const { return order_; }
    std::size_t size() const { return order_.size(); }

private:
    std::vector<const detail::Node*> order_;
    std::vector<std::shared_ptr<detail::Node>> keep_;
    friend class Gradients;
    friend Gradients backward(const Tensor& output);
};

class Gradients {
public:
    // Gradient for a leaf; zeros when the leaf was not reached.
    Tensor operator[](const Tensor& leaf) const;
    bool contains(const Tensor& leaf) const;

private:
    std::unordered_map<const detail::Node*, Tensor> by_node_;
    friend Gradients backward(const Tensor& output);
};

// d(output)/d(leaf) for every reachable leaf that requires grad.
Gradients backward(const Tensor& output);

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
Real check_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Real eps);

namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real offset);
Tensor softmax(const Tensor& a, std::int64_t axis);
Tensor log_softmax(const Tensor& a, std::int64_t axis);
Tensor layer_norm(const Tensor& a, std::int64_t axis, Real eps = 1e-5);
Tensor gelu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::int64_t>& perm);
Tensor transpose_last(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::int64_t axis);
Tensor slice(const Tensor& a, std::int64_t axis, std::int64_t begin, std::int64_t end);
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> rows);
// mask broadcasts against a as a suffix shape; true entries are replaced.
Tensor masked_fill(const Tensor& a, const std::vector<bool>& mask, const Shape& mask_shape, Real value);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_sum(const Tensor& a, std::int64_t axis, bool keepdim = false);
Tensor reduce_mean(const Tensor& a);
Tensor reduce_mean(const Tensor& a, std::int64_t axis, bool keepdim = false);
Tensor l2_normalize(const Tensor& a, std::int64_t axis, Real eps = 1e-12);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp(const Tensor& a, Real lo, Real hi);
// Forward value of `value`, gradient routed unchanged to `surrogate` (same shape).
Tensor straight_through(const Tensor& value, const Tensor& surrogate);

}  // namespace ops

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }

}  // namespace otok
