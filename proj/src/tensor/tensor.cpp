#include "otok/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace otok {

namespace {
thread_local bool g_grad_enabled = true;
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) {
            os << ", ";
        }
        os << shape[i];
    }
    os << ')';
    return os.str();
}

Tensor Tensor::from(Shape shape, std::vector<Real> values) {
    for (auto d : shape) {
        if (d <= 0) {
            throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
        }
    }
    if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
    }
    for (Real v : values) {
        if (!std::isfinite(v)) {
            throw NumericFault("non-finite value in tensor constructor");
        }
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    return from_node(std::move(node));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, Real value) {
    const auto n = shape_numel(shape);
    return from(std::move(shape), std::vector<Real>(static_cast<std::size_t>(n), value));
}

Tensor Tensor::scalar(Real value) { return from({}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const {
    if (!node_) {
        throw Error("use of undefined tensor");
    }
    return node_->shape;
}

std::int64_t Tensor::dim(std::int64_t axis) const {
    const auto r = rank();
    if (axis < 0) {
        axis += r;
    }
    if (axis < 0 || axis >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return shape()[static_cast<std::size_t>(axis)];
}

std::span<const Real> Tensor::data() const {
    if (!node_) {
        throw Error("use of undefined tensor");
    }
    return node_->value;
}

Real Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
}

Real Tensor::at(std::initializer_list<std::int64_t> index) const {
    const auto& s = shape();
    if (index.size() != s.size()) {
        throw ShapeError("index rank mismatch for shape " + shape_str(s));
    }
    std::int64_t flat = 0;
    std::size_t k = 0;
    for (auto i : index) {
        if (i < 0 || i >= s[k]) {
            throw ShapeError("index out of range for shape " + shape_str(s));
        }
        flat = flat * s[k] + i;
        ++k;
    }
    return node_->value[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::is_leaf() const { return node_ && !node_->backward; }
std::string_view Tensor::kind() const { return node_ ? node_->kind : std::string_view{"undefined"}; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) {
        throw Error("set_requires_grad on non-leaf tensor");
    }
    node_->requires_grad = flag;
    return *this;
}

void Tensor::assign(std::span<const Real> values) const {
    if (!is_leaf()) {
        throw Error("assign on non-leaf tensor");
    }
    if (static_cast<std::int64_t>(values.size()) != numel()) {
        throw ShapeError("assign of " + std::to_string(values.size()) + " values to shape " +
                         shape_str(shape()));
    }
    std::copy(values.begin(), values.end(), node_->value.begin());
}

Tensor Tensor::detach() const {
    auto node = std::make_shared<detail::Node>();
    node->shape = shape();
    node->value = node_->value;
    return from_node(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Graph::Graph(const Tensor& output) {
    if (!output.defined()) {
        throw Error("graph of undefined tensor");
    }
    // Iterative post-order DFS over nodes that participate in differentiation.
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<const detail::Node*, std::size_t>> stack;
    const detail::Node* root = output.id();
    if (!root->requires_grad) {
        return;
    }
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            const detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order_.push_back(node);
        stack.pop_back();
    }
    keep_.push_back(output.node());
}

Tensor Gradients::operator[](const Tensor& leaf) const {
    auto it = by_node_.find(leaf.id());
    if (it == by_node_.end()) {
        return Tensor::zeros(leaf.shape());
    }
    return it->second;
}

bool Gradients::contains(const Tensor& leaf) const { return by_node_.count(leaf.id()) != 0; }

Gradients backward(const Tensor& output) {
    if (output.numel() != 1) {
        throw ShapeError("backward seed must be scalar, got shape " + shape_str(output.shape()));
    }
    Graph graph(output);
    Gradients result;
    const auto& order = graph.order_;
    if (order.empty()) {
        return result;
    }
    std::unordered_map<const detail::Node*, std::size_t> index;
    index.reserve(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        index.emplace(order[i], i);
    }
    std::vector<std::vector<Real>> grads(order.size());
    grads.back().assign(1, 1.0);

    std::vector<std::vector<Real>*> grad_in;
    for (std::size_t pos = order.size(); pos-- > 0;) {
        const detail::Node* node = order[pos];
        auto& g = grads[pos];
        if (g.empty()) {
            continue;
        }
        if (!node->backward) {
            if (node->inputs.empty()) {
                auto leaf = std::make_shared<detail::Node>();
                leaf->shape = node->shape;
                leaf->value = std::move(g);
                result.by_node_.emplace(node, Tensor::from_node(std::move(leaf)));
                continue;
            }
            throw Error("no adjoint rule registered for op '" + std::string(node->kind) + "'");
        }
        grad_in.assign(node->inputs.size(), nullptr);
        for (std::size_t i = 0; i < node->inputs.size(); ++i) {
            const detail::Node* in = node->inputs[i].get();
            if (!in->requires_grad) {
                continue;
            }
            auto& buf = grads[index.at(in)];
            if (buf.empty()) {
                buf.assign(in->value.size(), 0.0);
            }
            grad_in[i] = &buf;
        }
        node->backward(*node, g, grad_in);
        std::vector<Real>().swap(g);
    }
    return result;
}

Real check_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Real eps) {
    if (!(eps > 0.0)) {
        throw Error("check_gradient requires eps > 0");
    }
    Tensor leaf = x.detach();
    leaf.set_requires_grad(true);
    Tensor out = f(leaf);
    if (out.numel() != 1) {
        throw ShapeError("check_gradient needs a scalar function, got shape " + shape_str(out.shape()));
    }
    const Tensor analytic = backward(out)[leaf];

    const auto base = x.data();
    std::vector<Real> probe(base.begin(), base.end());
    Real worst = 0.0;
    NoGradGuard no_grad;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const Real saved = probe[i];
        probe[i] = saved + eps;
        const Real up = f(Tensor::from(x.shape(), probe)).item();
        probe[i] = saved - eps;
        const Real down = f(Tensor::from(x.shape(), probe)).item();
        probe[i] = saved;
        const Real numeric = (up - down) / (2.0 * eps);
        if (!std::isfinite(numeric)) {
            throw NumericFault("non-finite finite-difference estimate at coordinate " + std::to_string(i));
        }
        const Real a = analytic.data()[i];
        worst = std::max(worst, std::abs(a - numeric) / std::max<Real>(1.0, std::abs(a)));
    }
    return worst;
}

}  // namespace otok
