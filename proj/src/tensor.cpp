// SPDX-License-Identifier: Apache-2.0
#include "ctrlfuse/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "ctrlfuse/errors.hpp"

namespace ctrlfuse::ad {
namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local bool t_grad_enabled = true;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         to_string(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (const auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::vector<double>& Node::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const auto n = ad::numel(shape);
    return Tensor(new_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    return Tensor(new_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

std::vector<double> Tensor::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
    return node_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
}

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->data, false)); }

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::vector<Node*> topological_order(const Tensor& root) {
    std::vector<Node*> nodes;
    if (!root.defined() || !root.requires_grad()) return nodes;
    std::unordered_set<const Node*> seen;
    std::vector<Node*> stack{&root.node()};
    seen.insert(stack.back());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return nodes;
}

BackwardStats backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
    BackwardStats stats;
    if (!loss.requires_grad()) return stats;
    const auto order = topological_order(loss);
    loss.node().grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        ++stats.nodes_visited;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    return stats;
}

namespace detail {
namespace {

template <typename Range>
Tensor make_result_impl(Shape shape, std::vector<double> data, const Range& parents, const char* op,
                        std::function<void(Node&)> backward_fn) {
#ifndef NDEBUG
    for (const double v : data)
        if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
#endif
    bool needs = false;
    if (t_grad_enabled)
        for (const auto& p : parents) needs = needs || (p.defined() && p.requires_grad());
    auto node = new_node(std::move(shape), std::move(data), needs);
    node->op = op;
    if (needs) {
        for (const auto& p : parents)
            if (p.defined()) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

}  // namespace

Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> parents, const char* op,
                   std::function<void(Node&)> backward_fn) {
    return make_result_impl(std::move(shape), std::move(data), parents, op, std::move(backward_fn));
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents, const char* op,
                   std::function<void(Node&)> backward_fn) {
    return make_result_impl(std::move(shape), std::move(data), parents, op, std::move(backward_fn));
}

}  // namespace detail
}  // namespace ctrlfuse::ad
