// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major f64 tensors that record a reverse-mode differentiation graph
// as operations are applied (define-by-run).
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ctrlfuse::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// One recorded value. Parents are created before children, so `seq` orders
/// any graph topologically.
struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient arrives
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<double>& grad_buffer();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    /// Direct write access; only meaningful on leaves (parameters, inputs).
    std::span<double> mutable_data() { return node_->data; }
    std::vector<double> to_vector() const { return node_->data; }

    bool has_grad() const { return !node_->grad.empty(); }
    /// Gradient buffer; all zeros when no gradient has arrived yet.
    std::vector<double> grad() const;
    void zero_grad() { node_->grad.clear(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool value) { node_->requires_grad = value; }

    double item() const;

    /// Fresh leaf holding a copy of the values, detached from any graph.
    Tensor detach() const;

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Whether new operations record backward closures on this thread.
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

/// Nodes reachable from `root` that take part in differentiation, parents
/// before children.
std::vector<Node*> topological_order(const Tensor& root);

struct BackwardStats {
    std::size_t nodes_visited = 0;
};

/// Accumulate d(loss)/d(leaf) into every requires_grad tensor reachable from
/// `loss`. Throws ContractError unless `loss` holds exactly one element.
BackwardStats backward(const Tensor& loss);

namespace detail {

/// Build an op result. The closure is kept only when gradients are enabled
/// and some parent requires them.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> parents,
                   const char* op, std::function<void(Node&)> backward_fn);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
                   const char* op, std::function<void(Node&)> backward_fn);

}  // namespace detail

}  // namespace ctrlfuse::ad
