#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mc3d/tensor.hpp"

namespace mc3d {

// Reverse-mode autodiff over Tensor values. Graphs are built eagerly by the
// op functions below and differentiated by backward(). Construction and
// backward are single-threaded per graph; Tensors are immutable once a node
// holds them.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated, same shape/dtype as value
    bool requires_grad = false;
    uint64_t seq = 0;           // creation order; fixes gradient accumulation order
    const char* op = "leaf";
    const char* tag = nullptr;  // optional marker set by loss builders
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& grad_buffer();  // zero-initialized on first use
};

// Lightweight value-semantics handle to a graph node.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad);

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& grad() { return node_->grad_buffer(); }
    const Tensor& grad() const { return node_->grad_buffer(); }
    bool requires_grad() const { return node_->requires_grad; }
    const char* op() const { return node_->op; }
    void zero_grad();
    void set_tag(const char* tag) { node_->tag = tag; }

    NodePtr node() const { return node_; }
    Node* operator->() const { return node_.get(); }

private:
    NodePtr node_;
};

// probability clamp applied before logs in the loss formulas
inline constexpr double kProbEps = 1e-7;

// elementwise, same shape
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
// scalar variants
Var add_scalar(Var a, double c);
Var mul_scalar(Var a, double c);
Var rsub_scalar(double c, Var a);  // c - a
Var neg(Var a);
// unary
Var relu(Var a);
Var sigmoid(Var a);
Var log(Var a);  // input clamped below at kProbEps, identically in value and grad
Var exp(Var a);
Var clamp(Var a, double lo, double hi);
// reductions
Var sum(Var a);
Var mean(Var a);
// structure
Var reshape(Var a, std::vector<int64_t> shape);
Var transpose2d(Var a);
Var gather_rows(Var a, std::vector<int64_t> rows);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, int64_t lo, int64_t hi);
// linear algebra / conv
Var matmul(Var a, Var b);                 // [r,k] x [k,c] -> [r,c]
Var conv2d(Var x, Var w, Var b);          // x [Cin,H,W], w [Cout,Cin,kh,kw] (odd kernels,
                                          // zero 'same' padding, stride 1), b [Cout]
Var upsample2x(Var x);                    // nearest neighbor [C,H,W] -> [C,2H,2W]
Var maxpool2x(Var x);                     // [C,H,W] -> [C,H/2,W/2]
Var pairwise_distance(Var a, Var b);      // [P,E],[Q,E] -> [P,Q] euclidean

// Accumulates d(root)/d(node) into every reachable node with requires_grad.
// root must be scalar. Gradients add up across calls; zero them between
// backward passes for fresh values.
void backward(const Var& root);

struct GradCheckReport {
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double tolerance = 0.0;
    bool pass = false;
    std::vector<double> rel_err;  // per coordinate of the checked point
};

// Central finite differences against the analytic gradient of f at point.
// point must be f64; f must build a scalar graph from the given leaf.
GradCheckReport grad_check(const std::function<Var(Var)>& f, const Tensor& point,
                           double step = 1e-5, double tolerance = 1e-4);

}  // namespace mc3d
