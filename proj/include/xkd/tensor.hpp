#pragma once

// Dense double-precision tensors plus a small dynamic-graph reverse-mode
// autodiff engine. The op set is exactly what the classifiers and losses
// here need: 3x3/1x1 convolution, group norm, pooling, bilinear resize,
// token projections and multi-head self-attention, and the fused loss
// kernels. Graphs are rebuilt per batch; creation order doubles as a valid
// topological order for the backward sweep.
//
// Everything runs single-threaded in double precision so that a run is a
// pure function of its seed: two executions give bit-identical weights.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "xkd/common.hpp"

namespace xkd {

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0);
    static Tensor scalar(double x);
    static Tensor from(std::vector<int> s, std::vector<double> data);

    int64_t size() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    double& at2(int a, int b) { return v[static_cast<size_t>(a) * dim(1) + b]; }
    double at2(int a, int b) const { return v[static_cast<size_t>(a) * dim(1) + b]; }
    double& at4(int n, int c, int h, int w) {
        return v[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }
    double at4(int n, int c, int h, int w) const {
        return v[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }

    bool all_finite() const;
    std::string shape_str() const;
};

int64_t numel(const std::vector<int>& shape);

// ---------------------------------------------------------------------------
// Autodiff graph
// ---------------------------------------------------------------------------

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    int64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pulls node.grad into parents

    Tensor& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& val() const { return node_->value; }
    Tensor& val() { return node_->value; }
    Tensor& grad() { return node_->ensure_grad(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    std::shared_ptr<Node> node() const { return node_; }

    double item() const;

private:
    friend Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn);
    std::shared_ptr<Node> node_;
};

// Runs the reverse sweep from a scalar loss; accumulates into .grad of every
// reachable node that requires grad.
void backward(const Var& loss);

bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// ---------------------------------------------------------------------------
// Ops. Shapes are validated; mismatches throw.
// ---------------------------------------------------------------------------

Var constant(Tensor t);

Var add(const Var& a, const Var& b);           // same shape
Var sub(const Var& a, const Var& b);           // same shape
Var mul(const Var& a, const Var& b);           // same shape
Var affine(const Var& x, double k, double c);  // k*x + c elementwise
Var relu(const Var& x);
Var vsigmoid(const Var& x);

// x:(N,Cin,H,W)  w:(Cout,Cin,k,k) k in {1,3}, stride 1, 'same' padding.
// bias may be an undefined Var for bias-free convolution.
Var conv2d(const Var& x, const Var& w, const Var& bias);
Var avg_pool2(const Var& x);                                       // (N,C,H,W)->(N,C,H/2,W/2)
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var global_avg_pool(const Var& x);                                 // (N,C,H,W)->(N,C)
Var linear(const Var& x, const Var& w, const Var& bias);           // (N,F)x(out,in)+(out)
Var concat_cols(const Var& a, const Var& b);                       // (N,F1)+(N,F2)->(N,F1+F2)
Var mul_channel(const Var& x, const Var& s);                       // (N,C,H,W)*(C)
Var mul_mask(const Var& x, const Var& m);                          // (N,C,H,W)*(N,1,H,W)
Var resize_bilinear(const Var& x, int out_h, int out_w);           // half-pixel centers
Var to_tokens(const Var& x);                                       // (N,C,H,W)->(N,H*W,C)
Var from_tokens(const Var& x, int h, int w);                       // inverse of to_tokens
Var token_proj(const Var& x, const Var& w);                        // (N,S,C)x(C,Co)->(N,S,Co)
Var mhsa(const Var& q, const Var& k, const Var& v, int heads);     // (N,S,C) each
Var reshape(const Var& x, std::vector<int> shape);                 // same element count
Var sum_channel_sq(const Var& x);                                  // (N,C,H,W)->(N,H*W)
Var l2_normalize_rows(const Var& x, double eps = 1e-12);           // zero row -> zero row
Var mean_rowsum(const Var& x);                                     // mean over rows of row-sums -> scalar
Var mse(const Var& a, const Var& b);                               // scalar
Var scale(const Var& x, double k);

// Fused classification losses. labels index the class axis; weights are
// per-class constants applied to the hard term only.
Var weighted_ce_loss(const Var& logits, const std::vector<int>& labels,
                     const std::array<double, 2>& class_weights);
// T^2 * mean_i KL(softmax(teacher_i/T) || softmax(student_i/T)); teacher
// logits are plain values, no gradient path.
Var kd_kl_loss(const Var& student_logits, const Tensor& teacher_logits, double temperature);

// Plain (non-graph) numeric helpers.
std::vector<double> softmax_row(const double* z, int n);
Tensor softmax_rows(const Tensor& logits);
// Same sampling rule as the resize_bilinear op, without building a graph.
Tensor resize_bilinear_value(const Tensor& x, int out_h, int out_w);

}  // namespace xkd
