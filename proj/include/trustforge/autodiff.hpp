#pragma once

// Reverse-mode automatic differentiation on flat float64 tensors.
//
// Every backward rule is itself built from graph ops, so gradients are
// ordinary nodes and can be differentiated again (needed by the critic
// gradient penalty and by attribution-regularized training). Piecewise
// linear ops (relu, clip, abs, dropout, maxpool) treat their selection
// masks as constants under differentiation.

#include "trustforge/tensor.hpp"

#include <functional>
#include <memory>

namespace trustforge::ad {

struct Node;
using Var = std::shared_ptr<Node>;

// builds gradient graphs for each input; entries with need[i]==0 may be null
using VjpFn =
    std::function<std::vector<Var>(const Var& self, const Var& g, const std::vector<char>& need)>;

struct Node {
    Shape shape;
    Array value;
    Array grad;  // accumulated by backward(); empty until then
    std::vector<Var> inputs;
    VjpFn vjp;   // null for leaves and constants
    const char* name = "leaf";

    bool is_scalar() const { return value.size() == 1; }
};

Var leaf(Shape shape, Array value);
Var leaf(const Tensor& t);
Var constant(Scalar v);
Var constant(Shape shape, Array value);  // fixed data, excluded from backward
Var full(const Shape& s, Scalar v);

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var add_scalar(const Var& a, Scalar s);
Var mul_scalar(const Var& a, Scalar s);
Var div0(const Var& a, const Var& b);  // a/b, exactly 0 where b == 0
Var recip(const Var& a);               // contract: no zero entries
Var exp_(const Var& a);
Var log_(const Var& a);                // contract: entries > 0
Var safe_sqrt(const Var& a);           // sqrt with subgradient 0 at 0
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, Scalar slope);
Var abs_(const Var& a);
Var square(const Var& a);
Var clip(const Var& a, Scalar lo, Scalar hi);
Var dropout_mask(const Var& a, Scalar p, Rng& rng);  // train-mode mask multiply

// structure
Var reshape(const Var& a, Shape s);
Var transpose(const Var& a);  // 2-D
Var matmul(const Var& a, const Var& b);
Var concat_cols(const Var& a, const Var& b);
Var slice_cols(const Var& a, Index c0, Index c1);
Var gather_rows(const Var& table, std::vector<Index> ids);
Var scatter_rows_add(const Var& g, std::vector<Index> ids, Index nrows);
Var select_class(const Var& x, std::vector<Index> labels);           // [N,C] -> [N]
Var scatter_class(const Var& v, std::vector<Index> labels, Index c); // [N] -> [N,C]
Var take_idx(const Var& x, std::shared_ptr<std::vector<Index>> idx, Shape out_shape);
Var put_idx_add(const Var& g, std::shared_ptr<std::vector<Index>> idx, Shape out_shape);
Var tile_mid(const Var& v, Index reps);  // [N,M] -> [N,reps*M], block copies
Var sum_mid(const Var& a, Index reps);   // [N,reps*M] -> [N,M], sums the copies

// reductions and broadcasts
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]
Var bcast_full(const Var& s, Shape shape);
Var sum_cols(const Var& a);              // [N,C] -> [N]
Var bcast_cols(const Var& v, Index c);   // [N] -> [N,C]
Var sum_rows(const Var& a);              // [N,C] -> [C]
Var bcast_rows(const Var& v, Index n);   // [C] -> [N,C]
Var max_all(const Var& a);               // -> [1], subgradient routed to first max
Var max_cols(const Var& a);              // [N,C] -> [N], first max per row
Var softmax_rows(const Var& a);          // rowwise stable softmax
Var softmax_vec(const Var& a);           // 1-D

// convolution (stride 1) and pooling; x [N,C,H,W], k [O,C,kh,kw]
enum class Pad { Valid, Same };
Var conv2d(const Var& x, const Var& k, Pad pad);
Var conv2d_igrad(const Var& g, const Var& k, Shape xshape, Pad pad);
Var conv2d_kgrad(const Var& x, const Var& g, Shape kshape, Pad pad);
Var maxpool2(const Var& x);  // 2x2 window, stride 2, even H and W

// engine
void backward(const Var& loss);                               // into all leaf grads
void backward(const Var& loss, const std::vector<Var>& wrt);  // into selected grads
std::vector<Var> gradients(const Var& loss, const std::vector<Var>& wrt);
Var grad_norm_node(const Var& output, const Var& input);      // differentiable ||grad||_2
void zero_grad(const std::vector<Var>& params);

}  // namespace trustforge::ad
