#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "multiref/tensor.hpp"

namespace multiref {

class Node;
using Var = std::shared_ptr<Node>;

/// One value in the computation tape. Parameters are long-lived leaf nodes;
/// intermediate nodes hold a backward closure that scatters into parents.
class Node {
public:
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::atomic<std::uint64_t> touch_count{0};
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
    void accumulate_grad(const Tensor& g);
    bool has_grad() const { return !grad.empty(); }
    void clear_grad() { grad = Tensor(); }
};

Var variable(Tensor value, bool requires_grad = true);
Var constant(Tensor value);

bool grad_enabled();

/// Disables tape recording in scope. Values still compute; touch counts still tick.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse pass from a scalar loss. Frees the tape as it goes.
void backward(const Var& loss);

// --- elementwise / broadcast ---------------------------------------------
// add/sub/mul broadcast numpy-style (right-aligned, size-1 dims stretch).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real s);
Var add_scalar(const Var& a, real s);
Var abs_op(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, real slope);
Var sigmoid(const Var& a);
Var exp_op(const Var& a);
Var detach(const Var& a);

// --- reductions / layout --------------------------------------------------
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_axis(const Var& a, int axis, bool keepdim);
Var reshape(const Var& a, std::vector<int> shape);
Var concat(const std::vector<Var>& xs, int axis);
Var stack_axis0(const std::vector<Var>& xs);

/// Softmax along `axis`. With `sorted_reduction` the exp-sum accumulates in
/// value order, which makes the result invariant to permutations along the
/// reduced axis at the bit level.
Var softmax(const Var& a, int axis, bool sorted_reduction = false);

// --- nn kernels -------------------------------------------------------------
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, real eps = 1e-5);
Var avg_pool2(const Var& x);
Var upsample_nearest2(const Var& x);

/// Bilinear sampling of x (N,C,H,W) at grid (N,Ho,Wo,2) coordinates in
/// [-1,1] (x then y), align_corners convention, border-clamp padding.
Var grid_sample(const Var& x, const Var& grid);

/// Batched 2x2 matrix inverse over the trailing two dims.
Var inv2x2(const Var& a);

/// Batched 2x2 matrix product over the trailing two dims (same leading dims).
Var matmul2x2(const Var& a, const Var& b);

/// Contiguous slice along one axis.
Var slice_axis(const Var& a, int axis, int start, int len);

/// Convex combination of K stacked features: masks (K,N,M,H,W) with M in
/// {1,C}, feats (K,N,C,H,W) -> (N,C,H,W). The K-term sum accumulates in value
/// order so reference permutations are bit-exact no-ops.
Var fuse_weighted_sum(const Var& masks, const Var& feats);

// --- broadcast helpers shared with plain-tensor code ------------------------
std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b);
Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape);

}  // namespace multiref
