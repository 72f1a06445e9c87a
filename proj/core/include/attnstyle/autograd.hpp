#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "attnstyle/tensor.hpp"

namespace attnstyle::ag {

// Reverse-mode autodiff over Tensor. Each op returns a new node holding the
// forward value and a closure that scatters the node's gradient into its
// parents. Nodes are reference counted; a graph lives as long as someone
// holds its output.
class Node;
using Var = std::shared_ptr<Node>;

class Node {
public:
    Tensor value;
    Tensor grad;  // allocated lazily in backward()
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;  // reads this->grad, accumulates into parents

    explicit Node(Tensor v) : value(std::move(v)) {}
};

Var leaf(Tensor value, bool requires_grad);
inline Var constant(Tensor value) { return leaf(std::move(value), false); }

// Runs reverse accumulation from `root` (must be a scalar, numel == 1).
// Grads of all reachable nodes with requires_grad are populated.
void backward(const Var& root);

// Elementwise, same shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var abs(const Var& a);
Var tanh(const Var& a);

// [n,m] x [m,p] or batched [B,n,m] x [B,m,p].
Var matmul(const Var& a, const Var& b);
// Swaps the last two axes of a 2-D or 3-D tensor.
Var transpose_last2(const Var& a);
// Softmax over the last axis. `additive_mask`, if given, has the shape of the
// trailing two axes and is broadcast over leading batch axes before softmax.
Var softmax_lastdim(const Var& a, const Tensor* additive_mask = nullptr);

Var reshape(const Var& a, std::vector<int64_t> new_shape);
// out[i] = a[index[i]]; backward scatter-adds. `index` must cover valid offsets.
Var take(const Var& a, std::shared_ptr<const std::vector<int64_t>> index,
         std::vector<int64_t> out_shape);

// a: [..., d]; bias: [d], broadcast over all leading axes.
Var add_rowvec(const Var& a, const Var& bias);

Var mean_all(const Var& a);  // scalar
Var sum_all(const Var& a);   // scalar

inline Var l1_mean(const Var& a, const Var& b) { return mean_all(abs(sub(a, b))); }

// y = x @ W + b with x: [..., in], W: [in, out], b: [out] (b may be null).
Var linear(const Var& x, const Var& W, const Var& b);

}  // namespace attnstyle::ag
