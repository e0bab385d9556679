#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ckda/tensor.hpp"

namespace ckda {

// Reverse-mode autodiff on a dynamically built tape. Nodes hold a value,
// a lazily allocated gradient buffer, and a closure that pushes the node's
// gradient into its parents. Graphs are rebuilt every forward pass.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backfn;

    Tensor& grad_buf() {
        if (grad.empty()) grad = Tensor(value.shape());
        return grad;
    }
};

Var make_leaf(Tensor value, bool requires_grad = true);
Var make_const(Tensor value);

// Thread-local gradient mode; frozen-model forwards run with it off so no
// tape is recorded.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Backpropagate from a scalar root. Accumulates into Node::grad of every
// reachable node with requires_grad.
void backward(const Var& root);

namespace ag {

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var affine(const Var& x, double m, double c);  // m*x + c
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var gelu(const Var& x);

// linear algebra
Var linear(const Var& x, const Var& w, const Var& b);    // x: (...,K), w: (K,N), b: (N) or null
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);  // 2-D
Var bmm(const Var& a, const Var& b);                     // (B,M,K)x(B,K,N)

// structure
Var reshape(const Var& x, Shape shape);
Var permute_axes(const Var& x, const std::vector<int>& perm);
Var slice_last(const Var& x, int start, int len);
Var concat0(const Var& a, const Var& b);
Var gather_rows(const Var& x, std::vector<int> idx);
Var select_row(const Var& x, int t);                     // (B,T,D) -> (B,D)
Var prepend_row(const Var& x, const Var& row);           // (B,T,D),(D) -> (B,T+1,D)
Var add_rows(const Var& x, const Var& rows);             // (B,T,D)+(T,D)

// tokenization (lossless pixel shuffle)
Var patchify(const Var& images, int patch);                          // (B,H,W,C) -> (B,M,Dtok)
Var depatchify(const Var& tokens, int h, int w, int c, int patch);   // inverse

// normalization & regularization
Var softmax_last(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var instance_norm(const Var& x, double eps);  // (B,M,C): per (sample,channel) over M
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps);
Var dropout(const Var& x, double rate, bool training, Rng& rng);

// reductions & losses
Var mean_all(const Var& x);
Var l1_mean(const Var& a, const Var& b);
Var kl_rows_mean(const Var& p, const Var& q);
Var cross_entropy(const Var& logits, const std::vector<int>& labels);
Var l2_normalize_rows(const Var& x);
Var rows_l2_dist(const Var& a, const Var& b);  // (R,D),(R,D) -> (R)

}  // namespace ag

}  // namespace ckda
