#pragma once
// Small reverse-mode autodiff over Tensor. A training step builds a fresh
// graph of shared_ptr nodes; backward() walks it once in reverse topological
// order. Parameters are long-lived nodes whose grads the optimizer consumes.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "eraser/tensor.hpp"

namespace eraser::ag {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first use, same shape as value
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.numel() == 0) grad = Tensor(value.shape());
        return grad;
    }
    void zero_grad() {
        if (grad.numel() != 0) grad.fill(0.0);
    }
};

// When disabled, ops produce leaf nodes with no history; forward cost only.
bool& grad_enabled();

struct NoGradGuard {
    NoGradGuard() : prev_(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev_; }

private:
    bool prev_;
};

Var constant(Tensor v);
Var make_param(Tensor v);
Var detach(const Var& v);  // same value, no history

// elementwise (same shape)
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp_v(const Var& a);
Var log_v(const Var& a);
Var tanh_v(const Var& a);
Var relu(const Var& a);
Var square(const Var& a);

// x [B,in], W [out,in], b [out] -> [B,out]
Var linear(const Var& x, const Var& W, const Var& b);

// x [N,C,H,W], W [OC,C,KH,KW], b [OC] -> [N,OC,OH,OW] (stride 1, valid)
Var conv2d(const Var& x, const Var& W, const Var& b);

// x [N,C,H,W] -> [N,C,H/2,W/2]
Var maxpool2(const Var& x);

// [N, d0, d1, ...] -> [N, d0*d1*...]
Var flatten(const Var& x);

// column ranges of a [B,D] matrix
Var slice_cols(const Var& x, int c0, int c1);
Var concat_cols(const Var& a, const Var& b);

// y[r,c] = x[r,c]*s[c] + t[c] with constant per-column s, t (e.g. feature
// standardization); gradient flows through x only
Var rows_affine(const Var& x, const std::vector<double>& s,
                const std::vector<double>& t);

// reductions
Var row_sum(const Var& x);  // [B,D] -> [B]
Var sum(const Var& x);      // -> scalar
Var mean(const Var& x);     // -> scalar

// weighted sum of a [B] vector with constant weights -> scalar
Var dot_const(const Var& x, const std::vector<double>& w);

// table [V,E], ids [B] -> [B,E]; grads accumulate into table rows
Var embedding(const Var& table, const std::vector<int>& ids);

Var log_softmax_rows(const Var& x);  // [B,C] -> [B,C]

// picks x[b, labels[b]] -> [B]
Var pick_rows(const Var& x, const std::vector<int>& labels);

// mean cross-entropy of logits [B,C] against labels
Var cross_entropy(const Var& logits, const std::vector<int>& labels);

void backward(const Var& root);  // root must be scalar

}  // namespace eraser::ag
