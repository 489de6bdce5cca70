#pragma once

#include <vector>

#include "darc/autodiff.hpp"

namespace darc {

// Differentiable graph operations. Feature maps are {N,C,H,W}; per-sample
// channel statistics {N,C}; per-channel parameters {C}.

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);   // -> {1}
Var mean(const Var& a);  // -> {1}
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);

// y = w (*) x + b, w {Cout,Cin,k,k}, b {Cout}; zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);

// x {N,F}, w {G,F}, b {G} -> {N,G}
Var linear(const Var& x, const Var& w, const Var& b);

Var mean_hw(const Var& x);                            // {N,C,H,W} -> {N,C}
Var std_hw(const Var& x, const Var& mu, double eps);  // sqrt(var+eps) -> {N,C}
Var mean_nhw(const Var& x);                           // {N,C,H,W} -> {C}
Var std_nhw(const Var& x, const Var& mu, double eps); // -> {C}

Var broadcast_cn(const Var& v, int n);                       // {C} -> {N,C}
Var normalize_nc(const Var& x, const Var& mu, const Var& sigma);  // (x-mu)/sigma
Var channel_affine(const Var& x, const Var& gamma, const Var& beta);

Var concat_c(const std::vector<Var>& xs);   // {N,Ci,H,W} along C
Var concat_nc(const std::vector<Var>& xs);  // {N,Ci} along dim 1

Var upsample2x(const Var& x);  // bilinear, factor 2

Var rgb_to_gray(const Var& x);  // {N,3,H,W} -> {N,1,H,W}, BT.601 weights

// Redistributes the values of `values_from` into the per-channel rank order
// of `order_from` (constant). Gradients flow through the sorted values.
Var sort_match(const Var& values_from, const Tensor& order_from);

// softplus(softplus^-1(delta) + m); returns delta bitwise where m == 0.
Var softplus_shift(const Var& delta, const Var& m);

// Mean binary cross entropy of probabilities p against soft targets t.
Var bce_probs(const Var& p, const Tensor& t);
// Mean BCE-with-logits of z against targets t (same shape), numerically safe.
Var bce_logits(const Var& z, const Tensor& t);
// Mean squared error between same-shaped tensors.
Var mse(const Var& a, const Var& b);

}  // namespace darc
