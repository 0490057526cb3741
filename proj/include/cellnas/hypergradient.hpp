#pragma once

#include <functional>
#include <span>
#include <vector>

#include "cellnas/tensor.hpp"

namespace cellnas {

enum class Split { Train, Val };

// Evaluates the loss of `split` at the current contents of the weight and
// architecture tensors and back-propagates into their (pre-zeroed) grads.
// Returns the loss value.
using LossOracle = std::function<double(Split)>;

struct Hypergradient {
    std::vector<double> grad;        // estimate of d L_val(W*(alpha), alpha) / d alpha
    std::vector<double> direct;      // grad_alpha L_val at W (first order) or W' (second order)
    std::vector<double> correction;  // finite-difference mixed-Hessian term (second order only)
    double val_loss = 0.0;
    double train_loss = 0.0;
    double epsilon = 0.0;
    bool degenerate = false;  // |v| too small, correction skipped
};

inline constexpr double kDegenerateNorm = 1e-12;

// Treats the weights as constants: grad_alpha L_val(W, alpha).
Hypergradient first_order_hypergradient(const LossOracle& oracle, std::span<Tensor> weights, Tensor alpha);

// One-virtual-step estimate with a central finite-difference mixed
// Hessian-vector product:
//   W' = W - eta grad_W L_tr(W)
//   v  = grad_W' L_val(W'),  eps = eps_scale / |v|
//   h  = grad_alpha L_val(W') - eta (grad_alpha L_tr(W + eps v) - grad_alpha L_tr(W - eps v)) / (2 eps)
// The weights are restored bit-for-bit before returning.
Hypergradient second_order_hypergradient(const LossOracle& oracle, std::span<Tensor> weights, Tensor alpha,
                                         double eta, double eps_scale);

}  // namespace cellnas
