#include "cellnas/hypergradient.hpp"

#include <cmath>

#include "cellnas/errors.hpp"

namespace cellnas {

namespace {

void zero_grads(std::span<Tensor> weights, Tensor& alpha) {
    for (auto& w : weights) w.zero_grad();
    alpha.zero_grad();
}

std::vector<double> grad_copy(const Tensor& t) {
    const auto g = t.grad();
    return {g.begin(), g.end()};
}

std::vector<std::vector<double>> snapshot(std::span<Tensor> weights) {
    std::vector<std::vector<double>> out;
    for (const auto& w : weights) out.emplace_back(w.data().begin(), w.data().end());
    return out;
}

void restore(std::span<Tensor> weights, const std::vector<std::vector<double>>& saved) {
    for (std::size_t i = 0; i < weights.size(); ++i) std::copy(saved[i].begin(), saved[i].end(), weights[i].data().begin());
}

// weights = saved + coeff * direction
void displace(std::span<Tensor> weights, const std::vector<std::vector<double>>& saved,
              const std::vector<std::vector<double>>& direction, double coeff) {
    if (coeff == 0.0) {
        restore(weights, saved);
        return;
    }
    for (std::size_t i = 0; i < weights.size(); ++i) {
        auto w = weights[i].data();
        for (std::size_t k = 0; k < w.size(); ++k) w[k] = saved[i][k] + coeff * direction[i][k];
    }
}

Hypergradient second_order_impl(const LossOracle& oracle, std::span<Tensor> weights, Tensor& alpha, double eta,
                                double eps_scale, const std::vector<std::vector<double>>& original);

}  // namespace

Hypergradient first_order_hypergradient(const LossOracle& oracle, std::span<Tensor> weights, Tensor alpha) {
    Hypergradient h;
    zero_grads(weights, alpha);
    h.val_loss = oracle(Split::Val);
    h.direct = grad_copy(alpha);
    h.grad = h.direct;
    return h;
}

Hypergradient second_order_hypergradient(const LossOracle& oracle, std::span<Tensor> weights, Tensor alpha,
                                         double eta, double eps_scale) {
    if (!(eps_scale > 0.0)) throw ParameterError("second_order_hypergradient: eps_scale must be positive");
    const auto original = snapshot(weights);
    try {
        return second_order_impl(oracle, weights, alpha, eta, eps_scale, original);
    } catch (...) {
        restore(weights, original);
        throw;
    }
}

namespace {

Hypergradient second_order_impl(const LossOracle& oracle, std::span<Tensor> weights, Tensor& alpha, double eta,
                                double eps_scale, const std::vector<std::vector<double>>& original) {
    Hypergradient h;

    // Virtual step.
    zero_grads(weights, alpha);
    h.train_loss = oracle(Split::Train);
    std::vector<std::vector<double>> grad_w;
    for (const auto& w : weights) grad_w.push_back(grad_copy(w));
    displace(weights, original, grad_w, -eta);

    zero_grads(weights, alpha);
    h.val_loss = oracle(Split::Val);
    h.direct = grad_copy(alpha);
    std::vector<std::vector<double>> v;
    double norm2 = 0.0;
    for (const auto& w : weights) {
        v.push_back(grad_copy(w));
        for (double x : v.back()) norm2 += x * x;
    }
    const double norm = std::sqrt(norm2);

    if (!(norm >= kDegenerateNorm)) {
        restore(weights, original);
        h.degenerate = true;
        h.grad = h.direct;
        h.correction.assign(h.direct.size(), 0.0);
        return h;
    }

    h.epsilon = eps_scale / norm;
    displace(weights, original, v, h.epsilon);
    zero_grads(weights, alpha);
    oracle(Split::Train);
    const auto grad_plus = grad_copy(alpha);

    displace(weights, original, v, -h.epsilon);
    zero_grads(weights, alpha);
    oracle(Split::Train);
    const auto grad_minus = grad_copy(alpha);

    restore(weights, original);
    zero_grads(weights, alpha);

    h.correction.resize(h.direct.size());
    h.grad.resize(h.direct.size());
    for (std::size_t k = 0; k < h.direct.size(); ++k) {
        h.correction[k] = (grad_plus[k] - grad_minus[k]) / (2.0 * h.epsilon);
        h.grad[k] = h.direct[k] - eta * h.correction[k];
    }
    return h;
}

}  // namespace

}  // namespace cellnas
