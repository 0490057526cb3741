#pragma once

// Central finite-difference oracle, independent of the backward rules it checks.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cellnas/ops.hpp"
#include "cellnas/rng.hpp"
#include "cellnas/tensor.hpp"

namespace cellnas::testing {

using LossBuilder = std::function<Tensor(Tape&)>;

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is ~0 from being dominated by finite-difference round-off.
inline constexpr double kRelFloor = 1e-3;

inline GradCheck gradcheck(const LossBuilder& build, std::vector<Tensor> inputs, double step = 1e-5) {
    for (auto& t : inputs) t.zero_grad();
    {
        Tape tape;
        Tensor loss = build(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) analytic.emplace_back(t.grad().begin(), t.grad().end());

    GradCheck r;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto d = inputs[i].data();
        for (std::size_t k = 0; k < d.size(); ++k) {
            const double saved = d[k];
            d[k] = saved + step;
            Tape tp(false);
            const double lp = build(tp).item();
            d[k] = saved - step;
            Tape tm(false);
            const double lm = build(tm).item();
            d[k] = saved;
            const double numeric = (lp - lm) / (2.0 * step);
            const double a = analytic[i][k];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kRelFloor});
            r.max_rel_error = std::max(r.max_rel_error, rel);
            ++r.entries;
        }
    }
    return r;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// Scalar probe sum(r * y) with fixed random weights r, so every output entry
// contributes a distinct sensitivity.
inline Tensor probe(Tape& tape, const Tensor& y, const Tensor& weights) {
    return ops::sum(tape, ops::mul(tape, y, weights));
}

}  // namespace cellnas::testing
