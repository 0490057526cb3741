#include "cellnas/optim.hpp"

#include <cmath>
#include <numbers>

#include "cellnas/errors.hpp"

namespace cellnas {

AdamState AdamState::for_params(std::span<const Tensor> params) {
    AdamState s;
    for (const auto& p : params) {
        s.m.emplace_back(p.numel(), 0.0);
        s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
}

void adam_step(AdamState& state, std::span<Tensor> params, double lr, const AdamConfig& config,
               const std::vector<bool>& active) {
    if (state.m.size() != params.size()) {
        throw DimensionError("adam_step: optimizer tracks " + std::to_string(state.m.size()) + " tensors, got " +
                             std::to_string(params.size()));
    }
    if (!active.empty() && active.size() != params.size()) throw DimensionError("adam_step: active mask size");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!active.empty() && !active[i]) continue;
        auto w = params[i].data();
        const auto g = std::as_const(params[i]).grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            w[k] -= lr * mhat / (std::sqrt(vhat) + config.eps);
        }
    }
}

double cosine_lr(double base, int epoch, int total_epochs) {
    if (total_epochs < 1) throw ParameterError("cosine_lr: total_epochs must be >= 1");
    const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cellnas
