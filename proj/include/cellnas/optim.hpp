#pragma once

#include <span>
#include <vector>

#include "cellnas/tensor.hpp"

namespace cellnas {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam moments for a fixed, ordered list of tensors.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;

    static AdamState for_params(std::span<const Tensor> params);
    bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update from each tensor's grad buffer. Entries with
// active[i] == false are skipped (their moments are left untouched). An empty
// `active` means every tensor is updated.
void adam_step(AdamState& state, std::span<Tensor> params, double lr, const AdamConfig& config,
               const std::vector<bool>& active = {});

// base * (1 + cos(pi * epoch / total)) / 2
double cosine_lr(double base, int epoch, int total_epochs);

}  // namespace cellnas
