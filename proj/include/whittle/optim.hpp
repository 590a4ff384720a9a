#pragma once

#include <cstdint>
#include <vector>

#include "whittle/tensor.hpp"

namespace whittle::optim {

// Momentum SGD: v <- momentum*v + g + weight_decay*w; w <- w - lr*v.
struct SgdConfig {
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

struct SgdState {
    std::vector<std::vector<float>> velocity;  // sized on first step
};

void sgd_momentum_step(std::vector<ndgrad::Tensor>& params, SgdState& state,
                       const SgdConfig& cfg);

// AdamW with decoupled decay. decay_mask, when present, holds one flag per
// parameter tensor; 0 exempts that tensor from decay (mask parameters).
struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-3;
};

struct AdamState {
    int64_t t = 0;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
};

void adamw_step(std::vector<ndgrad::Tensor>& params, AdamState& state, const AdamConfig& cfg,
                const std::vector<uint8_t>& decay_mask = {});

// Step decay: halves every `every` epochs (epoch 30 -> lr/2, 60 -> lr/4).
double step_decay(double base_lr, int epoch, int every = 30, double factor = 0.5);

}  // namespace whittle::optim
