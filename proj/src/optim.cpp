#include "whittle/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace whittle::optim {

using ndgrad::Tensor;

namespace {

// grads may be absent when a parameter never entered the loss; treat as zero
float grad_at(const Tensor& p, size_t i) {
    const auto& g = p.impl()->grad;
    return g.empty() ? 0.0f : g[i];
}

void ensure_slots(std::vector<std::vector<float>>& slots,
                  const std::vector<Tensor>& params) {
    if (slots.empty()) {
        for (const Tensor& p : params) {
            slots.emplace_back(p.data().size(), 0.0f);
        }
    }
    if (slots.size() != params.size()) {
        throw std::runtime_error("optimizer state holds " + std::to_string(slots.size()) +
                                 " tensors, step got " + std::to_string(params.size()));
    }
    for (size_t i = 0; i < params.size(); ++i) {
        if (slots[i].size() != params[i].data().size()) {
            throw std::runtime_error("optimizer state tensor " + std::to_string(i) +
                                     " changed size");
        }
    }
}

}  // namespace

void sgd_momentum_step(std::vector<Tensor>& params, SgdState& state, const SgdConfig& cfg) {
    ensure_slots(state.velocity, params);
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto& vel = state.velocity[pi];
        for (size_t i = 0; i < p.data().size(); ++i) {
            const double w = p.data()[i];
            const double v = cfg.momentum * vel[i] + grad_at(p, i) + cfg.weight_decay * w;
            vel[i] = static_cast<float>(v);
            p.data()[i] = static_cast<float>(w - cfg.lr * v);
        }
    }
}

void adamw_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg,
                const std::vector<uint8_t>& decay_mask) {
    ensure_slots(state.m, params);
    ensure_slots(state.v, params);
    if (!decay_mask.empty() && decay_mask.size() != params.size()) {
        throw std::runtime_error("decay mask covers " + std::to_string(decay_mask.size()) +
                                 " tensors, step got " + std::to_string(params.size()));
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        const bool decay = decay_mask.empty() || decay_mask[pi];
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (size_t i = 0; i < p.data().size(); ++i) {
            double w = p.data()[i];
            const double g = grad_at(p, i);
            if (decay) w -= cfg.lr * cfg.weight_decay * w;
            const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.data()[i] = static_cast<float>(w - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

double step_decay(double base_lr, int epoch, int every, double factor) {
    if (every < 1) throw std::runtime_error("step_decay: interval must be positive");
    return base_lr * std::pow(factor, epoch / every);
}

}  // namespace whittle::optim
