#include "whittle/projection.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

#include "whittle/ops.hpp"

namespace whittle::proj {

using ndgrad::Tensor;

double logistic(double psi, double beta, double psi0) {
    return 1.0 / (1.0 + std::exp(-beta * (psi - psi0)));
}

double logistic_grad(double psi, double beta, double psi0) {
    const double z = logistic(psi, beta, psi0);
    return beta * z * (1.0 - z);
}

double heaviside(double z_tilde, double gamma) {
    return 1.0 - std::exp(-gamma * z_tilde) + z_tilde * std::exp(-gamma);
}

double heaviside_grad(double z_tilde, double gamma) {
    return gamma * std::exp(-gamma * z_tilde) + std::exp(-gamma);
}

double logistic_round(double z, double beta_round) {
    return 1.0 / (1.0 + std::exp(-beta_round * (z - 0.5)));
}

double logistic_round_grad(double z, double beta_round) {
    const double r = logistic_round(z, beta_round);
    return beta_round * r * (1.0 - r);
}

double crispness_loss(const std::vector<double>& z_tilde, const std::vector<double>& z) {
    if (z_tilde.size() != z.size()) {
        throw std::runtime_error("crispness_loss: vector lengths differ");
    }
    double acc = 0.0;
    for (size_t i = 0; i < z.size(); ++i) {
        const double d = z_tilde[i] - z[i];
        acc += d * d;
    }
    return acc;
}

Tensor logistic(const Tensor& psi, double beta, double psi0) {
    if (beta < 0.0) ndgrad::detail::fail("logistic: beta must be non-negative");
    return ndgrad::map_unary(
        psi, [beta, psi0](double v) { return logistic(v, beta, psi0); },
        [beta, psi0](double v) { return logistic_grad(v, beta, psi0); }, "logistic");
}

Tensor heaviside(const Tensor& z_tilde, double gamma) {
    if (gamma < 0.0) ndgrad::detail::fail("heaviside: gamma must be non-negative");
    return ndgrad::map_unary(
        z_tilde, [gamma](double v) { return heaviside(v, gamma); },
        [gamma](double v) { return heaviside_grad(v, gamma); }, "heaviside");
}

Tensor logistic_round(const Tensor& z, double beta_round) {
    if (beta_round <= 0.0) ndgrad::detail::fail("logistic_round: beta_round must be positive");
    return ndgrad::map_unary(
        z, [beta_round](double v) { return logistic_round(v, beta_round); },
        [beta_round](double v) { return logistic_round_grad(v, beta_round); },
        "logistic_round");
}

Tensor crispness_loss(const Tensor& z_tilde, const Tensor& z) {
    Tensor d = ndgrad::sub(z_tilde, z);
    return ndgrad::sum(ndgrad::mul(d, d));
}

double ContinuationState::gamma() const {
    const double g = std::ldexp(gamma_init, epoch / gamma_double_every);
    return std::min(g, gamma_cap);
}

ContinuationState schedule_step(ContinuationState state) {
    ++state.epoch;
    return state;
}

int64_t MaskSet::total() const {
    int64_t n = 0;
    for (const auto& t : psi) n += t.numel();
    return n;
}

void MaskSet::project(const ProjectionSettings& s) {
    z_tilde.clear();
    z.clear();
    z_bar.clear();
    for (const auto& p : psi) {
        Tensor zt = logistic(p, s.beta, 0.0);
        Tensor zz = s.use_heaviside ? heaviside(zt, s.gamma) : zt;
        z_tilde.push_back(zt);
        z.push_back(zz);
        z_bar.push_back(logistic_round(zz, s.beta_round));
    }
}

std::vector<float> MaskSet::z_values() const {
    std::vector<float> out;
    for (const auto& t : z) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

MaskSet make_mask_set(const std::vector<int64_t>& layer_sizes, unsigned seed, double lo,
                      double hi) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(lo, hi);
    MaskSet ms;
    for (int64_t n : layer_sizes) {
        std::vector<float> vals(static_cast<size_t>(n));
        for (auto& v : vals) v = static_cast<float>(dist(rng));
        ms.psi.push_back(Tensor::from({n}, std::move(vals), true));
    }
    return ms;
}

void write_projection_curves(const std::string& path, double beta, double gamma, int samples,
                             double psi_lo, double psi_hi) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "psi,z_tilde,z,crispness\n";
    for (int i = 0; i < samples; ++i) {
        const double psi = psi_lo + (psi_hi - psi_lo) * i / (samples - 1);
        const double zt = logistic(psi, beta, 0.0);
        const double z = heaviside(zt, gamma);
        const double d = zt - z;
        out << psi << "," << zt << "," << z << "," << d * d << "\n";
    }
}

}  // namespace whittle::proj
