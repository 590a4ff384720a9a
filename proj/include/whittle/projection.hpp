#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "whittle/tensor.hpp"

namespace whittle::proj {

// Scalar projections, double precision. The tensor overloads below wrap the
// same formulas for training; these exist so endpoint and fixed-point
// properties can be stated at full precision.
double logistic(double psi, double beta, double psi0 = 0.0);
double logistic_grad(double psi, double beta, double psi0 = 0.0);

/// Smoothed step z = 1 - e^(-gamma*zt) + zt*e^(-gamma). Fixes 0 and 1 for
/// every gamma; identity at gamma = 0.
double heaviside(double z_tilde, double gamma);
double heaviside_grad(double z_tilde, double gamma);

double logistic_round(double z, double beta_round);
double logistic_round_grad(double z, double beta_round);

double crispness_loss(const std::vector<double>& z_tilde, const std::vector<double>& z);

// Tape-recorded versions.
ndgrad::Tensor logistic(const ndgrad::Tensor& psi, double beta, double psi0 = 0.0);
ndgrad::Tensor heaviside(const ndgrad::Tensor& z_tilde, double gamma);
ndgrad::Tensor logistic_round(const ndgrad::Tensor& z, double beta_round);
ndgrad::Tensor crispness_loss(const ndgrad::Tensor& z_tilde, const ndgrad::Tensor& z);

/// beta/gamma continuation over epochs: beta grows linearly, gamma doubles
/// every `gamma_double_every` epochs, capped to keep e^(-gamma*zt) gradients
/// finite (past the cap the projection is numerically a step already).
struct ContinuationState {
    double beta_init = 1.0;
    double beta_step = 0.02;
    double gamma_init = 2.0;
    int gamma_double_every = 2;
    double gamma_cap = 1e4;
    int epoch = 0;

    double beta() const { return beta_init + beta_step * epoch; }
    double gamma() const;
};

ContinuationState schedule_step(ContinuationState state);

struct ProjectionSettings {
    double beta = 1.0;
    double gamma = 2.0;
    double beta_round = 20.0;
    bool use_heaviside = true;  // off = plain logistic masks (ablation)
};

/// Per-channel mask parameters grouped by layer, with the cached projection
/// chain psi -> z_tilde -> z -> z_bar. project() rebuilds the cached tensors
/// on the current tape.
struct MaskSet {
    std::vector<ndgrad::Tensor> psi;
    std::vector<ndgrad::Tensor> z_tilde;
    std::vector<ndgrad::Tensor> z;
    std::vector<ndgrad::Tensor> z_bar;

    size_t layers() const { return psi.size(); }
    int64_t total() const;
    void project(const ProjectionSettings& s);

    /// Flattened snapshot of the z cache, layer by layer.
    std::vector<float> z_values() const;
};

/// psi ~ U[lo, hi) per channel. The default range straddles the logistic
/// midpoint: the crispness force changes direction at a z_tilde watershed
/// that the gamma schedule sweeps toward 0, so masks must start spread
/// across it for channel selection to race against channel retention. A
/// far-saturated start parks every mask on the projection plateaus where
/// neither the budget loss nor the crispness loss has gradient left.
MaskSet make_mask_set(const std::vector<int64_t>& layer_sizes, unsigned seed,
                      double lo = -1.0, double hi = 1.0);

/// Samples (psi, z_tilde, z, crispness) over a psi grid to CSV, for reports.
void write_projection_curves(const std::string& path, double beta, double gamma,
                             int samples = 201, double psi_lo = -4.0, double psi_hi = 4.0);

}  // namespace whittle::proj
