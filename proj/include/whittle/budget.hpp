#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "whittle/tensor.hpp"

namespace whittle::budget {

enum class BudgetKind { channel, volume, parameter, flops };

BudgetKind budget_kind_from_string(const std::string& s);
std::string to_string(BudgetKind k);

/// One masked conv (or linear) + batchnorm stage as the budgets see it.
/// pred names the layer supplying input channels; -1 is the network input.
struct LayerSpec {
    int index = 0;
    int64_t channels = 1;      // p_j
    int64_t feature_area = 1;  // A_j, pixels of one output map
    int64_t kernel_area = 1;   // K_j, pixels of one kernel
    int pred = -1;
    bool prunable = true;
};

struct NetworkShape {
    std::vector<LayerSpec> layers;
    int64_t input_channels = 1;  // p_0

    void validate() const;
    int64_t prunable_layer_count() const;
    /// Total masked channel count p (prunable layers only).
    int64_t mask_count() const;
};

/// Per-layer mask values for every prunable layer, in layer order. The
/// double route serves hard masks, threshold search, and tests; budgets in
/// the training loss use the tensor route below.
using MaskValues = std::vector<std::vector<double>>;

double eval_budget(BudgetKind kind, const MaskValues& z_bar, const NetworkShape& shape);

double channel_budget(const MaskValues& z_bar, const NetworkShape& shape);
double volume_budget(const MaskValues& z_bar, const NetworkShape& shape);
double parameter_budget(const MaskValues& z_bar, const NetworkShape& shape);
double flops_budget(const MaskValues& z_bar, const NetworkShape& shape);

/// Tape-recorded budget over the cached z_bar tensors of a MaskSet.
ndgrad::Tensor eval_budget(BudgetKind kind, const std::vector<ndgrad::Tensor>& z_bar,
                           const NetworkShape& shape);

/// (V - V0)^2. target must lie in (0, 1].
double budget_loss(double value, double target);
ndgrad::Tensor budget_loss(const ndgrad::Tensor& value, double target);

// Human-readable shape description (JSON layer table), stored alongside
// checkpoints and embedded in mask files.
std::string shape_to_json(const NetworkShape& shape);
NetworkShape shape_from_json(const std::string& text);
void save_shape(const NetworkShape& shape, const std::string& path);
NetworkShape load_shape(const std::string& path);

/// Order-sensitive digest of the layer table, used to refuse applying a
/// mask file to a mismatched architecture.
uint64_t shape_fingerprint(const NetworkShape& shape);

}  // namespace whittle::budget
