#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "whittle/budget.hpp"
#include "whittle/projection.hpp"
#include "whittle/tensor.hpp"

namespace whittle::model {

/// Binary keep/drop decision per hidden channel, one vector per prunable
/// stage in stage order.
struct HardMask {
    std::vector<std::vector<uint8_t>> keep;

    int64_t total() const;
    int64_t kept() const;
    budget::MaskValues to_values() const;
    std::vector<ndgrad::Tensor> to_tensors() const;
};

struct ArchConfig {
    std::string preset = "tiny-cnn";  // tiny-cnn | tiny-resnet | mlp-bn
    std::vector<int64_t> widths;      // empty = preset default
    int64_t in_channels = 1;
    int64_t in_h = 28;
    int64_t in_w = 28;
    int64_t classes = 10;
    unsigned seed = 1;
};

/// conv (or linear) followed by batchnorm; the mask slot is the stage index.
struct Stage {
    ndgrad::Tensor w;  // [out,in,k,k] conv, [out,in] linear
    int stride = 1;
    int padding = 0;
    ndgrad::Tensor gamma, beta, run_mean, run_var;

    bool is_linear() const { return w.ndim() == 2; }
    int64_t out_ch() const { return w.dim(0); }
    int64_t in_ch() const { return w.dim(1); }
};

/// One step of the network walk: a plain stage+relu, or a residual block
/// (two-stage main path, optional 1x1 conv skip or identity skip). The
/// embed maps appear only on materialized nets where the surviving channel
/// sets of the two branches differ.
struct Unit {
    enum class Kind { single, block };
    Kind kind = Kind::single;
    int s1 = -1;
    int s2 = -1;
    int skip = -1;              // skip conv stage, -1 = none
    bool identity_skip = false; // blocks built without a skip conv
    std::vector<int64_t> main_embed, skip_embed;
    int64_t out_width = 0;      // add width when embeds are present
};

class MaskedNet {
  public:
    std::vector<Stage> stages;
    std::vector<Unit> units;
    ndgrad::Tensor head_w, head_b;
    bool flatten_input = false;  // mlp preset
    double bn_momentum = 0.1;    // stat-refresh passes override per batch
    proj::MaskSet masks;

    static MaskedNet build(const ArchConfig& cfg);

    /// stage_masks: one [p_j] tensor per prunable stage in stage order
    /// (soft z during pruning, binary values for hard evaluation), or empty
    /// for the unmasked forward. training selects batchnorm mode.
    ndgrad::Tensor forward(const ndgrad::Tensor& x, const std::vector<ndgrad::Tensor>& stage_masks,
                           bool training);

    const budget::NetworkShape& shape() const { return shape_; }
    const ArchConfig& config() const { return cfg_; }

    /// Trainable weights (conv/linear kernels, bn affine, head); psi lives
    /// in `masks` and is optimized as its own group.
    std::vector<ndgrad::Tensor> parameters();
    std::vector<int64_t> mask_layer_sizes() const;
    int64_t prunable_stage_count() const { return shape_.prunable_layer_count(); }

    /// Conv kernels + 2 batchnorm values per channel (the budget convention).
    int64_t backbone_param_count() const;
    int64_t total_param_count() const;

    /// Stage indices that a hard mask disconnects (empty = materializable).
    std::vector<int> validate_connectivity(const HardMask& mask) const;

    /// Slim unmasked copy with dropped channels physically removed.
    MaskedNet materialize(const HardMask& mask) const;

    /// Stable names for every persistent array (weights, bn stats, psi).
    std::vector<std::pair<std::string, ndgrad::Tensor>> named_arrays();

  private:
    budget::NetworkShape shape_;
    ArchConfig cfg_;
};

}  // namespace whittle::model
