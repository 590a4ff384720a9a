#pragma once

#include <functional>
#include <string>
#include <vector>

#include "whittle/budget.hpp"
#include "whittle/checkpoint.hpp"
#include "whittle/data.hpp"
#include "whittle/model.hpp"
#include "whittle/optim.hpp"
#include "whittle/projection.hpp"

namespace whittle::prune {

struct PruneConfig {
    budget::BudgetKind kind = budget::BudgetKind::channel;
    double target = 0.5;  // V0
    double alpha1 = 10.0;
    double alpha2 = 30.0;
    int epochs = 20;
    optim::AdamConfig opt;  // psi tensors are always decay-exempt
    proj::ContinuationState schedule;
    double beta_round = 20.0;
    bool use_heaviside = true;     // off: plain logistic masks
    bool logistic_round = true;    // off: budget reads z instead of z_bar
    unsigned seed = 1;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double ce = 0.0;         // epoch means over train batches
    double crispness = 0.0;  // unweighted component values
    double budget_term = 0.0;
    double total = 0.0;
    double beta = 0.0, gamma = 0.0;
    double val_acc = 0.0;   // hard-pruned during soft pruning, plain otherwise
    double achieved = 0.0;  // budget of the epoch's hard mask
    bool fatal = false;     // hard mask severed the net; epoch not selectable
};

std::string record_csv_header();
std::string record_csv_row(const EpochRecord& r);

// L = ce + alpha1*crispness + alpha2*(V - V0)^2, components readable apart.
struct LossParts {
    ndgrad::Tensor total;
    double ce = 0.0;
    double crispness = 0.0;
    double budget_term = 0.0;
};

LossParts prune_loss(const ndgrad::Tensor& logits, const std::vector<int>& labels,
                     proj::MaskSet& masks, const budget::NetworkShape& shape,
                     const PruneConfig& cfg);

// Binary mask meeting the budget: channel budgets keep the top floor(V0*p)
// channels by z (ties by layer then channel index); the other budgets pick
// the smallest cutoff over the distinct z values whose kept set satisfies
// V <= V0, then promote cutoff ties one at a time until the first that no
// longer fits. Promoting the best excluded channel exceeds the target.
model::HardMask hard_prune(const budget::MaskValues& z, budget::BudgetKind kind, double target,
                           const budget::NetworkShape& shape);

// Fraction of values within `tol` of 0 or 1, and fraction in the mid band.
struct MaskStats {
    double crisp_fraction = 0.0;  // within tol of {0,1}
    double mid_fraction = 0.0;    // inside [0.2, 0.8]
};
MaskStats mask_stats(const std::vector<float>& z, double tol = 0.05);

struct PruneResult {
    ckpt::Checkpoint best;  // weights/psi of the winning epoch plus its mask
    std::vector<EpochRecord> records;  // epochs run by this call; the
                                       // checkpoint's csv covers resumed ones
};

// Budget-constrained soft pruning: each epoch trains all batches under the
// projected soft masks, then evaluates a hard-pruned copy on the validation
// split. Returns the epoch with the best hard validation accuracy.
PruneResult soft_prune(model::MaskedNet& net, const data::Dataset& ds,
                       const data::DataSplit& split, const PruneConfig& cfg,
                       const std::function<void(const EpochRecord&)>& on_epoch = {},
                       const std::function<void(const ckpt::Checkpoint&)>& on_state = {},
                       const ckpt::Checkpoint* resume = nullptr);

struct TrainConfig {
    int epochs = 30;
    optim::SgdConfig opt;
    int lr_step_every = 30;
    double lr_factor = 0.5;
    unsigned seed = 1;

    void validate() const;
};

struct TrainResult {
    ckpt::Checkpoint best;
    std::vector<EpochRecord> records;  // ce/total carry the train loss
};

// Plain supervised training (pretrain and finetune share it).
TrainResult train_plain(model::MaskedNet& net, const data::Dataset& ds,
                        const data::DataSplit& split, const TrainConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch = {});

// Top-1 accuracy, eval mode; masks may be empty.
double evaluate(model::MaskedNet& net, const data::Dataset& ds,
                const std::vector<std::vector<int64_t>>& batches,
                const std::vector<ndgrad::Tensor>& stage_masks = {});

// Install the host's hard mask on a same-shaped target (heads may differ).
model::HardMask transfer_mask(const ckpt::Checkpoint& host, const model::MaskedNet& target);

// Cumulative refresh of batchnorm running stats over one pass (training-mode
// forwards under no-grad, batch k averaged in at weight 1/k).
void refresh_bn_stats(model::MaskedNet& net, const data::Dataset& ds,
                      const std::vector<std::vector<int64_t>>& batches);

}  // namespace whittle::prune
