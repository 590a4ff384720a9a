#pragma once

#include <string>

#include "whittle/config.hpp"

namespace whittle::cmd {

// Pipeline stages. Each writes its artifacts (checkpoint, records CSV,
// manifest) into cfg.out_dir and throws with a diagnostic on failure; the
// CLI maps exceptions to a nonzero exit status.

void run_pretrain(const config::RunConfig& cfg);

// checkpoint names the pretrain output; resume (optional) names a mid-run
// state checkpoint written by an earlier prune invocation.
void run_prune(const config::RunConfig& cfg, const std::string& checkpoint,
               const std::string& resume = "");

// checkpoint names a prune (or transfer) output carrying a hard mask. The
// kept channels are materialized into a slim network before training.
void run_finetune(const config::RunConfig& cfg, const std::string& checkpoint);

// Validation accuracy of any checkpoint: full nets evaluate directly (under
// their mask when one is present), slim checkpoints are rebuilt by
// materializing their mask against the configured architecture.
void run_evaluate(const config::RunConfig& cfg, const std::string& checkpoint);

void run_export_mask(const std::string& checkpoint, const std::string& out);

// Installs the mask of `host` (a prune output) onto the pretrained `target`
// checkpoint; cfg describes the target run. Backbones must match; heads may
// differ. Writes transfer.ckpt, ready for run_finetune.
void run_transfer_mask(const config::RunConfig& cfg, const std::string& host,
                       const std::string& target);

// Digest of a prune run directory: final-mask histogram, channels kept per
// layer, projection curve samples, and loss curves.
void run_report(const std::string& run_dir);

// Sweeps prune hyperparameter rows [alpha1, alpha2, beta_step,
// gamma_double_every] from cfg.grid.tuples, pruning from the same pretrain
// checkpoint each time, and tabulates hard-pruned validation accuracy.
void run_grid(const config::RunConfig& cfg, const std::string& checkpoint);

}  // namespace whittle::cmd
