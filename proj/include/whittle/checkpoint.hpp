#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "whittle/budget.hpp"
#include "whittle/model.hpp"
#include "whittle/projection.hpp"

namespace whittle::ckpt {

inline constexpr int kVersion = 1;

// Single-file training snapshot: a one-line text header (version, config,
// shape, schedule, bookkeeping, array directory) followed by raw
// little-endian float32 payloads. Roundtrips bitwise.
struct Checkpoint {
    int version = kVersion;
    std::string config_json = "{}";  // run config snapshot, opaque here
    budget::NetworkShape shape;
    std::vector<std::pair<std::string, std::vector<float>>> arrays;
    proj::ContinuationState schedule;
    model::HardMask mask;  // empty = none selected yet

    // resume bookkeeping
    int epoch = 0;  // next epoch to run
    int64_t opt_t = 0;
    double best_metric = 0.0;
    int best_epoch = -1;
    std::string records_csv;  // epoch rows emitted so far

    const std::vector<float>* find(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Snapshot/restore of a network's stored tensors under their canonical names.
std::vector<std::pair<std::string, std::vector<float>>> snapshot_arrays(model::MaskedNet& net);
void restore_arrays(model::MaskedNet& net,
                    const std::vector<std::pair<std::string, std::vector<float>>>& arrays);

// Human-readable mask file: fingerprint, per-layer bit rows, achieved value
// of every budget kind under the checkpoint's shape.
void export_mask(const Checkpoint& c, const std::string& path);

struct MaskImport {
    model::HardMask mask;
    uint64_t fingerprint = 0;
    std::vector<std::pair<std::string, double>> budgets;
};

MaskImport import_mask(const std::string& path);
// Validating variant: fingerprint and per-layer widths must match `shape`.
model::HardMask import_mask(const std::string& path, const budget::NetworkShape& shape);

}  // namespace whittle::ckpt
