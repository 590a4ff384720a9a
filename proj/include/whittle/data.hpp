#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "whittle/tensor.hpp"

namespace whittle::data {

// Per-channel normalization parameters, recorded wherever they are applied.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> stddev;
};

struct Dataset {
    int64_t count = 0, channels = 0, height = 0, width = 0;
    std::vector<float> images;  // [N,C,H,W]
    std::vector<int> labels;
    int64_t classes = 0;
    bool normalized = false;
    NormStats stats;  // the stats that were applied (or identity)
    std::string split_tag = "full";

    int64_t sample_size() const { return channels * height * width; }
};

// Population mean/std per channel over every sample.
NormStats compute_stats(const Dataset& ds);

// x <- (x - mean) / max(std, 1e-8), recorded in ds.stats.
void normalize(Dataset& ds, const NormStats& stats);

// IDX pair (big-endian magic 0x00000803 images / 0x00000801 labels).
// Pixels are scaled to [0,1]; normalization uses `stats` when given,
// otherwise stats computed from this file.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const NormStats* stats = nullptr);

// Seeded separable toy task: one Gaussian bump per class, centers spread on a
// circle, plus pixel noise. Deterministic in the seed.
Dataset synth_blobs(int64_t classes, int64_t samples_per_class, int64_t image_size,
                    double noise_sigma, unsigned seed);

// Disjoint seeded split plus batch index streams. Train batches reshuffle
// per epoch (keyed by seed and epoch); validation order never changes.
struct DataSplit {
    std::vector<int64_t> train;
    std::vector<int64_t> val;
    int64_t batch_size = 0;
    unsigned seed = 0;

    std::vector<std::vector<int64_t>> train_epoch(int epoch) const;
    std::vector<std::vector<int64_t>> val_order() const;
};

DataSplit split_and_batch(const Dataset& ds, double val_fraction, int64_t batch_size,
                          unsigned seed);

struct Batch {
    ndgrad::Tensor images;
    std::vector<int> labels;
};

Batch gather(const Dataset& ds, const std::vector<int64_t>& idx);

}  // namespace whittle::data
