#pragma once

#include <array>
#include <string>
#include <vector>

#include "whittle/model.hpp"
#include "whittle/pruner.hpp"

namespace whittle::config {

struct ModelSection {
    std::string preset = "tiny-cnn";  // tiny-cnn | tiny-resnet | mlp-bn
    std::vector<int64_t> widths;      // empty = preset default
};

// source is the only data key without a default: "synth" generates the
// separable blob task, "idx" loads an images/labels file pair.
struct DataSection {
    std::string source;
    std::string images;  // idx paths, required when source == "idx"
    std::string labels;
    int64_t classes = 10;  // synth generator shape
    int64_t per_class = 60;
    int64_t image_size = 12;
    double noise = 0.1;
    double val_fraction = 0.25;
    int64_t batch_size = 25;
};

struct TrainSection {
    int epochs = 30;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int lr_step_every = 30;
    double lr_factor = 0.5;

    prune::TrainConfig to_train_config(unsigned seed) const;
};

struct FinetuneSection : TrainSection {
    bool refresh_bn = true;  // rebuild batchnorm stats before training
};

struct PruneSection {
    std::string budget = "channel";  // channel | volume | parameter | flops
    double target = 0.5;
    double alpha1 = 10.0;
    double alpha2 = 30.0;
    int epochs = 20;
    double lr = 1e-3;
    double weight_decay = 1e-3;  // psi is always decay-exempt
    double beta_init = 1.0;
    double beta_step = 0.02;
    double gamma_init = 2.0;
    int gamma_double_every = 2;
    double gamma_cap = 1e4;
    double beta_round = 20.0;
    bool crispness = true;       // --no-crispness clears it (drops the alpha1 term)
    bool logistic_round = true;  // --no-logistic-round feeds z to the budget
    bool heaviside = true;

    prune::PruneConfig to_prune_config(unsigned seed) const;
};

// One sweep point per row: [alpha1, alpha2, beta_step, gamma_double_every].
struct GridSection {
    std::vector<std::array<double, 4>> tuples;
};

// Whole-run configuration. Every key has a default except data.source and
// out_dir; unknown keys are rejected wherever they appear.
struct RunConfig {
    std::string out_dir;
    unsigned seed = 1;
    ModelSection model;
    DataSection data;
    TrainSection pretrain;
    PruneSection prune;
    FinetuneSection finetune;
    GridSection grid;

    void validate() const;
};

// Parses config JSON (or a manifest, whose "config" object is unwrapped).
RunConfig parse_config(const std::string& text);

// File load plus "--set key.path=value" overrides applied before parsing.
// Values parse as JSON when possible, otherwise as bare strings.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// Fully resolved config as sorted, indented JSON.
std::string dump_config(const RunConfig& cfg);

// Every config key with its default, for --help.
std::string config_help();

// Reproducibility record written next to each command's outputs: command
// name, input paths, format versions, seed, and the resolved config. A
// manifest is itself loadable as a config.
std::string manifest_json(const std::string& command, const RunConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& inputs);

}  // namespace whittle::config
