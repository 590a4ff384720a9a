#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "whittle/commands.hpp"
#include "whittle/config.hpp"

namespace {

struct Args {
    std::string config;
    std::vector<std::string> sets;
    std::string checkpoint, resume, host, target, run_dir, out;
    bool no_crispness = false;
    bool no_logistic_round = false;
};

// File first, then --set overrides, then the ablation switches.
whittle::config::RunConfig load(const Args& a) {
    std::vector<std::string> overrides = a.sets;
    if (a.no_crispness) overrides.push_back("prune.crispness=false");
    if (a.no_logistic_round) overrides.push_back("prune.logistic_round=false");
    return whittle::config::load_config(a.config, overrides);
}

void add_config_opts(CLI::App* sub, Args& a) {
    sub->add_option("-c,--config", a.config, "run config JSON (or a manifest)")->required();
    sub->add_option("--set", a.sets, "override a config key, e.g. --set prune.target=0.25")
        ->take_all();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"whittle: budget-constrained structured channel pruning"};
    app.require_subcommand(1);
    app.footer(whittle::config::config_help());

    Args a;

    CLI::App* pretrain = app.add_subcommand("pretrain", "train the dense network");
    add_config_opts(pretrain, a);

    CLI::App* prune = app.add_subcommand("prune", "soft-prune a pretrained checkpoint to budget");
    add_config_opts(prune, a);
    prune->add_option("--checkpoint", a.checkpoint, "pretrain checkpoint")->required();
    prune->add_option("--resume", a.resume, "state checkpoint of an interrupted prune run");
    prune->add_flag("--no-crispness", a.no_crispness, "drop the crispness loss term");
    prune->add_flag("--no-logistic-round", a.no_logistic_round,
                    "evaluate the budget on z instead of rounded z");

    CLI::App* finetune = app.add_subcommand("finetune", "materialize a mask and retrain");
    add_config_opts(finetune, a);
    finetune->add_option("--checkpoint", a.checkpoint, "prune or transfer checkpoint")->required();

    CLI::App* evaluate = app.add_subcommand("evaluate", "validation accuracy of a checkpoint");
    add_config_opts(evaluate, a);
    evaluate->add_option("--checkpoint", a.checkpoint, "checkpoint to score")->required();

    CLI::App* export_mask = app.add_subcommand("export-mask", "write a checkpoint's mask file");
    export_mask->add_option("--checkpoint", a.checkpoint, "checkpoint with a mask")->required();
    export_mask->add_option("--out", a.out, "mask file path")->required();

    CLI::App* transfer = app.add_subcommand("transfer-mask", "install a host mask on a target net");
    add_config_opts(transfer, a);
    transfer->add_option("--host", a.host, "prune checkpoint supplying the mask")->required();
    transfer->add_option("--target", a.target, "pretrained target checkpoint")->required();

    CLI::App* report = app.add_subcommand("report", "emit histogram/table/curve CSVs for a run");
    report->add_option("--run-dir", a.run_dir, "directory holding prune outputs")->required();

    CLI::App* grid = app.add_subcommand("grid", "sweep prune hyperparameter tuples");
    add_config_opts(grid, a);
    grid->add_option("--checkpoint", a.checkpoint, "pretrain checkpoint")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (pretrain->parsed()) whittle::cmd::run_pretrain(load(a));
        if (prune->parsed()) whittle::cmd::run_prune(load(a), a.checkpoint, a.resume);
        if (finetune->parsed()) whittle::cmd::run_finetune(load(a), a.checkpoint);
        if (evaluate->parsed()) whittle::cmd::run_evaluate(load(a), a.checkpoint);
        if (export_mask->parsed()) whittle::cmd::run_export_mask(a.checkpoint, a.out);
        if (transfer->parsed()) whittle::cmd::run_transfer_mask(load(a), a.host, a.target);
        if (report->parsed()) whittle::cmd::run_report(a.run_dir);
        if (grid->parsed()) whittle::cmd::run_grid(load(a), a.checkpoint);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "whittle: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
