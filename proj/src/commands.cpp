#include "whittle/commands.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "whittle/budget.hpp"
#include "whittle/checkpoint.hpp"
#include "whittle/data.hpp"
#include "whittle/model.hpp"
#include "whittle/pruner.hpp"
#include "whittle/projection.hpp"

namespace whittle::cmd {

namespace fs = std::filesystem;

namespace {

std::string path_in(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_manifest(const std::string& command, const config::RunConfig& cfg,
                    const std::vector<std::pair<std::string, std::string>>& inputs) {
    const std::string path = path_in(cfg.out_dir, command + "_manifest.json");
    write_text(path, config::manifest_json(command, cfg, inputs));
    std::printf("wrote %s\n", path.c_str());
}

// Normalization uses train-split statistics only, so the validation metric
// never leaks into preprocessing.
data::NormStats subset_stats(const data::Dataset& ds, const std::vector<int64_t>& idx) {
    data::Dataset sub;
    sub.count = static_cast<int64_t>(idx.size());
    sub.channels = ds.channels;
    sub.height = ds.height;
    sub.width = ds.width;
    sub.classes = ds.classes;
    sub.images.reserve(idx.size() * ds.sample_size());
    for (int64_t i : idx) {
        const float* p = ds.images.data() + i * ds.sample_size();
        sub.images.insert(sub.images.end(), p, p + ds.sample_size());
    }
    sub.labels.assign(idx.size(), 0);
    return data::compute_stats(sub);
}

struct Prepared {
    data::Dataset ds;
    data::DataSplit split;
};

Prepared prepare_data(const config::RunConfig& cfg) {
    Prepared p;
    if (cfg.data.source == "synth") {
        p.ds = data::synth_blobs(cfg.data.classes, cfg.data.per_class, cfg.data.image_size,
                                 cfg.data.noise, cfg.seed);
    } else {
        data::NormStats identity{{0.0}, {1.0}};  // raw pixels; real stats applied below
        p.ds = data::load_idx(cfg.data.images, cfg.data.labels, &identity);
    }
    p.split = data::split_and_batch(p.ds, cfg.data.val_fraction, cfg.data.batch_size, cfg.seed);
    data::normalize(p.ds, subset_stats(p.ds, p.split.train));
    return p;
}

model::MaskedNet build_net(const config::RunConfig& cfg, const data::Dataset& ds) {
    model::ArchConfig arch;
    arch.preset = cfg.model.preset;
    arch.widths = cfg.model.widths;
    arch.in_channels = ds.channels;
    arch.in_h = ds.height;
    arch.in_w = ds.width;
    arch.classes = ds.classes;
    arch.seed = cfg.seed;
    return model::MaskedNet::build(arch);
}

ckpt::Checkpoint load_required(const std::string& path, const std::string& role) {
    if (path.empty()) throw std::runtime_error(role + ": no checkpoint path given");
    if (!fs::exists(path)) throw std::runtime_error(role + ": '" + path + "' does not exist");
    return ckpt::load_checkpoint(path);
}

void check_same_arch(const ckpt::Checkpoint& c, const model::MaskedNet& net,
                     const std::string& role) {
    if (budget::shape_fingerprint(c.shape) != budget::shape_fingerprint(net.shape()))
        throw std::runtime_error(role + ": checkpoint architecture differs from the configured model");
}

budget::MaskValues mask_values(const model::HardMask& m) {
    budget::MaskValues v(m.keep.size());
    for (size_t j = 0; j < m.keep.size(); ++j) v[j].assign(m.keep[j].begin(), m.keep[j].end());
    return v;
}

double mask_budget(const model::HardMask& m, budget::BudgetKind kind,
                   const budget::NetworkShape& shape) {
    return budget::eval_budget(kind, mask_values(m), shape);
}

// Final mask values of a prune checkpoint: stored psi projected at the
// schedule state the run ended on, honoring the run's ablation flags.
std::vector<double> final_mask_values(const ckpt::Checkpoint& c) {
    config::RunConfig cfg = config::parse_config(c.config_json);
    const double beta = c.schedule.beta(), gamma = c.schedule.gamma();
    std::vector<double> z;
    for (int j = 0;; ++j) {
        const std::vector<float>* psi = c.find("mask" + std::to_string(j) + ".psi");
        if (!psi) break;
        for (float p : *psi) {
            double zt = proj::logistic(p, beta);
            z.push_back(cfg.prune.heaviside ? proj::heaviside(zt, gamma) : zt);
        }
    }
    if (z.empty()) throw std::runtime_error("checkpoint stores no mask parameters");
    return z;
}

}  // namespace

void run_pretrain(const config::RunConfig& cfg) {
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);
    model::MaskedNet net = build_net(cfg, prep.ds);

    const std::string csv_path = path_in(cfg.out_dir, "pretrain_records.csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write '" + csv_path + "'");
    csv << prune::record_csv_header() << std::flush;

    prune::TrainResult res =
        prune::train_plain(net, prep.ds, prep.split, cfg.pretrain.to_train_config(cfg.seed),
                           [&](const prune::EpochRecord& r) { csv << prune::record_csv_row(r) << std::flush; });

    res.best.config_json = config::dump_config(cfg);
    const std::string ckpt_path = path_in(cfg.out_dir, "pretrain.ckpt");
    ckpt::save_checkpoint(res.best, ckpt_path);

    std::printf("pretrain: best val acc %.4f (epoch %d of %d)\n", res.best.best_metric,
                res.best.best_epoch, cfg.pretrain.epochs);
    std::printf("wrote %s\n", ckpt_path.c_str());
    std::printf("wrote %s\n", csv_path.c_str());
    write_manifest("pretrain", cfg, {});
}

void run_prune(const config::RunConfig& cfg, const std::string& checkpoint,
               const std::string& resume) {
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);
    model::MaskedNet net = build_net(cfg, prep.ds);

    ckpt::Checkpoint pre = load_required(checkpoint, "prune needs a pretrain checkpoint");
    check_same_arch(pre, net, "prune");
    ckpt::restore_arrays(net, pre.arrays);

    ckpt::Checkpoint resumed;
    const ckpt::Checkpoint* resume_ptr = nullptr;
    if (!resume.empty()) {
        resumed = load_required(resume, "prune --resume");
        resume_ptr = &resumed;
    }

    const std::string csv_path = path_in(cfg.out_dir, "prune_records.csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write '" + csv_path + "'");
    // A resumed run starts from the rows already recorded in the state file.
    csv << (resume_ptr ? resumed.records_csv : prune::record_csv_header()) << std::flush;

    const std::string cfg_json = config::dump_config(cfg);
    const std::string state_path = path_in(cfg.out_dir, "prune_state.ckpt");
    prune::PruneResult res = prune::soft_prune(
        net, prep.ds, prep.split, cfg.prune.to_prune_config(cfg.seed),
        [&](const prune::EpochRecord& r) { csv << prune::record_csv_row(r) << std::flush; },
        [&](const ckpt::Checkpoint& state) {
            ckpt::Checkpoint copy = state;
            copy.config_json = cfg_json;
            ckpt::save_checkpoint(copy, state_path);
        },
        resume_ptr);

    res.best.config_json = cfg_json;
    const std::string ckpt_path = path_in(cfg.out_dir, "prune.ckpt");
    ckpt::save_checkpoint(res.best, ckpt_path);

    std::printf("prune: best hard-pruned val acc %.4f (epoch %d of %d)\n", res.best.best_metric,
                res.best.best_epoch, cfg.prune.epochs);
    std::printf("wrote %s\n", ckpt_path.c_str());
    std::printf("wrote %s\n", csv_path.c_str());
    if (!res.best.mask.keep.empty()) {
        const budget::BudgetKind kind = budget::budget_kind_from_string(cfg.prune.budget);
        std::printf("prune: achieved %s budget %.6g (target %.6g), kept %lld of %lld channels\n",
                    budget::to_string(kind).c_str(),
                    mask_budget(res.best.mask, kind, net.shape()), cfg.prune.target,
                    static_cast<long long>(res.best.mask.kept()),
                    static_cast<long long>(res.best.mask.total()));
        const std::string mask_path = path_in(cfg.out_dir, "mask.txt");
        ckpt::export_mask(res.best, mask_path);
        std::printf("wrote %s\n", mask_path.c_str());
    }
    write_manifest("prune", cfg,
                   {{"checkpoint", checkpoint}, {"resume", resume}});
}

void run_finetune(const config::RunConfig& cfg, const std::string& checkpoint) {
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);
    model::MaskedNet net = build_net(cfg, prep.ds);

    ckpt::Checkpoint pruned = load_required(checkpoint, "finetune needs a prune checkpoint");
    if (pruned.mask.keep.empty())
        throw std::runtime_error(
            "finetune: checkpoint carries no mask; point --checkpoint at a prune output");
    check_same_arch(pruned, net, "finetune");
    ckpt::restore_arrays(net, pruned.arrays);

    model::MaskedNet slim = net.materialize(pruned.mask);
    std::printf("finetune: kept %lld of %lld channels, %lld of %lld backbone parameters\n",
                static_cast<long long>(pruned.mask.kept()),
                static_cast<long long>(pruned.mask.total()),
                static_cast<long long>(slim.backbone_param_count()),
                static_cast<long long>(net.backbone_param_count()));
    if (cfg.finetune.refresh_bn) prune::refresh_bn_stats(slim, prep.ds, prep.split.train_epoch(0));

    const std::string csv_path = path_in(cfg.out_dir, "finetune_records.csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write '" + csv_path + "'");
    csv << prune::record_csv_header() << std::flush;

    prune::TrainResult res =
        prune::train_plain(slim, prep.ds, prep.split, cfg.finetune.to_train_config(cfg.seed),
                           [&](const prune::EpochRecord& r) { csv << prune::record_csv_row(r) << std::flush; });

    res.best.config_json = config::dump_config(cfg);
    res.best.mask = pruned.mask;  // provenance; evaluate rebuilds the slim shape from it
    const std::string ckpt_path = path_in(cfg.out_dir, "finetune.ckpt");
    ckpt::save_checkpoint(res.best, ckpt_path);

    std::printf("finetune: best val acc %.4f (epoch %d of %d)\n", res.best.best_metric,
                res.best.best_epoch, cfg.finetune.epochs);
    std::printf("wrote %s\n", ckpt_path.c_str());
    std::printf("wrote %s\n", csv_path.c_str());
    write_manifest("finetune", cfg, {{"checkpoint", checkpoint}});
}

void run_evaluate(const config::RunConfig& cfg, const std::string& checkpoint) {
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);
    model::MaskedNet net = build_net(cfg, prep.ds);

    ckpt::Checkpoint c = load_required(checkpoint, "evaluate needs a checkpoint");
    const uint64_t want = budget::shape_fingerprint(net.shape());
    const uint64_t got = budget::shape_fingerprint(c.shape);

    double acc = 0.0;
    int64_t kept = 0;
    const int64_t total = net.shape().mask_count();
    if (got == want) {
        ckpt::restore_arrays(net, c.arrays);
        std::vector<ndgrad::Tensor> masks;
        if (!c.mask.keep.empty()) masks = c.mask.to_tensors();
        acc = prune::evaluate(net, prep.ds, prep.split.val_order(), masks);
        kept = c.mask.keep.empty() ? total : c.mask.kept();
    } else if (!c.mask.keep.empty()) {
        // Slim checkpoint: rebuild its shape by materializing the mask.
        model::MaskedNet slim = net.materialize(c.mask);
        if (budget::shape_fingerprint(slim.shape()) != got)
            throw std::runtime_error(
                "evaluate: checkpoint matches neither the configured model nor its masked form");
        ckpt::restore_arrays(slim, c.arrays);
        acc = prune::evaluate(slim, prep.ds, prep.split.val_order());
        kept = c.mask.kept();
    } else {
        throw std::runtime_error("evaluate: checkpoint architecture differs from the configured model");
    }

    char row[256];
    std::snprintf(row, sizeof row, "%.9g,%lld,%lld,", acc, static_cast<long long>(kept),
                  static_cast<long long>(total));
    const std::string csv_path = path_in(cfg.out_dir, "evaluate.csv");
    write_text(csv_path, "val_acc,kept_channels,total_channels,checkpoint\n" + std::string(row) +
                             checkpoint + "\n");

    std::printf("evaluate: val acc %.4f with %lld of %lld channels (%s)\n", acc,
                static_cast<long long>(kept), static_cast<long long>(total), checkpoint.c_str());
    std::printf("wrote %s\n", csv_path.c_str());
    write_manifest("evaluate", cfg, {{"checkpoint", checkpoint}});
}

void run_export_mask(const std::string& checkpoint, const std::string& out) {
    ckpt::Checkpoint c = load_required(checkpoint, "export-mask needs a checkpoint");
    ckpt::export_mask(c, out);
    std::printf("wrote %s\n", out.c_str());
}

void run_transfer_mask(const config::RunConfig& cfg, const std::string& host,
                       const std::string& target) {
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);
    model::MaskedNet net = build_net(cfg, prep.ds);

    ckpt::Checkpoint host_ckpt = load_required(host, "transfer-mask needs a pruned host checkpoint");
    ckpt::Checkpoint target_ckpt =
        load_required(target, "transfer-mask needs a pretrained target checkpoint");
    check_same_arch(target_ckpt, net, "transfer-mask target");
    ckpt::restore_arrays(net, target_ckpt.arrays);

    model::HardMask mask = prune::transfer_mask(host_ckpt, net);

    ckpt::Checkpoint out;
    out.config_json = config::dump_config(cfg);
    out.shape = net.shape();
    out.arrays = ckpt::snapshot_arrays(net);
    out.schedule = host_ckpt.schedule;
    out.mask = mask;
    const std::string out_path = path_in(cfg.out_dir, "transfer.ckpt");
    ckpt::save_checkpoint(out, out_path);

    for (budget::BudgetKind kind :
         {budget::BudgetKind::channel, budget::BudgetKind::volume, budget::BudgetKind::parameter,
          budget::BudgetKind::flops}) {
        std::printf("transfer-mask: %s budget preserved: host %.6g == target %.6g\n",
                    budget::to_string(kind).c_str(), mask_budget(mask, kind, host_ckpt.shape),
                    mask_budget(mask, kind, net.shape()));
    }
    std::printf("wrote %s\n", out_path.c_str());
    write_manifest("transfer-mask", cfg, {{"host", host}, {"target", target}});
}

void run_report(const std::string& run_dir) {
    const std::string ckpt_path = path_in(run_dir, "prune.ckpt");
    const std::string records_path = path_in(run_dir, "prune_records.csv");
    std::string missing;
    if (!fs::exists(ckpt_path)) missing += "\n  " + ckpt_path;
    if (!fs::exists(records_path)) missing += "\n  " + records_path;
    if (!missing.empty())
        throw std::runtime_error("report expects prune outputs in '" + run_dir +
                                 "'; missing:" + missing);

    ckpt::Checkpoint c = ckpt::load_checkpoint(ckpt_path);
    const std::vector<double> z = final_mask_values(c);

    // 64-bin histogram of final mask values over [0,1].
    std::vector<int64_t> bins(64, 0);
    for (double v : z) {
        int b = static_cast<int>(std::floor(v * 64.0));
        if (b < 0) b = 0;
        if (b > 63) b = 63;
        ++bins[b];
    }
    std::string hist = "bin_lo,bin_hi,count\n";
    char line[128];
    for (int b = 0; b < 64; ++b) {
        std::snprintf(line, sizeof line, "%.9g,%.9g,%lld\n", b / 64.0, (b + 1) / 64.0,
                      static_cast<long long>(bins[b]));
        hist += line;
    }
    const std::string hist_path = path_in(run_dir, "z_histogram.csv");
    write_text(hist_path, hist);

    if (c.mask.keep.empty()) throw std::runtime_error("report: prune checkpoint carries no mask");
    std::string table = "layer,kept,total\n";
    size_t j = 0;
    for (const auto& layer : c.shape.layers) {
        if (!layer.prunable) continue;
        int64_t kept = 0;
        for (uint8_t k : c.mask.keep[j]) kept += k;
        std::snprintf(line, sizeof line, "%d,%lld,%lld\n", layer.index,
                      static_cast<long long>(kept), static_cast<long long>(layer.channels));
        table += line;
        ++j;
    }
    const std::string table_path = path_in(run_dir, "channels_per_layer.csv");
    write_text(table_path, table);

    const std::string curves_path = path_in(run_dir, "projection_curves.csv");
    proj::write_projection_curves(curves_path, c.schedule.beta(), c.schedule.gamma());

    // Loss components per epoch, cut down from the records file.
    const std::string records = read_text(records_path);
    std::istringstream in(records);
    std::string row;
    if (!std::getline(in, row) || records.rfind(prune::record_csv_header(), 0) != 0)
        throw std::runtime_error("report: '" + records_path + "' is not a records CSV");
    std::string losses = "epoch,ce,crispness,budget_term,total\n";
    while (std::getline(in, row)) {
        if (row.empty()) continue;
        size_t pos = 0;
        for (int field = 0; field < 5 && pos != std::string::npos; ++field)
            pos = row.find(',', pos + (field ? 1 : 0));
        if (pos == std::string::npos)
            throw std::runtime_error("report: malformed row in '" + records_path + "'");
        losses += row.substr(0, pos) + "\n";
    }
    const std::string losses_path = path_in(run_dir, "loss_curves.csv");
    write_text(losses_path, losses);

    std::printf("wrote %s\n", hist_path.c_str());
    std::printf("wrote %s\n", table_path.c_str());
    std::printf("wrote %s\n", curves_path.c_str());
    std::printf("wrote %s\n", losses_path.c_str());
}

void run_grid(const config::RunConfig& cfg, const std::string& checkpoint) {
    if (cfg.grid.tuples.empty())
        throw std::runtime_error(
            "grid needs grid.tuples in the config: rows of [alpha1, alpha2, beta_step, "
            "gamma_double_every]");
    ensure_dir(cfg.out_dir);
    Prepared prep = prepare_data(cfg);

    ckpt::Checkpoint pre = load_required(checkpoint, "grid needs a pretrain checkpoint");
    const budget::BudgetKind kind = budget::budget_kind_from_string(cfg.prune.budget);

    const std::string csv_path = path_in(cfg.out_dir, "grid.csv");
    std::ofstream csv(csv_path, std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write '" + csv_path + "'");
    csv << "alpha1,alpha2,beta_step,gamma_double_every,best_epoch,val_acc,achieved\n" << std::flush;

    for (const auto& t : cfg.grid.tuples) {
        if (t[3] < 1.0 || t[3] != std::floor(t[3]))
            throw std::runtime_error("grid: gamma_double_every must be a positive integer");
        model::MaskedNet net = build_net(cfg, prep.ds);
        check_same_arch(pre, net, "grid");
        ckpt::restore_arrays(net, pre.arrays);

        prune::PruneConfig pc = cfg.prune.to_prune_config(cfg.seed);
        pc.alpha1 = t[0];
        pc.alpha2 = t[1];
        pc.schedule.beta_step = t[2];
        pc.schedule.gamma_double_every = static_cast<int>(t[3]);
        pc.validate();

        prune::PruneResult res = prune::soft_prune(net, prep.ds, prep.split, pc);
        const double achieved =
            res.best.mask.keep.empty() ? 0.0 : mask_budget(res.best.mask, kind, net.shape());
        char row[256];
        std::snprintf(row, sizeof row, "%.9g,%.9g,%.9g,%d,%d,%.9g,%.9g\n", t[0], t[1], t[2],
                      static_cast<int>(t[3]), res.best.best_epoch, res.best.best_metric, achieved);
        csv << row << std::flush;
        std::printf("grid: alpha1 %.4g alpha2 %.4g beta_step %.4g gamma_every %d -> val acc %.4f\n",
                    t[0], t[1], t[2], static_cast<int>(t[3]), res.best.best_metric);
    }
    std::printf("wrote %s\n", csv_path.c_str());
    write_manifest("grid", cfg, {{"checkpoint", checkpoint}});
}

}  // namespace whittle::cmd
