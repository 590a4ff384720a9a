#include "whittle/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

#include "whittle/ops.hpp"

namespace whittle::prune {

using ndgrad::Tensor;

void PruneConfig::validate() const {
    if (!(target > 0.0) || target > 1.0) {
        throw std::invalid_argument("budget target must lie in (0, 1], got " +
                                    std::to_string(target));
    }
    if (epochs < 0) throw std::invalid_argument("epoch count must be >= 0");
    if (alpha1 < 0.0 || alpha2 < 0.0) throw std::invalid_argument("loss weights must be >= 0");
    if (beta_round <= 0.0) throw std::invalid_argument("rounding sharpness must be > 0");
}

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("epoch count must be >= 0");
    if (lr_step_every < 1) throw std::invalid_argument("lr step interval must be >= 1");
}

std::string record_csv_header() {
    return "epoch,ce,crispness,budget_term,total,beta,gamma,val_acc,achieved,fatal\n";
}

std::string record_csv_row(const EpochRecord& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%d\n", r.epoch,
                  r.ce, r.crispness, r.budget_term, r.total, r.beta, r.gamma, r.val_acc,
                  r.achieved, r.fatal ? 1 : 0);
    return buf;
}

LossParts prune_loss(const Tensor& logits, const std::vector<int>& labels, proj::MaskSet& masks,
                     const budget::NetworkShape& shape, const PruneConfig& cfg) {
    if (masks.layers() == 0 || masks.z_tilde.size() != masks.layers() ||
        masks.z.size() != masks.layers() || masks.z_bar.size() != masks.layers()) {
        throw std::invalid_argument("masks must be projected before the loss");
    }
    Tensor ce = ndgrad::softmax_cross_entropy(logits, labels);
    Tensor crisp = proj::crispness_loss(masks.z_tilde[0], masks.z[0]);
    for (size_t i = 1; i < masks.layers(); ++i) {
        crisp = ndgrad::add(crisp, proj::crispness_loss(masks.z_tilde[i], masks.z[i]));
    }
    const std::vector<Tensor>& rounded = cfg.logistic_round ? masks.z_bar : masks.z;
    Tensor over = budget::budget_loss(budget::eval_budget(cfg.kind, rounded, shape), cfg.target);

    LossParts parts;
    parts.total = ndgrad::add(ce, ndgrad::add(ndgrad::scalar_mul(crisp, cfg.alpha1),
                                              ndgrad::scalar_mul(over, cfg.alpha2)));
    parts.ce = ce.value();
    parts.crispness = crisp.value();
    parts.budget_term = over.value();
    return parts;
}

namespace {

void check_mask_values(const budget::MaskValues& z, const budget::NetworkShape& shape) {
    if (static_cast<int64_t>(z.size()) != shape.prunable_layer_count()) {
        throw std::invalid_argument("mask values cover " + std::to_string(z.size()) +
                                    " layers, shape has " +
                                    std::to_string(shape.prunable_layer_count()) + " prunable");
    }
    size_t li = 0;
    for (const auto& l : shape.layers) {
        if (!l.prunable) continue;
        if (static_cast<int64_t>(z[li].size()) != l.channels) {
            throw std::invalid_argument("mask row " + std::to_string(li) + " holds " +
                                        std::to_string(z[li].size()) + " values, layer wants " +
                                        std::to_string(l.channels));
        }
        ++li;
    }
}

model::HardMask mask_at_cutoff(const budget::MaskValues& z, double t) {
    model::HardMask hm;
    hm.keep.reserve(z.size());
    for (const auto& row : z) {
        std::vector<uint8_t> bits(row.size());
        for (size_t c = 0; c < row.size(); ++c) bits[c] = row[c] >= t ? 1 : 0;
        hm.keep.push_back(std::move(bits));
    }
    return hm;
}

budget::MaskValues mask_values_of(const proj::MaskSet& masks) {
    budget::MaskValues zv;
    zv.reserve(masks.z.size());
    for (const auto& t : masks.z) zv.emplace_back(t.data().begin(), t.data().end());
    return zv;
}

}  // namespace

model::HardMask hard_prune(const budget::MaskValues& z, budget::BudgetKind kind, double target,
                           const budget::NetworkShape& shape) {
    if (!(target > 0.0) || target > 1.0) {
        throw std::invalid_argument("budget target must lie in (0, 1], got " +
                                    std::to_string(target));
    }
    shape.validate();
    check_mask_values(z, shape);
    const int64_t p = shape.mask_count();
    if (p == 0) throw std::invalid_argument("shape has no prunable layers");

    if (kind == budget::BudgetKind::channel) {
        const int64_t k = static_cast<int64_t>(std::floor(target * static_cast<double>(p)));
        if (k < 1) {
            char buf[192];
            std::snprintf(buf, sizeof buf,
                          "channel target %.6g keeps no channels; the smallest feasible "
                          "target is %.6g (one channel of %lld)",
                          target, 1.0 / static_cast<double>(p), static_cast<long long>(p));
            throw std::invalid_argument(buf);
        }
        struct Entry {
            double v;
            size_t layer, ch;
        };
        std::vector<Entry> order;
        order.reserve(static_cast<size_t>(p));
        for (size_t l = 0; l < z.size(); ++l) {
            for (size_t c = 0; c < z[l].size(); ++c) order.push_back({z[l][c], l, c});
        }
        std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
            if (a.v != b.v) return a.v > b.v;
            if (a.layer != b.layer) return a.layer < b.layer;
            return a.ch < b.ch;
        });
        model::HardMask hm;
        for (const auto& row : z) hm.keep.emplace_back(row.size(), 0);
        for (int64_t i = 0; i < k; ++i) hm.keep[order[i].layer][order[i].ch] = 1;
        return hm;
    }

    std::vector<double> cuts;
    for (const auto& row : z) cuts.insert(cuts.end(), row.begin(), row.end());
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    auto value_at = [&](double t) {
        return budget::eval_budget(kind, mask_at_cutoff(z, t).to_values(), shape);
    };
    // V(cutoff) never grows with the cutoff, so the smallest cutoff whose
    // kept set satisfies the target gives the largest feasible threshold set.
    size_t lo = 0, hi = cuts.size();
    while (lo < hi) {
        const size_t mid = lo + (hi - lo) / 2;
        if (value_at(cuts[mid]) <= target) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    const double inf = std::numeric_limits<double>::infinity();
    model::HardMask hm = mask_at_cutoff(z, lo == cuts.size() ? inf : cuts[lo]);

    // Channels tied at the cutoff may still fit one at a time, so promote
    // excluded channels in z order (ties by layer, then channel) until the
    // first that no longer fits. Stopping there keeps the result equal to
    // the plain threshold scan whenever the z values are distinct, and the
    // highest-z excluded channel always exceeds the target when re-added.
    struct Entry {
        double v;
        size_t layer, ch;
    };
    std::vector<Entry> excluded;
    for (size_t l = 0; l < z.size(); ++l) {
        for (size_t c = 0; c < z[l].size(); ++c) {
            if (!hm.keep[l][c]) excluded.push_back({z[l][c], l, c});
        }
    }
    std::sort(excluded.begin(), excluded.end(), [](const Entry& a, const Entry& b) {
        if (a.v != b.v) return a.v > b.v;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.ch < b.ch;
    });
    for (const Entry& e : excluded) {
        hm.keep[e.layer][e.ch] = 1;
        if (budget::eval_budget(kind, hm.to_values(), shape) > target) {
            hm.keep[e.layer][e.ch] = 0;
            break;
        }
    }
    if (hm.kept() == 0) {
        model::HardMask single = mask_at_cutoff(z, inf);
        single.keep[excluded[0].layer][excluded[0].ch] = 1;
        char buf[192];
        std::snprintf(buf, sizeof buf,
                      "%s target %.6g is below one-channel granularity; the smallest "
                      "achievable nonzero value is %.6g",
                      budget::to_string(kind).c_str(), target,
                      budget::eval_budget(kind, single.to_values(), shape));
        throw std::invalid_argument(buf);
    }
    return hm;
}

MaskStats mask_stats(const std::vector<float>& z, double tol) {
    MaskStats s;
    if (z.empty()) return s;
    int64_t crisp = 0, mid = 0;
    for (float v : z) {
        if (std::abs(v) <= tol || std::abs(v - 1.0f) <= tol) ++crisp;
        if (v >= 0.2f && v <= 0.8f) ++mid;
    }
    s.crisp_fraction = static_cast<double>(crisp) / static_cast<double>(z.size());
    s.mid_fraction = static_cast<double>(mid) / static_cast<double>(z.size());
    return s;
}

double evaluate(model::MaskedNet& net, const data::Dataset& ds,
                const std::vector<std::vector<int64_t>>& batches,
                const std::vector<Tensor>& stage_masks) {
    ndgrad::NoGrad guard;
    int64_t correct = 0, total = 0;
    for (const auto& idx : batches) {
        data::Batch b = data::gather(ds, idx);
        std::vector<int> pred = ndgrad::argmax_rows(net.forward(b.images, stage_masks, false));
        for (size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.labels[i];
        total += static_cast<int64_t>(pred.size());
    }
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

namespace {

// Canonical array name of each trainable tensor, for optimizer state slots.
std::vector<std::string> param_names(model::MaskedNet& net, const std::vector<Tensor>& params) {
    std::map<const ndgrad::TensorImpl*, std::string> names;
    for (auto& [name, t] : net.named_arrays()) names[t.impl().get()] = name;
    std::vector<std::string> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        auto it = names.find(p.impl().get());
        if (it == names.end()) throw std::logic_error("trainable tensor missing a canonical name");
        out.push_back(it->second);
    }
    return out;
}

[[noreturn]] void rethrow_with_context(const char* what, int epoch, size_t batch,
                                       const std::exception& ex) {
    throw std::runtime_error(std::string(what) + " aborted at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(batch) + ": " + ex.what());
}

}  // namespace

PruneResult soft_prune(model::MaskedNet& net, const data::Dataset& ds, const data::DataSplit& split,
                       const PruneConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch,
                       const std::function<void(const ckpt::Checkpoint&)>& on_state,
                       const ckpt::Checkpoint* resume) {
    cfg.validate();
    const budget::NetworkShape& shape = net.shape();
    if (net.prunable_stage_count() == 0) {
        throw std::invalid_argument("network has no prunable stages");
    }

    std::vector<Tensor> params = net.parameters();
    const size_t weight_count = params.size();
    for (auto& psi : net.masks.psi) params.push_back(psi);
    std::vector<uint8_t> decay(params.size(), 1);
    for (size_t i = weight_count; i < params.size(); ++i) decay[i] = 0;
    const std::vector<std::string> names = param_names(net, params);

    optim::AdamState opt;
    proj::ContinuationState sched = cfg.schedule;
    sched.epoch = 0;
    std::vector<EpochRecord> records;
    std::string csv = record_csv_header();
    double best_metric = 0.0;
    int best_epoch = -1;
    model::HardMask best_mask;
    int start_epoch = 0;

    if (resume) {
        if (budget::shape_fingerprint(resume->shape) != budget::shape_fingerprint(shape)) {
            throw std::runtime_error("resume checkpoint was written for a different architecture");
        }
        if (resume->epoch > cfg.epochs) {
            throw std::runtime_error("resume checkpoint is already past epoch " +
                                     std::to_string(cfg.epochs));
        }
        ckpt::restore_arrays(net, resume->arrays);
        opt.t = resume->opt_t;
        if (opt.t > 0) {
            opt.m.assign(params.size(), {});
            opt.v.assign(params.size(), {});
            for (size_t i = 0; i < params.size(); ++i) {
                const auto* m = resume->find("opt.m." + names[i]);
                const auto* v = resume->find("opt.v." + names[i]);
                if (!m || !v) {
                    throw std::runtime_error("resume checkpoint lacks optimizer state for '" +
                                             names[i] + "'");
                }
                if (m->size() != params[i].data().size() ||
                    v->size() != params[i].data().size()) {
                    throw std::runtime_error("optimizer state size mismatch for '" + names[i] +
                                             "'");
                }
                opt.m[i] = *m;
                opt.v[i] = *v;
            }
        }
        best_metric = resume->best_metric;
        best_epoch = resume->best_epoch;
        best_mask = resume->mask;
        if (!resume->records_csv.empty()) csv = resume->records_csv;
        sched = resume->schedule;
        start_epoch = resume->epoch;
    }

    std::vector<std::pair<std::string, std::vector<float>>> best_arrays;
    if (resume && best_epoch >= 0) {
        for (auto& [name, t] : net.named_arrays()) {
            const auto* v = resume->find("best." + name);
            if (!v) {
                throw std::runtime_error("resume checkpoint lacks best-epoch array '" + name +
                                         "'");
            }
            best_arrays.emplace_back(name, *v);
        }
    } else {
        best_arrays = ckpt::snapshot_arrays(net);
    }

    for (int e = start_epoch; e < cfg.epochs; ++e) {
        const proj::ProjectionSettings ps{sched.beta(), sched.gamma(), cfg.beta_round,
                                          cfg.use_heaviside};
        const auto batches = split.train_epoch(e);
        double ce_sum = 0.0, crisp_sum = 0.0, budget_sum = 0.0, total_sum = 0.0;
        int64_t seen = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            try {
                for (auto& p : params) p.zero_grad();
                net.masks.project(ps);
                data::Batch b = data::gather(ds, batches[bi]);
                Tensor logits = net.forward(b.images, net.masks.z, true);
                LossParts parts = prune_loss(logits, b.labels, net.masks, shape, cfg);
                const double lv = parts.total.value();
                if (!std::isfinite(lv)) throw std::runtime_error("loss is non-finite");
                ndgrad::backward(parts.total);
                optim::adamw_step(params, opt, cfg.opt, decay);
                const auto n = static_cast<double>(batches[bi].size());
                ce_sum += parts.ce * n;
                crisp_sum += parts.crispness * n;
                budget_sum += parts.budget_term * n;
                total_sum += lv * n;
                seen += static_cast<int64_t>(batches[bi].size());
            } catch (const std::exception& ex) {
                rethrow_with_context("soft pruning", e, bi, ex);
            }
        }

        EpochRecord rec;
        rec.epoch = e;
        rec.beta = ps.beta;
        rec.gamma = ps.gamma;
        if (seen > 0) {
            rec.ce = ce_sum / static_cast<double>(seen);
            rec.crispness = crisp_sum / static_cast<double>(seen);
            rec.budget_term = budget_sum / static_cast<double>(seen);
            rec.total = total_sum / static_cast<double>(seen);
        }

        {
            ndgrad::NoGrad guard;
            net.masks.project(ps);
        }
        model::HardMask hm;
        try {
            hm = hard_prune(mask_values_of(net.masks), cfg.kind, cfg.target, shape);
        } catch (const std::exception& ex) {
            throw std::runtime_error("hard pruning failed after epoch " + std::to_string(e) +
                                     ": " + ex.what());
        }
        rec.achieved = budget::eval_budget(cfg.kind, hm.to_values(), shape);
        rec.fatal = !net.validate_connectivity(hm).empty();
        if (!rec.fatal) rec.val_acc = evaluate(net, ds, split.val_order(), hm.to_tensors());

        records.push_back(rec);
        csv += record_csv_row(rec);
        if (!rec.fatal && (best_epoch < 0 || rec.val_acc > best_metric)) {
            best_metric = rec.val_acc;
            best_epoch = e;
            best_arrays = ckpt::snapshot_arrays(net);
            best_mask = hm;
        }
        if (on_epoch) on_epoch(rec);
        sched = proj::schedule_step(sched);

        if (on_state) {
            ckpt::Checkpoint cur;
            cur.shape = shape;
            cur.arrays = ckpt::snapshot_arrays(net);
            for (size_t i = 0; i < params.size(); ++i) {
                cur.arrays.emplace_back("opt.m." + names[i], opt.m[i]);
                cur.arrays.emplace_back("opt.v." + names[i], opt.v[i]);
            }
            for (const auto& [n, v] : best_arrays) cur.arrays.emplace_back("best." + n, v);
            cur.schedule = sched;
            cur.epoch = e + 1;
            cur.opt_t = opt.t;
            cur.best_metric = best_metric;
            cur.best_epoch = best_epoch;
            cur.records_csv = csv;
            cur.mask = best_mask;
            on_state(cur);
        }
    }

    if (cfg.epochs > 0 && best_epoch < 0) {
        throw std::runtime_error(
            "every epoch produced a disconnected hard mask; raise the budget target or train "
            "longer before pruning");
    }
    if (best_epoch >= 0) ckpt::restore_arrays(net, best_arrays);

    PruneResult out;
    out.best.shape = shape;
    out.best.arrays = std::move(best_arrays);
    out.best.schedule = sched;
    out.best.epoch = cfg.epochs;
    out.best.opt_t = opt.t;
    out.best.best_metric = best_metric;
    out.best.best_epoch = best_epoch;
    out.best.records_csv = std::move(csv);
    out.best.mask = std::move(best_mask);
    out.records = std::move(records);
    return out;
}

TrainResult train_plain(model::MaskedNet& net, const data::Dataset& ds,
                        const data::DataSplit& split, const TrainConfig& cfg,
                        const std::function<void(const EpochRecord&)>& on_epoch) {
    cfg.validate();
    std::vector<Tensor> params = net.parameters();

    optim::SgdState opt;
    std::vector<EpochRecord> records;
    std::string csv = record_csv_header();
    double best_metric = 0.0;
    int best_epoch = -1;
    auto best_arrays = ckpt::snapshot_arrays(net);

    for (int e = 0; e < cfg.epochs; ++e) {
        optim::SgdConfig step_cfg = cfg.opt;
        step_cfg.lr = optim::step_decay(cfg.opt.lr, e, cfg.lr_step_every, cfg.lr_factor);
        const auto batches = split.train_epoch(e);
        double ce_sum = 0.0;
        int64_t seen = 0;
        for (size_t bi = 0; bi < batches.size(); ++bi) {
            try {
                for (auto& p : params) p.zero_grad();
                data::Batch b = data::gather(ds, batches[bi]);
                Tensor loss =
                    ndgrad::softmax_cross_entropy(net.forward(b.images, {}, true), b.labels);
                const double lv = loss.value();
                if (!std::isfinite(lv)) throw std::runtime_error("loss is non-finite");
                ndgrad::backward(loss);
                optim::sgd_momentum_step(params, opt, step_cfg);
                ce_sum += lv * static_cast<double>(batches[bi].size());
                seen += static_cast<int64_t>(batches[bi].size());
            } catch (const std::exception& ex) {
                rethrow_with_context("training", e, bi, ex);
            }
        }

        EpochRecord rec;
        rec.epoch = e;
        if (seen > 0) rec.ce = ce_sum / static_cast<double>(seen);
        rec.total = rec.ce;
        rec.val_acc = evaluate(net, ds, split.val_order(), {});
        records.push_back(rec);
        csv += record_csv_row(rec);
        if (on_epoch) on_epoch(rec);
        if (best_epoch < 0 || rec.val_acc > best_metric) {
            best_metric = rec.val_acc;
            best_epoch = e;
            best_arrays = ckpt::snapshot_arrays(net);
        }
    }

    if (best_epoch >= 0) ckpt::restore_arrays(net, best_arrays);

    TrainResult out;
    out.best.shape = net.shape();
    out.best.arrays = std::move(best_arrays);
    out.best.epoch = cfg.epochs;
    out.best.best_metric = best_metric;
    out.best.best_epoch = best_epoch;
    out.best.records_csv = std::move(csv);
    out.records = std::move(records);
    return out;
}

model::HardMask transfer_mask(const ckpt::Checkpoint& host, const model::MaskedNet& target) {
    if (host.mask.keep.empty()) throw std::runtime_error("checkpoint carries no mask to transfer");
    const budget::NetworkShape& hs = host.shape;
    const budget::NetworkShape& ts = target.shape();
    if (budget::shape_fingerprint(hs) != budget::shape_fingerprint(ts)) {
        std::string diff;
        if (hs.input_channels != ts.input_channels) diff += " input-channels";
        const size_t n = std::max(hs.layers.size(), ts.layers.size());
        for (size_t i = 0; i < n; ++i) {
            if (i >= hs.layers.size() || i >= ts.layers.size()) {
                diff += " " + std::to_string(i);
                continue;
            }
            const auto& a = hs.layers[i];
            const auto& b = ts.layers[i];
            if (a.channels != b.channels || a.feature_area != b.feature_area ||
                a.kernel_area != b.kernel_area || a.pred != b.pred || a.prunable != b.prunable) {
                diff += " " + std::to_string(i);
            }
        }
        throw std::runtime_error("mask transfer needs an identical backbone; differing layers:" +
                                 (diff.empty() ? std::string(" (layer order)") : diff));
    }
    size_t li = 0;
    for (const auto& l : ts.layers) {
        if (!l.prunable) continue;
        if (li >= host.mask.keep.size() ||
            static_cast<int64_t>(host.mask.keep[li].size()) != l.channels) {
            throw std::runtime_error("mask row " + std::to_string(li) +
                                     " does not match the target layer width");
        }
        ++li;
    }
    if (li != host.mask.keep.size()) {
        throw std::runtime_error("mask covers " + std::to_string(host.mask.keep.size()) +
                                 " layers, target has " + std::to_string(li));
    }
    return host.mask;
}

void refresh_bn_stats(model::MaskedNet& net, const data::Dataset& ds,
                      const std::vector<std::vector<int64_t>>& batches) {
    if (batches.empty()) return;
    ndgrad::NoGrad guard;
    const double saved = net.bn_momentum;
    try {
        int k = 0;
        for (const auto& idx : batches) {
            // momentum 1/k turns the EMA into a plain average of batch stats
            net.bn_momentum = 1.0 / ++k;
            data::Batch b = data::gather(ds, idx);
            net.forward(b.images, {}, true);
        }
    } catch (...) {
        net.bn_momentum = saved;
        throw;
    }
    net.bn_momentum = saved;
}

}  // namespace whittle::prune
