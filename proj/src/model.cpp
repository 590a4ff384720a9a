#include "whittle/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "whittle/ops.hpp"

namespace whittle::model {

using ndgrad::Tensor;

int64_t HardMask::total() const {
    int64_t n = 0;
    for (const auto& l : keep) n += static_cast<int64_t>(l.size());
    return n;
}

int64_t HardMask::kept() const {
    int64_t n = 0;
    for (const auto& l : keep)
        for (uint8_t b : l) n += b ? 1 : 0;
    return n;
}

budget::MaskValues HardMask::to_values() const {
    budget::MaskValues mv;
    for (const auto& l : keep) {
        std::vector<double> vals;
        vals.reserve(l.size());
        for (uint8_t b : l) vals.push_back(b ? 1.0 : 0.0);
        mv.push_back(std::move(vals));
    }
    return mv;
}

std::vector<Tensor> HardMask::to_tensors() const {
    std::vector<Tensor> out;
    for (const auto& l : keep) {
        std::vector<float> vals;
        vals.reserve(l.size());
        for (uint8_t b : l) vals.push_back(b ? 1.0f : 0.0f);
        out.push_back(Tensor::from({static_cast<int64_t>(l.size())}, std::move(vals)));
    }
    return out;
}

namespace {

std::vector<float> uniform_draw(std::mt19937& rng, size_t n, float bound) {
    std::uniform_real_distribution<float> dist(-bound, bound);
    std::vector<float> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

// kernel 0 builds a linear stage
Stage make_stage(std::mt19937& rng, int64_t out, int64_t in, int64_t kernel, int stride,
                 int padding) {
    Stage st;
    st.stride = stride;
    st.padding = padding;
    const int64_t fan_in = kernel > 0 ? in * kernel * kernel : in;
    const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
    if (kernel > 0) {
        st.w = Tensor::from({out, in, kernel, kernel},
                            uniform_draw(rng, static_cast<size_t>(out * in * kernel * kernel), bound),
                            true);
    } else {
        st.w = Tensor::from({out, in}, uniform_draw(rng, static_cast<size_t>(out * in), bound),
                            true);
    }
    st.gamma = Tensor::full({out}, 1.0f, true);
    st.beta = Tensor::zeros({out}, true);
    st.run_mean = Tensor::zeros({out});
    st.run_var = Tensor::full({out}, 1.0f);
    return st;
}

int64_t conv_out(int64_t extent, int64_t kernel, int stride, int padding) {
    return (extent + 2 * padding - kernel) / stride + 1;
}

}  // namespace

MaskedNet MaskedNet::build(const ArchConfig& cfg) {
    for (int64_t w : cfg.widths) {
        if (w < 1) throw std::runtime_error("model: widths must be positive");
    }
    if (cfg.classes < 2) throw std::runtime_error("model: need at least 2 classes");

    MaskedNet net;
    net.cfg_ = cfg;
    std::mt19937 rng(cfg.seed);
    budget::NetworkShape& shape = net.shape_;
    shape.input_channels = cfg.in_channels;

    auto add_layer = [&shape](int64_t channels, int64_t area, int64_t kernel_area, int pred) {
        budget::LayerSpec l;
        l.index = static_cast<int>(shape.layers.size());
        l.channels = channels;
        l.feature_area = area;
        l.kernel_area = kernel_area;
        l.pred = pred;
        l.prunable = true;
        shape.layers.push_back(l);
        return l.index;
    };

    if (cfg.preset == "tiny-cnn") {
        std::vector<int64_t> widths = cfg.widths.empty()
                                          ? std::vector<int64_t>{16, 16, 32, 32}
                                          : cfg.widths;
        if (widths.size() != 4) {
            throw std::runtime_error("tiny-cnn expects 4 widths, got " +
                                     std::to_string(widths.size()));
        }
        const int strides[4] = {1, 2, 1, 2};
        int64_t h = cfg.in_h, w = cfg.in_w, in = cfg.in_channels;
        int pred = -1;
        for (int i = 0; i < 4; ++i) {
            net.stages.push_back(make_stage(rng, widths[i], in, 3, strides[i], 1));
            h = conv_out(h, 3, strides[i], 1);
            w = conv_out(w, 3, strides[i], 1);
            pred = add_layer(widths[i], h * w, 9, pred);
            Unit u;
            u.kind = Unit::Kind::single;
            u.s1 = i;
            net.units.push_back(u);
            in = widths[i];
        }
        net.head_w = Tensor::from({cfg.classes, in},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes * in),
                                               1.0f / std::sqrt(static_cast<float>(in))),
                                  true);
        net.head_b = Tensor::from({cfg.classes},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes),
                                               1.0f / std::sqrt(static_cast<float>(in))),
                                  true);
    } else if (cfg.preset == "tiny-resnet") {
        std::vector<int64_t> widths =
            cfg.widths.empty() ? std::vector<int64_t>{8, 16} : cfg.widths;
        if (widths.size() != 2) {
            throw std::runtime_error("tiny-resnet expects 2 widths (stem, downsampled), got " +
                                     std::to_string(widths.size()));
        }
        const int64_t w0 = widths[0], w1 = widths[1];
        int64_t h = cfg.in_h, w = cfg.in_w;

        // stem
        net.stages.push_back(make_stage(rng, w0, cfg.in_channels, 3, 1, 1));
        h = conv_out(h, 3, 1, 1);
        w = conv_out(w, 3, 1, 1);
        int src = add_layer(w0, h * w, 9, -1);
        {
            Unit u;
            u.kind = Unit::Kind::single;
            u.s1 = 0;
            net.units.push_back(u);
        }
        // block 1: identity skip at stem width
        {
            net.stages.push_back(make_stage(rng, w0, w0, 3, 1, 1));
            net.stages.push_back(make_stage(rng, w0, w0, 3, 1, 1));
            const int c1 = add_layer(w0, h * w, 9, src);
            const int c2 = add_layer(w0, h * w, 9, c1);
            Unit u;
            u.kind = Unit::Kind::block;
            u.s1 = 1;
            u.s2 = 2;
            u.identity_skip = true;
            net.units.push_back(u);
            src = c2;
        }
        // block 2: stride-2 downsample with 1x1 conv skip
        {
            net.stages.push_back(make_stage(rng, w1, w0, 3, 2, 1));
            const int64_t h2 = conv_out(h, 3, 2, 1), w2 = conv_out(w, 3, 2, 1);
            net.stages.push_back(make_stage(rng, w1, w1, 3, 1, 1));
            net.stages.push_back(make_stage(rng, w1, w0, 1, 2, 0));
            const int c1 = add_layer(w1, h2 * w2, 9, src);
            const int c2 = add_layer(w1, h2 * w2, 9, c1);
            add_layer(w1, h2 * w2, 1, src);  // skip conv
            Unit u;
            u.kind = Unit::Kind::block;
            u.s1 = 3;
            u.s2 = 4;
            u.skip = 5;
            net.units.push_back(u);
            src = c2;
            h = h2;
            w = w2;
        }
        // block 3: identity skip at downsampled width
        {
            net.stages.push_back(make_stage(rng, w1, w1, 3, 1, 1));
            net.stages.push_back(make_stage(rng, w1, w1, 3, 1, 1));
            const int c1 = add_layer(w1, h * w, 9, src);
            add_layer(w1, h * w, 9, c1);
            Unit u;
            u.kind = Unit::Kind::block;
            u.s1 = 6;
            u.s2 = 7;
            u.identity_skip = true;
            net.units.push_back(u);
        }
        net.head_w = Tensor::from({cfg.classes, w1},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes * w1),
                                               1.0f / std::sqrt(static_cast<float>(w1))),
                                  true);
        net.head_b = Tensor::from({cfg.classes},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes),
                                               1.0f / std::sqrt(static_cast<float>(w1))),
                                  true);
    } else if (cfg.preset == "mlp-bn") {
        std::vector<int64_t> widths =
            cfg.widths.empty() ? std::vector<int64_t>{32, 16} : cfg.widths;
        net.flatten_input = true;
        int64_t in = cfg.in_channels * cfg.in_h * cfg.in_w;
        shape.input_channels = in;  // the first linear layer sees flattened features
        int pred = -1;
        for (size_t i = 0; i < widths.size(); ++i) {
            net.stages.push_back(make_stage(rng, widths[i], in, 0, 1, 0));
            pred = add_layer(widths[i], 1, 1, pred);
            Unit u;
            u.kind = Unit::Kind::single;
            u.s1 = static_cast<int>(i);
            net.units.push_back(u);
            in = widths[i];
        }
        net.head_w = Tensor::from({cfg.classes, in},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes * in),
                                               1.0f / std::sqrt(static_cast<float>(in))),
                                  true);
        net.head_b = Tensor::from({cfg.classes},
                                  uniform_draw(rng, static_cast<size_t>(cfg.classes),
                                               1.0f / std::sqrt(static_cast<float>(in))),
                                  true);
    } else {
        throw std::runtime_error("unknown model preset '" + cfg.preset +
                                 "' (expected tiny-cnn|tiny-resnet|mlp-bn)");
    }

    shape.validate();
    net.masks = proj::make_mask_set(net.mask_layer_sizes(), cfg.seed ^ 0x6d61736bu);
    return net;
}

std::vector<int64_t> MaskedNet::mask_layer_sizes() const {
    std::vector<int64_t> sizes;
    for (const auto& l : shape_.layers) {
        if (l.prunable) sizes.push_back(l.channels);
    }
    return sizes;
}

Tensor MaskedNet::forward(const Tensor& x0, const std::vector<Tensor>& stage_masks,
                          bool training) {
    const bool masked = !stage_masks.empty();
    if (masked && static_cast<int64_t>(stage_masks.size()) != prunable_stage_count()) {
        throw std::runtime_error("forward: " + std::to_string(stage_masks.size()) +
                                 " masks for " + std::to_string(prunable_stage_count()) +
                                 " prunable stages");
    }
    Tensor x = x0;
    if (flatten_input) {
        if (x.ndim() != 2) x = ndgrad::reshape(x, {x.dim(0), x.numel() / x.dim(0)});
    } else if (x.ndim() != 4) {
        throw std::runtime_error("forward: expected [N,C,H,W] input");
    }

    auto apply = [&](int si, const Tensor& in) {
        const Stage& st = stages[si];
        Tensor h;
        if (st.is_linear()) {
            h = ndgrad::linear(in, st.w, Tensor::zeros({st.out_ch()}));
        } else {
            h = ndgrad::conv2d(in, st.w, st.stride, st.padding);
        }
        h = ndgrad::batchnorm(h, st.gamma, st.beta, st.run_mean, st.run_var, training, bn_momentum);
        if (masked) h = ndgrad::scale_channels(h, stage_masks[si]);
        return h;
    };

    for (const Unit& u : units) {
        if (u.kind == Unit::Kind::single) {
            x = ndgrad::relu(apply(u.s1, x));
            continue;
        }
        Tensor in = x;
        Tensor main, skip;
        const bool have_main = u.s1 >= 0;
        if (have_main) {
            main = ndgrad::relu(apply(u.s1, in));
            main = apply(u.s2, main);
            if (!u.main_embed.empty()) {
                main = ndgrad::embed_channels(main, u.main_embed, u.out_width);
            }
        }
        const bool have_skip = u.skip >= 0 || u.identity_skip;
        if (u.skip >= 0) {
            skip = apply(u.skip, in);
            if (!u.skip_embed.empty()) {
                skip = ndgrad::embed_channels(skip, u.skip_embed, u.out_width);
            }
        } else if (u.identity_skip) {
            skip = u.skip_embed.empty() ? in
                                        : ndgrad::embed_channels(in, u.skip_embed, u.out_width);
        }
        if (have_main && have_skip) {
            x = ndgrad::relu(ndgrad::add(main, skip));
        } else if (have_main) {
            x = ndgrad::relu(main);
        } else if (have_skip) {
            x = ndgrad::relu(skip);
        } else {
            throw std::runtime_error("forward: block with no live branch");
        }
    }

    Tensor feat = flatten_input ? x : ndgrad::global_avg_pool(x);
    return ndgrad::linear(feat, head_w, head_b);
}

std::vector<Tensor> MaskedNet::parameters() {
    std::vector<Tensor> ps;
    for (auto& st : stages) {
        ps.push_back(st.w);
        ps.push_back(st.gamma);
        ps.push_back(st.beta);
    }
    ps.push_back(head_w);
    ps.push_back(head_b);
    return ps;
}

int64_t MaskedNet::backbone_param_count() const {
    int64_t n = 0;
    for (const auto& st : stages) n += st.w.numel() + 2 * st.out_ch();
    return n;
}

int64_t MaskedNet::total_param_count() const {
    return backbone_param_count() + head_w.numel() + head_b.numel();
}

namespace {
int64_t kept_count(const HardMask& hm, int si) {
    int64_t c = 0;
    for (uint8_t b : hm.keep[si]) c += b ? 1 : 0;
    return c;
}
}  // namespace

std::vector<int> MaskedNet::validate_connectivity(const HardMask& hm) const {
    if (static_cast<int64_t>(hm.keep.size()) != prunable_stage_count()) {
        throw std::runtime_error("hard mask has " + std::to_string(hm.keep.size()) +
                                 " layers, expected " + std::to_string(prunable_stage_count()));
    }
    for (size_t i = 0; i < hm.keep.size(); ++i) {
        if (static_cast<int64_t>(hm.keep[i].size()) != stages[i].out_ch()) {
            throw std::runtime_error("hard mask layer " + std::to_string(i) +
                                     " has wrong channel count");
        }
    }
    std::vector<int> fatal;
    for (const Unit& u : units) {
        if (u.kind == Unit::Kind::single) {
            if (kept_count(hm, u.s1) == 0) fatal.push_back(u.s1);
            continue;
        }
        const bool main_ok = kept_count(hm, u.s1) > 0 && kept_count(hm, u.s2) > 0;
        const bool skip_ok = u.identity_skip || (u.skip >= 0 && kept_count(hm, u.skip) > 0);
        if (!main_ok && !skip_ok) {
            if (kept_count(hm, u.s1) == 0) fatal.push_back(u.s1);
            if (kept_count(hm, u.s2) == 0) fatal.push_back(u.s2);
            if (u.skip >= 0 && kept_count(hm, u.skip) == 0) fatal.push_back(u.skip);
        }
    }
    return fatal;
}

namespace {

std::vector<int64_t> kept_ids(const HardMask& hm, int si) {
    std::vector<int64_t> ids;
    for (size_t c = 0; c < hm.keep[si].size(); ++c) {
        if (hm.keep[si][c]) ids.push_back(static_cast<int64_t>(c));
    }
    return ids;
}

std::vector<float> slice1(const Tensor& t, const std::vector<int64_t>& ids) {
    std::vector<float> out;
    out.reserve(ids.size());
    for (int64_t i : ids) out.push_back(t.at(i));
    return out;
}

Stage slice_stage(const Stage& st, const std::vector<int64_t>& out_ids,
                  const std::vector<int64_t>& in_ids) {
    Stage ns;
    ns.stride = st.stride;
    ns.padding = st.padding;
    const int64_t O = static_cast<int64_t>(out_ids.size());
    const int64_t I = static_cast<int64_t>(in_ids.size());
    if (st.is_linear()) {
        const int64_t in_full = st.in_ch();
        std::vector<float> w(static_cast<size_t>(O * I));
        for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < I; ++i)
                w[o * I + i] = st.w.at(out_ids[o] * in_full + in_ids[i]);
        ns.w = Tensor::from({O, I}, std::move(w), true);
    } else {
        const int64_t in_full = st.in_ch(), k = st.w.dim(2);
        std::vector<float> w(static_cast<size_t>(O * I * k * k));
        for (int64_t o = 0; o < O; ++o)
            for (int64_t i = 0; i < I; ++i)
                for (int64_t t = 0; t < k * k; ++t)
                    w[(o * I + i) * k * k + t] =
                        st.w.at((out_ids[o] * in_full + in_ids[i]) * k * k + t);
        ns.w = Tensor::from({O, I, k, k}, std::move(w), true);
    }
    ns.gamma = Tensor::from({O}, slice1(st.gamma, out_ids), true);
    ns.beta = Tensor::from({O}, slice1(st.beta, out_ids), true);
    ns.run_mean = Tensor::from({O}, slice1(st.run_mean, out_ids));
    ns.run_var = Tensor::from({O}, slice1(st.run_var, out_ids));
    return ns;
}

std::vector<int64_t> sorted_union(const std::vector<int64_t>& a, const std::vector<int64_t>& b) {
    std::vector<int64_t> u;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(u));
    return u;
}

// positions of `ids` inside `universe`; empty result means identity map
std::vector<int64_t> embed_map(const std::vector<int64_t>& ids,
                               const std::vector<int64_t>& universe) {
    if (ids == universe) return {};
    std::vector<int64_t> m;
    m.reserve(ids.size());
    for (int64_t id : ids) {
        const auto it = std::lower_bound(universe.begin(), universe.end(), id);
        m.push_back(static_cast<int64_t>(it - universe.begin()));
    }
    return m;
}

}  // namespace

MaskedNet MaskedNet::materialize(const HardMask& hm) const {
    const auto fatal = validate_connectivity(hm);
    if (!fatal.empty()) {
        std::string msg = "fatal pruning: layer";
        for (size_t i = 0; i < fatal.size(); ++i) {
            msg += (i ? "," : "") + std::string(" ") + std::to_string(fatal[i]);
        }
        msg += " left with zero channels on a mandatory path";
        throw std::runtime_error(msg);
    }

    MaskedNet slim;
    slim.cfg_ = cfg_;
    slim.flatten_input = flatten_input;
    slim.shape_.input_channels = shape_.input_channels;

    int prev_source = -1;
    auto add_slim_layer = [&](const Stage& st, int orig_stage, int pred) {
        budget::LayerSpec l;
        l.index = static_cast<int>(slim.shape_.layers.size());
        l.channels = st.out_ch();
        l.feature_area = shape_.layers[orig_stage].feature_area;
        l.kernel_area = shape_.layers[orig_stage].kernel_area;
        l.pred = pred;
        l.prunable = false;
        slim.shape_.layers.push_back(l);
        return l.index;
    };

    std::vector<int64_t> cur(flatten_input
                                 ? static_cast<size_t>(cfg_.in_channels * cfg_.in_h * cfg_.in_w)
                                 : static_cast<size_t>(cfg_.in_channels));
    std::iota(cur.begin(), cur.end(), 0);

    for (const Unit& u : units) {
        if (u.kind == Unit::Kind::single) {
            const auto out_ids = kept_ids(hm, u.s1);
            Unit nu;
            nu.kind = Unit::Kind::single;
            nu.s1 = static_cast<int>(slim.stages.size());
            slim.stages.push_back(slice_stage(stages[u.s1], out_ids, cur));
            prev_source = add_slim_layer(slim.stages.back(), u.s1, prev_source);
            slim.units.push_back(nu);
            cur = out_ids;
            continue;
        }

        const std::vector<int64_t> in_ids = cur;
        const auto k1 = kept_ids(hm, u.s1);
        const auto k2 = kept_ids(hm, u.s2);
        const bool main_ok = !k1.empty() && !k2.empty();
        Unit nu;
        nu.kind = Unit::Kind::block;
        nu.identity_skip = u.identity_skip;
        std::vector<int64_t> main_out, skip_out;
        int c2_layer = -1, skip_layer = -1;
        if (main_ok) {
            nu.s1 = static_cast<int>(slim.stages.size());
            slim.stages.push_back(slice_stage(stages[u.s1], k1, in_ids));
            const int c1_layer = add_slim_layer(slim.stages.back(), u.s1, prev_source);
            nu.s2 = static_cast<int>(slim.stages.size());
            slim.stages.push_back(slice_stage(stages[u.s2], k2, k1));
            c2_layer = add_slim_layer(slim.stages.back(), u.s2, c1_layer);
            main_out = k2;
        }
        if (u.skip >= 0) {
            const auto ks = kept_ids(hm, u.skip);
            if (!ks.empty()) {
                nu.skip = static_cast<int>(slim.stages.size());
                slim.stages.push_back(slice_stage(stages[u.skip], ks, in_ids));
                skip_layer = add_slim_layer(slim.stages.back(), u.skip, prev_source);
                skip_out = ks;
            }
        } else if (u.identity_skip) {
            skip_out = in_ids;
        }

        const auto uni = sorted_union(main_out, skip_out);
        nu.out_width = static_cast<int64_t>(uni.size());
        if (main_ok) nu.main_embed = embed_map(main_out, uni);
        if (!skip_out.empty() && (nu.skip >= 0 || u.identity_skip)) {
            nu.skip_embed = embed_map(skip_out, uni);
        }
        prev_source = c2_layer >= 0 ? c2_layer : skip_layer >= 0 ? skip_layer : prev_source;
        slim.units.push_back(nu);
        cur = uni;
    }

    const int64_t D = static_cast<int64_t>(cur.size());
    const int64_t full_d = head_w.dim(1);
    std::vector<float> hw(static_cast<size_t>(cfg_.classes * D));
    for (int64_t k = 0; k < cfg_.classes; ++k)
        for (int64_t j = 0; j < D; ++j) hw[k * D + j] = head_w.at(k * full_d + cur[j]);
    slim.head_w = Tensor::from({cfg_.classes, D}, std::move(hw), true);
    std::vector<float> hb(head_b.data().begin(), head_b.data().end());
    slim.head_b = Tensor::from({cfg_.classes}, std::move(hb), true);
    slim.shape_.validate();
    return slim;
}

std::vector<std::pair<std::string, Tensor>> MaskedNet::named_arrays() {
    std::vector<std::pair<std::string, Tensor>> out;
    for (size_t i = 0; i < stages.size(); ++i) {
        const std::string p = "stage" + std::to_string(i);
        out.emplace_back(p + ".w", stages[i].w);
        out.emplace_back(p + ".bn_gamma", stages[i].gamma);
        out.emplace_back(p + ".bn_beta", stages[i].beta);
        out.emplace_back(p + ".bn_mean", stages[i].run_mean);
        out.emplace_back(p + ".bn_var", stages[i].run_var);
    }
    out.emplace_back("head.w", head_w);
    out.emplace_back("head.b", head_b);
    for (size_t j = 0; j < masks.psi.size(); ++j) {
        out.emplace_back("mask" + std::to_string(j) + ".psi", masks.psi[j]);
    }
    return out;
}

}  // namespace whittle::model
