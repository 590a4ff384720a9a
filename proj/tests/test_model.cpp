#include "whittle/model.hpp"

#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "whittle/ops.hpp"

using namespace whittle;
using model::ArchConfig;
using model::HardMask;
using model::MaskedNet;
using ndgrad::Tensor;

namespace {

Tensor random_input(const ArchConfig& cfg, int64_t n, std::mt19937& rng) {
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> v(static_cast<size_t>(n * cfg.in_channels * cfg.in_h * cfg.in_w));
    for (auto& x : v) x = dist(rng);
    return Tensor::from({n, cfg.in_channels, cfg.in_h, cfg.in_w}, std::move(v));
}

HardMask all_ones(const MaskedNet& net) {
    HardMask hm;
    for (int64_t c : net.mask_layer_sizes()) {
        hm.keep.emplace_back(static_cast<size_t>(c), uint8_t{1});
    }
    return hm;
}

// Bernoulli(keep_prob) mask, resampled until no mandatory path is severed.
HardMask random_live_mask(const MaskedNet& net, std::mt19937& rng, double keep_prob = 0.6) {
    std::bernoulli_distribution coin(keep_prob);
    for (;;) {
        HardMask hm;
        for (int64_t c : net.mask_layer_sizes()) {
            std::vector<uint8_t> bits(static_cast<size_t>(c));
            for (auto& b : bits) b = coin(rng) ? 1 : 0;
            hm.keep.push_back(std::move(bits));
        }
        if (net.validate_connectivity(hm).empty()) return hm;
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.numel() == b.numel());
    double m = 0.0;
    for (size_t i = 0; i < a.data().size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
    }
    return m;
}

}  // namespace

TEST_CASE("tiny-cnn preset builds the documented stack") {
    ArchConfig cfg;
    MaskedNet net = MaskedNet::build(cfg);

    CHECK(net.stages.size() == 4);
    CHECK(net.units.size() == 4);
    CHECK(net.prunable_stage_count() == 4);
    CHECK(net.masks.total() == 96);

    const auto& layers = net.shape().layers;
    REQUIRE(layers.size() == 4);
    const int64_t want_ch[4] = {16, 16, 32, 32};
    const int64_t want_area[4] = {784, 196, 196, 49};
    const int want_pred[4] = {-1, 0, 1, 2};
    for (int i = 0; i < 4; ++i) {
        CHECK(layers[i].channels == want_ch[i]);
        CHECK(layers[i].feature_area == want_area[i]);
        CHECK(layers[i].kernel_area == 9);
        CHECK(layers[i].pred == want_pred[i]);
        CHECK(layers[i].prunable);
    }

    // conv kernels plus two batchnorm vectors per stage
    const int64_t stage_params = 16 * 1 * 9 + 32 + 16 * 16 * 9 + 32 + 32 * 16 * 9 + 64 +
                                 32 * 32 * 9 + 64;
    CHECK(net.backbone_param_count() == stage_params);
    CHECK(net.total_param_count() == stage_params + 10 * 32 + 10);

    std::mt19937 rng(3);
    Tensor x = random_input(cfg, 2, rng);
    Tensor logits = net.forward(x, {}, false);
    REQUIRE(logits.ndim() == 2);
    CHECK(logits.dim(0) == 2);
    CHECK(logits.dim(1) == 10);
}

TEST_CASE("tiny-resnet gives the skip convolution its own mask slot") {
    ArchConfig cfg;
    cfg.preset = "tiny-resnet";
    cfg.widths = {8, 16};
    MaskedNet net = MaskedNet::build(cfg);

    CHECK(net.stages.size() == 8);
    CHECK(net.prunable_stage_count() == 8);
    CHECK(net.masks.total() == 8 * 3 + 16 * 5);

    const auto& layers = net.shape().layers;
    REQUIRE(layers.size() == 8);
    const int want_pred[8] = {-1, 0, 1, 2, 3, 2, 4, 6};
    const int64_t want_k[8] = {9, 9, 9, 9, 9, 1, 9, 9};
    const int64_t want_area[8] = {784, 784, 784, 196, 196, 196, 196, 196};
    for (int i = 0; i < 8; ++i) {
        CHECK(layers[i].pred == want_pred[i]);
        CHECK(layers[i].kernel_area == want_k[i]);
        CHECK(layers[i].feature_area == want_area[i]);
    }

    // stage tensors line up with the layer table
    for (int i = 0; i < 8; ++i) {
        CHECK(net.stages[i].out_ch() == layers[i].channels);
    }
    CHECK(net.stages[5].w.dim(2) == 1);
    CHECK(net.stages[5].stride == 2);

    std::mt19937 rng(4);
    Tensor x = random_input(cfg, 2, rng);
    Tensor logits = net.forward(x, {}, true);
    CHECK(logits.dim(1) == 10);
}

TEST_CASE("mlp-bn flattens images and stacks linear+batchnorm layers") {
    ArchConfig cfg;
    cfg.preset = "mlp-bn";
    cfg.widths = {12, 7};
    cfg.in_h = 4;
    cfg.in_w = 4;
    cfg.classes = 3;
    MaskedNet net = MaskedNet::build(cfg);

    const auto& layers = net.shape().layers;
    REQUIRE(layers.size() == 2);
    CHECK(layers[0].channels == 12);
    CHECK(layers[1].channels == 7);
    for (const auto& l : layers) {
        CHECK(l.kernel_area == 1);
        CHECK(l.feature_area == 1);
    }
    CHECK(layers[0].pred == -1);
    CHECK(layers[1].pred == 0);
    CHECK(net.stages[0].is_linear());
    CHECK(net.stages[0].in_ch() == 16);

    std::mt19937 rng(5);
    Tensor x4 = random_input(cfg, 3, rng);
    Tensor flat = ndgrad::reshape(x4, {3, 16});
    Tensor a = net.forward(x4, {}, false);
    Tensor b = net.forward(flat, {}, false);
    CHECK(a.data() == b.data());
    CHECK(a.dim(1) == 3);
}

TEST_CASE("width-1 stages build and run") {
    ArchConfig cfg;
    cfg.widths = {1, 1, 1, 1};
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.classes = 2;
    MaskedNet net = MaskedNet::build(cfg);
    CHECK(net.masks.total() == 4);

    std::mt19937 rng(6);
    Tensor x = random_input(cfg, 2, rng);
    Tensor y = net.forward(x, {}, true);
    CHECK(y.dim(1) == 2);

    MaskedNet slim = net.materialize(all_ones(net));
    CHECK(slim.backbone_param_count() == net.backbone_param_count());
}

TEST_CASE("bad configs are rejected") {
    ArchConfig cfg;
    cfg.preset = "resnet50";
    CHECK_THROWS(MaskedNet::build(cfg));

    cfg.preset = "tiny-cnn";
    cfg.widths = {4, 4};
    CHECK_THROWS(MaskedNet::build(cfg));

    cfg.widths = {4, 0, 4, 4};
    CHECK_THROWS(MaskedNet::build(cfg));

    cfg.widths.clear();
    cfg.classes = 1;
    CHECK_THROWS(MaskedNet::build(cfg));

    cfg.classes = 10;
    cfg.preset = "tiny-resnet";
    cfg.widths = {4, 4, 4};
    CHECK_THROWS(MaskedNet::build(cfg));
}

TEST_CASE("builds are deterministic in the seed") {
    ArchConfig cfg;
    cfg.widths = {3, 3, 4, 4};
    cfg.in_h = 8;
    cfg.in_w = 8;
    MaskedNet a = MaskedNet::build(cfg);
    MaskedNet b = MaskedNet::build(cfg);
    cfg.seed = 2;
    MaskedNet c = MaskedNet::build(cfg);

    CHECK(a.stages[0].w.data() == b.stages[0].w.data());
    CHECK(a.head_w.data() == b.head_w.data());
    CHECK(a.masks.psi[0].data() == b.masks.psi[0].data());
    CHECK(a.stages[0].w.data() != c.stages[0].w.data());
    CHECK(a.masks.psi[0].data() != c.masks.psi[0].data());

    // psi init sits in the saturated-on band
    for (const auto& t : a.masks.psi) {
        for (float v : t.data()) {
            CHECK(v >= 2.5f);
            CHECK(v < 3.5f);
        }
    }
}

TEST_CASE("forward rejects mismatched mask lists") {
    ArchConfig cfg;
    cfg.widths = {2, 2, 2, 2};
    cfg.in_h = 8;
    cfg.in_w = 8;
    MaskedNet net = MaskedNet::build(cfg);
    std::mt19937 rng(7);
    Tensor x = random_input(cfg, 1, rng);

    std::vector<Tensor> three(3, Tensor::full({2}, 1.0f));
    CHECK_THROWS(net.forward(x, three, false));

    MaskedNet slim = net.materialize(all_ones(net));
    std::vector<Tensor> four(4, Tensor::full({2}, 1.0f));
    CHECK_THROWS(slim.forward(x, four, false));
    CHECK_NOTHROW(slim.forward(x, {}, false));
}

TEST_CASE("all-ones hard mask materializes to a bitwise-identical network") {
    for (const char* preset : {"tiny-cnn", "tiny-resnet", "mlp-bn"}) {
        ArchConfig cfg;
        cfg.preset = preset;
        cfg.widths = cfg.preset == std::string("tiny-cnn")
                         ? std::vector<int64_t>{3, 4, 5, 4}
                         : cfg.preset == std::string("tiny-resnet")
                               ? std::vector<int64_t>{3, 5}
                               : std::vector<int64_t>{6, 4};
        cfg.in_h = 8;
        cfg.in_w = 8;
        cfg.classes = 4;
        MaskedNet net = MaskedNet::build(cfg);
        MaskedNet slim = net.materialize(all_ones(net));

        CHECK(slim.backbone_param_count() == net.backbone_param_count());
        CHECK(slim.total_param_count() == net.total_param_count());
        CHECK(slim.prunable_stage_count() == 0);

        std::mt19937 rng(8);
        for (int t = 0; t < 5; ++t) {
            Tensor x = random_input(cfg, 2, rng);
            Tensor y0 = net.forward(x, {}, false);
            Tensor y1 = slim.forward(x, {}, false);
            CHECK(y0.data() == y1.data());
        }
    }
}

TEST_CASE("channels behind a zero mask are inert") {
    ArchConfig cfg;
    cfg.widths = {3, 3, 3, 3};
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.classes = 4;
    MaskedNet net = MaskedNet::build(cfg);

    HardMask hm = all_ones(net);
    hm.keep[1][2] = 0;
    auto masks = hm.to_tensors();

    std::mt19937 rng(9);
    Tensor x = random_input(cfg, 2, rng);

    // scribble on everything that only feeds the dead channel
    auto perturb = [&net]() {
        auto& st = net.stages[1];
        for (int64_t i = 0; i < st.w.dim(1) * 9; ++i) {
            st.w.data()[2 * st.w.dim(1) * 9 + i] += 0.7f;
        }
        st.gamma.data()[2] += -3.0f;
        st.beta.data()[2] += 11.0f;
        st.run_mean.data()[2] += 4.0f;
        st.run_var.data()[2] += 0.5f;
    };

    // eval first: training passes fold batch stats into the running buffers
    Tensor eval0 = net.forward(x, masks, false);
    perturb();
    Tensor eval1 = net.forward(x, masks, false);
    CHECK(eval0.data() == eval1.data());

    // training output never reads the running buffers, so the stat update
    // between the two calls cannot leak in
    Tensor train0 = net.forward(x, masks, true);
    perturb();
    Tensor train1 = net.forward(x, masks, true);
    CHECK(train0.data() == train1.data());
}

TEST_CASE("hard-masked forward matches the materialized network") {
    std::mt19937 rng(10);
    for (const char* preset : {"tiny-cnn", "tiny-resnet", "mlp-bn"}) {
        ArchConfig cfg;
        cfg.preset = preset;
        cfg.widths = cfg.preset == std::string("tiny-cnn")
                         ? std::vector<int64_t>{4, 5, 6, 5}
                         : cfg.preset == std::string("tiny-resnet")
                               ? std::vector<int64_t>{4, 6}
                               : std::vector<int64_t>{8, 6};
        cfg.in_h = 8;
        cfg.in_w = 8;
        cfg.classes = 4;
        cfg.seed = 11;
        MaskedNet net = MaskedNet::build(cfg);

        for (int trial = 0; trial < 4; ++trial) {
            HardMask hm = random_live_mask(net, rng);
            MaskedNet slim = net.materialize(hm);
            auto masks = hm.to_tensors();
            for (int t = 0; t < 9; ++t) {
                Tensor x = random_input(cfg, 2, rng);
                Tensor y0 = net.forward(x, masks, false);
                Tensor y1 = slim.forward(x, {}, false);
                CHECK(max_abs_diff(y0, y1) < 1e-5);
            }
        }
    }
}

TEST_CASE("dead branches are dropped on materialization") {
    ArchConfig cfg;
    cfg.preset = "tiny-resnet";
    cfg.widths = {3, 4};
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.classes = 3;
    MaskedNet net = MaskedNet::build(cfg);
    std::mt19937 rng(12);
    Tensor x = random_input(cfg, 2, rng);

    SUBCASE("dead 1x1 skip leaves a main-only block") {
        HardMask hm = all_ones(net);
        std::fill(hm.keep[5].begin(), hm.keep[5].end(), uint8_t{0});
        CHECK(net.validate_connectivity(hm).empty());
        MaskedNet slim = net.materialize(hm);
        CHECK(slim.stages.size() == 7);
        CHECK(max_abs_diff(net.forward(x, hm.to_tensors(), false), slim.forward(x, {}, false)) <
              1e-5);
    }

    SUBCASE("dead main path leaves a skip-only block") {
        HardMask hm = all_ones(net);
        std::fill(hm.keep[3].begin(), hm.keep[3].end(), uint8_t{0});
        CHECK(net.validate_connectivity(hm).empty());
        MaskedNet slim = net.materialize(hm);
        CHECK(slim.stages.size() == 6);
        CHECK(max_abs_diff(net.forward(x, hm.to_tensors(), false), slim.forward(x, {}, false)) <
              1e-5);
    }

    SUBCASE("dead main path over an identity skip becomes a passthrough") {
        HardMask hm = all_ones(net);
        std::fill(hm.keep[1].begin(), hm.keep[1].end(), uint8_t{0});
        std::fill(hm.keep[2].begin(), hm.keep[2].end(), uint8_t{0});
        CHECK(net.validate_connectivity(hm).empty());
        MaskedNet slim = net.materialize(hm);
        CHECK(slim.stages.size() == 6);
        CHECK(max_abs_diff(net.forward(x, hm.to_tensors(), false), slim.forward(x, {}, false)) <
              1e-5);
    }
}

TEST_CASE("masks that sever the network are reported and refused") {
    ArchConfig cfg;
    cfg.preset = "tiny-resnet";
    cfg.widths = {3, 4};
    MaskedNet net = MaskedNet::build(cfg);

    SUBCASE("dead stem") {
        HardMask hm = all_ones(net);
        std::fill(hm.keep[0].begin(), hm.keep[0].end(), uint8_t{0});
        auto fatal = net.validate_connectivity(hm);
        REQUIRE(fatal.size() == 1);
        CHECK(fatal[0] == 0);
        CHECK_THROWS(net.materialize(hm));
    }

    SUBCASE("dead main and dead conv skip together") {
        HardMask hm = all_ones(net);
        std::fill(hm.keep[3].begin(), hm.keep[3].end(), uint8_t{0});
        std::fill(hm.keep[5].begin(), hm.keep[5].end(), uint8_t{0});
        auto fatal = net.validate_connectivity(hm);
        REQUIRE(fatal.size() == 2);
        CHECK(fatal[0] == 3);
        CHECK(fatal[1] == 5);
        CHECK_THROWS(net.materialize(hm));
    }

    SUBCASE("layer layout mismatches throw") {
        HardMask hm = all_ones(net);
        hm.keep.pop_back();
        CHECK_THROWS(net.validate_connectivity(hm));
        hm = all_ones(net);
        hm.keep[2].pop_back();
        CHECK_THROWS(net.validate_connectivity(hm));
    }
}

TEST_CASE("chain networks: a dead single stage is fatal") {
    ArchConfig cfg;
    cfg.widths = {2, 2, 2, 2};
    MaskedNet net = MaskedNet::build(cfg);
    HardMask hm = all_ones(net);
    std::fill(hm.keep[2].begin(), hm.keep[2].end(), uint8_t{0});
    auto fatal = net.validate_connectivity(hm);
    REQUIRE(fatal.size() == 1);
    CHECK(fatal[0] == 2);
}

namespace {

// Analytic tape gradients of the soft-masked cross-entropy vs central finite
// differences of the double-precision reference forward at step 1e-6. The
// tiny step cannot straddle relu kinks, and the double loss resolves it.
struct SoftFdResult {
    double max_rel_err = 0.0;
    int64_t checked = 0;
};

SoftFdResult check_soft_forward(MaskedNet& net, const Tensor& x, const std::vector<int>& labels,
                                const proj::ProjectionSettings& ps, bool training,
                                const std::vector<Tensor>& weight_params) {
    net.masks.project(ps);
    Tensor loss = ndgrad::softmax_cross_entropy(
        net.forward(x, net.masks.z, training), labels);
    std::vector<Tensor> params = net.masks.psi;
    params.insert(params.end(), weight_params.begin(), weight_params.end());
    for (const Tensor& p : params) p.impl()->grad.clear();
    ndgrad::backward(loss);

    oracles::DNet dn = oracles::snapshot_net(net);
    const std::vector<double> x_d(x.data().begin(), x.data().end());
    const int64_t N = x.dim(0);
    std::vector<std::vector<double>> psi_d;
    for (const auto& t : net.masks.psi) psi_d.push_back(oracles::to_double(t));

    auto masks_of = [&](const std::vector<std::vector<double>>& psi) {
        std::vector<std::vector<double>> m(psi.size());
        for (size_t l = 0; l < psi.size(); ++l) {
            for (double p : psi[l]) {
                m[l].push_back(proj::heaviside(proj::logistic(p, ps.beta), ps.gamma));
            }
        }
        return m;
    };
    auto loss_at = [&](const std::vector<std::vector<double>>& psi) {
        return oracles::dnet_ce(dn, x_d, N, masks_of(psi), labels, training);
    };

    // the reference forward must agree with the engine at the base point
    const double base = loss_at(psi_d);
    CHECK(std::abs(base - loss.value()) < 1e-4 * std::max(1.0, std::abs(base)));

    const double h = 1e-6;
    SoftFdResult res;
    auto tally = [&](const std::vector<float>& grad, const std::vector<double>& fd) {
        double na = 0.0, nf = 0.0, nd = 0.0;
        for (size_t i = 0; i < fd.size(); ++i) {
            const double an = i < grad.size() ? grad[i] : 0.0;
            na += an * an;
            nf += fd[i] * fd[i];
            nd += (fd[i] - an) * (fd[i] - an);
            ++res.checked;
        }
        const double denom = std::max({std::sqrt(na), std::sqrt(nf), 1e-6});
        res.max_rel_err = std::max(res.max_rel_err, std::sqrt(nd) / denom);
    };

    for (size_t l = 0; l < psi_d.size(); ++l) {
        std::vector<double> fd(psi_d[l].size());
        for (size_t i = 0; i < psi_d[l].size(); ++i) {
            const double orig = psi_d[l][i];
            psi_d[l][i] = orig + h;
            const double fp = loss_at(psi_d);
            psi_d[l][i] = orig - h;
            const double fm = loss_at(psi_d);
            psi_d[l][i] = orig;
            fd[i] = (fp - fm) / (2 * h);
        }
        tally(net.masks.psi[l].impl()->grad, fd);
    }

    const auto base_masks = masks_of(psi_d);
    auto weight_slot = [&](const Tensor& p) -> std::vector<double>* {
        for (size_t si = 0; si < net.stages.size(); ++si) {
            if (p.impl() == net.stages[si].w.impl()) return &dn.stages[si].w;
            if (p.impl() == net.stages[si].gamma.impl()) return &dn.stages[si].gamma;
            if (p.impl() == net.stages[si].beta.impl()) return &dn.stages[si].beta;
        }
        if (p.impl() == net.head_w.impl()) return &dn.head_w;
        if (p.impl() == net.head_b.impl()) return &dn.head_b;
        return nullptr;
    };
    for (const Tensor& p : weight_params) {
        std::vector<double>* slot = weight_slot(p);
        REQUIRE(slot != nullptr);
        std::vector<double> fd(slot->size());
        for (size_t i = 0; i < slot->size(); ++i) {
            const double orig = (*slot)[i];
            (*slot)[i] = orig + h;
            const double fp = oracles::dnet_ce(dn, x_d, N, base_masks, labels, training);
            (*slot)[i] = orig - h;
            const double fm = oracles::dnet_ce(dn, x_d, N, base_masks, labels, training);
            (*slot)[i] = orig;
            fd[i] = (fp - fm) / (2 * h);
        }
        tally(p.impl()->grad, fd);
    }
    return res;
}

}  // namespace

TEST_CASE("soft forward is differentiable in psi and the weights") {
    ArchConfig cfg;
    cfg.widths = {2, 2, 3, 3};
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.classes = 4;
    MaskedNet net = MaskedNet::build(cfg);

    std::mt19937 rng(13);
    Tensor x = random_input(cfg, 3, rng);
    const std::vector<int> labels = {0, 1, 2};
    proj::ProjectionSettings ps;
    ps.beta = 1.5;
    ps.gamma = 3.0;

    // spread psi across the responsive band so mask gradients carry signal
    std::uniform_real_distribution<float> band(-1.0f, 1.0f);
    for (auto& t : net.masks.psi) {
        for (auto& v : t.data()) v = band(rng);
    }

    std::vector<Tensor> weights = {net.stages[0].w, net.stages[2].gamma, net.stages[3].beta,
                                   net.head_w, net.head_b};
    for (bool training : {false, true}) {
        auto res = check_soft_forward(net, x, labels, ps, training, weights);
        CHECK(res.checked == 10 + 18 + 3 + 3 + 12 + 4);
        CHECK(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("soft forward through residual blocks is differentiable in psi") {
    ArchConfig cfg;
    cfg.preset = "tiny-resnet";
    cfg.widths = {2, 3};
    cfg.in_h = 8;
    cfg.in_w = 8;
    cfg.classes = 3;
    MaskedNet net = MaskedNet::build(cfg);

    std::mt19937 rng(14);
    Tensor x = random_input(cfg, 2, rng);
    const std::vector<int> labels = {0, 2};
    proj::ProjectionSettings ps;
    ps.beta = 1.5;
    ps.gamma = 3.0;

    std::uniform_real_distribution<float> band(-1.0f, 1.0f);
    for (auto& t : net.masks.psi) {
        for (auto& v : t.data()) v = band(rng);
    }

    for (bool training : {false, true}) {
        auto res = check_soft_forward(net, x, labels, ps, training,
                                      {net.stages[5].w, net.head_b});
        CHECK(res.checked == net.masks.total() + net.stages[5].w.numel() + 3);
        CHECK(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("mlp soft forward matches the reference forward in double") {
    ArchConfig cfg;
    cfg.preset = "mlp-bn";
    cfg.widths = {6, 4};
    cfg.in_h = 4;
    cfg.in_w = 4;
    cfg.classes = 3;
    MaskedNet net = MaskedNet::build(cfg);

    std::mt19937 rng(21);
    Tensor x = random_input(cfg, 4, rng);
    const std::vector<int> labels = {0, 2, 1, 1};
    proj::ProjectionSettings ps;
    ps.beta = 1.5;
    ps.gamma = 3.0;
    std::uniform_real_distribution<float> band(-1.0f, 1.0f);
    for (auto& t : net.masks.psi) {
        for (auto& v : t.data()) v = band(rng);
    }

    auto res = check_soft_forward(net, x, labels, ps, true, {net.stages[0].w});
    CHECK(res.checked == 10 + net.stages[0].w.numel());
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("slim parameter counts match the materialize-and-count oracle") {
    std::mt19937 rng(15);
    for (const char* preset : {"tiny-cnn", "mlp-bn"}) {
        ArchConfig cfg;
        cfg.preset = preset;
        cfg.widths = cfg.preset == std::string("tiny-cnn") ? std::vector<int64_t>{4, 6, 5, 7}
                                                           : std::vector<int64_t>{9, 5, 4};
        cfg.in_h = 8;
        cfg.in_w = 8;
        MaskedNet net = MaskedNet::build(cfg);
        for (int trial = 0; trial < 20; ++trial) {
            HardMask hm = random_live_mask(net, rng);
            std::vector<std::vector<int>> keep;
            for (const auto& l : hm.keep) keep.emplace_back(l.begin(), l.end());
            MaskedNet slim = net.materialize(hm);
            CHECK(slim.backbone_param_count() ==
                  oracles::slim_param_count(oracles::materialize_shape(net.shape(), keep)));
        }
    }
}

TEST_CASE("named arrays cover every stored tensor exactly once") {
    ArchConfig cfg;
    cfg.widths = {2, 2, 2, 2};
    MaskedNet net = MaskedNet::build(cfg);
    auto arrays = net.named_arrays();
    // 5 per stage, head pair, one psi per stage
    CHECK(arrays.size() == 4 * 5 + 2 + 4);
    std::set<std::string> names;
    for (const auto& [name, t] : arrays) {
        CHECK(names.insert(name).second);
        CHECK(t.numel() > 0);
    }
    CHECK(names.count("stage0.w") == 1);
    CHECK(names.count("stage3.bn_var") == 1);
    CHECK(names.count("head.b") == 1);
    CHECK(names.count("mask2.psi") == 1);

    MaskedNet slim = net.materialize(all_ones(net));
    CHECK(slim.named_arrays().size() == 4 * 5 + 2);
}

TEST_CASE("training forward updates running stats, eval forward does not") {
    ArchConfig cfg;
    cfg.widths = {2, 2, 2, 2};
    cfg.in_h = 8;
    cfg.in_w = 8;
    MaskedNet net = MaskedNet::build(cfg);
    std::mt19937 rng(16);
    Tensor x = random_input(cfg, 4, rng);

    auto before = net.stages[0].run_mean.data();
    net.forward(x, {}, false);
    CHECK(net.stages[0].run_mean.data() == before);
    net.forward(x, {}, true);
    CHECK(net.stages[0].run_mean.data() != before);
}
