#include "whittle/budget.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "whittle/ops.hpp"

namespace whittle::budget {

using ndgrad::Tensor;

BudgetKind budget_kind_from_string(const std::string& s) {
    if (s == "channel") return BudgetKind::channel;
    if (s == "volume") return BudgetKind::volume;
    if (s == "parameter") return BudgetKind::parameter;
    if (s == "flops") return BudgetKind::flops;
    throw std::runtime_error("unknown budget kind '" + s +
                             "' (expected channel|volume|parameter|flops)");
}

std::string to_string(BudgetKind k) {
    switch (k) {
        case BudgetKind::channel: return "channel";
        case BudgetKind::volume: return "volume";
        case BudgetKind::parameter: return "parameter";
        case BudgetKind::flops: return "flops";
    }
    return "?";
}

void NetworkShape::validate() const {
    if (layers.empty()) throw std::runtime_error("network shape: no layers");
    if (input_channels < 1) throw std::runtime_error("network shape: input_channels < 1");
    for (size_t j = 0; j < layers.size(); ++j) {
        const LayerSpec& l = layers[j];
        if (l.index != static_cast<int>(j)) {
            throw std::runtime_error("network shape: layer indices not contiguous at " +
                                     std::to_string(j));
        }
        if (l.channels < 1 || l.feature_area < 1 || l.kernel_area < 1) {
            throw std::runtime_error("network shape: layer " + std::to_string(j) +
                                     " has a non-positive extent");
        }
        if (l.pred < -1 || l.pred >= l.index) {
            throw std::runtime_error("network shape: layer " + std::to_string(j) +
                                     " has invalid pred " + std::to_string(l.pred));
        }
    }
}

int64_t NetworkShape::prunable_layer_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.prunable ? 1 : 0;
    return n;
}

int64_t NetworkShape::mask_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.prunable ? l.channels : 0;
    return n;
}

namespace {

// Per-layer kept sums s_j (= p_j for unmasked layers), plus the layout check.
std::vector<double> layer_sums(const MaskValues& z_bar, const NetworkShape& shape) {
    shape.validate();
    if (static_cast<int64_t>(z_bar.size()) != shape.prunable_layer_count()) {
        throw std::runtime_error("budget: " + std::to_string(z_bar.size()) +
                                 " mask layers for a shape with " +
                                 std::to_string(shape.prunable_layer_count()) +
                                 " prunable layers");
    }
    std::vector<double> s(shape.layers.size());
    size_t m = 0;
    for (size_t j = 0; j < shape.layers.size(); ++j) {
        const LayerSpec& l = shape.layers[j];
        if (!l.prunable) {
            s[j] = static_cast<double>(l.channels);
            continue;
        }
        if (static_cast<int64_t>(z_bar[m].size()) != l.channels) {
            throw std::runtime_error("budget: layer " + std::to_string(j) + " expects " +
                                     std::to_string(l.channels) + " mask values, got " +
                                     std::to_string(z_bar[m].size()));
        }
        double acc = 0.0;
        for (double v : z_bar[m]) acc += v;
        s[j] = acc;
        ++m;
    }
    return s;
}

double pred_sum(const std::vector<double>& s, const NetworkShape& shape, const LayerSpec& l) {
    return l.pred < 0 ? static_cast<double>(shape.input_channels) : s[l.pred];
}

int64_t pred_channels(const NetworkShape& shape, const LayerSpec& l) {
    return l.pred < 0 ? shape.input_channels : shape.layers[l.pred].channels;
}

}  // namespace

double channel_budget(const MaskValues& z_bar, const NetworkShape& shape) {
    const auto s = layer_sums(z_bar, shape);
    double num = 0.0;
    for (const auto& l : shape.layers) {
        if (l.prunable) num += s[l.index];
    }
    return num / static_cast<double>(shape.mask_count());
}

double volume_budget(const MaskValues& z_bar, const NetworkShape& shape) {
    const auto s = layer_sums(z_bar, shape);
    double num = 0.0, den = 0.0;
    for (const auto& l : shape.layers) {
        num += static_cast<double>(l.feature_area) * s[l.index];
        den += static_cast<double>(l.feature_area) * static_cast<double>(l.channels);
    }
    return num / den;
}

double parameter_budget(const MaskValues& z_bar, const NetworkShape& shape) {
    const auto s = layer_sums(z_bar, shape);
    double num = 0.0, den = 0.0;
    for (const auto& l : shape.layers) {
        const double k = static_cast<double>(l.kernel_area);
        num += k * s[l.index] * pred_sum(s, shape, l) + 2.0 * s[l.index];
        den += k * static_cast<double>(l.channels) * static_cast<double>(pred_channels(shape, l)) +
               2.0 * static_cast<double>(l.channels);
    }
    return num / den;
}

double flops_budget(const MaskValues& z_bar, const NetworkShape& shape) {
    const auto s = layer_sums(z_bar, shape);
    double num = 0.0, den = 0.0;
    for (const auto& l : shape.layers) {
        const double k = static_cast<double>(l.kernel_area);
        const double a = static_cast<double>(l.feature_area);
        num += (k * pred_sum(s, shape, l) + 1.0) * s[l.index] * a;
        den += (k * static_cast<double>(pred_channels(shape, l)) + 1.0) *
               static_cast<double>(l.channels) * a;
    }
    return num / den;
}

double eval_budget(BudgetKind kind, const MaskValues& z_bar, const NetworkShape& shape) {
    switch (kind) {
        case BudgetKind::channel: return channel_budget(z_bar, shape);
        case BudgetKind::volume: return volume_budget(z_bar, shape);
        case BudgetKind::parameter: return parameter_budget(z_bar, shape);
        case BudgetKind::flops: return flops_budget(z_bar, shape);
    }
    throw std::runtime_error("unreachable budget kind");
}

namespace {

// Per-layer kept-sum tensors; unmasked layers contribute constants.
std::vector<Tensor> layer_sum_tensors(const std::vector<Tensor>& z_bar,
                                      const NetworkShape& shape) {
    shape.validate();
    if (static_cast<int64_t>(z_bar.size()) != shape.prunable_layer_count()) {
        throw std::runtime_error("budget: mask tensor count does not match shape");
    }
    std::vector<Tensor> s;
    size_t m = 0;
    for (const auto& l : shape.layers) {
        if (!l.prunable) {
            s.push_back(Tensor::scalar(static_cast<double>(l.channels)));
            continue;
        }
        if (z_bar[m].numel() != l.channels) {
            throw std::runtime_error("budget: layer " + std::to_string(l.index) +
                                     " mask tensor has wrong length");
        }
        s.push_back(ndgrad::sum(z_bar[m]));
        ++m;
    }
    return s;
}

Tensor pred_sum_tensor(const std::vector<Tensor>& s, const NetworkShape& shape,
                       const LayerSpec& l) {
    return l.pred < 0 ? Tensor::scalar(static_cast<double>(shape.input_channels)) : s[l.pred];
}

}  // namespace

Tensor eval_budget(BudgetKind kind, const std::vector<Tensor>& z_bar,
                   const NetworkShape& shape) {
    const auto s = layer_sum_tensors(z_bar, shape);
    Tensor num = Tensor::scalar(0.0);
    double den = 0.0;
    for (const auto& l : shape.layers) {
        const double k = static_cast<double>(l.kernel_area);
        const double a = static_cast<double>(l.feature_area);
        const double p = static_cast<double>(l.channels);
        const double pp = static_cast<double>(pred_channels(shape, l));
        switch (kind) {
            case BudgetKind::channel:
                if (l.prunable) num = ndgrad::add(num, s[l.index]);
                break;
            case BudgetKind::volume:
                num = ndgrad::add(num, ndgrad::scalar_mul(s[l.index], a));
                den += a * p;
                break;
            case BudgetKind::parameter:
                num = ndgrad::add(
                    num, ndgrad::add(ndgrad::scalar_mul(
                                         ndgrad::mul(s[l.index], pred_sum_tensor(s, shape, l)), k),
                                     ndgrad::scalar_mul(s[l.index], 2.0)));
                den += k * p * pp + 2.0 * p;
                break;
            case BudgetKind::flops:
                num = ndgrad::add(
                    num, ndgrad::scalar_mul(
                             ndgrad::mul(ndgrad::scalar_add(
                                             ndgrad::scalar_mul(pred_sum_tensor(s, shape, l), k),
                                             1.0),
                                         s[l.index]),
                             a));
                den += (k * pp + 1.0) * p * a;
                break;
        }
    }
    if (kind == BudgetKind::channel) den = static_cast<double>(shape.mask_count());
    return ndgrad::scalar_mul(num, 1.0 / den);
}

namespace {
void check_target(double target) {
    if (!(target > 0.0 && target <= 1.0)) {
        throw std::runtime_error("budget target must lie in (0,1], got " +
                                 std::to_string(target));
    }
}
}  // namespace

double budget_loss(double value, double target) {
    check_target(target);
    const double d = value - target;
    return d * d;
}

Tensor budget_loss(const Tensor& value, double target) {
    check_target(target);
    Tensor d = ndgrad::scalar_add(value, -target);
    return ndgrad::mul(d, d);
}

std::string shape_to_json(const NetworkShape& shape) {
    nlohmann::json j;
    j["input_channels"] = shape.input_channels;
    j["layers"] = nlohmann::json::array();
    for (const auto& l : shape.layers) {
        j["layers"].push_back({{"index", l.index},
                               {"channels", l.channels},
                               {"feature_area", l.feature_area},
                               {"kernel_area", l.kernel_area},
                               {"pred", l.pred},
                               {"prunable", l.prunable}});
    }
    return j.dump(2);
}

NetworkShape shape_from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    NetworkShape shape;
    shape.input_channels = j.at("input_channels").get<int64_t>();
    for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.index = lj.at("index").get<int>();
        l.channels = lj.at("channels").get<int64_t>();
        l.feature_area = lj.at("feature_area").get<int64_t>();
        l.kernel_area = lj.at("kernel_area").get<int64_t>();
        l.pred = lj.at("pred").get<int>();
        l.prunable = lj.at("prunable").get<bool>();
        shape.layers.push_back(l);
    }
    shape.validate();
    return shape;
}

void save_shape(const NetworkShape& shape, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << shape_to_json(shape) << "\n";
}

NetworkShape load_shape(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return shape_from_json(ss.str());
}

uint64_t shape_fingerprint(const NetworkShape& shape) {
    // FNV-1a over the layer table fields in order.
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](int64_t v) {
        for (int b = 0; b < 8; ++b) {
            h ^= static_cast<uint64_t>(v >> (8 * b)) & 0xffu;
            h *= 1099511628211ull;
        }
    };
    mix(shape.input_channels);
    for (const auto& l : shape.layers) {
        mix(l.index);
        mix(l.channels);
        mix(l.feature_area);
        mix(l.kernel_area);
        mix(l.pred);
        mix(l.prunable ? 1 : 0);
    }
    return h;
}

}  // namespace whittle::budget
