#include "whittle/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "whittle/budget.hpp"
#include "whittle/checkpoint.hpp"

namespace whittle::config {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("config: " + msg); }

std::string join_path(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

// Every key of `j` must be in `allowed`; sections must be objects.
void check_keys(const json& j, const std::string& prefix,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) fail("'" + (prefix.empty() ? std::string("<top>") : prefix) + "' must be an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* a : allowed)
            if (item.key() == a) { known = true; break; }
        if (!known) fail("unknown key '" + join_path(prefix, item.key()) + "'");
    }
}

template <class T>
void read(const json& j, const std::string& prefix, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception& e) {
        fail("key '" + join_path(prefix, key) + "': " + e.what());
    }
}

void parse_model(const json& j, ModelSection& m) {
    check_keys(j, "model", {"preset", "widths"});
    read(j, "model", "preset", m.preset);
    read(j, "model", "widths", m.widths);
}

void parse_data(const json& j, DataSection& d) {
    check_keys(j, "data",
               {"source", "images", "labels", "classes", "per_class", "image_size", "noise",
                "val_fraction", "batch_size"});
    read(j, "data", "source", d.source);
    read(j, "data", "images", d.images);
    read(j, "data", "labels", d.labels);
    read(j, "data", "classes", d.classes);
    read(j, "data", "per_class", d.per_class);
    read(j, "data", "image_size", d.image_size);
    read(j, "data", "noise", d.noise);
    read(j, "data", "val_fraction", d.val_fraction);
    read(j, "data", "batch_size", d.batch_size);
}

void parse_train(const json& j, const std::string& prefix, TrainSection& t, bool finetune) {
    if (finetune) {
        check_keys(j, prefix,
                   {"epochs", "lr", "momentum", "weight_decay", "lr_step_every", "lr_factor",
                    "refresh_bn"});
    } else {
        check_keys(j, prefix,
                   {"epochs", "lr", "momentum", "weight_decay", "lr_step_every", "lr_factor"});
    }
    read(j, prefix, "epochs", t.epochs);
    read(j, prefix, "lr", t.lr);
    read(j, prefix, "momentum", t.momentum);
    read(j, prefix, "weight_decay", t.weight_decay);
    read(j, prefix, "lr_step_every", t.lr_step_every);
    read(j, prefix, "lr_factor", t.lr_factor);
}

void parse_prune(const json& j, PruneSection& p) {
    check_keys(j, "prune",
               {"budget", "target", "alpha1", "alpha2", "epochs", "lr", "weight_decay",
                "beta_init", "beta_step", "gamma_init", "gamma_double_every", "gamma_cap",
                "beta_round", "crispness", "logistic_round", "heaviside"});
    read(j, "prune", "budget", p.budget);
    read(j, "prune", "target", p.target);
    read(j, "prune", "alpha1", p.alpha1);
    read(j, "prune", "alpha2", p.alpha2);
    read(j, "prune", "epochs", p.epochs);
    read(j, "prune", "lr", p.lr);
    read(j, "prune", "weight_decay", p.weight_decay);
    read(j, "prune", "beta_init", p.beta_init);
    read(j, "prune", "beta_step", p.beta_step);
    read(j, "prune", "gamma_init", p.gamma_init);
    read(j, "prune", "gamma_double_every", p.gamma_double_every);
    read(j, "prune", "gamma_cap", p.gamma_cap);
    read(j, "prune", "beta_round", p.beta_round);
    read(j, "prune", "crispness", p.crispness);
    read(j, "prune", "logistic_round", p.logistic_round);
    read(j, "prune", "heaviside", p.heaviside);
}

void parse_grid(const json& j, GridSection& g) {
    check_keys(j, "grid", {"tuples"});
    auto it = j.find("tuples");
    if (it == j.end()) return;
    if (!it->is_array()) fail("key 'grid.tuples': expected an array of [alpha1, alpha2, beta_step, gamma_double_every] rows");
    g.tuples.clear();
    for (size_t i = 0; i < it->size(); ++i) {
        const json& row = (*it)[i];
        if (!row.is_array() || row.size() != 4)
            fail("key 'grid.tuples[" + std::to_string(i) + "]': expected 4 numbers");
        std::array<double, 4> t{};
        for (size_t k = 0; k < 4; ++k) {
            if (!row[k].is_number())
                fail("key 'grid.tuples[" + std::to_string(i) + "]': expected 4 numbers");
            t[k] = row[k].get<double>();
        }
        g.tuples.push_back(t);
    }
}

RunConfig from_tree(const json& j) {
    RunConfig cfg;
    check_keys(j, "",
               {"out_dir", "seed", "model", "data", "pretrain", "prune", "finetune", "grid"});
    read(j, "", "out_dir", cfg.out_dir);
    read(j, "", "seed", cfg.seed);
    if (j.contains("model")) parse_model(j["model"], cfg.model);
    if (j.contains("data")) parse_data(j["data"], cfg.data);
    if (j.contains("pretrain")) parse_train(j["pretrain"], "pretrain", cfg.pretrain, false);
    if (j.contains("prune")) parse_prune(j["prune"], cfg.prune);
    if (j.contains("finetune")) {
        parse_train(j["finetune"], "finetune", cfg.finetune, true);
        read(j["finetune"], "finetune", "refresh_bn", cfg.finetune.refresh_bn);
    }
    if (j.contains("grid")) parse_grid(j["grid"], cfg.grid);
    cfg.validate();
    return cfg;
}

json to_tree(const RunConfig& cfg) {
    json j;
    j["out_dir"] = cfg.out_dir;
    j["seed"] = cfg.seed;
    j["model"] = {{"preset", cfg.model.preset}, {"widths", cfg.model.widths}};
    j["data"] = {{"source", cfg.data.source},
                 {"images", cfg.data.images},
                 {"labels", cfg.data.labels},
                 {"classes", cfg.data.classes},
                 {"per_class", cfg.data.per_class},
                 {"image_size", cfg.data.image_size},
                 {"noise", cfg.data.noise},
                 {"val_fraction", cfg.data.val_fraction},
                 {"batch_size", cfg.data.batch_size}};
    auto train_tree = [](const TrainSection& t) {
        return json{{"epochs", t.epochs},
                    {"lr", t.lr},
                    {"momentum", t.momentum},
                    {"weight_decay", t.weight_decay},
                    {"lr_step_every", t.lr_step_every},
                    {"lr_factor", t.lr_factor}};
    };
    j["pretrain"] = train_tree(cfg.pretrain);
    j["prune"] = {{"budget", cfg.prune.budget},
                  {"target", cfg.prune.target},
                  {"alpha1", cfg.prune.alpha1},
                  {"alpha2", cfg.prune.alpha2},
                  {"epochs", cfg.prune.epochs},
                  {"lr", cfg.prune.lr},
                  {"weight_decay", cfg.prune.weight_decay},
                  {"beta_init", cfg.prune.beta_init},
                  {"beta_step", cfg.prune.beta_step},
                  {"gamma_init", cfg.prune.gamma_init},
                  {"gamma_double_every", cfg.prune.gamma_double_every},
                  {"gamma_cap", cfg.prune.gamma_cap},
                  {"beta_round", cfg.prune.beta_round},
                  {"crispness", cfg.prune.crispness},
                  {"logistic_round", cfg.prune.logistic_round},
                  {"heaviside", cfg.prune.heaviside}};
    j["finetune"] = train_tree(cfg.finetune);
    j["finetune"]["refresh_bn"] = cfg.finetune.refresh_bn;
    j["grid"] = {{"tuples", cfg.grid.tuples}};
    return j;
}

// Manifests carry the config under "config"; accept them wherever a config
// file is expected so a run can be repeated from its own record.
const json& unwrap_manifest(const json& j) {
    if (!j.is_object() || !j.contains("config")) return j;
    check_keys(j, "", {"command", "inputs", "versions", "seed", "config"});
    return j["config"];
}

void apply_override(json& j, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        fail("--set expects key.path=value, got '" + spec + "'");
    std::string path = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);

    std::vector<std::string> parts;
    std::istringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) fail("--set key '" + path + "' has an empty segment");
        parts.push_back(part);
    }
    if (parts.empty()) fail("--set expects key.path=value, got '" + spec + "'");

    json parsed = json::parse(value, nullptr, false);
    if (parsed.is_discarded()) parsed = value;  // bare strings need no quotes

    json* cur = &j;
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
        if (!cur->is_object()) fail("--set key '" + path + "' descends into a non-object");
        cur = &(*cur)[parts[i]];
        if (cur->is_null()) *cur = json::object();
    }
    if (!cur->is_object()) fail("--set key '" + path + "' descends into a non-object");
    (*cur)[parts.back()] = parsed;
}

}  // namespace

prune::TrainConfig TrainSection::to_train_config(unsigned seed) const {
    prune::TrainConfig t;
    t.epochs = epochs;
    t.opt.lr = lr;
    t.opt.momentum = momentum;
    t.opt.weight_decay = weight_decay;
    t.lr_step_every = lr_step_every;
    t.lr_factor = lr_factor;
    t.seed = seed;
    return t;
}

prune::PruneConfig PruneSection::to_prune_config(unsigned seed) const {
    prune::PruneConfig p;
    p.kind = budget::budget_kind_from_string(budget);
    p.target = target;
    p.alpha1 = crispness ? alpha1 : 0.0;
    p.alpha2 = alpha2;
    p.epochs = epochs;
    p.opt.lr = lr;
    p.opt.weight_decay = weight_decay;
    p.schedule.beta_init = beta_init;
    p.schedule.beta_step = beta_step;
    p.schedule.gamma_init = gamma_init;
    p.schedule.gamma_double_every = gamma_double_every;
    p.schedule.gamma_cap = gamma_cap;
    p.schedule.epoch = 0;
    p.beta_round = beta_round;
    p.use_heaviside = heaviside;
    p.logistic_round = logistic_round;
    p.seed = seed;
    return p;
}

void RunConfig::validate() const {
    if (out_dir.empty()) fail("out_dir is required");
    if (data.source.empty()) fail("data.source is required (\"synth\" or \"idx\")");
    if (data.source != "synth" && data.source != "idx")
        fail("data.source must be \"synth\" or \"idx\", got \"" + data.source + "\"");
    if (data.source == "idx" && (data.images.empty() || data.labels.empty()))
        fail("data.images and data.labels are required when data.source is \"idx\"");
    if (data.source == "synth") {
        if (data.classes < 2) fail("data.classes must be at least 2");
        if (data.per_class < 1) fail("data.per_class must be positive");
        if (data.image_size < 1) fail("data.image_size must be positive");
        if (data.noise < 0) fail("data.noise must be nonnegative");
    }
    if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0))
        fail("data.val_fraction must lie in (0, 1)");
    if (data.batch_size < 1) fail("data.batch_size must be positive");
    try {
        pretrain.to_train_config(seed).validate();
        finetune.to_train_config(seed).validate();
        prune.to_prune_config(seed).validate();
    } catch (const std::exception& e) {
        fail(e.what());
    }
}

RunConfig parse_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(std::string("invalid JSON: ") + e.what());
    }
    return from_tree(unwrap_manifest(j));
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    json j;
    try {
        j = json::parse(buf.str());
    } catch (const json::exception& e) {
        fail("'" + path + "' is not valid JSON: " + e.what());
    }
    json tree = unwrap_manifest(j);
    for (const std::string& spec : overrides) apply_override(tree, spec);
    return from_tree(tree);
}

std::string dump_config(const RunConfig& cfg) { return to_tree(cfg).dump(2) + "\n"; }

std::string config_help() {
    json defaults = to_tree(RunConfig{});
    // The two required keys carry no default.
    std::vector<std::pair<std::string, std::string>> rows;
    std::function<void(const json&, const std::string&)> walk =
        [&](const json& j, const std::string& prefix) {
            for (const auto& item : j.items()) {
                std::string key = join_path(prefix, item.key());
                if (item.value().is_object())
                    walk(item.value(), key);
                else
                    rows.emplace_back(key, item.value().dump());
            }
        };
    walk(defaults, "");
    size_t width = 0;
    for (const auto& r : rows) width = std::max(width, r.first.size());
    std::ostringstream out;
    out << "Config keys (JSON paths) and their defaults:\n";
    for (const auto& r : rows) {
        out << "  " << r.first << std::string(width - r.first.size() + 2, ' ');
        if (r.first == "out_dir" || r.first == "data.source")
            out << "(required)";
        else
            out << "= " << r.second;
        out << "\n";
    }
    return out.str();
}

std::string manifest_json(const std::string& command, const RunConfig& cfg,
                          const std::vector<std::pair<std::string, std::string>>& inputs) {
    json j;
    j["command"] = command;
    j["seed"] = cfg.seed;
    j["versions"] = {{"checkpoint", ckpt::kVersion}, {"records_csv", 1}};
    j["inputs"] = json::object();
    for (const auto& in : inputs) j["inputs"][in.first] = in.second;
    j["config"] = to_tree(cfg);
    return j.dump(2) + "\n";
}

}  // namespace whittle::config
