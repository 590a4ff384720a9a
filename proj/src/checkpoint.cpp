#include "whittle/checkpoint.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace whittle::ckpt {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "whittle-ckpt v1";

void append_f32_le(std::string& out, float f) {
    const auto u = std::bit_cast<uint32_t>(f);
    out.push_back(static_cast<char>(u & 0xff));
    out.push_back(static_cast<char>((u >> 8) & 0xff));
    out.push_back(static_cast<char>((u >> 16) & 0xff));
    out.push_back(static_cast<char>((u >> 24) & 0xff));
}

float read_f32_le(const std::string& buf, size_t at) {
    const uint32_t u = (static_cast<uint32_t>(static_cast<uint8_t>(buf[at]))) |
                       (static_cast<uint32_t>(static_cast<uint8_t>(buf[at + 1])) << 8) |
                       (static_cast<uint32_t>(static_cast<uint8_t>(buf[at + 2])) << 16) |
                       (static_cast<uint32_t>(static_cast<uint8_t>(buf[at + 3])) << 24);
    return std::bit_cast<float>(u);
}

json schedule_to_json(const proj::ContinuationState& s) {
    return json{{"beta_init", s.beta_init},   {"beta_step", s.beta_step},
                {"gamma_init", s.gamma_init}, {"gamma_double_every", s.gamma_double_every},
                {"gamma_cap", s.gamma_cap},   {"epoch", s.epoch}};
}

proj::ContinuationState schedule_from_json(const json& j) {
    proj::ContinuationState s;
    s.beta_init = j.at("beta_init").get<double>();
    s.beta_step = j.at("beta_step").get<double>();
    s.gamma_init = j.at("gamma_init").get<double>();
    s.gamma_double_every = j.at("gamma_double_every").get<int>();
    s.gamma_cap = j.at("gamma_cap").get<double>();
    s.epoch = j.at("epoch").get<int>();
    return s;
}

}  // namespace

const std::vector<float>* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, v] : arrays) {
        if (n == name) return &v;
    }
    return nullptr;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    json header;
    header["version"] = c.version;
    header["config"] = json::parse(c.config_json);
    header["shape"] = json::parse(budget::shape_to_json(c.shape));
    header["schedule"] = schedule_to_json(c.schedule);
    header["epoch"] = c.epoch;
    header["opt_t"] = c.opt_t;
    header["best_metric"] = c.best_metric;
    header["best_epoch"] = c.best_epoch;
    header["records"] = c.records_csv;
    json mask = json::array();
    for (const auto& layer : c.mask.keep) {
        json row = json::array();
        for (uint8_t b : layer) row.push_back(b ? 1 : 0);
        mask.push_back(std::move(row));
    }
    header["mask"] = std::move(mask);

    json dir = json::array();
    size_t offset = 0;
    for (const auto& [name, values] : c.arrays) {
        dir.push_back(json{{"name", name},
                           {"dtype", "f32"},
                           {"count", values.size()},
                           {"offset", offset}});
        offset += values.size() * 4;
    }
    header["arrays"] = std::move(dir);

    std::string payload;
    payload.reserve(offset);
    for (const auto& [name, values] : c.arrays) {
        for (float f : values) append_f32_le(payload, f);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot write");
    out << kMagic << '\n' << header.dump() << '\n' << payload;
    if (!out) throw std::runtime_error(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string buf = ss.str();

    const size_t magic_end = buf.find('\n');
    if (magic_end == std::string::npos) throw std::runtime_error(path + ": not a checkpoint");
    const std::string magic = buf.substr(0, magic_end);
    if (magic != kMagic) {
        if (magic.rfind("whittle-ckpt ", 0) == 0) {
            throw std::runtime_error(path + ": unsupported checkpoint version '" +
                                     magic.substr(13) + "' (this build reads v1)");
        }
        throw std::runtime_error(path + ": not a checkpoint (bad magic line)");
    }
    const size_t header_end = buf.find('\n', magic_end + 1);
    if (header_end == std::string::npos) {
        throw std::runtime_error(path + ": truncated before header end");
    }

    json header;
    try {
        header = json::parse(buf.substr(magic_end + 1, header_end - magic_end - 1));
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": corrupt header: " + e.what());
    }

    Checkpoint c;
    try {
        c.version = header.at("version").get<int>();
        if (c.version != kVersion) {
            throw std::runtime_error("unsupported version " + std::to_string(c.version));
        }
        c.config_json = header.at("config").dump();
        c.shape = budget::shape_from_json(header.at("shape").dump());
        c.schedule = schedule_from_json(header.at("schedule"));
        c.epoch = header.at("epoch").get<int>();
        c.opt_t = header.at("opt_t").get<int64_t>();
        c.best_metric = header.at("best_metric").get<double>();
        c.best_epoch = header.at("best_epoch").get<int>();
        c.records_csv = header.at("records").get<std::string>();
        for (const auto& row : header.at("mask")) {
            std::vector<uint8_t> bits;
            for (const auto& b : row) bits.push_back(b.get<int>() ? 1 : 0);
            c.mask.keep.push_back(std::move(bits));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": corrupt header: " + e.what());
    }

    const size_t payload_at = header_end + 1;
    const size_t payload_size = buf.size() - payload_at;
    size_t expect = 0;
    try {
        for (const auto& entry : header.at("arrays")) {
            const auto name = entry.at("name").get<std::string>();
            const auto dtype = entry.at("dtype").get<std::string>();
            const auto count = entry.at("count").get<size_t>();
            const auto offset = entry.at("offset").get<size_t>();
            if (dtype != "f32") {
                throw std::runtime_error("array '" + name + "' has unknown dtype " + dtype);
            }
            if (offset != expect) {
                throw std::runtime_error("array '" + name + "' offset " +
                                         std::to_string(offset) + " breaks the directory (want " +
                                         std::to_string(expect) + ")");
            }
            expect += count * 4;
            std::vector<float> values(count);
            if (payload_at + offset + count * 4 > buf.size()) {
                throw std::runtime_error("array '" + name + "' overruns the payload");
            }
            for (size_t i = 0; i < count; ++i) {
                values[i] = read_f32_le(buf, payload_at + offset + i * 4);
            }
            c.arrays.emplace_back(name, std::move(values));
        }
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": corrupt array directory: " + e.what());
    }
    if (expect != payload_size) {
        throw std::runtime_error(path + ": payload is " + std::to_string(payload_size) +
                                 " bytes, directory promises " + std::to_string(expect));
    }
    return c;
}

std::vector<std::pair<std::string, std::vector<float>>> snapshot_arrays(model::MaskedNet& net) {
    std::vector<std::pair<std::string, std::vector<float>>> out;
    for (auto& [name, t] : net.named_arrays()) {
        out.emplace_back(name, t.data());
    }
    return out;
}

void restore_arrays(model::MaskedNet& net,
                    const std::vector<std::pair<std::string, std::vector<float>>>& arrays) {
    auto named = net.named_arrays();
    for (auto& [name, t] : named) {
        bool found = false;
        for (const auto& [n, v] : arrays) {
            if (n != name) continue;
            if (v.size() != t.data().size()) {
                throw std::runtime_error("array '" + name + "' holds " +
                                         std::to_string(v.size()) + " values, tensor wants " +
                                         std::to_string(t.data().size()));
            }
            t.data() = v;
            found = true;
            break;
        }
        if (!found) throw std::runtime_error("checkpoint lacks array '" + name + "'");
    }
}

void export_mask(const Checkpoint& c, const std::string& path) {
    if (c.mask.keep.empty()) {
        throw std::runtime_error("checkpoint holds no selected mask to export");
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error(path + ": cannot write");
    char fp[32];
    std::snprintf(fp, sizeof fp, "%016" PRIx64, budget::shape_fingerprint(c.shape));
    out << "whittle-mask v1\n";
    out << "fingerprint " << fp << '\n';
    out << "layers " << c.mask.keep.size() << '\n';
    for (size_t l = 0; l < c.mask.keep.size(); ++l) {
        out << "layer " << l << ' ';
        for (uint8_t b : c.mask.keep[l]) out << (b ? '1' : '0');
        out << '\n';
    }
    const budget::MaskValues mv = c.mask.to_values();
    for (auto kind : {budget::BudgetKind::channel, budget::BudgetKind::volume,
                      budget::BudgetKind::parameter, budget::BudgetKind::flops}) {
        char val[32];
        std::snprintf(val, sizeof val, "%.12g", budget::eval_budget(kind, mv, c.shape));
        out << "budget " << budget::to_string(kind) << ' ' << val << '\n';
    }
    if (!out) throw std::runtime_error(path + ": write failed");
}

MaskImport import_mask(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(path + ": cannot open");
    std::string line;
    if (!std::getline(in, line) || line != "whittle-mask v1") {
        throw std::runtime_error(path + ": not a mask file (line 1)");
    }
    MaskImport mi;
    if (!std::getline(in, line) || line.rfind("fingerprint ", 0) != 0) {
        throw std::runtime_error(path + ": missing fingerprint (line 2)");
    }
    mi.fingerprint = std::strtoull(line.substr(12).c_str(), nullptr, 16);
    if (!std::getline(in, line) || line.rfind("layers ", 0) != 0) {
        throw std::runtime_error(path + ": missing layer count (line 3)");
    }
    const size_t layers = std::strtoull(line.substr(7).c_str(), nullptr, 10);
    for (size_t l = 0; l < layers; ++l) {
        if (!std::getline(in, line)) {
            throw std::runtime_error(path + ": truncated at layer " + std::to_string(l));
        }
        std::istringstream row(line);
        std::string word;
        size_t idx;
        std::string bits;
        row >> word >> idx >> bits;
        if (word != "layer" || idx != l || bits.empty()) {
            throw std::runtime_error(path + ": malformed layer row " + std::to_string(l));
        }
        std::vector<uint8_t> keep;
        for (char ch : bits) {
            if (ch != '0' && ch != '1') {
                throw std::runtime_error(path + ": layer " + std::to_string(l) +
                                         " holds a non-bit character");
            }
            keep.push_back(ch == '1' ? 1 : 0);
        }
        mi.mask.keep.push_back(std::move(keep));
    }
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string word, kind;
        double value;
        row >> word >> kind >> value;
        if (word != "budget" || !row) {
            throw std::runtime_error(path + ": malformed budget row '" + line + "'");
        }
        mi.budgets.emplace_back(kind, value);
    }
    return mi;
}

model::HardMask import_mask(const std::string& path, const budget::NetworkShape& shape) {
    MaskImport mi = import_mask(path);
    const uint64_t want = budget::shape_fingerprint(shape);
    if (mi.fingerprint != want) {
        char got[32], exp[32];
        std::snprintf(got, sizeof got, "%016" PRIx64, mi.fingerprint);
        std::snprintf(exp, sizeof exp, "%016" PRIx64, want);
        throw std::runtime_error(path + ": mask fingerprint " + got +
                                 " does not match this architecture (" + exp + ")");
    }
    size_t l = 0;
    for (const auto& layer : shape.layers) {
        if (!layer.prunable) continue;
        if (l >= mi.mask.keep.size() ||
            static_cast<int64_t>(mi.mask.keep[l].size()) != layer.channels) {
            throw std::runtime_error(path + ": layer " + std::to_string(l) +
                                     " width does not match the architecture");
        }
        ++l;
    }
    if (l != mi.mask.keep.size()) {
        throw std::runtime_error(path + ": mask holds more layers than the architecture");
    }
    return mi.mask;
}

}  // namespace whittle::ckpt
