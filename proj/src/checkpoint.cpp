#include "cellnas/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "cellnas/errors.hpp"

namespace cellnas {

using nlohmann::json;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << text;
    if (!out.flush()) throw std::runtime_error("write to '" + path + "' failed");
}

namespace {

constexpr const char* kSearchFormat = "cellnas-search-state";
constexpr const char* kModelFormat = "cellnas-model";

std::string hex(double v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
    return buf;
}

// Section-local decoding failure; turned into an IntegrityError by the caller.
struct Corrupt {
    std::string reason;
};

double unhex(const json& j) {
    if (!j.is_string()) throw Corrupt{"expected a hex-encoded double"};
    const auto& s = j.get_ref<const std::string&>();
    std::uint64_t bits = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), bits, 16);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.size() != 16) throw Corrupt{"bad double '" + s + "'"};
    return std::bit_cast<double>(bits);
}

json hex_array(std::span<const double> xs) {
    json a = json::array();
    for (double v : xs) a.push_back(hex(v));
    return a;
}

std::vector<double> unhex_array(const json& j) {
    if (!j.is_array()) throw Corrupt{"expected an array"};
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& x : j) out.push_back(unhex(x));
    return out;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string checksum(const json& payload) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(payload.dump())));
    return buf;
}

// One section per line, keys in a fixed order, so identical state gives identical bytes.
std::string assemble(const char* format, const std::vector<std::pair<std::string, json>>& sections) {
    std::string out = "{\"header\":" + json{{"format", format}, {"version", kCheckpointVersion}}.dump() +
                      ",\n\"sections\":{\n";
    for (std::size_t i = 0; i < sections.size(); ++i) {
        const auto& [name, payload] = sections[i];
        out += json(name).dump() + ":" + json{{"checksum", checksum(payload)}, {"payload", payload}}.dump();
        out += i + 1 < sections.size() ? ",\n" : "\n";
    }
    out += "}}\n";
    return out;
}

// Verified section payloads by name.
class Container {
public:
    Container(const std::string& text, const char* format, const std::vector<std::string>& names) {
        try {
            root_ = json::parse(text);
        } catch (const json::parse_error& e) {
            throw IntegrityError(section_at(text, e.byte, names), std::string("malformed JSON: ") + e.what());
        }
        if (!root_.is_object() || !root_.contains("header") || !root_["header"].is_object()) {
            throw IntegrityError("header", "missing header");
        }
        const auto& h = root_["header"];
        if (!h.contains("format") || h["format"] != format) {
            throw IntegrityError("header", std::string("expected format '") + format + "'");
        }
        if (!h.contains("version") || !h["version"].is_number_integer() || h["version"] != kCheckpointVersion) {
            throw IntegrityError("header", "unsupported version " + (h.contains("version") ? h["version"].dump() : "?") +
                                               " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
        }
        if (!root_.contains("sections") || !root_["sections"].is_object()) throw IntegrityError("header", "no sections");
        for (const auto& name : names) {
            const auto& secs = root_["sections"];
            if (!secs.contains(name)) throw IntegrityError(name, "section missing");
            const auto& s = secs[name];
            if (!s.is_object() || !s.contains("payload") || !s.contains("checksum")) {
                throw IntegrityError(name, "section malformed");
            }
            if (s["checksum"] != checksum(s["payload"])) throw IntegrityError(name, "checksum mismatch");
        }
    }

    const json& operator[](const std::string& name) const { return root_["sections"][name]["payload"]; }

private:
    static std::string section_at(const std::string& text, std::size_t byte, const std::vector<std::string>& names) {
        std::string found = "header";
        std::size_t best = 0;
        for (const auto& n : names) {
            const auto pos = text.find("\"" + n + "\":{\"checksum\"");
            if (pos != std::string::npos && pos <= byte && pos >= best) {
                best = pos;
                found = n;
            }
        }
        return found;
    }

    json root_;
};

template <class F>
auto decode(const std::string& section, F&& f) {
    try {
        return f();
    } catch (const Corrupt& c) {
        throw IntegrityError(section, c.reason);
    } catch (const json::exception& e) {
        throw IntegrityError(section, e.what());
    } catch (const ParseError& e) {
        throw IntegrityError(section, e.what());
    }
}

json params_json(const std::vector<NamedTensor>& params) {
    json a = json::array();
    for (const auto& p : params) {
        a.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"data", hex_array(p.tensor.data())}});
    }
    return a;
}

void load_params(const json& j, std::vector<NamedTensor> params) {
    if (!j.is_array() || j.size() != params.size()) throw Corrupt{"parameter count does not match the configuration"};
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = j[i];
        if (e.at("name") != params[i].name) throw Corrupt{"expected parameter '" + params[i].name + "'"};
        if (e.at("shape").get<Shape>() != params[i].tensor.shape()) throw Corrupt{"shape mismatch for '" + params[i].name + "'"};
        const auto data = unhex_array(e.at("data"));
        if (data.size() != params[i].tensor.numel()) throw Corrupt{"size mismatch for '" + params[i].name + "'"};
        std::copy(data.begin(), data.end(), params[i].tensor.data().begin());
    }
}

json stats_json(const std::vector<ops::NormStats*>& stats) {
    json a = json::array();
    for (const auto* s : stats) a.push_back({{"mean", hex_array(s->running_mean)}, {"var", hex_array(s->running_var)}});
    return a;
}

void load_stats(const json& j, const std::vector<ops::NormStats*>& stats) {
    if (!j.is_array() || j.size() != stats.size()) throw Corrupt{"statistics count does not match the configuration"};
    for (std::size_t i = 0; i < stats.size(); ++i) {
        auto mean = unhex_array(j[i].at("mean"));
        auto var = unhex_array(j[i].at("var"));
        if (mean.size() != stats[i]->running_mean.size() || var.size() != stats[i]->running_var.size()) {
            throw Corrupt{"statistics size mismatch"};
        }
        stats[i]->running_mean = std::move(mean);
        stats[i]->running_var = std::move(var);
    }
}

json adam_json(const AdamState& a) {
    json m = json::array(), v = json::array();
    for (const auto& x : a.m) m.push_back(hex_array(x));
    for (const auto& x : a.v) v.push_back(hex_array(x));
    return {{"step", a.step}, {"m", m}, {"v", v}};
}

void load_adam(const json& j, AdamState& a) {
    const auto& m = j.at("m");
    const auto& v = j.at("v");
    if (!m.is_array() || !v.is_array() || m.size() != a.m.size() || v.size() != a.v.size()) {
        throw Corrupt{"optimizer moment count mismatch"};
    }
    for (std::size_t i = 0; i < a.m.size(); ++i) {
        a.m[i] = unhex_array(m[i]);
        a.v[i] = unhex_array(v[i]);
    }
    a.step = j.at("step").get<long>();
}

const std::vector<std::string> kSearchSections = {"config", "state", "history", "alpha", "params", "norm_stats", "optimizers"};
const std::vector<std::string> kModelSections = {"config", "genotype", "params", "norm_stats"};

}  // namespace

std::string checkpoint_text(const SearchState& state, const RunConfig& config) {
    auto& s = const_cast<SearchState&>(state);
    json history = json::array();
    for (const auto& r : state.holdout_history) {
        history.push_back({{"epoch", r.epoch},
                           {"l_ho", hex(r.l_ho)},
                           {"dropout_rate", hex(r.dropout_rate)},
                           {"w_lr", hex(r.w_lr)},
                           {"alpha", hex_array(r.alpha)}});
    }
    json aborts = json::array();
    for (const auto& a : state.aborts) aborts.push_back({{"epoch", a.epoch}, {"batch", a.batch_id}, {"reason", a.reason}});
    auto params = state.cell.params();
    params.push_back({"head.weight", state.head.weight});
    params.push_back({"head.bias", state.head.bias});

    return assemble(kSearchFormat,
                    {{"config", serialize_run_config(config)},
                     {"state",
                      {{"epoch", state.epoch},
                       {"seed", state.seed},
                       {"dropout_rate", hex(state.dropout_rate)},
                       {"w_lr", hex(state.w_lr)},
                       {"batch_counter", state.batch_counter},
                       {"data_rng", state.data_rng.serialize()},
                       {"dropout_rng", state.dropout_rng.serialize()}}},
                     {"history", {{"holdout", history}, {"aborts", aborts}}},
                     {"alpha", {{"shape", state.alpha.values.shape()}, {"data", hex_array(state.alpha.values.data())}}},
                     {"params", params_json(params)},
                     {"norm_stats", stats_json(s.cell.norm_stats())},
                     {"optimizers", {{"w", adam_json(state.w_opt)}, {"alpha", adam_json(state.alpha_opt)}}}});
}

void save_checkpoint(const std::string& path, const SearchState& state, const RunConfig& config) {
    const std::string tmp = path + ".tmp";
    write_file(tmp, checkpoint_text(state, config));
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into '" + path + "'");
}

LoadedCheckpoint parse_checkpoint(const std::string& text) {
    const Container c(text, kSearchFormat, kSearchSections);
    const RunConfig config = decode("config", [&] { return parse_run_config(c["config"].get<std::string>()); });
    const auto& st = c["state"];
    const std::uint64_t seed = decode("state", [&] { return st.at("seed").get<std::uint64_t>(); });
    SearchState s = decode("config", [&] { return SearchState::initialize(config.search, seed); });

    decode("state", [&] {
        s.epoch = st.at("epoch").get<int>();
        s.dropout_rate = unhex(st.at("dropout_rate"));
        s.w_lr = unhex(st.at("w_lr"));
        s.batch_counter = st.at("batch_counter").get<long>();
        s.data_rng.deserialize(st.at("data_rng").get<std::string>());
        s.dropout_rng.deserialize(st.at("dropout_rng").get<std::string>());
        return 0;
    });
    decode("history", [&] {
        const auto& h = c["history"];
        for (const auto& r : h.at("holdout")) {
            s.holdout_history.push_back({r.at("epoch").get<int>(), unhex(r.at("l_ho")), unhex(r.at("dropout_rate")),
                                         unhex(r.at("w_lr")), unhex_array(r.at("alpha"))});
        }
        for (const auto& a : h.at("aborts")) {
            s.aborts.push_back({a.at("epoch").get<int>(), a.at("batch").get<long>(), a.at("reason").get<std::string>()});
        }
        return 0;
    });
    decode("alpha", [&] {
        const auto& a = c["alpha"];
        if (a.at("shape").get<Shape>() != s.alpha.values.shape()) throw Corrupt{"alpha shape mismatch"};
        const auto data = unhex_array(a.at("data"));
        if (data.size() != s.alpha.values.numel()) throw Corrupt{"alpha size mismatch"};
        std::copy(data.begin(), data.end(), s.alpha.values.data().begin());
        return 0;
    });
    decode("params", [&] {
        auto params = s.cell.params();
        params.push_back({"head.weight", s.head.weight});
        params.push_back({"head.bias", s.head.bias});
        load_params(c["params"], params);
        return 0;
    });
    decode("norm_stats", [&] {
        load_stats(c["norm_stats"], s.cell.norm_stats());
        return 0;
    });
    decode("optimizers", [&] {
        load_adam(c["optimizers"].at("w"), s.w_opt);
        load_adam(c["optimizers"].at("alpha"), s.alpha_opt);
        return 0;
    });
    return {config, std::move(s)};
}

LoadedCheckpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

std::string holdout_csv(const std::vector<HoldoutRecord>& history) {
    const auto num = [](double v) {
        char buf[64];
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
        return std::string(buf, ptr);
    };
    std::string out = "epoch,L_ho,dropout_rate,w_lr\n";
    for (const auto& r : history) {
        out += std::to_string(r.epoch) + "," + num(r.l_ho) + "," + num(r.dropout_rate) + "," + num(r.w_lr) + "\n";
    }
    return out;
}

void write_holdout_csv(const std::string& path, const std::vector<HoldoutRecord>& history) {
    write_file(path, holdout_csv(history));
}

std::string model_text(const DiscreteNetwork& net, const RunConfig& config) {
    auto& n = const_cast<DiscreteNetwork&>(net);
    return assemble(kModelFormat, {{"config", serialize_run_config(config)},
                                   {"genotype", serialize(net.cell.genotype())},
                                   {"params", params_json(net.params())},
                                   {"norm_stats", stats_json(n.cell.norm_stats())}});
}

void save_model(const std::string& path, const DiscreteNetwork& net, const RunConfig& config) {
    write_file(path, model_text(net, config));
}

LoadedModel parse_model(const std::string& text) {
    const Container c(text, kModelFormat, kModelSections);
    const RunConfig config = decode("config", [&] { return parse_run_config(c["config"].get<std::string>()); });
    const Genotype g = decode("genotype", [&] { return parse_genotype(c["genotype"].get<std::string>()); });
    DiscreteNetwork net = decode("genotype", [&] {
        try {
            return DiscreteNetwork::build(g, config.search.cell, config.retrain.seed);
        } catch (const ValidationError& e) {
            throw Corrupt{e.what()};
        }
    });
    decode("params", [&] {
        load_params(c["params"], net.params());
        return 0;
    });
    decode("norm_stats", [&] {
        load_stats(c["norm_stats"], net.cell.norm_stats());
        return 0;
    });
    return {config, g, std::move(net)};
}

LoadedModel load_model(const std::string& path) { return parse_model(read_file(path)); }

}  // namespace cellnas
