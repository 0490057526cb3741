#include "cellnas/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "cellnas/errors.hpp"

namespace cellnas {

std::string_view variant_name(Variant v) {
    switch (v) {
        case Variant::FirstOrder: return "first";
        case Variant::SecondOrder: return "second";
        case Variant::FairDarts: return "fair";
    }
    return "second";
}

Variant parse_variant(std::string_view name) {
    if (name == "first") return Variant::FirstOrder;
    if (name == "second") return Variant::SecondOrder;
    if (name == "fair") return Variant::FairDarts;
    throw ParameterError("unknown variant '" + std::string(name) + "' (expected first, second or fair)");
}

std::string_view policy_name(DiscretizePolicy p) {
    switch (p) {
        case DiscretizePolicy::ExcludeZero: return "exclude-zero";
        case DiscretizePolicy::TopTwoInputs: return "top2";
        default: return "argmax";
    }
}

DiscretizePolicy parse_policy(std::string_view name) {
    if (name == "argmax") return DiscretizePolicy::LiteralArgmax;
    if (name == "exclude-zero") return DiscretizePolicy::ExcludeZero;
    if (name == "top2") return DiscretizePolicy::TopTwoInputs;
    throw ParameterError("unknown policy '" + std::string(name) + "' (expected argmax, exclude-zero or top2)");
}

namespace {

struct BadValue {
    std::string reason;
};

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(std::string_view s) {
    T value{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
        throw BadValue{"'" + std::string(s) + "' is not a valid number"};
    }
    if constexpr (std::is_floating_point_v<T>) {
        if (!std::isfinite(value)) throw BadValue{"value must be finite"};
    }
    return value;
}

template <class T>
std::string format_number(T v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::vector<std::string_view> split_list(std::string_view s) {
    std::vector<std::string_view> out;
    while (true) {
        const auto comma = s.find(',');
        out.push_back(trim(s.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    if (out.size() == 1 && out[0].empty()) out.clear();
    return out;
}

struct Field {
    std::string section;
    std::string key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, std::string_view)> set;
};

template <class T, class Ref>
Field number(std::string section, std::string key, Ref ref, T lo, T hi = std::numeric_limits<T>::max()) {
    return {std::move(section), std::move(key),
            [ref](const RunConfig& c) { return format_number(ref(const_cast<RunConfig&>(c))); },
            [ref, lo, hi](RunConfig& c, std::string_view v) {
                const T x = parse_number<T>(v);
                if (x < lo || x > hi) {
                    throw BadValue{"value " + std::string(v) + " outside [" + format_number(lo) + ", " +
                                   format_number(hi) + "]"};
                }
                ref(c) = x;
            }};
}

template <class Ref>
Field boolean(std::string section, std::string key, Ref ref) {
    return {std::move(section), std::move(key),
            [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
            [ref](RunConfig& c, std::string_view v) {
                if (v == "true") {
                    ref(c) = true;
                } else if (v == "false") {
                    ref(c) = false;
                } else {
                    throw BadValue{"expected true or false, got '" + std::string(v) + "'"};
                }
            }};
}

template <class E, class Ref>
Field choice(std::string section, std::string key, Ref ref, std::vector<std::pair<E, std::string>> names) {
    return {std::move(section), std::move(key),
            [ref, names](const RunConfig& c) {
                for (const auto& [e, n] : names)
                    if (e == ref(const_cast<RunConfig&>(c))) return n;
                return std::string("?");
            },
            [ref, names](RunConfig& c, std::string_view v) {
                std::string options;
                for (const auto& [e, n] : names) {
                    if (n == v) {
                        ref(c) = e;
                        return;
                    }
                    options += (options.empty() ? "" : ", ") + n;
                }
                throw BadValue{"unknown value '" + std::string(v) + "' (expected " + options + ")"};
            }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        constexpr double inf = std::numeric_limits<double>::infinity();
        std::vector<Field> f;
        // [task]
        f.push_back(number("task", "image_size", [](RunConfig& c) -> int& { return c.task.image_size; }, 8, 4096));
        f.push_back(number("task", "channels", [](RunConfig& c) -> int& { return c.task.channels; }, 1, 4096));
        f.push_back(number("task", "n_train", [](RunConfig& c) -> int& { return c.task.n_train; }, 1));
        f.push_back(number("task", "n_val", [](RunConfig& c) -> int& { return c.task.n_val; }, 1));
        f.push_back(number("task", "n_holdout", [](RunConfig& c) -> int& { return c.task.n_holdout; }, 1));
        f.push_back(choice<Objective>("task", "objective", [](RunConfig& c) -> Objective& { return c.task.objective; },
                                      {{Objective::CenterMapMSE, "mse"}, {Objective::CenterMapKL, "kl"}}));
        f.push_back(number("task", "seed", [](RunConfig& c) -> std::uint64_t& { return c.task.seed; }, std::uint64_t{0}));
        f.push_back(number("task", "distractors", [](RunConfig& c) -> int& { return c.task.distractors; }, 0, 64));
        f.push_back(number("task", "noise", [](RunConfig& c) -> double& { return c.task.noise; }, 0.0, inf));
        f.push_back(number("task", "label_sigma", [](RunConfig& c) -> double& { return c.task.label_sigma; }, 1e-6, inf));
        // [cell]
        f.push_back(number("cell", "n_inputs", [](RunConfig& c) -> int& { return c.search.cell.n_inputs; }, 2, 2));
        f.push_back(number("cell", "n_intermediate", [](RunConfig& c) -> int& { return c.search.cell.n_intermediate; }, 1, 16));
        f.push_back(number("cell", "channels", [](RunConfig& c) -> int& { return c.search.cell.channels; }, 1, 4096));
        f.push_back(number("cell", "input_channels", [](RunConfig& c) -> int& { return c.search.cell.input_channels; }, 1, 4096));
        f.push_back({"cell", "op_set",
                     [](const RunConfig& c) {
                         std::string s;
                         for (OpKind k : c.search.cell.op_set) s += (s.empty() ? "" : ", ") + std::string(op_name(k));
                         return s;
                     },
                     [](RunConfig& c, std::string_view v) {
                         std::vector<OpKind> ops;
                         for (auto name : split_list(v)) {
                             const auto k = op_from_name(name);
                             if (!k) throw BadValue{"unknown op '" + std::string(name) + "'"};
                             if (std::find(ops.begin(), ops.end(), *k) != ops.end())
                                 throw BadValue{"op '" + std::string(name) + "' listed twice"};
                             ops.push_back(*k);
                         }
                         if (ops.empty()) throw BadValue{"op_set is empty"};
                         c.search.cell.op_set = ops;
                     }});
        f.push_back(choice<Relaxation>("cell", "relaxation", [](RunConfig& c) -> Relaxation& { return c.search.cell.relaxation; },
                                       {{Relaxation::Softmax, "softmax"}, {Relaxation::Sigmoid, "sigmoid"}}));
        f.push_back({"cell", "dropout_tau", [](const RunConfig& c) { return format_number(c.search.cell.dropout_tau); },
                     [](RunConfig& c, std::string_view v) {
                         const double x = parse_number<double>(v);
                         if (!(x >= 0.0 && x < 1.0)) throw BadValue{"dropout_tau must be in [0, 1)"};
                         c.search.cell.dropout_tau = x;
                     }});
        f.push_back(choice<DropoutTargets>("cell", "dropout_targets",
                                           [](RunConfig& c) -> DropoutTargets& { return c.search.cell.dropout_targets; },
                                           {{DropoutTargets::SkipOnly, "skip"}, {DropoutTargets::AllOps, "all"}}));
        f.push_back(number("cell", "sep_conv_blocks", [](RunConfig& c) -> int& { return c.search.cell.op_options.sep_conv_blocks; }, 1, 8));
        f.push_back(boolean("cell", "normalize_pools", [](RunConfig& c) -> bool& { return c.search.cell.op_options.normalize_pools; }));
        // [optimizer]
        f.push_back(number("optimizer", "w_lr", [](RunConfig& c) -> double& { return c.search.optimizer.w_lr; }, 0.0, inf));
        f.push_back(number("optimizer", "alpha_lr", [](RunConfig& c) -> double& { return c.search.optimizer.alpha_lr; }, 0.0, inf));
        f.push_back(number("optimizer", "beta1", [](RunConfig& c) -> double& { return c.search.optimizer.adam.beta1; }, 0.0, 1.0));
        f.push_back(number("optimizer", "beta2", [](RunConfig& c) -> double& { return c.search.optimizer.adam.beta2; }, 0.0, 1.0));
        f.push_back(number("optimizer", "adam_eps", [](RunConfig& c) -> double& { return c.search.optimizer.adam.eps; }, 0.0, inf));
        f.push_back(number("optimizer", "epsilon_scale", [](RunConfig& c) -> double& { return c.search.optimizer.epsilon_scale; }, 1e-300, inf));
        f.push_back(number("optimizer", "fair_w01", [](RunConfig& c) -> double& { return c.search.optimizer.fair_w01; }, 0.0, inf));
        f.push_back(number("optimizer", "fair_ramp_epochs", [](RunConfig& c) -> int& { return c.search.optimizer.fair_ramp_epochs; }, 0));
        f.push_back(number("optimizer", "alpha_init_scale", [](RunConfig& c) -> double& { return c.search.optimizer.alpha_init_scale; }, 0.0, inf));
        // [schedule]
        f.push_back(number("schedule", "total_epochs", [](RunConfig& c) -> int& { return c.search.schedule.total_epochs; }, 1));
        f.push_back(number("schedule", "alpha_warmup_epochs", [](RunConfig& c) -> int& { return c.search.schedule.alpha_warmup_epochs; }, 0));
        f.push_back(number("schedule", "iters_train", [](RunConfig& c) -> int& { return c.search.schedule.iters_train; }, 0));
        f.push_back(number("schedule", "iters_val", [](RunConfig& c) -> int& { return c.search.schedule.iters_val; }, 0));
        f.push_back(number("schedule", "iters_holdout", [](RunConfig& c) -> int& { return c.search.schedule.iters_holdout; }, 1));
        f.push_back(number("schedule", "batch_size", [](RunConfig& c) -> int& { return c.search.schedule.batch_size; }, 1));
        f.push_back(boolean("schedule", "freeze_head", [](RunConfig& c) -> bool& { return c.search.schedule.freeze_head; }));
        // [search]
        f.push_back(choice<Variant>("search", "variant", [](RunConfig& c) -> Variant& { return c.search.variant; },
                                    {{Variant::FirstOrder, "first"}, {Variant::SecondOrder, "second"}, {Variant::FairDarts, "fair"}}));
        f.push_back({"search", "seeds",
                     [](const RunConfig& c) {
                         std::string s;
                         for (auto x : c.seeds) s += (s.empty() ? "" : ", ") + std::to_string(x);
                         return s;
                     },
                     [](RunConfig& c, std::string_view v) {
                         std::vector<std::uint64_t> seeds;
                         for (auto item : split_list(v)) {
                             const auto x = parse_number<std::uint64_t>(item);
                             if (std::find(seeds.begin(), seeds.end(), x) != seeds.end())
                                 throw BadValue{"seed " + std::string(item) + " listed twice"};
                             seeds.push_back(x);
                         }
                         if (seeds.empty()) throw BadValue{"at least one seed is required"};
                         c.seeds = seeds;
                     }});
        f.push_back(choice<DiscretizePolicy>("search", "policy", [](RunConfig& c) -> DiscretizePolicy& { return c.policy; },
                                             {{DiscretizePolicy::LiteralArgmax, "argmax"},
                                              {DiscretizePolicy::ExcludeZero, "exclude-zero"},
                                              {DiscretizePolicy::TopTwoInputs, "top2"}}));
        // [retrain]
        f.push_back(number("retrain", "epochs", [](RunConfig& c) -> int& { return c.retrain.epochs; }, 1));
        f.push_back(number("retrain", "iters", [](RunConfig& c) -> int& { return c.retrain.iters; }, 1));
        f.push_back(number("retrain", "batch_size", [](RunConfig& c) -> int& { return c.retrain.batch_size; }, 1));
        f.push_back(number("retrain", "lr", [](RunConfig& c) -> double& { return c.retrain.lr; }, 0.0, inf));
        f.push_back(number("retrain", "seed", [](RunConfig& c) -> std::uint64_t& { return c.retrain.seed; }, std::uint64_t{0}));
        // [oracle]
        f.push_back(number("oracle", "enum_cap", [](RunConfig& c) -> long& { return c.enum_cap; }, 1L));
        return f;
    }();
    return table;
}

// Cross-field constraints, reported against the key that must change.
void check_consistency(const RunConfig& c, const std::map<std::string, int>& lines) {
    const auto fail = [&lines](const std::string& key, const std::string& reason) {
        const auto it = lines.find(key);
        throw ParseError(it == lines.end() ? 0 : it->second, key + ": " + reason);
    };
    const auto& s = c.search.schedule;
    if (s.alpha_warmup_epochs >= s.total_epochs) {
        fail("schedule.alpha_warmup_epochs", "must be smaller than schedule.total_epochs (" +
                                                 std::to_string(s.total_epochs) + ")");
    }
    if (c.search.variant == Variant::FairDarts && c.search.cell.relaxation != Relaxation::Sigmoid) {
        fail("search.variant", "fair requires cell.relaxation = sigmoid");
    }
    if (c.search.cell.input_channels != c.task.channels) {
        fail("cell.input_channels", "must equal task.channels (" + std::to_string(c.task.channels) + ")");
    }
    if (c.task.image_size % 2 != 0) fail("task.image_size", "must be even");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    std::map<std::string, int> lines;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const std::string_view line = trim(raw);
        if (line.empty() || line.front() == '#') continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ParseError(lineno, "unterminated section header");
            section = std::string(trim(line.substr(1, line.size() - 2)));
            const bool known = std::any_of(fields().begin(), fields().end(),
                                           [&](const Field& f) { return f.section == section; });
            if (!known) throw ParseError(lineno, "unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ParseError(lineno, "expected 'key = value'");
        if (section.empty()) throw ParseError(lineno, "key outside of any [section]");
        const std::string key(trim(line.substr(0, eq)));
        const std::string_view value = trim(line.substr(eq + 1));
        const std::string full = section + "." + key;
        const auto it = std::find_if(fields().begin(), fields().end(),
                                     [&](const Field& f) { return f.section == section && f.key == key; });
        if (it == fields().end()) throw ParseError(lineno, "unknown key '" + key + "' in [" + section + "]");
        if (lines.count(full)) {
            throw ParseError(lineno, "duplicate key '" + key + "' (first set on line " + std::to_string(lines[full]) + ")");
        }
        lines[full] = lineno;
        try {
            it->set(c, value);
        } catch (const BadValue& e) {
            throw ParseError(lineno, full + ": " + e.reason);
        }
    }
    check_consistency(c, lines);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(0, "cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& config) {
    std::string out;
    std::string section;
    for (const auto& f : fields()) {
        if (f.section != section) {
            out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
            section = f.section;
        }
        out += f.key + " = " + f.get(config) + "\n";
    }
    return out;
}

}  // namespace cellnas
