#include "cellnas/genotype.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "cellnas/errors.hpp"

namespace cellnas {

const GenotypeEdge* Genotype::find(int source, int dest) const {
    for (const auto& e : edges)
        if (e.source == source && e.dest == dest) return &e;
    return nullptr;
}

Genotype discretize(const Tensor& alpha, const CellConfig& config, DiscretizePolicy policy) {
    const auto slots = edge_slots(config);
    const std::size_t m = config.op_set.size();
    if (alpha.rank() != 2 || alpha.dim(0) != slots.size() || alpha.dim(1) != m) {
        throw DimensionError("discretize: alpha " + shape_str(alpha.shape()) + " does not match [" +
                             std::to_string(slots.size()) + "," + std::to_string(m) + "]");
    }
    const auto zero_at = std::find(config.op_set.begin(), config.op_set.end(), OpKind::Zero);
    if (policy == DiscretizePolicy::TopTwoInputs && zero_at == config.op_set.end()) {
        throw ParameterError("discretize: top2 policy needs zero in the op set");
    }
    const bool only_zero = m == 1 && config.op_set[0] == OpKind::Zero;
    const bool mask_zero = policy != DiscretizePolicy::LiteralArgmax && !only_zero;
    Genotype g{config.n_inputs, config.n_intermediate, config.op_set, {}, {}};
    const auto a = alpha.data();
    std::vector<std::size_t> chosen;
    for (std::size_t e = 0; e < slots.size(); ++e) {
        std::optional<std::size_t> best;
        for (std::size_t k = 0; k < m; ++k) {
            if (mask_zero && config.op_set[k] == OpKind::Zero) continue;
            if (!best || a[e * m + k] > a[e * m + *best]) best = k;
        }
        chosen.push_back(*best);
        g.edges.push_back({slots[e].source, slots[e].dest, config.op_set[*best]});
    }
    if (policy != DiscretizePolicy::TopTwoInputs) return g;

    Tape tape(false);
    const Tensor w = relax(tape, alpha, config.relaxation);
    for (int node = config.n_inputs; node < config.n_inputs + config.n_intermediate; ++node) {
        std::vector<std::size_t> incoming;
        for (std::size_t e = 0; e < slots.size(); ++e)
            if (slots[e].dest == node) incoming.push_back(e);
        std::stable_sort(incoming.begin(), incoming.end(), [&](std::size_t x, std::size_t y) {
            return w.data()[x * m + chosen[x]] > w.data()[y * m + chosen[y]];
        });
        for (std::size_t r = 2; r < incoming.size(); ++r) g.edges[incoming[r]].op = OpKind::Zero;
    }
    return g;
}

std::vector<Violation> validate(const Genotype& g) {
    std::vector<Violation> out;
    auto error = [&out](std::string msg) { out.push_back({Violation::Severity::Error, std::move(msg)}); };
    if (g.n_inputs < 1 || g.n_intermediate < 1) {
        error("node counts must be positive");
        return out;
    }
    const int first_intermediate = g.n_inputs;
    const int n_nodes = g.n_inputs + g.n_intermediate;
    std::set<std::pair<int, int>> seen;
    for (const auto& e : g.edges) {
        const std::string where = "edge " + std::to_string(e.source) + " " + std::to_string(e.dest);
        if (e.dest < first_intermediate) error(where + ": edge into input node");
        if (e.source >= e.dest) error(where + ": source >= dest");
        if (e.source < 0 || e.dest >= n_nodes) error(where + ": node index out of range");
        if (!seen.insert({e.source, e.dest}).second) error(where + ": duplicate edge");
        if (std::find(g.op_set.begin(), g.op_set.end(), e.op) == g.op_set.end()) {
            error(where + ": op " + std::string(op_name(e.op)) + " not in op set");
        }
    }
    const auto slots = edge_slots(g.n_inputs, g.n_intermediate);
    if (g.edges.size() != slots.size()) {
        error("expected " + std::to_string(slots.size()) + " edges, found " + std::to_string(g.edges.size()));
    }
    for (const auto& s : slots) {
        if (!seen.count({s.source, s.dest})) {
            error("missing edge " + std::to_string(s.source) + " " + std::to_string(s.dest));
        }
    }
    for (int j = first_intermediate; j < n_nodes; ++j) {
        const bool fed = std::any_of(g.edges.begin(), g.edges.end(),
                                     [j](const GenotypeEdge& e) { return e.dest == j && e.op != OpKind::Zero; });
        if (!fed) {
            out.push_back({Violation::Severity::Warning,
                           "node " + std::to_string(j) + " has no non-zero incoming edge (contributes a zero map)"});
        }
    }
    return out;
}

std::vector<Violation> validate(const Genotype& g, const CellConfig& config) {
    auto out = validate(g);
    if (g.n_inputs != config.n_inputs || g.n_intermediate != config.n_intermediate) {
        out.push_back({Violation::Severity::Error, "node counts disagree with configuration"});
    }
    if (g.op_set != config.op_set) out.push_back({Violation::Severity::Error, "op set disagrees with configuration"});
    return out;
}

bool is_valid(std::span<const Violation> violations) {
    return std::none_of(violations.begin(), violations.end(),
                        [](const Violation& v) { return v.severity == Violation::Severity::Error; });
}

namespace {

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::vector<std::string> split_ws(const std::string& line) {
    std::istringstream is(line);
    std::vector<std::string> out;
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
}

template <class T>
T parse_number(const std::string& s, int line, const std::string& what) {
    T v{};
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ParseError(line, "invalid " + what + " '" + s + "'");
    }
    return v;
}

// Parses `key=value` tokens, requiring exactly the given keys in order.
std::vector<std::string> key_values(const std::vector<std::string>& toks, std::size_t first,
                                    std::initializer_list<const char*> keys, int line) {
    if (toks.size() != first + keys.size()) throw ParseError(line, "expected " + std::to_string(keys.size()) + " fields");
    std::vector<std::string> out;
    std::size_t i = first;
    for (const char* key : keys) {
        const std::string prefix = std::string(key) + "=";
        if (toks[i].rfind(prefix, 0) != 0) throw ParseError(line, "expected '" + prefix + "...'");
        out.push_back(toks[i].substr(prefix.size()));
        ++i;
    }
    return out;
}

}  // namespace

std::string serialize(const Genotype& g) {
    std::ostringstream os;
    os << "cell v1 inputs=" << g.n_inputs << " intermediate=" << g.n_intermediate << '\n';
    os << "ops";
    for (OpKind k : g.op_set) os << ' ' << op_name(k);
    os << '\n';
    for (const auto& e : g.edges) os << "edge " << e.source << ' ' << e.dest << ' ' << op_name(e.op) << '\n';
    os << "meta seed=" << g.meta.seed << " epoch=" << g.meta.epoch << " l_ho=" << format_double(g.meta.l_ho) << '\n';
    return os.str();
}

Genotype parse_genotype(const std::string& text) {
    Genotype g;
    g.edges.clear();
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    bool have_header = false, have_meta = false, have_ops = false;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto toks = split_ws(line);
        if (toks.empty()) continue;
        if (!have_header) {
            if (toks.size() < 2 || toks[0] != "cell") throw ParseError(line_no, "expected header 'cell v1 ...'");
            if (toks[1] != "v1") throw ParseError(line_no, "unsupported format version '" + toks[1] + "'");
            const auto kv = key_values(toks, 2, {"inputs", "intermediate"}, line_no);
            g.n_inputs = parse_number<int>(kv[0], line_no, "input count");
            g.n_intermediate = parse_number<int>(kv[1], line_no, "intermediate count");
            if (g.n_inputs < 1 || g.n_intermediate < 1) throw ParseError(line_no, "node counts must be positive");
            have_header = true;
            continue;
        }
        if (have_meta) throw ParseError(line_no, "content after meta line");
        if (toks[0] == "ops") {
            if (have_ops || !g.edges.empty()) throw ParseError(line_no, "ops line must directly follow the header");
            g.op_set.clear();
            for (std::size_t i = 1; i < toks.size(); ++i) {
                const auto kind = op_from_name(toks[i]);
                if (!kind) throw ParseError(line_no, "unknown op '" + toks[i] + "'");
                g.op_set.push_back(*kind);
            }
            if (g.op_set.empty()) throw ParseError(line_no, "empty op set");
            have_ops = true;
        } else if (toks[0] == "edge") {
            if (toks.size() != 4) throw ParseError(line_no, "expected 'edge <source> <dest> <op>'");
            GenotypeEdge e;
            e.source = parse_number<int>(toks[1], line_no, "source node");
            e.dest = parse_number<int>(toks[2], line_no, "dest node");
            if (e.source >= e.dest) throw ParseError(line_no, "source >= dest");
            if (e.dest < g.n_inputs) throw ParseError(line_no, "edge into input node");
            if (e.dest >= g.n_inputs + g.n_intermediate) throw ParseError(line_no, "dest node out of range");
            if (e.source < 0) throw ParseError(line_no, "negative source node");
            const auto kind = op_from_name(toks[3]);
            if (!kind) throw ParseError(line_no, "unknown op '" + toks[3] + "'");
            e.op = *kind;
            g.edges.push_back(e);
        } else if (toks[0] == "meta") {
            const auto kv = key_values(toks, 1, {"seed", "epoch", "l_ho"}, line_no);
            g.meta.seed = parse_number<std::uint64_t>(kv[0], line_no, "seed");
            g.meta.epoch = parse_number<int>(kv[1], line_no, "epoch");
            g.meta.l_ho = parse_number<double>(kv[2], line_no, "l_ho");
            have_meta = true;
        } else {
            throw ParseError(line_no, "unknown record '" + toks[0] + "'");
        }
    }
    if (!have_header) throw ParseError(line_no + 1, "missing header");
    if (!have_meta) throw ParseError(line_no + 1, "missing meta line");
    return g;
}

namespace {

std::string node_id(const Genotype& g, int node) {
    if (node < g.n_inputs) {
        if (g.n_inputs == 2) return node == 0 ? "B3" : "B4";
        return "in" + std::to_string(node);
    }
    return "n" + std::to_string(node - g.n_inputs);
}

}  // namespace

std::string to_dot(const Genotype& g) {
    std::ostringstream os;
    os << "digraph cell {\n";
    os << "  rankdir=LR;\n";
    os << "  node [shape=box, style=rounded];\n";
    for (int i = 0; i < g.n_inputs; ++i) os << "  " << node_id(g, i) << " [label=\"" << node_id(g, i) << "\"];\n";
    for (int j = 0; j < g.n_intermediate; ++j) {
        os << "  " << node_id(g, g.n_inputs + j) << " [label=\"" << j << "\", shape=circle];\n";
    }
    os << "  out [label=\"concat\"];\n";
    for (const auto& e : g.edges) {
        if (e.op == OpKind::Zero) continue;
        os << "  " << node_id(g, e.source) << " -> " << node_id(g, e.dest) << " [label=\"" << op_name(e.op)
           << "\"];\n";
    }
    for (int j = 0; j < g.n_intermediate; ++j) os << "  " << node_id(g, g.n_inputs + j) << " -> out;\n";
    os << "}\n";
    return os.str();
}

double weight_free_fraction(const Genotype& g) {
    if (g.edges.empty()) return 0.0;
    const auto n = std::count_if(g.edges.begin(), g.edges.end(), [](const GenotypeEdge& e) { return is_weight_free(e.op); });
    return static_cast<double>(n) / static_cast<double>(g.edges.size());
}

DiscreteCell build_discrete_cell(const Genotype& genotype, int channels, int input_channels, std::uint64_t rng_seed,
                                 const OpOptions& options) {
    const auto violations = validate(genotype);
    if (!is_valid(violations)) {
        std::string msg = "build_discrete_cell: invalid genotype";
        for (const auto& v : violations)
            if (v.severity == Violation::Severity::Error) msg += "; " + v.message;
        throw ValidationError(msg);
    }
    if (channels < 1 || input_channels < 1) throw ParameterError("build_discrete_cell: channels must be >= 1");
    DiscreteCell cell;
    cell.genotype_ = genotype;
    // Canonical order keeps forward summation order identical to the super-net.
    std::stable_sort(cell.genotype_.edges.begin(), cell.genotype_.edges.end(),
                     [](const GenotypeEdge& a, const GenotypeEdge& b) {
                         return a.dest != b.dest ? a.dest < b.dest : a.source < b.source;
                     });
    cell.channels_ = channels;
    Rng rng(mix_seed(rng_seed, 0x5eedULL));
    for (int i = 0; i < genotype.n_inputs; ++i) cell.projections_.push_back(make_input_projection(input_channels, channels, rng));
    for (std::size_t e = 0; e < cell.genotype_.edges.size(); ++e) {
        const OpKind kind = cell.genotype_.edges[e].op;
        if (kind == OpKind::Zero) {
            cell.ops_.emplace_back(std::nullopt);
        } else {
            cell.ops_.emplace_back(build_op(kind, channels, mix_seed(rng_seed, 1000 + e), options));
        }
    }
    return cell;
}

Tensor DiscreteCell::forward(Tape& tape, std::span<const Tensor> inputs, bool training, bool update_stats) {
    std::vector<Tensor> nodes = project_inputs(tape, projections_, inputs, training, update_stats);
    const Shape node_shape = nodes[0].shape();
    const int n_in = genotype_.n_inputs;
    std::size_t e = 0;
    for (int j = n_in; j < n_in + genotype_.n_intermediate; ++j) {
        Tensor acc;
        for (; e < genotype_.edges.size() && genotype_.edges[e].dest == j; ++e) {
            if (!ops_[e]) continue;
            Tensor y = ops_[e]->apply(tape, nodes[static_cast<std::size_t>(genotype_.edges[e].source)], training,
                                      update_stats);
            acc = acc.defined() ? ops::add(tape, acc, y) : y;
        }
        nodes.push_back(acc.defined() ? acc : Tensor::zeros(node_shape));
    }
    return ops::concat_channels(tape, std::span<const Tensor>(nodes).subspan(static_cast<std::size_t>(n_in)));
}

std::vector<NamedTensor> DiscreteCell::params() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < projections_.size(); ++i) {
        const std::string prefix = "pre" + std::to_string(i) + ".";
        out.push_back({prefix + "conv", projections_[i].weight});
        out.push_back({prefix + "norm.gain", projections_[i].gain});
        out.push_back({prefix + "norm.bias", projections_[i].bias});
    }
    for (std::size_t e = 0; e < ops_.size(); ++e) {
        if (!ops_[e]) continue;
        const auto& edge = genotype_.edges[e];
        const std::string prefix = "edge" + std::to_string(edge.source) + "_" + std::to_string(edge.dest) + "." +
                                   std::string(op_name(edge.op)) + ".";
        for (auto& p : ops_[e]->params()) out.push_back({prefix + p.name, p.tensor});
    }
    return out;
}

std::size_t DiscreteCell::edge_param_count() const {
    std::size_t n = 0;
    for (const auto& op : ops_)
        if (op) n += op->param_count();
    return n;
}

std::vector<ops::NormStats*> DiscreteCell::norm_stats() {
    std::vector<ops::NormStats*> out;
    for (auto& p : projections_) out.push_back(&p.stats);
    for (auto& op : ops_)
        if (op)
            for (auto* s : op->norm_stats()) out.push_back(s);
    return out;
}

void DiscreteCell::copy_weights_from(const SuperNetCell& supernet) {
    const auto& cfg = supernet.config();
    if (cfg.n_inputs != genotype_.n_inputs || cfg.n_intermediate != genotype_.n_intermediate ||
        cfg.channels != channels_) {
        throw DimensionError("copy_weights_from: super-net configuration does not match the discrete cell");
    }
    for (std::size_t i = 0; i < projections_.size(); ++i) {
        const auto& src = supernet.projections()[i];
        projections_[i].weight.assign(src.weight);
        projections_[i].gain.assign(src.gain);
        projections_[i].bias.assign(src.bias);
        projections_[i].stats = src.stats;
    }
    const auto slots = edge_slots(cfg);
    for (std::size_t e = 0; e < ops_.size(); ++e) {
        if (!ops_[e]) continue;
        const auto& edge = genotype_.edges[e];
        const auto slot = std::find(slots.begin(), slots.end(), EdgeSlot{edge.source, edge.dest});
        const auto& mixed = supernet.edges()[static_cast<std::size_t>(slot - slots.begin())];
        const auto it = std::find_if(mixed.ops.begin(), mixed.ops.end(),
                                     [&](const OpInstance& op) { return op.kind() == edge.op; });
        if (it == mixed.ops.end()) throw DimensionError("copy_weights_from: op missing from super-net edge");
        ops_[e]->copy_weights_from(*it);
        auto dst_stats = ops_[e]->norm_stats();
        const auto src_stats = it->norm_stats();
        for (std::size_t s = 0; s < dst_stats.size(); ++s) *dst_stats[s] = *src_stats[s];
    }
}

CostReport cost_report(const Genotype& genotype, int channels, const Shape& input_shape, const OpOptions& options) {
    if (input_shape.size() != 4) throw DimensionError("cost_report: input shape must be [B,C,H,W]");
    CostReport r;
    for (const auto& e : genotype.edges) {
        EdgeCost c{e, op_param_count(e.op, channels, options),
                   input_shape[0] * op_mult_adds(e.op, channels, input_shape[2], input_shape[3], options)};
        r.total_params += c.params;
        r.total_mult_adds += c.mult_adds;
        r.edges.push_back(c);
    }
    return r;
}

Tensor one_hot_mixing(const Genotype& genotype) {
    const auto slots = edge_slots(genotype.n_inputs, genotype.n_intermediate);
    const std::size_t m = genotype.op_set.size();
    Tensor w = Tensor::zeros({slots.size(), m});
    for (std::size_t e = 0; e < slots.size(); ++e) {
        const auto* edge = genotype.find(slots[e].source, slots[e].dest);
        if (!edge) throw ValidationError("one_hot_mixing: genotype lacks an edge slot");
        const auto it = std::find(genotype.op_set.begin(), genotype.op_set.end(), edge->op);
        w.data()[e * m + static_cast<std::size_t>(it - genotype.op_set.begin())] = 1.0;
    }
    return w;
}

}  // namespace cellnas
