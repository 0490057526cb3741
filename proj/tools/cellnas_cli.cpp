// cellnas: search | derive | train | eval | oracle-enum | oracle-quadratic | export-dot
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cellnas/checkpoint.hpp"
#include "cellnas/config.hpp"
#include "cellnas/errors.hpp"
#include "cellnas/genotype.hpp"
#include "cellnas/oracles.hpp"
#include "cellnas/pipeline.hpp"
#include "cellnas/retrain.hpp"
#include "cellnas/task.hpp"

namespace fs = std::filesystem;
using namespace cellnas;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfigError = 2, kNumericalAbort = 3 };

std::string default_out() {
    const char* env = std::getenv("CELLNAS_OUT");
    return env && *env ? env : "runs";
}

struct Common {
    std::string config;
    std::string out;
    std::vector<std::uint64_t> seeds;
    std::string variant;
    std::string policy;
    std::string runs;
    std::string genotype;
    std::string model;
};

RunConfig load_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_run_config(c.config);
    if (!c.seeds.empty()) cfg.seeds = c.seeds;
    if (!c.variant.empty()) cfg.search.variant = parse_variant(c.variant);
    if (!c.policy.empty()) cfg.policy = parse_policy(c.policy);
    // Re-run the cross-field checks on the overridden config.
    return parse_run_config(serialize_run_config(cfg));
}

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") {
        std::cout << text;
    } else {
        if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
        write_file(path, text);
    }
}

Genotype read_genotype(const std::string& path) {
    if (path.empty()) throw UsageError("--genotype is required");
    return parse_genotype(read_file(path));
}

void report_violations(const Genotype& g) {
    for (const auto& v : validate(g)) {
        std::cerr << (v.severity == Violation::Severity::Error ? "error: " : "warning: ") << v.message << "\n";
    }
}

int cmd_search(const Common& c, bool resume) {
    const RunConfig cfg = load_config(c);
    const std::string out = c.out.empty() ? default_out() : c.out;
    const auto outcomes = search_all(cfg, out, resume, 0, [](std::uint64_t seed, const HoldoutRecord& r) {
        std::cerr << "seed " << seed << " epoch " << r.epoch << " L_ho " << r.l_ho << " drop " << r.dropout_rate
                  << " lr " << r.w_lr << "\n";
    });
    bool aborted = false;
    for (const auto& o : outcomes) {
        std::cout << "seed=" << o.summary.seed << " best_epoch=" << o.summary.best_epoch << " L_ho=" << o.summary.l_ho
                  << " checkpoint=" << o.summary.checkpoint << "\n";
        for (const auto& a : o.aborts) {
            std::cerr << "seed " << o.summary.seed << ": epoch " << a.epoch << " aborted at batch " << a.batch_id
                      << ": " << a.reason << "\n";
            aborted = true;
        }
    }
    return aborted ? kNumericalAbort : kOk;
}

int cmd_derive(const Common& c) {
    const std::string runs = c.runs.empty() ? default_out() : c.runs;
    const Derivation d = c.policy.empty() ? derive_from_runs(runs) : derive_from_runs(runs, parse_policy(c.policy));
    for (const auto& r : d.runs) {
        std::cerr << "seed " << r.summary.seed << " best_epoch " << r.summary.best_epoch << " L_ho " << r.summary.l_ho
                  << "\n";
    }
    report_violations(d.winner);
    write_or_print(c.out, serialize(d.winner));
    if (!c.out.empty() && c.out != "-") {
        std::cout << "winner seed=" << d.winner.meta.seed << " epoch=" << d.winner.meta.epoch
                  << " L_ho=" << d.winner.meta.l_ho << " -> " << c.out << "\n";
    }
    return kOk;
}

int cmd_train(const Common& c) {
    RunConfig cfg = load_config(c);
    if (c.seeds.size() > 1) throw UsageError("train takes at most one --seed");
    if (!c.seeds.empty()) cfg.retrain.seed = c.seeds.front();
    const Genotype g = read_genotype(c.genotype);
    report_violations(g);
    const ToyDataset data(cfg.task);
    DiscreteNetwork net = DiscreteNetwork::build(g, cfg.search.cell, cfg.retrain.seed);
    const TrainLog log = train_discrete(net, data, loss_for(cfg.task.objective), cfg.retrain);
    for (std::size_t e = 0; e < log.train_loss.size(); ++e) {
        std::cerr << "epoch " << e << " train " << log.train_loss[e] << " val " << log.val_loss[e] << "\n";
    }
    const std::string out = c.out.empty() ? (fs::path(default_out()) / "model.ckpt").string() : c.out;
    if (const auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
    save_model(out, net, cfg);
    std::cout << "val_loss=" << log.val_loss.back() << " model=" << out << "\n";
    return kOk;
}

int cmd_eval(const Common& c) {
    std::optional<LoadedModel> loaded;
    RunConfig cfg;
    if (!c.model.empty()) {
        loaded.emplace(load_model(c.model));
        cfg = loaded->config;
    } else {
        cfg = load_config(c);
        if (c.seeds.size() > 1) throw UsageError("eval takes at most one --seed");
        if (!c.seeds.empty()) cfg.retrain.seed = c.seeds.front();
        const Genotype g = read_genotype(c.genotype);
        loaded.emplace(LoadedModel{cfg, g, DiscreteNetwork::build(g, cfg.search.cell, cfg.retrain.seed)});
        std::cerr << "note: evaluating an untrained cell\n";
    }
    const ToyDataset data(cfg.task);
    const EvalReport r = evaluate(loaded->network, data, DataSplit::Val, loss_for(cfg.task.objective),
                                  cfg.retrain.batch_size);
    std::cout << "val_loss=" << r.loss << " accuracy=" << r.accuracy << " random_baseline=" << r.random_baseline
              << " samples=" << r.samples << "\n";
    return kOk;
}

int cmd_oracle_enum(const Common& c, std::size_t top) {
    const RunConfig cfg = load_config(c);
    const std::string cache = c.out.empty() ? (fs::path(default_out()) / "enum_cache.txt").string() : c.out;
    const EnumResult r = oracle_enum(cfg, cache, [](std::uint64_t done, std::uint64_t total) {
        if (done % 10 == 0 || done == total) std::cerr << "enumerated " << done << "/" << total << "\n";
    });
    std::cout << "fingerprint " << r.fingerprint << " cells " << r.ranking.size() << "\n";
    for (std::size_t i = 0; i < r.ranking.size() && i < top; ++i) {
        const auto& e = r.ranking[i];
        std::cout << rank_of(r, e.genotype) << " code=" << e.code << " val_loss=" << e.val_loss
                  << " accuracy=" << e.accuracy << " ops=";
        for (std::size_t k = 0; k < e.genotype.edges.size(); ++k) {
            std::cout << (k ? "," : "") << op_name(e.genotype.edges[k].op);
        }
        std::cout << "\n";
    }
    return kOk;
}

int cmd_oracle_quadratic(const Common& c, const QuadraticOptions& base) {
    QuadraticOptions o = base;
    if (c.seeds.size() > 1) throw UsageError("oracle-quadratic takes at most one --seed");
    if (!c.seeds.empty()) o.seed = c.seeds.front();
    write_or_print(c.out, format_report(oracle_quadratic(o)));
    return kOk;
}

int cmd_export_dot(const Common& c) {
    const Genotype g = read_genotype(c.genotype);
    report_violations(g);
    write_or_print(c.out, to_dot(g));
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Differentiable cell search on a toy localization task"};
    app.require_subcommand(1);
    Common c;
    bool resume = false;
    std::size_t top = 20;
    QuadraticOptions quad;

    auto add_config = [&](CLI::App* s) { s->add_option("--config", c.config, "config file")->check(CLI::ExistingFile); };
    auto add_out = [&](CLI::App* s, const std::string& what) { s->add_option("--out", c.out, what); };
    auto add_seed = [&](CLI::App* s) { s->add_option("--seed", c.seeds, "seed (repeatable)")->take_all(); };

    auto* search = app.add_subcommand("search", "run the bilevel search for each seed");
    add_config(search);
    add_out(search, "runs directory (default $CELLNAS_OUT or ./runs)");
    search->add_option("--seed", c.seeds, "seed (repeatable)");
    search->add_option("--variant", c.variant, "first|second|fair");
    search->add_option("--policy", c.policy, "argmax|exclude-zero|top2");
    search->add_flag("--resume", resume, "continue from latest checkpoints");

    auto* derive = app.add_subcommand("derive", "pick the winning run and write its genotype");
    derive->add_option("--runs", c.runs, "runs directory");
    add_out(derive, "genotype file (default stdout)");
    derive->add_option("--policy", c.policy, "argmax|exclude-zero|top2");

    auto* train = app.add_subcommand("train", "train a discrete cell from scratch");
    add_config(train);
    train->add_option("--genotype", c.genotype, "genotype file")->required();
    add_out(train, "model file");
    train->add_option("--seed", c.seeds, "retrain seed");

    auto* eval = app.add_subcommand("eval", "val loss and localization accuracy");
    eval->add_option("--model", c.model, "trained model file");
    add_config(eval);
    eval->add_option("--genotype", c.genotype, "genotype file (untrained cell)");
    eval->add_option("--seed", c.seeds, "build seed for an untrained cell");

    auto* oenum = app.add_subcommand("oracle-enum", "train and rank every cell of a small space");
    add_config(oenum);
    add_out(oenum, "cache file");
    oenum->add_option("--top", top, "rows to print");

    auto* oquad = app.add_subcommand("oracle-quadratic", "check hypergradients on a quadratic bilevel problem");
    add_seed(oquad);
    oquad->add_option("--eta", quad.eta, "virtual step size");
    oquad->add_option("--eps-scale", quad.eps_scale, "finite-difference scale");
    oquad->add_option("--dim", quad.dim_w, "dimension of W and alpha")->each([&](const std::string&) {
        quad.dim_a = quad.dim_w;
    });
    add_out(oquad, "report file (default stdout)");

    auto* dot = app.add_subcommand("export-dot", "render a genotype as DOT");
    dot->add_option("--genotype", c.genotype, "genotype file")->required();
    add_out(dot, "DOT file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kConfigError;
    }

    try {
        if (*search) return cmd_search(c, resume);
        if (*derive) return cmd_derive(c);
        if (*train) return cmd_train(c);
        if (*eval) {
            if (c.model.empty() && c.genotype.empty()) throw UsageError("eval needs --model or --genotype");
            return cmd_eval(c);
        }
        if (*oenum) return cmd_oracle_enum(c, top);
        if (*oquad) return cmd_oracle_quadratic(c, quad);
        if (*dot) return cmd_export_dot(c);
    } catch (const ParseError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kConfigError;
    } catch (const ParameterError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfigError;
    } catch (const NumericalAbort& e) {
        std::cerr << "numerical abort at batch " << e.batch_id() << ": " << e.what() << "\n";
        return kNumericalAbort;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
