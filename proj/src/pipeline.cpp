#include "cellnas/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <exception>
#include <filesystem>
#include <thread>

#include "cellnas/errors.hpp"

namespace fs = std::filesystem;

namespace cellnas {

std::string seed_dir(const std::string& out_dir, std::uint64_t seed) {
    return (fs::path(out_dir) / ("seed_" + std::to_string(seed))).string();
}

std::string epoch_checkpoint_path(const std::string& out_dir, std::uint64_t seed, int epoch) {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
    return (fs::path(seed_dir(out_dir, seed)) / "checkpoints" / name).string();
}

std::string latest_checkpoint_path(const std::string& out_dir, std::uint64_t seed) {
    return (fs::path(seed_dir(out_dir, seed)) / "latest.ckpt").string();
}

SearchState run_seed(const RunConfig& config, std::uint64_t seed, const std::string& out_dir, const ToyDataset& data,
                     bool resume, const SearchLog& log) {
    fs::create_directories(fs::path(seed_dir(out_dir, seed)) / "checkpoints");
    const std::string latest = latest_checkpoint_path(out_dir, seed);
    SearchState state = [&] {
        if (!resume || !fs::exists(latest)) return SearchState::initialize(config.search, seed);
        LoadedCheckpoint ck = load_checkpoint(latest);
        if (!(ck.config == config)) {
            throw UsageError("resume: " + latest + " was written with a different config");
        }
        return std::move(ck.state);
    }();
    const LossFn loss_fn = loss_for(config.task.objective);
    run_search(state, config.search, data, loss_fn, [&](const SearchState& s) {
        const std::string text = checkpoint_text(s, config);
        write_file(epoch_checkpoint_path(out_dir, seed, s.epoch - 1), text);
        write_file(latest, text);
        write_holdout_csv((fs::path(seed_dir(out_dir, seed)) / "holdout.csv").string(), s.holdout_history);
        if (log) log(seed, s.holdout_history.back());
    });
    return state;
}

std::vector<SeedOutcome> search_all(const RunConfig& config, const std::string& out_dir, bool resume,
                                   unsigned parallel, const SearchLog& log) {
    if (config.seeds.empty()) throw UsageError("search: no seeds configured");
    fs::create_directories(out_dir);
    write_file((fs::path(out_dir) / "config.cfg").string(), serialize_run_config(config));
    const ToyDataset data(config.task);
    if (parallel == 0) parallel = std::max(1u, std::thread::hardware_concurrency());

    const std::size_t n = config.seeds.size();
    std::vector<SeedOutcome> out(n);
    std::vector<std::exception_ptr> errors(n);
    auto work = [&](std::size_t i) {
        try {
            const SearchState state = run_seed(config, config.seeds[i], out_dir, data, resume, log);
            out[i].aborts = state.aborts;
            out[i].summary = {state.seed, -1, std::numeric_limits<double>::quiet_NaN(),
                              latest_checkpoint_path(out_dir, config.seeds[i])};
            const auto& h = state.holdout_history;
            const bool any = std::any_of(h.begin(), h.end(), [&](const HoldoutRecord& r) {
                return r.epoch >= config.search.schedule.alpha_warmup_epochs && std::isfinite(r.l_ho);
            });
            if (any) {
                const SeedDerivation d = derive_seed(state, config);
                out[i].summary.best_epoch = d.summary.best_epoch;
                out[i].summary.l_ho = d.summary.l_ho;
            }
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    for (std::size_t start = 0; start < n; start += parallel) {
        const std::size_t stop = std::min(n, start + parallel);
        if (stop - start == 1) {
            work(start);
            continue;
        }
        std::vector<std::thread> pool;
        for (std::size_t i = start; i < stop; ++i) pool.emplace_back(work, i);
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

SeedDerivation derive_seed(const SearchState& state, const RunConfig& config) {
    const int epoch = early_stop_select(state.holdout_history, config.search.schedule.alpha_warmup_epochs);
    const auto it = std::find_if(state.holdout_history.begin(), state.holdout_history.end(),
                                 [epoch](const HoldoutRecord& r) { return r.epoch == epoch; });
    const auto& cell = config.search.cell;
    const Tensor alpha = Tensor::from({edge_count(cell), cell.op_set.size()}, it->alpha);
    SeedDerivation d;
    d.summary = {state.seed, epoch, it->l_ho, {}};
    d.genotype = discretize(alpha, cell, config.policy);
    d.genotype.meta = {state.seed, epoch, it->l_ho};
    return d;
}

namespace {

Derivation derive_impl(const std::string& runs_dir, const DiscretizePolicy* policy) {
    if (!fs::is_directory(runs_dir)) throw UsageError("derive: " + runs_dir + " is not a directory");
    std::vector<fs::path> found;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        const std::string name = entry.path().filename().string();
        if (entry.is_directory() && name.rfind("seed_", 0) == 0 && fs::exists(entry.path() / "latest.ckpt")) {
            found.push_back(entry.path() / "latest.ckpt");
        }
    }
    if (found.empty()) throw UsageError("derive: no seed_*/latest.ckpt under " + runs_dir);

    Derivation d;
    bool first = true;
    for (const auto& path : found) {
        LoadedCheckpoint ck = load_checkpoint(path.string());
        if (policy) ck.config.policy = *policy;
        if (first) {
            d.config = ck.config;
            first = false;
        } else if (!(ck.config.search == d.config.search) || !(ck.config.task == d.config.task)) {
            throw UsageError("derive: runs under " + runs_dir + " used different configs");
        }
        SeedDerivation s = derive_seed(ck.state, ck.config);
        s.summary.checkpoint = path.string();
        d.runs.push_back(std::move(s));
    }
    std::sort(d.runs.begin(), d.runs.end(),
              [](const SeedDerivation& a, const SeedDerivation& b) { return a.summary.seed < b.summary.seed; });
    std::vector<RunSummary> summaries;
    for (const auto& r : d.runs) summaries.push_back(r.summary);
    const RunSummary& best = multi_seed_select(summaries);
    for (const auto& r : d.runs)
        if (r.summary.seed == best.seed) d.winner = r.genotype;
    return d;
}

}  // namespace

Derivation derive_from_runs(const std::string& runs_dir, DiscretizePolicy policy) {
    return derive_impl(runs_dir, &policy);
}

Derivation derive_from_runs(const std::string& runs_dir) { return derive_impl(runs_dir, nullptr); }

}  // namespace cellnas
