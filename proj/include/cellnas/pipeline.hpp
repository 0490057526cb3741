#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cellnas/checkpoint.hpp"
#include "cellnas/config.hpp"
#include "cellnas/genotype.hpp"
#include "cellnas/search.hpp"
#include "cellnas/task.hpp"

namespace cellnas {

// <out>/seed_<s>
std::string seed_dir(const std::string& out_dir, std::uint64_t seed);
// <out>/seed_<s>/checkpoints/epoch_<NNN>.ckpt, NNN = zero-based epoch just finished
std::string epoch_checkpoint_path(const std::string& out_dir, std::uint64_t seed, int epoch);
std::string latest_checkpoint_path(const std::string& out_dir, std::uint64_t seed);

using SearchLog = std::function<void(std::uint64_t seed, const HoldoutRecord&)>;

// Searches one seed, checkpointing after every epoch. With resume, continues
// from latest.ckpt when present (its config must match).
SearchState run_seed(const RunConfig& config, std::uint64_t seed, const std::string& out_dir, const ToyDataset& data,
                     bool resume = false, const SearchLog& log = {});

struct SeedOutcome {
    RunSummary summary;  // l_ho is NaN when no epoch qualified
    std::vector<AbortRecord> aborts;
};

// All configured seeds, up to `parallel` at a time. Writes <out>/config.cfg.
std::vector<SeedOutcome> search_all(const RunConfig& config, const std::string& out_dir, bool resume = false,
                                   unsigned parallel = 0, const SearchLog& log = {});

// Early-stop epoch, its L_ho and the alpha snapshot taken there, discretized.
struct SeedDerivation {
    RunSummary summary;
    Genotype genotype;
};
SeedDerivation derive_seed(const SearchState& state, const RunConfig& config);

struct Derivation {
    RunConfig config;
    std::vector<SeedDerivation> runs;  // sorted by seed
    Genotype winner;
};

// Loads every seed_*/latest.ckpt under runs_dir and picks one winner.
Derivation derive_from_runs(const std::string& runs_dir, DiscretizePolicy policy);
Derivation derive_from_runs(const std::string& runs_dir);

}  // namespace cellnas
