#pragma once

#include <string>
#include <vector>

#include "cellnas/config.hpp"
#include "cellnas/retrain.hpp"
#include "cellnas/search.hpp"

namespace cellnas {

inline constexpr int kCheckpointVersion = 1;

// JSON container: a header {format, version} and independently checksummed
// sections (config, state, history, alpha, params, norm_stats, optimizers).
// Doubles are stored as hexadecimal bit patterns so a reload is exact.
std::string checkpoint_text(const SearchState& state, const RunConfig& config);
void save_checkpoint(const std::string& path, const SearchState& state, const RunConfig& config);

struct LoadedCheckpoint {
    RunConfig config;
    SearchState state;
};

// Throws IntegrityError naming the failing section on corruption or a version mismatch.
LoadedCheckpoint parse_checkpoint(const std::string& text);
LoadedCheckpoint load_checkpoint(const std::string& path);

// Columns: epoch, L_ho, dropout_rate, w_lr.
std::string holdout_csv(const std::vector<HoldoutRecord>& history);
void write_holdout_csv(const std::string& path, const std::vector<HoldoutRecord>& history);

// Retrained discrete network with its genotype and config.
struct LoadedModel {
    RunConfig config;
    Genotype genotype;
    DiscreteNetwork network;
};

std::string model_text(const DiscreteNetwork& net, const RunConfig& config);
void save_model(const std::string& path, const DiscreteNetwork& net, const RunConfig& config);
LoadedModel parse_model(const std::string& text);
LoadedModel load_model(const std::string& path);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& text);

}  // namespace cellnas
