#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cellnas/cell.hpp"
#include "cellnas/hypergradient.hpp"
#include "cellnas/optim.hpp"

namespace cellnas {

enum class Variant { FirstOrder, SecondOrder, FairDarts };

struct OptimizerConfig {
    double w_lr = 1e-3;
    double alpha_lr = 3e-4;
    AdamConfig adam;
    double epsilon_scale = 0.01;
    double fair_w01 = 1.0;
    int fair_ramp_epochs = 10;
    double alpha_init_scale = 1e-3;

    bool operator==(const OptimizerConfig& o) const {
        return w_lr == o.w_lr && alpha_lr == o.alpha_lr && adam.beta1 == o.adam.beta1 &&
               adam.beta2 == o.adam.beta2 && adam.eps == o.adam.eps && epsilon_scale == o.epsilon_scale &&
               fair_w01 == o.fair_w01 && fair_ramp_epochs == o.fair_ramp_epochs &&
               alpha_init_scale == o.alpha_init_scale;
    }
};

struct SearchSchedule {
    int total_epochs = 70;
    int alpha_warmup_epochs = 10;
    int iters_train = 200;
    int iters_val = 200;
    int iters_holdout = 50;
    int batch_size = 10;
    bool freeze_head = false;

    bool operator==(const SearchSchedule&) const = default;
};

struct SearchConfig {
    CellConfig cell;
    OptimizerConfig optimizer;
    SearchSchedule schedule;
    Variant variant = Variant::SecondOrder;

    bool operator==(const SearchConfig&) const = default;
};

void validate_search_config(const SearchConfig& config);

enum class DataSplit { Train, Val, Holdout };

struct Batch {
    std::vector<Tensor> inputs;  // one [B,Cin,H,W] tensor per input stream
    Tensor target;               // [B,1,H,W]
    long id = 0;
};

// Provider of training data for a search.
class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual std::size_t size(DataSplit split) const = 0;
    virtual Batch make_batch(DataSplit split, std::span<const std::size_t> indices) const = 0;
};

using LossFn = std::function<Tensor(Tape& tape, const Tensor& prediction, const Tensor& target)>;

// 1x1 conv from the cell output to a single response map, plus bias. Starts
// at zero, i.e. as the constant predictor.
struct TaskHead {
    Tensor weight;  // [1, F, 1, 1]
    Tensor bias;    // [1]

    static TaskHead make(int features);
    Tensor forward(Tape& tape, const Tensor& features) const;
    TaskHead clone() const { return {weight.clone(), bias.clone()}; }
};

struct HoldoutRecord {
    int epoch = 0;
    double l_ho = 0.0;
    double dropout_rate = 0.0;
    double w_lr = 0.0;
    std::vector<double> alpha;  // architecture parameters at the end of the epoch
    bool operator==(const HoldoutRecord&) const = default;
};

struct AbortRecord {
    int epoch = 0;
    long batch_id = 0;
    std::string reason;
};

// Everything needed to continue a search bit-for-bit.
struct SearchState {
    SuperNetCell cell;
    TaskHead head;
    AlphaParams alpha;
    AdamState w_opt;
    AdamState alpha_opt;
    int epoch = 0;  // next epoch to run
    double dropout_rate = 0.0;
    double w_lr = 0.0;
    std::vector<HoldoutRecord> holdout_history;
    std::vector<AbortRecord> aborts;
    std::uint64_t seed = 0;
    Rng data_rng;
    Rng dropout_rng;
    long batch_counter = 0;

    static SearchState initialize(const SearchConfig& config, std::uint64_t seed);

    // Deep copy; no tensor storage is shared with the original.
    SearchState clone() const;

    // Network weights W in a fixed order: cell parameters, then head weight and bias.
    std::vector<Tensor> weights() const;
    // Mask over weights(): false for frozen tensors.
    std::vector<bool> trainable_mask(const SearchSchedule& schedule) const;
    std::vector<Tensor> trainable_weights(const SearchSchedule& schedule) const;

    // Forward of cell + head.
    Tensor predict(Tape& tape, const Batch& batch, DropoutState& dropout, bool update_stats = true);
};

// One Adam step on the trainable weights; alpha fixed. Returns the pre-step loss.
double train_step_weights(SearchState& state, const SearchConfig& config, const Batch& batch, const LossFn& loss_fn);

// One Adam step on alpha with grad_alpha L_val at the current weights.
double arch_step_first_order(SearchState& state, const SearchConfig& config, const Batch& val_batch,
                             const LossFn& loss_fn);

// One Adam step on alpha with the finite-difference second-order hypergradient.
double arch_step_second_order(SearchState& state, const SearchConfig& config, const Batch& train_batch,
                              const Batch& val_batch, const LossFn& loss_fn, double eta, double eps_scale);

// -w01 * mean((sigmoid(alpha) - 0.5)^2)
Tensor fair_darts_auxiliary(Tape& tape, const Tensor& alpha, double w01);

// Ramped auxiliary weight for a given epoch (0 until warmup ends).
double fair_aux_weight(const SearchConfig& config, int epoch);

// Mean holdout loss in evaluation mode with dropout off.
double evaluate_holdout(SearchState& state, const SearchConfig& config, const BatchSource& data,
                        const LossFn& loss_fn);

using EpochCallback = std::function<void(const SearchState&)>;

// Runs (or resumes) the alternating search until schedule.total_epochs.
void run_search(SearchState& state, const SearchConfig& config, const BatchSource& data, const LossFn& loss_fn,
                const EpochCallback& on_epoch = {});

// Epoch with minimal finite L_ho among epochs >= warmup; earliest on ties.
int early_stop_select(std::span<const HoldoutRecord> history, int alpha_warmup_epochs);

struct RunSummary {
    std::uint64_t seed = 0;
    int best_epoch = 0;
    double l_ho = 0.0;
    std::string checkpoint;
};

// Run with the lowest best-epoch L_ho; lowest seed on ties.
const RunSummary& multi_seed_select(std::span<const RunSummary> runs);

}  // namespace cellnas
