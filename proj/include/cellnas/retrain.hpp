#pragma once

#include <cstdint>
#include <vector>

#include "cellnas/genotype.hpp"
#include "cellnas/task.hpp"

namespace cellnas {

// From-scratch training budget for a discrete cell.
struct RetrainConfig {
    int epochs = 10;
    int iters = 50;
    int batch_size = 10;
    double lr = 1e-3;
    std::uint64_t seed = 0;

    bool operator==(const RetrainConfig&) const = default;
};

void validate_retrain(const RetrainConfig& config);

// Discrete cell followed by the same 1x1 response head used during search.
struct DiscreteNetwork {
    DiscreteCell cell;
    TaskHead head;

    static DiscreteNetwork build(const Genotype& genotype, const CellConfig& cell_config, std::uint64_t seed);

    std::vector<NamedTensor> params() const;
    std::vector<Tensor> weights() const;
    Tensor predict(Tape& tape, const Batch& batch, bool training, bool update_stats = true);
};

struct TrainLog {
    std::vector<double> train_loss;  // mean per epoch
    std::vector<double> val_loss;    // end of each epoch
};

// Adam with cosine annealing over the epochs. Throws NumericalAbort on a
// non-finite loss.
TrainLog train_discrete(DiscreteNetwork& net, const ToyDataset& data, const LossFn& loss_fn,
                        const RetrainConfig& config);

// Loss and localization accuracy over a whole split, evaluation mode.
EvalReport evaluate(DiscreteNetwork& net, const ToyDataset& data, DataSplit split, const LossFn& loss_fn,
                    int batch_size = 10);

}  // namespace cellnas
