#include "cellnas/retrain.hpp"

#include <cmath>
#include <numeric>

#include "cellnas/errors.hpp"
#include "cellnas/optim.hpp"

namespace cellnas {

void validate_retrain(const RetrainConfig& c) {
    if (c.epochs < 1 || c.iters < 1) throw ParameterError("retrain: epochs and iters must be >= 1");
    if (c.batch_size < 1) throw ParameterError("retrain: batch_size must be >= 1");
    if (!(c.lr >= 0.0)) throw ParameterError("retrain: lr must be >= 0");
}

DiscreteNetwork DiscreteNetwork::build(const Genotype& genotype, const CellConfig& cfg, std::uint64_t seed) {
    return {build_discrete_cell(genotype, cfg.channels, cfg.input_channels, mix_seed(seed, 2), cfg.op_options),
            TaskHead::make(genotype.n_intermediate * cfg.channels)};
}

std::vector<NamedTensor> DiscreteNetwork::params() const {
    auto out = cell.params();
    out.push_back({"head.weight", head.weight});
    out.push_back({"head.bias", head.bias});
    return out;
}

std::vector<Tensor> DiscreteNetwork::weights() const {
    std::vector<Tensor> out;
    for (auto& p : params()) out.push_back(p.tensor);
    return out;
}

Tensor DiscreteNetwork::predict(Tape& tape, const Batch& batch, bool training, bool update_stats) {
    return head.forward(tape, cell.forward(tape, batch.inputs, training, update_stats));
}

TrainLog train_discrete(DiscreteNetwork& net, const ToyDataset& data, const LossFn& loss_fn,
                        const RetrainConfig& config) {
    validate_retrain(config);
    auto weights = net.weights();
    AdamState adam = AdamState::for_params(weights);
    Rng rng(mix_seed(config.seed, 7));
    const std::size_t n = data.size(DataSplit::Train);
    const auto B = static_cast<std::size_t>(config.batch_size);
    TrainLog log;
    long batch_id = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double lr = cosine_lr(config.lr, epoch, config.epochs);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double total = 0.0;
        for (int k = 0; k < config.iters; ++k) {
            std::vector<std::size_t> idx(B);
            for (std::size_t t = 0; t < B; ++t) idx[t] = order[(static_cast<std::size_t>(k) * B + t) % n];
            const Batch b = data.make_batch(DataSplit::Train, idx);
            for (auto& w : weights) w.zero_grad();
            Tape tape;
            Tensor loss = loss_fn(tape, net.predict(tape, b, true), b.target);
            const double value = loss.item();
            if (!std::isfinite(value)) throw NumericalAbort("train: non-finite loss on batch " + std::to_string(batch_id), batch_id);
            ++batch_id;
            tape.backward(loss);
            adam_step(adam, weights, lr, {});
            total += value;
        }
        log.train_loss.push_back(total / config.iters);
        log.val_loss.push_back(evaluate(net, data, DataSplit::Val, loss_fn, config.batch_size).loss);
    }
    return log;
}

EvalReport evaluate(DiscreteNetwork& net, const ToyDataset& data, DataSplit split, const LossFn& loss_fn,
                    int batch_size) {
    const auto& samples = data.split(split);
    const int S = data.spec().image_size;
    EvalReport r;
    std::vector<std::pair<int, int>> centers;
    double loss_sum = 0.0;
    double hits = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Batch b = data.make_batch(split, idx);
        Tape tape(false);
        Tensor pred = net.predict(tape, b, false);
        loss_sum += loss_fn(tape, pred, b.target).item() * static_cast<double>(idx.size());
        const auto plane = static_cast<std::size_t>(S * S);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const Sample& s = samples[idx[k]];
            hits += localization_credit(pred.data().subspan(k * plane, plane), S, S, s.center_y, s.center_x);
            centers.emplace_back(s.center_y, s.center_x);
        }
    }
    r.samples = samples.size();
    r.loss = loss_sum / static_cast<double>(r.samples);
    r.accuracy = hits / static_cast<double>(r.samples);
    r.random_baseline = random_localization_baseline(centers, S, S);
    return r;
}

}  // namespace cellnas
