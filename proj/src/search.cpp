#include "cellnas/search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "cellnas/errors.hpp"

namespace cellnas {

void validate_search_config(const SearchConfig& config) {
    validate_config(config.cell);
    const auto& o = config.optimizer;
    const auto& s = config.schedule;
    if (!(o.w_lr >= 0.0) || !(o.alpha_lr >= 0.0)) throw ParameterError("optimizer: learning rates must be >= 0");
    if (!(o.epsilon_scale > 0.0)) throw ParameterError("optimizer: epsilon_scale must be positive");
    if (s.total_epochs < 1) throw ParameterError("schedule: total_epochs must be >= 1");
    if (s.alpha_warmup_epochs < 0 || s.alpha_warmup_epochs >= s.total_epochs) {
        throw ParameterError("schedule: alpha_warmup_epochs must be in [0, total_epochs)");
    }
    if (s.iters_train < 0 || s.iters_val < 0 || s.iters_holdout < 1) {
        throw ParameterError("schedule: iteration counts must be non-negative (holdout >= 1)");
    }
    if (s.batch_size < 1) throw ParameterError("schedule: batch_size must be >= 1");
    if (config.variant == Variant::FairDarts && config.cell.relaxation != Relaxation::Sigmoid) {
        throw ParameterError("variant fair requires sigmoid relaxation");
    }
}

TaskHead TaskHead::make(int features) {
    return {Tensor::zeros({1, static_cast<std::size_t>(features), 1, 1}, true), Tensor::zeros({1}, true)};
}

Tensor TaskHead::forward(Tape& tape, const Tensor& features) const {
    return ops::bias_add(tape, ops::conv2d(tape, features, weight, {}), bias);
}

SearchState SearchState::initialize(const SearchConfig& config, std::uint64_t seed) {
    validate_search_config(config);
    Rng init(mix_seed(seed, 1));
    SearchState s{.cell = SuperNetCell(config.cell, mix_seed(seed, 2)),
                  .head = TaskHead::make(config.cell.n_intermediate * config.cell.channels),
                  .alpha = AlphaParams::random(config.cell, init, config.optimizer.alpha_init_scale),
                  .seed = seed,
                  .data_rng = Rng(mix_seed(seed, 3)),
                  .dropout_rng = Rng(mix_seed(seed, 4))};
    const auto w = s.weights();
    s.w_opt = AdamState::for_params(w);
    s.alpha_opt = AdamState::for_params(std::span<const Tensor>(&s.alpha.values, 1));
    s.dropout_rate = config.cell.dropout_tau;
    s.w_lr = config.optimizer.w_lr;
    return s;
}

SearchState SearchState::clone() const {
    SearchState s{.cell = cell.clone(), .head = head.clone(), .alpha = {alpha.values.clone()}};
    s.w_opt = w_opt;
    s.alpha_opt = alpha_opt;
    s.epoch = epoch;
    s.dropout_rate = dropout_rate;
    s.w_lr = w_lr;
    s.holdout_history = holdout_history;
    s.aborts = aborts;
    s.seed = seed;
    s.data_rng = data_rng;
    s.dropout_rng = dropout_rng;
    s.batch_counter = batch_counter;
    return s;
}

std::vector<Tensor> SearchState::weights() const {
    std::vector<Tensor> out;
    for (auto& p : cell.params()) out.push_back(p.tensor);
    out.push_back(head.weight);
    out.push_back(head.bias);
    return out;
}

std::vector<bool> SearchState::trainable_mask(const SearchSchedule& schedule) const {
    std::vector<bool> mask(weights().size(), true);
    if (schedule.freeze_head) {
        mask[mask.size() - 1] = false;
        mask[mask.size() - 2] = false;
    }
    return mask;
}

std::vector<Tensor> SearchState::trainable_weights(const SearchSchedule& schedule) const {
    const auto all = weights();
    const auto mask = trainable_mask(schedule);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < all.size(); ++i)
        if (mask[i]) out.push_back(all[i]);
    return out;
}

Tensor SearchState::predict(Tape& tape, const Batch& batch, DropoutState& dropout, bool update_stats) {
    Tensor features = cell.forward(tape, batch.inputs, alpha.values, dropout, update_stats);
    return head.forward(tape, features);
}

namespace {

void check_finite(double loss, const Batch& batch, const char* where) {
    if (!std::isfinite(loss)) {
        throw NumericalAbort(std::string(where) + ": non-finite loss on batch " + std::to_string(batch.id), batch.id);
    }
}

}  // namespace

double train_step_weights(SearchState& state, const SearchConfig& config, const Batch& batch, const LossFn& loss_fn) {
    auto weights = state.weights();
    for (auto& w : weights) w.zero_grad();
    state.alpha.values.zero_grad();

    DropoutState dropout{state.dropout_rate, state.dropout_rng, true};
    Tape tape;
    Tensor loss = loss_fn(tape, state.predict(tape, batch, dropout), batch.target);
    state.dropout_rng = dropout.rng;
    const double value = loss.item();
    check_finite(value, batch, "train_step_weights");
    tape.backward(loss);

    adam_step(state.w_opt, weights, state.w_lr, config.optimizer.adam, state.trainable_mask(config.schedule));
    return value;
}

double fair_aux_weight(const SearchConfig& config, int epoch) {
    if (config.variant != Variant::FairDarts) return 0.0;
    const int since = epoch - config.schedule.alpha_warmup_epochs;
    if (since <= 0) return 0.0;
    const int ramp = config.optimizer.fair_ramp_epochs;
    if (ramp <= 0 || since >= ramp) return config.optimizer.fair_w01;
    return config.optimizer.fair_w01 * static_cast<double>(since) / static_cast<double>(ramp);
}

Tensor fair_darts_auxiliary(Tape& tape, const Tensor& alpha, double w01) {
    Tensor centered = ops::shift(tape, ops::sigmoid(tape, alpha), -0.5);
    return ops::scale(tape, ops::mean(tape, ops::mul(tape, centered, centered)), -w01);
}

namespace {

// Loss oracle for an architecture step. Each split gets its own dropout
// stream derived from one per-step seed, so repeated evaluations of the same
// split (W+ and W-, or first- vs second-order) see identical masks.
LossOracle make_arch_oracle(SearchState& state, const SearchConfig& config, const Batch* train_batch,
                            const Batch& val_batch, const LossFn& loss_fn, std::uint64_t step_seed) {
    const double aux_w = fair_aux_weight(config, state.epoch);
    return [&state, &config, train_batch, &val_batch, &loss_fn, step_seed, aux_w](Split split) {
        const Batch& batch = split == Split::Train ? *train_batch : val_batch;
        DropoutState dropout{state.dropout_rate, Rng(mix_seed(step_seed, split == Split::Train ? 1 : 2)), true};
        Tape tape;
        Tensor loss = loss_fn(tape, state.predict(tape, batch, dropout, false), batch.target);
        if (split == Split::Val && config.variant == Variant::FairDarts) {
            loss = ops::add(tape, loss, fair_darts_auxiliary(tape, state.alpha.values, aux_w));
        }
        const double value = loss.item();
        check_finite(value, batch, "architecture step");
        tape.backward(loss);
        return value;
    };
}

void apply_alpha_update(SearchState& state, const SearchConfig& config, const std::vector<double>& hypergrad) {
    auto g = state.alpha.values.grad();
    std::copy(hypergrad.begin(), hypergrad.end(), g.begin());
    for (double v : hypergrad) {
        if (!std::isfinite(v)) throw NumericalAbort("architecture step: non-finite hypergradient", -1);
    }
    Tensor params[1] = {state.alpha.values};
    adam_step(state.alpha_opt, params, config.optimizer.alpha_lr, config.optimizer.adam);
}

}  // namespace

double arch_step_first_order(SearchState& state, const SearchConfig& config, const Batch& val_batch,
                             const LossFn& loss_fn) {
    const std::uint64_t step_seed = state.dropout_rng.next_u64();
    auto weights = state.trainable_weights(config.schedule);
    const auto oracle = make_arch_oracle(state, config, nullptr, val_batch, loss_fn, step_seed);
    const Hypergradient h = first_order_hypergradient(oracle, weights, state.alpha.values);
    apply_alpha_update(state, config, h.grad);
    return h.val_loss;
}

double arch_step_second_order(SearchState& state, const SearchConfig& config, const Batch& train_batch,
                              const Batch& val_batch, const LossFn& loss_fn, double eta, double eps_scale) {
    const std::uint64_t step_seed = state.dropout_rng.next_u64();
    auto weights = state.trainable_weights(config.schedule);
    const auto oracle = make_arch_oracle(state, config, &train_batch, val_batch, loss_fn, step_seed);
    const Hypergradient h = second_order_hypergradient(oracle, weights, state.alpha.values, eta, eps_scale);
    if (h.degenerate) {
        state.aborts.push_back({state.epoch, val_batch.id, "degenerate second-order step: |v| < 1e-12"});
    }
    apply_alpha_update(state, config, h.grad);
    return h.val_loss;
}

namespace {

std::vector<std::size_t> permutation(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    return p;
}

Batch take(const BatchSource& data, DataSplit split, const std::vector<std::size_t>& order, int k, int batch_size,
           long& counter) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(batch_size));
    for (int t = 0; t < batch_size; ++t) {
        idx[static_cast<std::size_t>(t)] =
            order[(static_cast<std::size_t>(k) * static_cast<std::size_t>(batch_size) + static_cast<std::size_t>(t)) %
                  order.size()];
    }
    Batch b = data.make_batch(split, idx);
    b.id = counter++;
    return b;
}

}  // namespace

double evaluate_holdout(SearchState& state, const SearchConfig& config, const BatchSource& data,
                        const LossFn& loss_fn) {
    const std::size_t n = data.size(DataSplit::Holdout);
    if (n == 0) throw ParameterError("holdout split is empty");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    double total = 0.0;
    long counter = 0;
    for (int k = 0; k < config.schedule.iters_holdout; ++k) {
        Batch b = take(data, DataSplit::Holdout, order, k, config.schedule.batch_size, counter);
        DropoutState off{0.0, Rng(0), false};
        Tape tape(false);
        total += loss_fn(tape, state.predict(tape, b, off), b.target).item();
    }
    return total / static_cast<double>(config.schedule.iters_holdout);
}

void run_search(SearchState& state, const SearchConfig& config, const BatchSource& data, const LossFn& loss_fn,
                const EpochCallback& on_epoch) {
    validate_search_config(config);
    const auto& sched = config.schedule;
    if (data.size(DataSplit::Train) == 0 || data.size(DataSplit::Val) == 0) {
        throw ParameterError("search needs non-empty train and val splits");
    }
    while (state.epoch < sched.total_epochs) {
        const int epoch = state.epoch;
        state.dropout_rate = dropout_rate_at(epoch, sched.total_epochs, config.cell.dropout_tau);
        state.w_lr = cosine_lr(config.optimizer.w_lr, epoch, sched.total_epochs);
        const auto train_order = permutation(data.size(DataSplit::Train), state.data_rng);
        const auto val_order = permutation(data.size(DataSplit::Val), state.data_rng);
        const bool arch = epoch >= sched.alpha_warmup_epochs;
        const int steps = std::max(sched.iters_train, arch ? sched.iters_val : 0);
        try {
            for (int k = 0; k < steps; ++k) {
                std::optional<Batch> train_batch;
                if (k < sched.iters_train || (arch && config.variant == Variant::SecondOrder)) {
                    train_batch = take(data, DataSplit::Train, train_order, k, sched.batch_size, state.batch_counter);
                }
                if (arch && k < sched.iters_val) {
                    const Batch val_batch =
                        take(data, DataSplit::Val, val_order, k, sched.batch_size, state.batch_counter);
                    if (config.variant == Variant::SecondOrder) {
                        arch_step_second_order(state, config, *train_batch, val_batch, loss_fn, state.w_lr,
                                               config.optimizer.epsilon_scale);
                    } else {
                        arch_step_first_order(state, config, val_batch, loss_fn);
                    }
                }
                if (k < sched.iters_train) train_step_weights(state, config, *train_batch, loss_fn);
            }
        } catch (const NumericalAbort& e) {
            state.aborts.push_back({epoch, e.batch_id(), e.what()});
        }
        const double l_ho = evaluate_holdout(state, config, data, loss_fn);
        const auto a = state.alpha.values.data();
        state.holdout_history.push_back({epoch, l_ho, state.dropout_rate, state.w_lr, {a.begin(), a.end()}});
        state.epoch = epoch + 1;
        if (on_epoch) on_epoch(state);
    }
}

int early_stop_select(std::span<const HoldoutRecord> history, int alpha_warmup_epochs) {
    const HoldoutRecord* best = nullptr;
    for (const auto& r : history) {
        if (r.epoch < alpha_warmup_epochs || !std::isfinite(r.l_ho)) continue;
        if (best == nullptr || r.l_ho < best->l_ho || (r.l_ho == best->l_ho && r.epoch < best->epoch)) best = &r;
    }
    if (best == nullptr) {
        throw ValidationError("early_stop_select: no finite hold-out loss at or after epoch " +
                              std::to_string(alpha_warmup_epochs));
    }
    return best->epoch;
}

const RunSummary& multi_seed_select(std::span<const RunSummary> runs) {
    if (runs.empty()) throw UsageError("multi_seed_select: no runs");
    const RunSummary* best = nullptr;
    for (const auto& r : runs) {
        if (!std::isfinite(r.l_ho)) continue;
        if (best == nullptr || r.l_ho < best->l_ho || (r.l_ho == best->l_ho && r.seed < best->seed)) best = &r;
    }
    if (best == nullptr) throw ValidationError("multi_seed_select: no run has a finite hold-out loss");
    return *best;
}

}  // namespace cellnas
