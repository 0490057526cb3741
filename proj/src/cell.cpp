#include "cellnas/cell.hpp"

#include <algorithm>
#include <cmath>

#include "cellnas/errors.hpp"

namespace cellnas {

void validate_config(const CellConfig& c) {
    if (c.n_inputs < 1) throw ParameterError("cell: n_inputs must be >= 1");
    if (c.n_intermediate < 1) throw ParameterError("cell: n_intermediate must be >= 1");
    if (c.channels < 1) throw ParameterError("cell: channels must be >= 1");
    if (c.input_channels < 1) throw ParameterError("cell: input_channels must be >= 1");
    if (c.op_set.empty()) throw ParameterError("cell: op_set is empty");
    for (std::size_t i = 0; i < c.op_set.size(); ++i)
        for (std::size_t j = i + 1; j < c.op_set.size(); ++j)
            if (c.op_set[i] == c.op_set[j]) {
                throw ParameterError("cell: op_set lists " + std::string(op_name(c.op_set[i])) + " twice");
            }
    if (!(c.dropout_tau >= 0.0 && c.dropout_tau < 1.0)) throw ParameterError("cell: dropout_tau must be in [0,1)");
}

std::size_t edge_count(int n_inputs, int n_intermediate) {
    std::size_t n = 0;
    for (int j = 0; j < n_intermediate; ++j) n += static_cast<std::size_t>(n_inputs + j);
    return n;
}

std::vector<EdgeSlot> edge_slots(int n_inputs, int n_intermediate) {
    std::vector<EdgeSlot> slots;
    for (int j = n_inputs; j < n_inputs + n_intermediate; ++j)
        for (int i = 0; i < j; ++i) slots.push_back({i, j});
    return slots;
}

AlphaParams AlphaParams::zeros(const CellConfig& config) {
    return {Tensor::zeros({edge_count(config), config.op_set.size()}, true)};
}

AlphaParams AlphaParams::random(const CellConfig& config, Rng& rng, double scale) {
    AlphaParams a = zeros(config);
    for (double& v : a.values.data()) v = scale * rng.normal();
    return a;
}

double dropout_rate_at(int epoch, int total_search_epochs, double tau) {
    if (!(tau >= 0.0 && tau < 1.0)) throw ParameterError("dropout_rate_at: tau must be in [0,1)");
    if (total_search_epochs < 1) throw ParameterError("dropout_rate_at: total_search_epochs must be >= 1");
    if (epoch < 0 || epoch > total_search_epochs) {
        throw ParameterError("dropout_rate_at: epoch " + std::to_string(epoch) + " outside [0, " +
                             std::to_string(total_search_epochs) + "]");
    }
    return tau * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_search_epochs));
}

Tensor relax(Tape& tape, const Tensor& alphas, Relaxation relaxation) {
    for (double v : alphas.data()) {
        if (std::isnan(v)) throw ValidationError("architecture parameters contain NaN");
    }
    return relaxation == Relaxation::Softmax ? ops::softmax(tape, alphas, alphas.rank() - 1)
                                             : ops::sigmoid(tape, alphas);
}

Tensor mixed_output_weighted(Tape& tape, MixedEdge& edge, const Tensor& x, const Tensor& weights,
                             DropoutState& dropout, DropoutTargets targets, bool update_stats) {
    if (weights.numel() != edge.ops.size()) {
        throw DimensionError("mixed_output: " + std::to_string(weights.numel()) + " weights for " +
                             std::to_string(edge.ops.size()) + " ops");
    }
    const auto w = weights.data();
    const double rate = dropout.effective_rate();
    std::vector<Tensor> terms(edge.ops.size());
    for (std::size_t k = 0; k < edge.ops.size(); ++k) {
        auto& op = edge.ops[k];
        if (op.kind() == OpKind::Zero) continue;
        // A hard zero weight that carries no gradient cannot influence anything.
        if (w[k] == 0.0 && !(tape.recording() && weights.requires_grad())) continue;
        Tensor y = op.apply(tape, x, dropout.training, update_stats);
        const bool dropped = targets == DropoutTargets::AllOps || op.kind() == OpKind::Skip;
        if (dropped && rate > 0.0) y = ops::dropout(tape, y, rate, dropout.rng);
        terms[k] = std::move(y);
    }
    return ops::weighted_sum(tape, terms, weights, x.shape());
}

Tensor mixed_output(Tape& tape, MixedEdge& edge, const Tensor& x, const Tensor& alpha_row, Relaxation relaxation,
                    DropoutState& dropout, DropoutTargets targets) {
    if (alpha_row.numel() != edge.ops.size()) {
        throw DimensionError("mixed_output: alpha row of " + std::to_string(alpha_row.numel()) + " for " +
                             std::to_string(edge.ops.size()) + " ops");
    }
    const Tensor w = relax(tape, alpha_row, relaxation);
    return mixed_output_weighted(tape, edge, x, w, dropout, targets);
}

Tensor InputProjection::apply(Tape& tape, const Tensor& x, bool training, bool update_stats) {
    Tensor h = ops::conv2d(tape, x, weight, {});
    return ops::normalize(tape, h, gain, bias, stats, training ? ops::NormMode::Train : ops::NormMode::Eval,
                          update_stats);
}

InputProjection InputProjection::clone() const { return {weight.clone(), gain.clone(), bias.clone(), stats}; }

InputProjection make_input_projection(int in_channels, int channels, Rng& rng) {
    const auto cin = static_cast<std::size_t>(in_channels), c = static_cast<std::size_t>(channels);
    InputProjection p;
    p.weight = Tensor::zeros({c, cin, 1, 1}, true);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    for (double& v : p.weight.data()) v = rng.uniform(-bound, bound);
    p.gain = Tensor::full({c}, 1.0, true);
    p.bias = Tensor::zeros({c}, true);
    p.stats = ops::NormStats::fresh(c);
    return p;
}

std::vector<Tensor> project_inputs(Tape& tape, std::vector<InputProjection>& projections,
                                   std::span<const Tensor> inputs, bool training, bool update_stats) {
    if (inputs.size() != projections.size()) {
        throw DimensionError("cell: expected " + std::to_string(projections.size()) + " inputs, got " +
                             std::to_string(inputs.size()));
    }
    for (const auto& in : inputs) {
        if (in.rank() != 4) throw DimensionError("cell: input of shape " + shape_str(in.shape()) + " is not 4-D");
        if (in.dim(0) != inputs[0].dim(0)) {
            throw DimensionError("cell: batch mismatch between inputs " + shape_str(inputs[0].shape()) + " and " +
                                 shape_str(in.shape()));
        }
    }
    const std::size_t h = inputs[0].dim(2), w = inputs[0].dim(3);
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        Tensor p = projections[i].apply(tape, inputs[i], training, update_stats);
        out.push_back(ops::resize_nearest(tape, p, h, w));
    }
    return out;
}

SuperNetCell::SuperNetCell(CellConfig config, std::uint64_t seed) : config_(std::move(config)) {
    validate_config(config_);
    Rng rng(mix_seed(seed, 0x5eedULL));
    for (int i = 0; i < config_.n_inputs; ++i)
        projections_.push_back(make_input_projection(config_.input_channels, config_.channels, rng));
    const auto slots = edge_slots(config_);
    for (std::size_t e = 0; e < slots.size(); ++e) {
        MixedEdge edge{slots[e].source, slots[e].dest, {}};
        for (OpKind kind : config_.op_set) {
            edge.ops.push_back(build_op(kind, config_.channels, mix_seed(seed, 1000 + e), config_.op_options));
        }
        edges_.push_back(std::move(edge));
    }
}

std::vector<NamedTensor> SuperNetCell::params() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < projections_.size(); ++i) {
        const std::string prefix = "pre" + std::to_string(i) + ".";
        out.push_back({prefix + "conv", projections_[i].weight});
        out.push_back({prefix + "norm.gain", projections_[i].gain});
        out.push_back({prefix + "norm.bias", projections_[i].bias});
    }
    for (const auto& edge : edges_) {
        for (const auto& op : edge.ops) {
            const std::string prefix = "edge" + std::to_string(edge.source) + "_" + std::to_string(edge.dest) + "." +
                                       std::string(op_name(op.kind())) + ".";
            for (auto& p : op.params()) out.push_back({prefix + p.name, p.tensor});
        }
    }
    return out;
}

std::vector<ops::NormStats*> SuperNetCell::norm_stats() {
    std::vector<ops::NormStats*> out;
    for (auto& p : projections_) out.push_back(&p.stats);
    for (auto& edge : edges_)
        for (auto& op : edge.ops)
            for (auto* s : op.norm_stats()) out.push_back(s);
    return out;
}

Tensor SuperNetCell::forward(Tape& tape, std::span<const Tensor> inputs, const Tensor& alphas, DropoutState& dropout,
                             bool update_stats) {
    if (alphas.rank() != 2 || alphas.dim(0) != edges_.size() || alphas.dim(1) != config_.op_set.size()) {
        throw DimensionError("cell: alphas " + shape_str(alphas.shape()) + " do not match [" +
                             std::to_string(edges_.size()) + "," + std::to_string(config_.op_set.size()) + "]");
    }
    return forward_weighted(tape, inputs, relax(tape, alphas, config_.relaxation), dropout, update_stats);
}

Tensor SuperNetCell::forward_weighted(Tape& tape, std::span<const Tensor> inputs, const Tensor& mixing,
                                      DropoutState& dropout, bool update_stats) {
    if (mixing.rank() != 2 || mixing.dim(0) != edges_.size() || mixing.dim(1) != config_.op_set.size()) {
        throw DimensionError("cell: mixing weights " + shape_str(mixing.shape()) + " do not match edge/op counts");
    }
    std::vector<Tensor> nodes = project_inputs(tape, projections_, inputs, dropout.training, update_stats);
    std::size_t e = 0;
    for (int j = config_.n_inputs; j < config_.n_inputs + config_.n_intermediate; ++j) {
        Tensor acc;
        for (int i = 0; i < j; ++i, ++e) {
            Tensor w = ops::row(tape, mixing, e);
            Tensor y = mixed_output_weighted(tape, edges_[e], nodes[static_cast<std::size_t>(i)], w, dropout,
                                             config_.dropout_targets, update_stats);
            acc = acc.defined() ? ops::add(tape, acc, y) : y;
        }
        nodes.push_back(acc);
    }
    return ops::concat_channels(tape, std::span<const Tensor>(nodes).subspan(static_cast<std::size_t>(config_.n_inputs)));
}

SuperNetCell SuperNetCell::clone() const {
    SuperNetCell copy;
    copy.config_ = config_;
    for (const auto& p : projections_) copy.projections_.push_back(p.clone());
    for (const auto& edge : edges_) {
        MixedEdge e{edge.source, edge.dest, {}};
        for (const auto& op : edge.ops) e.ops.push_back(op.clone());
        copy.edges_.push_back(std::move(e));
    }
    return copy;
}

Tensor cell_forward(Tape& tape, SuperNetCell& cell, const Tensor& b3, const Tensor& b4, const AlphaParams& alphas,
                    DropoutState& dropout) {
    const std::array<Tensor, 2> inputs{b3, b4};
    return cell.forward(tape, inputs, alphas.values, dropout);
}

}  // namespace cellnas
