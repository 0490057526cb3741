#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cellnas/op_library.hpp"
#include "cellnas/rng.hpp"
#include "cellnas/tensor.hpp"

namespace cellnas {

enum class Relaxation { Softmax, Sigmoid };
enum class DropoutTargets { SkipOnly, AllOps };

struct CellConfig {
    int n_inputs = 2;
    int n_intermediate = 4;
    int channels = 8;        // C, width of every node
    int input_channels = 8;  // channels of each incoming feature stream
    std::vector<OpKind> op_set{kAllOps.begin(), kAllOps.end()};
    Relaxation relaxation = Relaxation::Softmax;
    double dropout_tau = 0.6;
    DropoutTargets dropout_targets = DropoutTargets::SkipOnly;
    OpOptions op_options;

    bool operator==(const CellConfig&) const = default;
};

// Throws ParameterError on an unusable configuration.
void validate_config(const CellConfig& config);

std::size_t edge_count(int n_inputs, int n_intermediate);
inline std::size_t edge_count(const CellConfig& c) { return edge_count(c.n_inputs, c.n_intermediate); }
inline std::size_t node_count(const CellConfig& c) {
    return static_cast<std::size_t>(c.n_inputs + c.n_intermediate + 1);
}

struct EdgeSlot {
    int source;
    int dest;
    bool operator==(const EdgeSlot&) const = default;
};

// Edges in canonical order: by destination node, then source node. Nodes
// 0..n_inputs-1 are inputs, the next n_intermediate are intermediate nodes.
std::vector<EdgeSlot> edge_slots(int n_inputs, int n_intermediate);
inline std::vector<EdgeSlot> edge_slots(const CellConfig& c) { return edge_slots(c.n_inputs, c.n_intermediate); }

// Architecture matrix [edge_count, |op_set|]; requires_grad is set.
struct AlphaParams {
    Tensor values;

    static AlphaParams zeros(const CellConfig& config);
    // Small Gaussian init, scale * N(0,1).
    static AlphaParams random(const CellConfig& config, Rng& rng, double scale = 1e-3);

    std::size_t edges() const { return values.dim(0); }
    std::size_t ops() const { return values.dim(1); }
    double at(std::size_t edge, std::size_t op) const { return values.data()[edge * ops() + op]; }
};

struct MixedEdge {
    int source = 0;
    int dest = 0;
    std::vector<OpInstance> ops;  // one per op_set entry, same order
};

struct DropoutState {
    double rate = 0.0;
    Rng rng;
    bool training = false;

    double effective_rate() const { return training ? rate : 0.0; }
};

// Linear decay tau * (1 - epoch/total): tau at epoch 0, 0 at the last epoch.
double dropout_rate_at(int epoch, int total_search_epochs, double tau);

// Mixing weights [E,M] from architecture parameters: row-wise softmax, or an
// independent sigmoid per entry.
Tensor relax(Tape& tape, const Tensor& alphas, Relaxation relaxation);

// Weighted sum of every candidate op applied to x. `weights` is one row of
// mixing weights; ops listed in `targets` get dropout in training mode.
Tensor mixed_output_weighted(Tape& tape, MixedEdge& edge, const Tensor& x, const Tensor& weights,
                             DropoutState& dropout, DropoutTargets targets, bool update_stats = true);

// Same, starting from a raw alpha row and applying the relaxation.
Tensor mixed_output(Tape& tape, MixedEdge& edge, const Tensor& x, const Tensor& alpha_row, Relaxation relaxation,
                    DropoutState& dropout, DropoutTargets targets = DropoutTargets::SkipOnly);

// 1x1 conv + normalize mapping an input stream to C channels.
struct InputProjection {
    Tensor weight;  // [C, Cin, 1, 1]
    Tensor gain;
    Tensor bias;
    ops::NormStats stats;

    Tensor apply(Tape& tape, const Tensor& x, bool training, bool update_stats);
    InputProjection clone() const;
};

InputProjection make_input_projection(int in_channels, int channels, Rng& rng);

// Continuous-relaxation cell: every edge carries all candidate ops.
class SuperNetCell {
public:
    SuperNetCell(CellConfig config, std::uint64_t seed);

    const CellConfig& config() const { return config_; }
    std::vector<MixedEdge>& edges() { return edges_; }
    const std::vector<MixedEdge>& edges() const { return edges_; }
    std::vector<InputProjection>& projections() { return projections_; }
    const std::vector<InputProjection>& projections() const { return projections_; }

    // Learnable tensors: projections first, then edge ops in canonical order.
    std::vector<NamedTensor> params() const;
    std::vector<ops::NormStats*> norm_stats();

    // Output [B, n_intermediate*C, H, W] at the first input's resolution.
    // Training mode follows dropout.training.
    Tensor forward(Tape& tape, std::span<const Tensor> inputs, const Tensor& alphas, DropoutState& dropout,
                   bool update_stats = true);

    // Forward with explicit mixing weights [E,M] (no relaxation applied).
    Tensor forward_weighted(Tape& tape, std::span<const Tensor> inputs, const Tensor& mixing, DropoutState& dropout,
                            bool update_stats = true);

    SuperNetCell clone() const;

private:
    SuperNetCell() = default;

    CellConfig config_;
    std::vector<InputProjection> projections_;
    std::vector<MixedEdge> edges_;
};

// Convenience two-stream entry point.
Tensor cell_forward(Tape& tape, SuperNetCell& cell, const Tensor& b3, const Tensor& b4, const AlphaParams& alphas,
                    DropoutState& dropout);

// Projects inputs and aligns them to the first input's spatial size.
std::vector<Tensor> project_inputs(Tape& tape, std::vector<InputProjection>& projections,
                                   std::span<const Tensor> inputs, bool training, bool update_stats);

}  // namespace cellnas
