#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cellnas/cell.hpp"

namespace cellnas {

struct GenotypeEdge {
    int source = 0;
    int dest = 0;
    OpKind op = OpKind::Zero;
    bool operator==(const GenotypeEdge&) const = default;
};

// Where a derived cell came from: winning seed, stopping epoch, its hold-out loss.
struct Provenance {
    std::uint64_t seed = 0;
    int epoch = 0;
    double l_ho = 0.0;
    bool operator==(const Provenance&) const = default;
};

// A discrete cell: one operation per edge slot.
struct Genotype {
    int n_inputs = 2;
    int n_intermediate = 4;
    std::vector<OpKind> op_set{kAllOps.begin(), kAllOps.end()};
    std::vector<GenotypeEdge> edges;  // canonical (dest, source) order
    Provenance meta;

    bool operator==(const Genotype&) const = default;
    const GenotypeEdge* find(int source, int dest) const;
};

enum class DiscretizePolicy { LiteralArgmax, ExcludeZero, TopTwoInputs };

// Per-edge argmax of the architecture matrix, lowest op index on ties.
// ExcludeZero masks the Zero column (an op set of only Zero is left as is).
// TopTwoInputs starts from ExcludeZero and keeps, per intermediate node, the two
// incoming edges whose chosen op has the largest relaxed weight; the rest become
// Zero (lower slot wins ties). Needs Zero in the op set.
Genotype discretize(const Tensor& alpha, const CellConfig& config,
                    DiscretizePolicy policy = DiscretizePolicy::LiteralArgmax);
inline Genotype discretize(const AlphaParams& alpha, const CellConfig& config,
                           DiscretizePolicy policy = DiscretizePolicy::LiteralArgmax) {
    return discretize(alpha.values, config, policy);
}

struct Violation {
    enum class Severity { Error, Warning };
    Severity severity = Severity::Error;
    std::string message;
};

// Structural checks; never throws. Warnings do not make a genotype invalid.
std::vector<Violation> validate(const Genotype& genotype);
std::vector<Violation> validate(const Genotype& genotype, const CellConfig& config);
bool is_valid(std::span<const Violation> violations);

// Line-oriented text format:
//   cell v1 inputs=<n> intermediate=<m>
//   ops <name> <name> ...
//   edge <source> <dest> <op_name>      (one per slot)
//   meta seed=<s> epoch=<e> l_ho=<x>
std::string serialize(const Genotype& genotype);
// Throws ParseError carrying the offending line number.
Genotype parse_genotype(const std::string& text);

// Graphviz digraph; Zero edges are omitted.
std::string to_dot(const Genotype& genotype);

// Fraction of edges whose op has no learnable parameters (Zero counts).
double weight_free_fraction(const Genotype& genotype);

// Cell built from a genotype: one op instance per non-Zero edge.
class DiscreteCell {
public:
    const Genotype& genotype() const { return genotype_; }
    int channels() const { return channels_; }

    // Output [B, n_intermediate*C, H, W]. An intermediate node without
    // incoming ops contributes a zero map.
    Tensor forward(Tape& tape, std::span<const Tensor> inputs, bool training, bool update_stats = true);

    std::vector<NamedTensor> params() const;
    std::size_t edge_param_count() const;
    std::vector<ops::NormStats*> norm_stats();

    // Copies projections, chosen-op weights and normalization statistics from a
    // super-net with the same configuration.
    void copy_weights_from(const SuperNetCell& supernet);

    std::vector<InputProjection>& projections() { return projections_; }

private:
    friend DiscreteCell build_discrete_cell(const Genotype& genotype, int channels, int input_channels,
                                            std::uint64_t rng_seed, const OpOptions& options);
    Genotype genotype_;
    int channels_ = 0;
    std::vector<InputProjection> projections_;
    std::vector<std::optional<OpInstance>> ops_;  // parallel to genotype_.edges; empty for Zero
};

// Fresh random weights; throws ValidationError on an invalid genotype.
DiscreteCell build_discrete_cell(const Genotype& genotype, int channels, int input_channels, std::uint64_t rng_seed,
                                 const OpOptions& options = {});

struct EdgeCost {
    GenotypeEdge edge;
    std::size_t params = 0;
    std::size_t mult_adds = 0;
};

struct CostReport {
    std::vector<EdgeCost> edges;
    std::size_t total_params = 0;
    std::size_t total_mult_adds = 0;
};

// Analytic per-edge parameter and multiply-add counts for input [B,C,H,W].
// Input projections are not included.
CostReport cost_report(const Genotype& genotype, int channels, const Shape& input_shape,
                       const OpOptions& options = {});

// Mixing weights [E,M] that select exactly the genotype's ops.
Tensor one_hot_mixing(const Genotype& genotype);

}  // namespace cellnas
