#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>

#include "cellnas/genotype.hpp"
#include "cellnas/rng.hpp"

namespace cellnas::testing {

// Valid genotype with a random op-set order, random ops and awkward metadata.
inline Genotype random_genotype(Rng& rng) {
    Genotype g;
    g.n_inputs = 1 + static_cast<int>(rng.below(3));
    g.n_intermediate = 1 + static_cast<int>(rng.below(5));
    std::vector<OpKind> ops(kAllOps.begin(), kAllOps.end());
    for (std::size_t i = ops.size() - 1; i > 0; --i) std::swap(ops[i], ops[rng.below(i + 1)]);
    ops.resize(1 + rng.below(ops.size()));
    g.op_set = ops;
    for (const auto& s : edge_slots(g.n_inputs, g.n_intermediate)) {
        g.edges.push_back({s.source, s.dest, ops[rng.below(ops.size())]});
    }
    g.meta.seed = rng.below(4) == 0 ? ~std::uint64_t{0} - rng.below(1000) : rng.below(1000000);
    g.meta.epoch = static_cast<int>(rng.below(500));
    switch (rng.below(4)) {
        case 0: g.meta.l_ho = rng.uniform(0, 1); break;
        case 1: g.meta.l_ho = std::bit_cast<double>(std::uint64_t{1} + rng.below(1000)); break;  // subnormal
        case 2: g.meta.l_ho = rng.normal() * 1e300; break;
        default: g.meta.l_ho = 0.1; break;
    }
    return g;
}

}  // namespace cellnas::testing
