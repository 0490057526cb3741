#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cellnas/genotype.hpp"
#include "cellnas/retrain.hpp"
#include "cellnas/search.hpp"
#include "cellnas/task.hpp"

namespace cellnas {

// Everything a CLI run needs.
struct RunConfig {
    SearchConfig search;
    ToyTaskSpec task;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    DiscretizePolicy policy = DiscretizePolicy::LiteralArgmax;
    RetrainConfig retrain;
    long enum_cap = 1000;  // largest exhaustive enumeration oracle_enum accepts

    bool operator==(const RunConfig&) const = default;
};

// Config text: '#' comment lines, "[section]" headers, "key = value" lines.
// Missing keys keep their defaults. Errors throw ParseError with the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Writes every key; parse_run_config(serialize_run_config(c)) == c.
std::string serialize_run_config(const RunConfig& config);

std::string_view variant_name(Variant v);  // first | second | fair
Variant parse_variant(std::string_view name);
std::string_view policy_name(DiscretizePolicy p);  // argmax | exclude-zero
DiscretizePolicy parse_policy(std::string_view name);

}  // namespace cellnas
