#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cellnas/config.hpp"
#include "cellnas/hypergradient.hpp"

namespace cellnas {

// ---- quadratic bilevel problem -------------------------------------------
//   L_tr(W, a)  = 1/2 |W - A a|^2 + kappa/24 sum (W - A a)^4
//   L_val(W, a) = 1/2 |W - b|^2  + mu/2 |a|^2
// kappa = mu = 0 is the plain quadratic. With kappa > 0 the central
// difference in the second-order estimate has a nonzero O(eps^2) remainder.
struct QuadraticProblem {
    int dim_w = 0;
    int dim_a = 0;
    std::vector<double> A;  // row-major [dim_w, dim_a]
    std::vector<double> b;
    std::vector<double> w0;
    std::vector<double> alpha;
    double kappa = 0.0;
    double mu = 0.0;
    std::uint64_t seed = 0;  // seed actually used after regenerations
    int regenerations = 0;
    double condition = 0.0;
};

inline constexpr double kMaxCondition = 1e12;

// Draws A, b, W0, alpha from `seed`; if cond(A) > max_condition moves on to
// seed+1, seed+2, ...
QuadraticProblem make_quadratic_problem(int dim_w, int dim_a, std::uint64_t seed, double kappa = 0.0,
                                        double mu = 0.0, double max_condition = kMaxCondition);

double condition_number(const std::vector<double>& A, int rows, int cols);

// Engine-side loss oracle over W and alpha tensors (shapes [dim_w], [dim_a]).
LossOracle quadratic_oracle(const QuadraticProblem& p, const Tensor& w, const Tensor& alpha);

// Closed forms.
std::vector<double> quadratic_exact_one_step(const QuadraticProblem& p, double eta);
std::vector<double> quadratic_first_order_exact(const QuadraticProblem& p);
std::vector<double> quadratic_optimum_hypergradient(const QuadraticProblem& p);
// Exact mixed Hessian-vector product d/dW (grad_alpha L_tr) . v at W0.
std::vector<double> quadratic_mixed_hvp(const QuadraticProblem& p, const std::vector<double>& v);

struct EngineEstimate {
    Hypergradient first_order;
    Hypergradient second_order;
};
EngineEstimate quadratic_engine_estimates(const QuadraticProblem& p, double eta, double eps_scale);

// max_k |x_k - y_k| / max_k |y_k|
double max_relative_error(const std::vector<double>& x, const std::vector<double>& y);

struct QuadraticOptions {
    int dim_w = 10;
    int dim_a = 10;
    std::uint64_t seed = 0;
    double eta = 0.1;
    double eps_scale = 1e-3;
    std::vector<double> eps_sweep{1e-1, 1e-2, 1e-3};
    std::vector<double> eta_sweep{0.1, 0.05, 0.025};
    double sweep_kappa = 1.0;  // coupling used for the convergence-order sweep
};

struct SweepPoint {
    double x = 0.0;
    double error = 0.0;
};

struct QuadraticReport {
    QuadraticProblem problem;
    double eta = 0.0;
    double eps_scale = 0.0;
    std::vector<double> exact_one_step;
    std::vector<double> first_order;
    std::vector<double> second_order;
    std::vector<double> optimum;
    double second_order_rel_error = 0.0;
    double first_order_rel_error = 0.0;
    std::vector<SweepPoint> eps_errors;  // correction error vs exact HVP, coupled problem
    double observed_order = 0.0;         // smallest slope of log error over consecutive sweep points
    std::vector<SweepPoint> eta_deviation;  // |first order - exact one-step|
    bool eta_zero_identical = false;        // second order == first order bitwise at eta = 0
};

QuadraticReport oracle_quadratic(const QuadraticOptions& options);
std::string format_report(const QuadraticReport& r);

// ---- exhaustive enumeration ----------------------------------------------
struct EnumEntry {
    std::uint64_t code = 0;  // base-|op_set| digits, edge 0 least significant
    Genotype genotype;
    double val_loss = 0.0;
    double accuracy = 0.0;
};

struct EnumResult {
    std::string fingerprint;
    std::vector<EnumEntry> ranking;  // ascending val_loss, code breaks ties
};

std::uint64_t enumeration_size(const CellConfig& cell);
Genotype genotype_from_code(const CellConfig& cell, std::uint64_t code);
std::uint64_t code_of(const Genotype& genotype);

// Identifies the settings that determine enumeration results.
std::string enumeration_fingerprint(const RunConfig& config);

using EnumProgress = std::function<void(std::uint64_t done, std::uint64_t total)>;

// Trains every discrete cell of the configured space with the retrain budget
// and ranks them by validation loss. Refuses spaces larger than enum_cap.
// With a cache path, finished cells are appended as they complete and reused
// on the next call with the same fingerprint.
EnumResult oracle_enum(const RunConfig& config, const std::string& cache_path = "",
                       const EnumProgress& progress = {});

// 1 + number of cells with strictly lower validation loss.
std::size_t rank_of(const EnumResult& result, const Genotype& genotype);

}  // namespace cellnas
