#include "cellnas/oracles.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <Eigen/SVD>

#include "cellnas/errors.hpp"

namespace cellnas {

double condition_number(const std::vector<double>& A, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = A[static_cast<std::size_t>(i * cols + j)];
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    const auto& s = svd.singularValues();
    const double smin = s(s.size() - 1);
    return smin > 0.0 ? s(0) / smin : std::numeric_limits<double>::infinity();
}

QuadraticProblem make_quadratic_problem(int dim_w, int dim_a, std::uint64_t seed, double kappa, double mu,
                                        double max_condition) {
    if (dim_w < 1 || dim_a < 1) throw ParameterError("quadratic oracle: dimensions must be >= 1");
    QuadraticProblem p;
    p.dim_w = dim_w;
    p.dim_a = dim_a;
    p.kappa = kappa;
    p.mu = mu;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Rng rng(mix_seed(seed + static_cast<std::uint64_t>(attempt), 0x9ad));
        p.A.assign(static_cast<std::size_t>(dim_w * dim_a), 0.0);
        for (double& v : p.A) v = rng.normal() / std::sqrt(static_cast<double>(dim_w));
        p.b.resize(static_cast<std::size_t>(dim_w));
        p.w0.resize(static_cast<std::size_t>(dim_w));
        p.alpha.resize(static_cast<std::size_t>(dim_a));
        for (double& v : p.b) v = rng.normal();
        for (double& v : p.w0) v = rng.normal();
        for (double& v : p.alpha) v = rng.normal();
        p.condition = condition_number(p.A, dim_w, dim_a);
        if (p.condition <= max_condition) {
            p.seed = seed + static_cast<std::uint64_t>(attempt);
            p.regenerations = attempt;
            return p;
        }
    }
    throw ParameterError("quadratic oracle: no well-conditioned A within 1000 seeds");
}

LossOracle quadratic_oracle(const QuadraticProblem& p, const Tensor& w, const Tensor& alpha) {
    const Tensor A = Tensor::from({static_cast<std::size_t>(p.dim_w), static_cast<std::size_t>(p.dim_a)}, p.A);
    const Tensor b = Tensor::from({static_cast<std::size_t>(p.dim_w)}, p.b);
    const double kappa = p.kappa, mu = p.mu;
    return [A, b, w, alpha, kappa, mu](Split split) {
        Tape tape;
        Tensor loss;
        if (split == Split::Train) {
            Tensor r = ops::add(tape, w, ops::scale(tape, ops::matvec(tape, A, alpha), -1.0));
            Tensor r2 = ops::mul(tape, r, r);
            loss = ops::scale(tape, ops::sum(tape, r2), 0.5);
            if (kappa != 0.0) loss = ops::add(tape, loss, ops::scale(tape, ops::sum(tape, ops::mul(tape, r2, r2)), kappa / 24.0));
        } else {
            Tensor d = ops::add(tape, w, ops::scale(tape, b, -1.0));
            loss = ops::scale(tape, ops::sum(tape, ops::mul(tape, d, d)), 0.5);
            if (mu != 0.0) loss = ops::add(tape, loss, ops::scale(tape, ops::sum(tape, ops::mul(tape, alpha, alpha)), mu / 2.0));
        }
        tape.backward(loss);
        return loss.item();
    };
}

namespace {

struct Residual {
    std::vector<double> r, grad_w, d;  // r = W0 - A a, grad_W L_tr, 1 + kappa/2 r^2
};

Residual residual(const QuadraticProblem& p) {
    Residual out;
    for (int i = 0; i < p.dim_w; ++i) {
        double ra = 0.0;
        for (int j = 0; j < p.dim_a; ++j) ra += p.A[static_cast<std::size_t>(i * p.dim_a + j)] * p.alpha[static_cast<std::size_t>(j)];
        const double r = p.w0[static_cast<std::size_t>(i)] - ra;
        out.r.push_back(r);
        out.grad_w.push_back(r + p.kappa / 6.0 * r * r * r);
        out.d.push_back(1.0 + p.kappa / 2.0 * r * r);
    }
    return out;
}

// A^T x
std::vector<double> at_times(const QuadraticProblem& p, const std::vector<double>& x) {
    std::vector<double> out(static_cast<std::size_t>(p.dim_a), 0.0);
    for (int j = 0; j < p.dim_a; ++j)
        for (int i = 0; i < p.dim_w; ++i) out[static_cast<std::size_t>(j)] += p.A[static_cast<std::size_t>(i * p.dim_a + j)] * x[static_cast<std::size_t>(i)];
    return out;
}

bool bitwise_equal(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
    return true;
}

}  // namespace

std::vector<double> quadratic_exact_one_step(const QuadraticProblem& p, double eta) {
    const Residual res = residual(p);
    // d/da L_val(W'(a)) with dW'/da = eta diag(D) A
    std::vector<double> x(static_cast<std::size_t>(p.dim_w));
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double w_prime = p.w0[i] - eta * res.grad_w[i];
        x[i] = eta * res.d[i] * (w_prime - p.b[i]);
    }
    auto h = at_times(p, x);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += p.mu * p.alpha[j];
    return h;
}

std::vector<double> quadratic_first_order_exact(const QuadraticProblem& p) {
    std::vector<double> h(p.alpha.size());
    for (std::size_t j = 0; j < h.size(); ++j) h[j] = p.mu * p.alpha[j];
    return h;
}

std::vector<double> quadratic_optimum_hypergradient(const QuadraticProblem& p) {
    std::vector<double> x(static_cast<std::size_t>(p.dim_w));
    for (int i = 0; i < p.dim_w; ++i) {
        double aa = 0.0;
        for (int j = 0; j < p.dim_a; ++j) aa += p.A[static_cast<std::size_t>(i * p.dim_a + j)] * p.alpha[static_cast<std::size_t>(j)];
        x[static_cast<std::size_t>(i)] = aa - p.b[static_cast<std::size_t>(i)];
    }
    auto h = at_times(p, x);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += p.mu * p.alpha[j];
    return h;
}

std::vector<double> quadratic_mixed_hvp(const QuadraticProblem& p, const std::vector<double>& v) {
    const Residual res = residual(p);
    std::vector<double> x(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) x[i] = -res.d[i] * v[i];
    return at_times(p, x);
}

EngineEstimate quadratic_engine_estimates(const QuadraticProblem& p, double eta, double eps_scale) {
    Tensor w = Tensor::from({static_cast<std::size_t>(p.dim_w)}, p.w0, true);
    Tensor a = Tensor::from({static_cast<std::size_t>(p.dim_a)}, p.alpha, true);
    const LossOracle oracle = quadratic_oracle(p, w, a);
    Tensor weights[1] = {w};
    EngineEstimate e;
    e.first_order = first_order_hypergradient(oracle, weights, a);
    e.second_order = second_order_hypergradient(oracle, weights, a, eta, eps_scale);
    return e;
}

double max_relative_error(const std::vector<double>& x, const std::vector<double>& y) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num = std::max(num, std::abs(x[i] - y[i]));
        den = std::max(den, std::abs(y[i]));
    }
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / den;
}

QuadraticReport oracle_quadratic(const QuadraticOptions& o) {
    QuadraticReport r;
    r.problem = make_quadratic_problem(o.dim_w, o.dim_a, o.seed);
    r.eta = o.eta;
    r.eps_scale = o.eps_scale;
    const auto& p = r.problem;

    const EngineEstimate est = quadratic_engine_estimates(p, o.eta, o.eps_scale);
    r.exact_one_step = quadratic_exact_one_step(p, o.eta);
    r.first_order = est.first_order.grad;
    r.second_order = est.second_order.grad;
    r.optimum = quadratic_optimum_hypergradient(p);
    r.second_order_rel_error = max_relative_error(r.second_order, r.exact_one_step);
    r.first_order_rel_error = max_relative_error(r.first_order, r.exact_one_step);

    // Convergence order of the finite-difference mixed Hessian-vector product.
    QuadraticProblem coupled = p;
    coupled.kappa = o.sweep_kappa;
    const Residual res = residual(coupled);
    std::vector<double> v(static_cast<std::size_t>(p.dim_w));
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = coupled.w0[i] - o.eta * res.grad_w[i] - coupled.b[i];
    const auto hvp = quadratic_mixed_hvp(coupled, v);
    for (double eps : o.eps_sweep) {
        const auto e = quadratic_engine_estimates(coupled, o.eta, eps);
        r.eps_errors.push_back({eps, max_relative_error(e.second_order.correction, hvp)});
    }
    r.observed_order = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < r.eps_errors.size(); ++i) {
        const auto& a = r.eps_errors[i];
        const auto& b = r.eps_errors[i + 1];
        r.observed_order = std::min(r.observed_order, std::log(a.error / b.error) / std::log(a.x / b.x));
    }

    for (double eta : o.eta_sweep) {
        const auto e = quadratic_engine_estimates(p, eta, o.eps_scale);
        const auto exact = quadratic_exact_one_step(p, eta);
        double dev = 0.0;
        for (std::size_t j = 0; j < exact.size(); ++j) dev = std::max(dev, std::abs(e.first_order.grad[j] - exact[j]));
        r.eta_deviation.push_back({eta, dev});
    }

    const auto zero = quadratic_engine_estimates(p, 0.0, o.eps_scale);
    r.eta_zero_identical = bitwise_equal(zero.first_order.grad, zero.second_order.grad);
    return r;
}

std::string format_report(const QuadraticReport& r) {
    std::ostringstream os;
    os.precision(6);
    os << std::scientific;
    os << "quadratic oracle dim_w=" << r.problem.dim_w << " dim_a=" << r.problem.dim_a << " seed=" << r.problem.seed
       << " regenerations=" << r.problem.regenerations << " cond(A)=" << r.problem.condition << "\n";
    os << "eta=" << r.eta << " eps_scale=" << r.eps_scale << "\n";
    os << "second_order_rel_error=" << r.second_order_rel_error << "\n";
    os << "first_order_rel_error=" << r.first_order_rel_error << "\n";
    os << "eps_sweep (coupled problem, correction error vs exact HVP):\n";
    for (const auto& s : r.eps_errors) os << "  eps_scale=" << s.x << " error=" << s.error << "\n";
    os << std::fixed << std::setprecision(3) << "observed_order=" << r.observed_order << "\n"
       << std::scientific << std::setprecision(6);
    os << "eta_sweep (first-order deviation from exact one-step):\n";
    for (std::size_t i = 0; i < r.eta_deviation.size(); ++i) {
        os << "  eta=" << r.eta_deviation[i].x << " deviation=" << r.eta_deviation[i].error;
        if (i > 0) os << " ratio=" << std::fixed << std::setprecision(3) << r.eta_deviation[i - 1].error / r.eta_deviation[i].error
                      << std::scientific << std::setprecision(6);
        os << "\n";
    }
    os << "eta_zero_identical=" << (r.eta_zero_identical ? "true" : "false") << "\n";
    os << "exact_one_step:";
    for (double v : r.exact_one_step) os << " " << v;
    os << "\nsecond_order:  ";
    for (double v : r.second_order) os << " " << v;
    os << "\nbilevel_optimum:";
    for (double v : r.optimum) os << " " << v;
    os << "\n";
    return os.str();
}

// ---- enumeration -----------------------------------------------------------

std::uint64_t enumeration_size(const CellConfig& cell) {
    const auto m = static_cast<std::uint64_t>(cell.op_set.size());
    std::uint64_t n = 1;
    for (std::size_t e = 0; e < edge_count(cell); ++e) {
        if (n > std::numeric_limits<std::uint64_t>::max() / std::max<std::uint64_t>(m, 1)) {
            return std::numeric_limits<std::uint64_t>::max();
        }
        n *= m;
    }
    return n;
}

Genotype genotype_from_code(const CellConfig& cell, std::uint64_t code) {
    Genotype g;
    g.n_inputs = cell.n_inputs;
    g.n_intermediate = cell.n_intermediate;
    g.op_set = cell.op_set;
    const auto m = static_cast<std::uint64_t>(cell.op_set.size());
    for (const auto& s : edge_slots(cell)) {
        g.edges.push_back({s.source, s.dest, cell.op_set[code % m]});
        code /= m;
    }
    return g;
}

std::uint64_t code_of(const Genotype& g) {
    const auto m = static_cast<std::uint64_t>(g.op_set.size());
    std::uint64_t code = 0, place = 1;
    for (const auto& s : edge_slots(g.n_inputs, g.n_intermediate)) {
        const auto* e = g.find(s.source, s.dest);
        if (!e) throw ValidationError("code_of: genotype lacks an edge slot");
        const auto it = std::find(g.op_set.begin(), g.op_set.end(), e->op);
        code += place * static_cast<std::uint64_t>(it - g.op_set.begin());
        place *= m;
    }
    return code;
}

std::string enumeration_fingerprint(const RunConfig& config) {
    RunConfig c;
    c.task = config.task;
    c.search.cell = config.search.cell;
    c.retrain = config.retrain;
    const std::string text = serialize_run_config(c);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

std::string hex_double(double v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(v)));
    return buf;
}

std::map<std::uint64_t, std::pair<double, double>> read_cache(const std::string& path, const std::string& fp) {
    std::map<std::uint64_t, std::pair<double, double>> out;
    std::ifstream in(path);
    std::string line;
    if (!in || !std::getline(in, line) || line != "cellnas-enum v1 " + fp) return out;
    while (std::getline(in, line)) {
        std::istringstream is(line);
        std::uint64_t code;
        std::string loss, acc;
        if (!(is >> code >> loss >> acc) || loss.size() != 16 || acc.size() != 16) break;  // torn tail write
        out[code] = {std::bit_cast<double>(std::stoull(loss, nullptr, 16)),
                     std::bit_cast<double>(std::stoull(acc, nullptr, 16))};
    }
    return out;
}

}  // namespace

EnumResult oracle_enum(const RunConfig& config, const std::string& cache_path, const EnumProgress& progress) {
    const CellConfig& cell = config.search.cell;
    validate_config(cell);
    const std::uint64_t total = enumeration_size(cell);
    if (total > static_cast<std::uint64_t>(config.enum_cap)) {
        throw ParameterError("enumeration needs " +
                             (total == std::numeric_limits<std::uint64_t>::max() ? std::string("too many")
                                                                                  : std::to_string(total)) +
                             " cells, above oracle.enum_cap = " + std::to_string(config.enum_cap) +
                             "; shrink cell.op_set or cell.n_intermediate, or raise oracle.enum_cap");
    }
    EnumResult result;
    result.fingerprint = enumeration_fingerprint(config);

    std::map<std::uint64_t, std::pair<double, double>> done;
    std::ofstream cache;
    if (!cache_path.empty()) {
        done = read_cache(cache_path, result.fingerprint);
        if (const auto parent = std::filesystem::path(cache_path).parent_path(); !parent.empty()) {
            std::filesystem::create_directories(parent);
        }
        // Rewrite header and surviving entries, then append as cells finish.
        cache.open(cache_path, std::ios::trunc);
        cache << "cellnas-enum v1 " << result.fingerprint << "\n";
        for (const auto& [code, v] : done) cache << code << " " << hex_double(v.first) << " " << hex_double(v.second) << "\n";
        cache.flush();
    }

    const ToyDataset data(config.task);
    const LossFn loss_fn = loss_for(config.task.objective);
    for (std::uint64_t code = 0; code < total; ++code) {
        if (!done.count(code)) {
            DiscreteNetwork net = DiscreteNetwork::build(genotype_from_code(cell, code), cell, config.retrain.seed);
            double loss = std::numeric_limits<double>::infinity(), acc = 0.0;
            try {
                train_discrete(net, data, loss_fn, config.retrain);
                const EvalReport ev = evaluate(net, data, DataSplit::Val, loss_fn, config.retrain.batch_size);
                if (std::isfinite(ev.loss)) {
                    loss = ev.loss;
                    acc = ev.accuracy;
                }
            } catch (const NumericalAbort&) {
            }
            done[code] = {loss, acc};
            if (cache.is_open()) {
                cache << code << " " << hex_double(loss) << " " << hex_double(acc) << "\n";
                cache.flush();
            }
        }
        if (progress) progress(code + 1, total);
    }
    for (const auto& [code, v] : done) {
        if (code < total) result.ranking.push_back({code, genotype_from_code(cell, code), v.first, v.second});
    }
    std::sort(result.ranking.begin(), result.ranking.end(), [](const EnumEntry& a, const EnumEntry& b) {
        return a.val_loss != b.val_loss ? a.val_loss < b.val_loss : a.code < b.code;
    });
    return result;
}

std::size_t rank_of(const EnumResult& result, const Genotype& genotype) {
    const std::uint64_t code = code_of(genotype);
    const auto it = std::find_if(result.ranking.begin(), result.ranking.end(),
                                 [code](const EnumEntry& e) { return e.code == code; });
    if (it == result.ranking.end()) throw ValidationError("rank_of: genotype is not part of the enumerated space");
    std::size_t better = 0;
    for (const auto& e : result.ranking)
        if (e.val_loss < it->val_loss) ++better;
    return better + 1;
}

}  // namespace cellnas
