#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cmath>
#include <limits>

#include "cellnas/errors.hpp"
#include "cellnas/oracles.hpp"
#include "cellnas/search.hpp"
#include "cellnas/task.hpp"
#include "gradcheck.hpp"

using namespace cellnas;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// L_val(W'(alpha), alpha) evaluated directly; the composite is quadratic in
// alpha when kappa = 0, so its central difference is exact up to round-off.
double one_step_objective(const QuadraticProblem& p, const std::vector<double>& alpha, double eta) {
    double val = 0.0;
    for (int i = 0; i < p.dim_w; ++i) {
        double aa = 0.0;
        for (int j = 0; j < p.dim_a; ++j) aa += p.A[static_cast<std::size_t>(i * p.dim_a + j)] * alpha[static_cast<std::size_t>(j)];
        const double r = p.w0[static_cast<std::size_t>(i)] - aa;
        const double w1 = p.w0[static_cast<std::size_t>(i)] - eta * (r + p.kappa / 6.0 * r * r * r);
        const double d = w1 - p.b[static_cast<std::size_t>(i)];
        val += 0.5 * d * d;
    }
    for (double a : alpha) val += 0.5 * p.mu * a * a;
    return val;
}

std::vector<double> fd_one_step(const QuadraticProblem& p, double eta, double h = 1e-3) {
    std::vector<double> g(p.alpha.size());
    for (std::size_t j = 0; j < g.size(); ++j) {
        auto ap = p.alpha, am = p.alpha;
        ap[j] += h;
        am[j] -= h;
        g[j] = (one_step_objective(p, ap, eta) - one_step_objective(p, am, eta)) / (2 * h);
    }
    return g;
}

bool same_bits(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (std::bit_cast<std::uint64_t>(x[i]) != std::bit_cast<std::uint64_t>(y[i])) return false;
    return true;
}

SearchConfig small_search() {
    SearchConfig c;
    c.cell.n_intermediate = 2;
    c.cell.channels = 4;
    c.cell.op_set = {OpKind::SepConv3, OpKind::Skip, OpKind::Zero};
    c.optimizer.w_lr = 0.005;
    c.schedule.total_epochs = 4;
    c.schedule.alpha_warmup_epochs = 1;
    c.schedule.iters_train = 2;
    c.schedule.iters_val = 2;
    c.schedule.iters_holdout = 1;
    c.schedule.batch_size = 4;
    return c;
}

ToyTaskSpec small_task() {
    ToyTaskSpec t;
    t.n_train = 24;
    t.n_val = 16;
    t.n_holdout = 8;
    return t;
}

Batch first_batch(const ToyDataset& d, DataSplit s, std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return d.make_batch(s, idx);
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& ts) {
    std::vector<std::vector<double>> out;
    for (const auto& t : ts) out.emplace_back(t.data().begin(), t.data().end());
    return out;
}

bool same_snapshot(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (!same_bits(a[i], b[i])) return false;
    return true;
}

}  // namespace

TEST_CASE("first-order direction is grad_alpha L_val at fixed W") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_quadratic_problem(10, 10, seed, 0.0, 0.7);
        const auto est = quadratic_engine_estimates(p, 0.1, 1e-3);
        for (std::size_t j = 0; j < p.alpha.size(); ++j) CHECK(std::abs(est.first_order.grad[j] - 0.7 * p.alpha[j]) <= 1e-8);
    }
}

TEST_CASE("second-order matches the exact one-step hypergradient") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        for (double mu : {0.0, 0.3}) {
            const auto p = make_quadratic_problem(10, 10, seed, 0.0, mu);
            for (double eta : {0.1, 0.02}) {
                const auto oracle = fd_one_step(p, eta);
                // closed form: eta A^T (W' - b) + mu alpha with W' = W0 - eta (W0 - A alpha)
                CHECK(max_relative_error(quadratic_exact_one_step(p, eta), oracle) < 1e-8);
                for (double eps : {1e-2, 1e-3}) {
                    const auto est = quadratic_engine_estimates(p, eta, eps);
                    CHECK(max_relative_error(est.second_order.grad, oracle) < 1e-6);
                }
            }
        }
    }
}

TEST_CASE("finite-difference correction converges at second order") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        QuadraticOptions o;
        o.seed = seed;
        const auto r = oracle_quadratic(o);
        REQUIRE(r.eps_errors.size() == 3);
        for (std::size_t i = 0; i + 1 < r.eps_errors.size(); ++i) CHECK(r.eps_errors[i + 1].error < r.eps_errors[i].error / 2);
        CHECK(std::round(r.observed_order * 100) / 100 >= 2.0);
    }
}

TEST_CASE("first-order error shrinks with eta") {
    QuadraticOptions o;
    const auto r = oracle_quadratic(o);
    for (std::size_t i = 0; i + 1 < r.eta_deviation.size(); ++i) {
        const double ratio = r.eta_deviation[i].error / r.eta_deviation[i + 1].error;
        CHECK(ratio > 1.5);
        CHECK(ratio < 2.5);
    }
}

TEST_CASE("eta = 0 reproduces the first-order estimate bitwise") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto p = make_quadratic_problem(10, 10, seed, 1.0, 0.2);
        const auto e = quadratic_engine_estimates(p, 0.0, 1e-3);
        CHECK(same_bits(e.first_order.grad, e.second_order.grad));
    }

    const ToyDataset data(small_task());
    const SearchConfig cfg = small_search();
    const LossFn loss = loss_for(Objective::CenterMapMSE);
    const Batch tr = first_batch(data, DataSplit::Train, 4);
    const Batch va = first_batch(data, DataSplit::Val, 4);
    SearchState a = SearchState::initialize(cfg, 5);
    SearchState b = a.clone();
    for (int k = 0; k < 3; ++k) {
        arch_step_first_order(a, cfg, va, loss);
        arch_step_second_order(b, cfg, tr, va, loss, 0.0, 0.01);
    }
    CHECK(same_bits(a.alpha.values.data(), b.alpha.values.data()));
    CHECK(same_snapshot(snapshot(a.weights()), snapshot(b.weights())));
}

TEST_CASE("weights restored after the second-order step") {
    const ToyDataset data(small_task());
    SearchConfig cfg = small_search();
    cfg.cell.dropout_tau = 0.0;
    const LossFn loss = loss_for(Objective::CenterMapMSE);
    SearchState s = SearchState::initialize(cfg, 2);
    const auto before = snapshot(s.weights());
    const auto alpha_before = std::vector<double>(s.alpha.values.data().begin(), s.alpha.values.data().end());
    arch_step_second_order(s, cfg, first_batch(data, DataSplit::Train, 4), first_batch(data, DataSplit::Val, 4), loss,
                           0.05, 0.01);
    CHECK(same_snapshot(before, snapshot(s.weights())));
    CHECK_FALSE(same_bits(alpha_before, s.alpha.values.data()));

    // Also when the oracle throws midway.
    const auto p = make_quadratic_problem(6, 4, 1);
    Tensor w = Tensor::from({6}, p.w0, true);
    Tensor al = Tensor::from({4}, p.alpha, true);
    const LossOracle inner = quadratic_oracle(p, w, al);
    for (int fail_at = 1; fail_at <= 4; ++fail_at) {
        int calls = 0;
        const LossOracle flaky = [&](Split sp) {
            if (++calls == fail_at) throw NumericalAbort("injected", 7);
            return inner(sp);
        };
        Tensor ws[1] = {w};
        CHECK_THROWS_AS(second_order_hypergradient(flaky, ws, al, 0.1, 1e-2), NumericalAbort);
        CHECK(same_bits(w.data(), p.w0));
    }
}

TEST_CASE("weight step decreases the loss on a fixed batch") {
    const ToyDataset data(small_task());
    SearchConfig cfg;  // default cell and lr
    const LossFn loss = loss_for(Objective::CenterMapMSE);
    SearchState s = SearchState::initialize(cfg, 1);
    const Batch b = first_batch(data, DataSplit::Train, 4);
    std::vector<double> losses;
    for (int k = 0; k < 50; ++k) losses.push_back(train_step_weights(s, cfg, b, loss));
    auto mean = [&](int from, int to) {
        double m = 0;
        for (int k = from; k < to; ++k) m += losses[static_cast<std::size_t>(k)];
        return m / (to - from);
    };
    CHECK(mean(40, 50) < mean(0, 10));
    CHECK(mean(20, 30) < mean(0, 10));
    CHECK(mean(40, 50) < mean(20, 30));
}

TEST_CASE("zero learning rate leaves weights unchanged") {
    const ToyDataset data(small_task());
    SearchConfig cfg = small_search();
    cfg.optimizer.w_lr = 0.0;
    SearchState s = SearchState::initialize(cfg, 1);
    const auto before = snapshot(s.weights());
    train_step_weights(s, cfg, first_batch(data, DataSplit::Train, 4), loss_for(Objective::CenterMapMSE));
    CHECK(same_snapshot(before, snapshot(s.weights())));
}

TEST_CASE("alpha frozen during warmup") {
    const ToyDataset data(small_task());
    SearchConfig cfg = small_search();
    cfg.schedule.total_epochs = 12;
    cfg.schedule.alpha_warmup_epochs = 10;
    cfg.schedule.iters_train = 1;
    cfg.schedule.iters_val = 1;
    SearchState s = SearchState::initialize(cfg, 3);
    const std::vector<double> init(s.alpha.values.data().begin(), s.alpha.values.data().end());
    run_search(s, cfg, data, loss_for(Objective::CenterMapMSE));
    REQUIRE(s.holdout_history.size() == 12);
    for (int e = 0; e < 10; ++e) CHECK(same_bits(s.holdout_history[static_cast<std::size_t>(e)].alpha, init));
    CHECK_FALSE(same_bits(s.holdout_history[10].alpha, init));
    CHECK_FALSE(same_bits(s.holdout_history[11].alpha, s.holdout_history[10].alpha));
}

TEST_CASE("search is deterministic and finite") {
    const ToyDataset data(small_task());
    for (Variant v : {Variant::FirstOrder, Variant::SecondOrder}) {
        SearchConfig cfg = small_search();
        cfg.variant = v;
        SearchState a = SearchState::initialize(cfg, 9);
        SearchState b = SearchState::initialize(cfg, 9);
        run_search(a, cfg, data, loss_for(Objective::CenterMapMSE));
        run_search(b, cfg, data, loss_for(Objective::CenterMapMSE));
        CHECK(a.holdout_history == b.holdout_history);
        CHECK(a.holdout_history.size() == static_cast<std::size_t>(cfg.schedule.total_epochs));
        for (const auto& r : a.holdout_history) CHECK(std::isfinite(r.l_ho));
        CHECK(a.aborts.empty());
        SearchState c = SearchState::initialize(cfg, 10);
        run_search(c, cfg, data, loss_for(Objective::CenterMapMSE));
        CHECK_FALSE(a.holdout_history == c.holdout_history);
    }
}

TEST_CASE("fair variant runs with sigmoid relaxation") {
    const ToyDataset data(small_task());
    SearchConfig cfg = small_search();
    cfg.variant = Variant::FairDarts;
    cfg.cell.relaxation = Relaxation::Sigmoid;
    SearchState s = SearchState::initialize(cfg, 1);
    run_search(s, cfg, data, loss_for(Objective::CenterMapMSE));
    CHECK(s.holdout_history.size() == 4);
    cfg.cell.relaxation = Relaxation::Softmax;
    CHECK_THROWS_AS(validate_search_config(cfg), ParameterError);
}

TEST_CASE("non-finite loss aborts the epoch and disqualifies it") {
    const ToyDataset data(small_task());
    SearchConfig cfg = small_search();
    cfg.variant = Variant::FirstOrder;
    const LossFn base = loss_for(Objective::CenterMapMSE);
    int calls = 0;
    const LossFn poisoned = [&](Tape& t, const Tensor& p, const Tensor& y) {
        Tensor l = base(t, p, y);
        if (++calls == 2) return ops::scale(t, l, kNaN);
        return l;
    };
    SearchState s = SearchState::initialize(cfg, 1);
    run_search(s, cfg, data, poisoned);
    REQUIRE(s.aborts.size() == 1);
    CHECK(s.aborts[0].epoch == 0);
    CHECK(s.aborts[0].batch_id >= 0);
    CHECK(s.holdout_history.size() == 4);
    for (const auto& r : s.holdout_history) CHECK(std::isfinite(r.l_ho));
}

TEST_CASE("fair auxiliary loss") {
    Rng rng(4);
    Tensor a = testing::random_tensor({5, 3}, rng, -2, 2, true);
    Tape tape;
    const double v = fair_darts_auxiliary(tape, a, 0.5).item();
    double m = 0;
    for (double x : a.data()) {
        const double s = 1 / (1 + std::exp(-x));
        m += (s - 0.5) * (s - 0.5);
    }
    CHECK(v == doctest::Approx(-0.5 * m / 15).epsilon(1e-12));
    const auto g = testing::gradcheck([&](Tape& t) { return fair_darts_auxiliary(t, a, 0.5); }, {a});
    CHECK(g.max_rel_error < 1e-6);

    SearchConfig cfg;
    cfg.variant = Variant::FairDarts;
    cfg.optimizer.fair_w01 = 2.0;
    cfg.optimizer.fair_ramp_epochs = 4;
    cfg.schedule.alpha_warmup_epochs = 10;
    CHECK(fair_aux_weight(cfg, 0) == 0.0);
    CHECK(fair_aux_weight(cfg, 9) == 0.0);
    CHECK(fair_aux_weight(cfg, 30) == 2.0);
    for (int e = 10; e < 16; ++e) CHECK(fair_aux_weight(cfg, e) <= fair_aux_weight(cfg, e + 1));
}

TEST_CASE("early stop selection") {
    auto rec = [](int e, double l) { return HoldoutRecord{e, l, 0, 0, {}}; };
    std::vector<HoldoutRecord> h{rec(0, 0.1), rec(1, 0.5), rec(2, 0.3), rec(3, 0.2), rec(4, 0.2), rec(5, kNaN)};
    CHECK(early_stop_select(h, 0) == 0);
    CHECK(early_stop_select(h, 1) == 3);
    CHECK(early_stop_select(h, 5 - 1) == 4);
    h[3].l_ho = kNaN;
    CHECK(early_stop_select(h, 1) == 4);
    CHECK_THROWS_AS(early_stop_select(h, 5), ValidationError);
    CHECK_THROWS_AS(early_stop_select(std::vector<HoldoutRecord>{}, 0), ValidationError);
}

TEST_CASE("multi-seed selection") {
    std::vector<RunSummary> runs{{3, 12, 0.5, "c"}, {1, 20, 0.4, "a"}, {2, 11, 0.4, "b"}, {4, 10, kNaN, "d"}};
    CHECK(multi_seed_select(runs).seed == 1);
    runs[1].l_ho = 0.6;
    CHECK(multi_seed_select(runs).seed == 2);
    CHECK_THROWS_AS(multi_seed_select(std::vector<RunSummary>{}), UsageError);
    CHECK_THROWS_AS(multi_seed_select(std::vector<RunSummary>{{1, 0, kNaN, ""}}), ValidationError);
}
