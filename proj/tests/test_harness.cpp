#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <sys/wait.h>

#include "cellnas/checkpoint.hpp"
#include "cellnas/config.hpp"
#include "cellnas/errors.hpp"
#include "cellnas/optim.hpp"
#include "cellnas/oracles.hpp"
#include "cellnas/pipeline.hpp"
#include "cellnas/retrain.hpp"
#include "cellnas/task.hpp"

using namespace cellnas;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(CELLNAS_TEST_TMP) / "harness" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

RunConfig smoke_config() {
    RunConfig c;
    c.task.n_train = 24;
    c.task.n_val = 16;
    c.task.n_holdout = 8;
    c.search.cell.n_intermediate = 2;
    c.search.cell.channels = 4;
    c.search.cell.op_set = {OpKind::SepConv3, OpKind::Skip, OpKind::Zero};
    c.search.optimizer.w_lr = 0.005;
    c.search.schedule = {4, 1, 2, 2, 1, 4, false};
    c.retrain = {2, 3, 4, 0.005, 0};
    return c;
}

int run_cli(const std::string& args, const std::string& log = "") {
    std::string cmd = std::string(CELLNAS_CLI) + " " + args;
    cmd += log.empty() ? " >/dev/null 2>&1" : " >" + log + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// P(uniform argmax lands within one pixel of the centre), neighbourhood clipped at the border
double clipped_neighbourhood(int cy, int cx, int s) {
    int n = 0;
    for (int y = cy - 1; y <= cy + 1; ++y)
        for (int x = cx - 1; x <= cx + 1; ++x) n += y >= 0 && y < s && x >= 0 && x < s;
    return n / static_cast<double>(s * s);
}

}  // namespace

// ---- dataset ----------------------------------------------------------------

TEST_CASE("dataset is deterministic and splits are disjoint") {
    ToyTaskSpec spec;
    const ToyDataset a(spec), b(spec);
    std::set<std::uint64_t> seen;
    std::size_t total = 0;
    for (DataSplit s : {DataSplit::Train, DataSplit::Val, DataSplit::Holdout}) {
        REQUIRE(a.size(s) == b.size(s));
        for (std::size_t i = 0; i < a.size(s); ++i) {
            CHECK(sample_hash(a.split(s)[i]) == sample_hash(b.split(s)[i]));
            seen.insert(sample_hash(a.split(s)[i]));
            ++total;
        }
    }
    CHECK(a.size(DataSplit::Train) == 200);
    CHECK(a.size(DataSplit::Val) == 200);
    CHECK(a.size(DataSplit::Holdout) == 100);
    CHECK(seen.size() == total);

    spec.seed = 1;
    const ToyDataset c(spec);
    CHECK(sample_hash(c.split(DataSplit::Train)[0]) != sample_hash(a.split(DataSplit::Train)[0]));
    // growing one split leaves the others untouched
    ToyTaskSpec bigger;
    bigger.n_train = 300;
    const ToyDataset d(bigger);
    CHECK(sample_hash(d.split(DataSplit::Val)[7]) == sample_hash(a.split(DataSplit::Val)[7]));
}

TEST_CASE("sample shapes and labels") {
    for (Objective obj : {Objective::CenterMapMSE, Objective::CenterMapKL}) {
        ToyTaskSpec spec;
        spec.objective = obj;
        spec.n_train = 50;
        const ToyDataset d(spec);
        for (const Sample& s : d.split(DataSplit::Train)) {
            CHECK(s.b3.shape() == Shape{8, 16, 16});
            CHECK(s.b4.shape() == Shape{8, 8, 8});
            CHECK(s.label.shape() == Shape{1, 16, 16});
            double sum = 0, peak = -1;
            int py = -1, px = -1;
            for (int y = 0; y < 16; ++y)
                for (int x = 0; x < 16; ++x) {
                    const double v = s.label.data()[static_cast<std::size_t>(y * 16 + x)];
                    CHECK(v >= 0.0);
                    sum += v;
                    if (v > peak) {
                        peak = v;
                        py = y;
                        px = x;
                    }
                }
            CHECK(py == s.center_y);
            CHECK(px == s.center_x);
            CHECK(map_argmax(s.label.data(), 16, 16) == std::pair{s.center_y, s.center_x});
            if (obj == Objective::CenterMapKL) CHECK(std::abs(sum - 1.0) <= 1e-6);
            else CHECK(peak == doctest::Approx(1.0));
        }
        const Batch b = d.make_batch(DataSplit::Train, std::vector<std::size_t>{3, 1});
        CHECK(b.inputs.size() == 2);
        CHECK(b.inputs[0].shape() == Shape{2, 8, 16, 16});
        CHECK(b.inputs[1].shape() == Shape{2, 8, 8, 8});
        CHECK(b.target.shape() == Shape{2, 1, 16, 16});
    }
}

TEST_CASE("task spec validation") {
    ToyTaskSpec s;
    s.n_val = 0;
    CHECK_THROWS_AS(validate_task(s), ParameterError);
    s = {};
    s.image_size = 15;
    CHECK_THROWS_AS(validate_task(s), ParameterError);
    s = {};
    s.channels = 0;
    CHECK_THROWS_AS(ToyDataset{s}, ParameterError);
}

// Fixture recorded from one run of this baseline: val MSE 0.00129 against
// 0.0111 for the per-pixel mean label.
TEST_CASE("two-layer conv baseline beats the mean label") {
    const ToyDataset d(ToyTaskSpec{});
    Rng rng(0);
    auto init = [&](Shape s, double sd) {
        std::vector<double> v(shape_numel(s));
        for (double& x : v) x = sd * rng.normal();
        return Tensor::from(s, v, true);
    };
    Tensor w1 = init({8, 8, 5, 5}, 0.1), b1 = Tensor::zeros({8}, true);
    Tensor w2 = init({1, 8, 5, 5}, 0.05), b2 = Tensor::zeros({1}, true);
    std::vector<Tensor> params{w1, b1, w2, b2};
    AdamState opt = AdamState::for_params(params);
    auto forward = [&](Tape& t, const Batch& b) {
        Tensor h = ops::relu(t, ops::bias_add(t, ops::conv2d(t, b.inputs[0], w1, {1, 2, 1}), b1));
        return ops::bias_add(t, ops::conv2d(t, h, w2, {1, 2, 1}), b2);
    };
    for (int it = 0; it < 400; ++it) {
        std::vector<std::size_t> idx;
        for (int k = 0; k < 10; ++k) idx.push_back(rng.below(200));
        const Batch b = d.make_batch(DataSplit::Train, idx);
        for (auto& p : params) p.zero_grad();
        Tape t;
        Tensor loss = ops::mse_loss(t, forward(t, b), b.target);
        t.backward(loss);
        adam_step(opt, params, 0.01, {});
    }
    std::vector<double> mean(256, 0.0);
    for (const auto& s : d.split(DataSplit::Train))
        for (std::size_t i = 0; i < 256; ++i) mean[i] += s.label.data()[i] / 200.0;
    double conv = 0, flat = 0;
    for (std::size_t i = 0; i < d.size(DataSplit::Val); ++i) {
        const Batch b = d.make_batch(DataSplit::Val, std::vector<std::size_t>{i});
        Tape t(false);
        const Tensor p = forward(t, b);
        for (std::size_t k = 0; k < 256; ++k) {
            const double y = b.target.data()[k];
            conv += (p.data()[k] - y) * (p.data()[k] - y);
            flat += (mean[k] - y) * (mean[k] - y);
        }
    }
    MESSAGE("val MSE: conv " << conv / 51200 << ", mean label " << flat / 51200);
    CHECK(conv < 0.5 * flat);
}

TEST_CASE("localization credit and random baseline") {
    std::vector<double> flat(256, 0.25);
    CHECK(localization_credit(flat, 16, 16, 5, 5) == doctest::Approx(9.0 / 256));
    CHECK(localization_credit(flat, 16, 16, 0, 0) == doctest::Approx(4.0 / 256));
    std::vector<double> peak(256, 0.0);
    peak[5 * 16 + 6] = 1.0;
    CHECK(localization_credit(peak, 16, 16, 5, 5) == 1.0);
    CHECK(localization_credit(peak, 16, 16, 5, 8) == 0.0);
    peak[0] = 1.0;  // two tied maxima, one of them near
    CHECK(localization_credit(peak, 16, 16, 5, 5) == 0.5);

    const std::vector<std::pair<int, int>> centers{{0, 0}, {5, 5}, {15, 7}};
    const double expect = (clipped_neighbourhood(0, 0, 16) + clipped_neighbourhood(5, 5, 16) +
                           clipped_neighbourhood(15, 7, 16)) / 3;
    CHECK(random_localization_baseline(centers, 16, 16) == doctest::Approx(expect));
}

TEST_CASE("untrained discrete cell scores the random baseline") {
    RunConfig cfg;
    const ToyDataset data(cfg.task);
    double expect = 0;
    for (const auto& s : data.split(DataSplit::Val)) expect += clipped_neighbourhood(s.center_y, s.center_x, 16);
    expect /= static_cast<double>(data.size(DataSplit::Val));
    Rng rng(4);
    for (int trial = 0; trial < 3; ++trial) {
        Genotype g;
        g.op_set = cfg.search.cell.op_set;
        for (const auto& s : edge_slots(cfg.search.cell)) g.edges.push_back({s.source, s.dest, g.op_set[rng.below(8)]});
        DiscreteNetwork net = DiscreteNetwork::build(g, cfg.search.cell, static_cast<std::uint64_t>(trial));
        const EvalReport r = evaluate(net, data, DataSplit::Val, loss_for(cfg.task.objective), 10);
        CHECK(r.samples == 200);
        CHECK(r.random_baseline == doctest::Approx(expect).epsilon(1e-12));
        CHECK(std::abs(r.accuracy - expect) <= 1e-12);
    }
}

// ---- config -----------------------------------------------------------------

TEST_CASE("config round trip") {
    RunConfig c;
    CHECK(parse_run_config(serialize_run_config(c)) == c);
    RunConfig r = smoke_config();
    r.search.cell.relaxation = Relaxation::Sigmoid;
    r.search.variant = Variant::FairDarts;
    r.search.cell.dropout_targets = DropoutTargets::AllOps;
    r.search.cell.op_options = {1, true};
    r.search.optimizer.w_lr = 0.1 + 0.2;  // not exactly representable as typed
    r.search.optimizer.adam.eps = 1.234567890123e-17;
    r.task.objective = Objective::CenterMapKL;
    r.task.noise = 1.0 / 3.0;
    r.seeds = {5, 18446744073709551615ULL};
    r.policy = DiscretizePolicy::TopTwoInputs;
    r.enum_cap = 5;
    const std::string text = serialize_run_config(r);
    CHECK(parse_run_config(text) == r);
    CHECK(serialize_run_config(parse_run_config(text)) == text);
    for (const char* f : {"default.cfg", "reduced.cfg", "smoke.cfg"}) {
        const RunConfig loaded = load_run_config(std::string(CELLNAS_SOURCE_DIR) + "/configs/" + f);
        CHECK(parse_run_config(serialize_run_config(loaded)) == loaded);
    }
    CHECK(load_run_config(std::string(CELLNAS_SOURCE_DIR) + "/configs/default.cfg") == RunConfig{});
    CHECK(parse_run_config("# only comments\n\n[search]\n  variant   =   first  \n").search.variant ==
          Variant::FirstOrder);
}

TEST_CASE("config errors carry line numbers") {
    auto line_of = [](const std::string& text) {
        try {
            parse_run_config(text);
        } catch (const ParseError& e) {
            return e.line();
        }
        return -1;
    };
    CHECK(line_of("[cell]\nchannels = 4\nbogus = 1\n") == 3);
    CHECK(line_of("[nowhere]\n") == 1);
    CHECK(line_of("channels = 4\n") == 1);
    CHECK(line_of("[cell]\nchannels = four\n") == 2);
    CHECK(line_of("[cell]\nchannels = 4\n\nchannels = 5\n") == 4);
    CHECK(line_of("[cell]\nop_set = sep_conv_3, conv_9\n") == 2);
    CHECK(line_of("[schedule]\ntotal_epochs = 5\nalpha_warmup_epochs = 5\n") == 3);
    CHECK(line_of("[search]\nvariant = fair\n") == 2);
    CHECK(line_of("[task]\nimage_size = 15\n") == 2);
    CHECK(line_of("[cell]\nchannels\n") == 2);
    CHECK_THROWS_AS(load_run_config("/nonexistent/x.cfg"), ParseError);
}

// ---- checkpoints --------------------------------------------------------------

TEST_CASE("checkpoint save, load, save is byte-identical") {
    const RunConfig cfg = smoke_config();
    const ToyDataset data(cfg.task);
    SearchState s = SearchState::initialize(cfg.search, 4);
    SearchConfig two = cfg.search;
    two.schedule.total_epochs = 2;
    run_search(s, two, data, loss_for(cfg.task.objective));
    const std::string text = checkpoint_text(s, cfg);
    const LoadedCheckpoint back = parse_checkpoint(text);
    CHECK(back.config == cfg);
    CHECK(checkpoint_text(back.state, back.config) == text);
    const fs::path dir = scratch("roundtrip");
    save_checkpoint((dir / "a.ckpt").string(), s, cfg);
    CHECK(read_file((dir / "a.ckpt").string()) == text);
    CHECK(checkpoint_text(load_checkpoint((dir / "a.ckpt").string()).state, cfg) == text);
}

TEST_CASE("resume is bitwise equivalent to a straight run") {
    RunConfig cfg = smoke_config();
    cfg.search.schedule.total_epochs = 5;
    cfg.search.schedule.alpha_warmup_epochs = 1;
    const ToyDataset data(cfg.task);
    for (Variant v : {Variant::SecondOrder, Variant::FirstOrder}) {
        cfg.search.variant = v;
        const fs::path dir = scratch("resume");
        run_seed(cfg, 2, dir.string(), data);
        for (int k = 0; k + 1 < cfg.search.schedule.total_epochs; ++k) {
            LoadedCheckpoint ck = load_checkpoint(epoch_checkpoint_path(dir.string(), 2, k));
            SearchConfig one = ck.config.search;
            one.schedule.total_epochs = k + 2;
            // stop after one epoch by running with a callback check
            std::string after;
            run_search(ck.state, ck.config.search, data, loss_for(cfg.task.objective), [&](const SearchState& st) {
                if (after.empty()) after = checkpoint_text(st, ck.config);
            });
            CHECK(after == read_file(epoch_checkpoint_path(dir.string(), 2, k + 1)));
            CHECK(checkpoint_text(ck.state, ck.config) == read_file(latest_checkpoint_path(dir.string(), 2)));
        }
        // resume through the pipeline after deleting the tail
        fs::copy_file(epoch_checkpoint_path(dir.string(), 2, 1), latest_checkpoint_path(dir.string(), 2),
                      fs::copy_options::overwrite_existing);
        const std::string final_straight = read_file(epoch_checkpoint_path(dir.string(), 2, 4));
        run_seed(cfg, 2, dir.string(), data, true);
        CHECK(read_file(latest_checkpoint_path(dir.string(), 2)) == final_straight);
    }
    RunConfig other = cfg;
    other.search.optimizer.alpha_lr = 1e-2;
    const fs::path dir = scratch("resume-mismatch");
    run_seed(cfg, 2, dir.string(), data);
    CHECK_THROWS_AS(run_seed(other, 2, dir.string(), data, true), UsageError);
}

TEST_CASE("corrupt checkpoints name the failing section") {
    const RunConfig cfg = smoke_config();
    const ToyDataset data(cfg.task);
    SearchState s = SearchState::initialize(cfg.search, 1);
    SearchConfig one = cfg.search;
    one.schedule.total_epochs = 1;
    one.schedule.alpha_warmup_epochs = 0;
    run_search(s, one, data, loss_for(cfg.task.objective));
    const std::string text = checkpoint_text(s, cfg);

    auto section_of = [](const std::string& t) {
        try {
            parse_checkpoint(t);
        } catch (const IntegrityError& e) {
            return e.section();
        }
        return std::string("<none>");
    };
    std::string bumped = text;
    bumped.replace(bumped.find("\"version\":1"), 11, "\"version\":2");
    CHECK(section_of(bumped) == "header");
    CHECK(section_of("{\"header\":{\"format\":\"something-else\",\"version\":1},\"sections\":{}}") == "header");

    for (const char* name : {"config", "state", "history", "alpha", "params", "norm_stats", "optimizers"}) {
        const auto at = text.find(std::string("\"") + name + "\":{\"checksum\"");
        REQUIRE(at != std::string::npos);
        const auto payload = text.find("\"payload\":", at) + 10;
        // flip a hex digit (or any character) inside the payload, keeping JSON valid
        std::string bad = text;
        std::size_t p = bad.find_first_of("0123456789abcdef", payload + 1);
        bad[p] = bad[p] == '0' ? '1' : '0';
        CHECK(section_of(bad) == name);
        // truncated mid-section
        CHECK(section_of(text.substr(0, payload + 5)) == name);
    }
}

TEST_CASE("holdout CSV") {
    std::vector<HoldoutRecord> h{{0, 0.5, 0.6, 0.001, {}}, {1, 0.25, 0.3, 0.0005, {}}};
    const std::string csv = holdout_csv(h);
    CHECK(csv.rfind("epoch,L_ho,dropout_rate,w_lr\n", 0) == 0);
    std::istringstream in(csv.substr(csv.find('\n') + 1));
    std::string line;
    for (const auto& r : h) {
        REQUIRE(std::getline(in, line));
        std::istringstream fields(line);
        std::string f[4];
        for (auto& x : f) std::getline(fields, x, ',');
        CHECK(std::stoi(f[0]) == r.epoch);
        CHECK(std::stod(f[1]) == r.l_ho);
        CHECK(std::stod(f[2]) == r.dropout_rate);
        CHECK(std::stod(f[3]) == r.w_lr);
    }
    h[1].l_ho = std::numeric_limits<double>::quiet_NaN();
    CHECK(holdout_csv(h).find("1,nan,") != std::string::npos);
}

TEST_CASE("model container round trip") {
    const RunConfig cfg = smoke_config();
    const ToyDataset data(cfg.task);
    Genotype g;
    g.n_intermediate = 2;
    g.op_set = cfg.search.cell.op_set;
    g.edges = {{0, 2, OpKind::SepConv3}, {1, 2, OpKind::Skip}, {0, 3, OpKind::Zero}, {1, 3, OpKind::SepConv3}, {2, 3, OpKind::Skip}};
    DiscreteNetwork net = DiscreteNetwork::build(g, cfg.search.cell, 3);
    train_discrete(net, data, loss_for(cfg.task.objective), cfg.retrain);
    const std::string text = model_text(net, cfg);
    LoadedModel back = parse_model(text);
    CHECK(back.genotype == g);
    CHECK(model_text(back.network, back.config) == text);
    const auto a = evaluate(net, data, DataSplit::Val, loss_for(cfg.task.objective), 4);
    const auto b = evaluate(back.network, data, DataSplit::Val, loss_for(cfg.task.objective), 4);
    CHECK(a.loss == b.loss);
    CHECK(a.accuracy == b.accuracy);
}

// ---- enumeration ----------------------------------------------------------

TEST_CASE("enumeration codes") {
    CellConfig c;
    c.n_intermediate = 2;
    c.op_set = {OpKind::SepConv3, OpKind::Skip, OpKind::Zero};
    CHECK(enumeration_size(c) == 243);
    std::set<std::string> distinct;
    for (std::uint64_t code = 0; code < 243; ++code) {
        const Genotype g = genotype_from_code(c, code);
        CHECK(is_valid(validate(g, c)));
        CHECK(code_of(g) == code);
        distinct.insert(serialize(g));
    }
    CHECK(distinct.size() == 243);
    CHECK(enumeration_size(CellConfig{}) == 4398046511104ULL);  // 8^14

    RunConfig big;
    CHECK_THROWS_AS(oracle_enum(big), ParameterError);
}

TEST_CASE("enumeration ranking and cache") {
    RunConfig cfg = smoke_config();
    cfg.search.cell.n_intermediate = 1;
    cfg.search.cell.op_set = {OpKind::Skip, OpKind::Zero, OpKind::AvgPool3};
    const fs::path dir = scratch("enum");
    const std::string cache = (dir / "cache.txt").string();
    const EnumResult full = oracle_enum(cfg, cache);
    REQUIRE(full.ranking.size() == 9);
    for (std::size_t i = 0; i + 1 < full.ranking.size(); ++i) CHECK(full.ranking[i].val_loss <= full.ranking[i + 1].val_loss);
    CHECK(rank_of(full, full.ranking.front().genotype) == 1);

    // independent rank: 1 + cells with strictly lower loss
    for (const auto& e : full.ranking) {
        std::size_t lower = 0;
        for (const auto& o : full.ranking) lower += o.val_loss < e.val_loss;
        CHECK(rank_of(full, e.genotype) == lower + 1);
    }
    // the all-Zero cell is the constant predictor and ranks last
    Genotype zeros = genotype_from_code(cfg.search.cell, 0);
    for (auto& e : zeros.edges) e.op = OpKind::Zero;
    CHECK(rank_of(full, zeros) >= 8);

    int trained = 0;
    auto count = [&](std::uint64_t, std::uint64_t) { ++trained; };
    CHECK(oracle_enum(cfg, cache, count).ranking.size() == 9);

    // drop the last two cached cells plus a torn tail; only those are retrained
    std::string text = read_file(cache);
    for (int i = 0; i < 3; ++i) text.erase(text.rfind('\n', text.size() - 2) + 1);
    write_file(cache, text + "8 3f");
    const EnumResult again = oracle_enum(cfg, cache);
    REQUIRE(again.ranking.size() == 9);
    for (std::size_t i = 0; i < 9; ++i) {
        CHECK(again.ranking[i].code == full.ranking[i].code);
        CHECK(again.ranking[i].val_loss == full.ranking[i].val_loss);
    }
    RunConfig other = cfg;
    other.retrain.lr = 0.01;
    CHECK(enumeration_fingerprint(other) != full.fingerprint);
    other = cfg;
    other.search.optimizer.alpha_lr = 0.5;  // search settings do not affect retraining
    CHECK(enumeration_fingerprint(other) == full.fingerprint);
}

// ---- pipeline and CLI ---------------------------------------------------------

TEST_CASE("search then derive picks one winner") {
    const RunConfig cfg = smoke_config();
    const fs::path dir = scratch("pipeline");
    const auto outcomes = search_all(cfg, dir.string());
    REQUIRE(outcomes.size() == 3);
    const Derivation d = derive_from_runs(dir.string());
    REQUIRE(d.runs.size() == 3);
    const SeedDerivation* best = nullptr;
    for (const auto& r : d.runs) {
        const auto& h = load_checkpoint(r.summary.checkpoint).state.holdout_history;
        double m = INFINITY;
        int at = -1;
        for (const auto& rec : h)
            if (rec.epoch >= cfg.search.schedule.alpha_warmup_epochs && rec.l_ho < m) {
                m = rec.l_ho;
                at = rec.epoch;
            }
        CHECK(r.summary.best_epoch == at);
        CHECK(r.summary.l_ho == m);
        if (!best || r.summary.l_ho < best->summary.l_ho) best = &r;
    }
    CHECK(d.winner.meta == Provenance{best->summary.seed, best->summary.best_epoch, best->summary.l_ho});
    CHECK(parse_genotype(serialize(d.winner)) == d.winner);
    CHECK(fs::exists(dir / "seed_1" / "holdout.csv"));
    CHECK(fs::exists(dir / "config.cfg"));
    CHECK(load_run_config((dir / "config.cfg").string()) == cfg);
}

TEST_CASE("command line pipeline") {
    const fs::path dir = scratch("cli");
    const std::string cfg = std::string(CELLNAS_SOURCE_DIR) + "/configs/smoke.cfg";
    const std::string runs = (dir / "runs").string(), runs2 = (dir / "runs2").string();
    CHECK(run_cli("search --config " + cfg + " --out " + runs) == 0);
    CHECK(run_cli("derive --runs " + runs + " --out " + (dir / "cell.genotype").string()) == 0);
    const Genotype g = parse_genotype(read_file((dir / "cell.genotype").string()));
    CHECK(std::set<std::uint64_t>{1, 2, 3}.count(g.meta.seed) == 1);

    // identical config and seeds give identical genotype bytes
    CHECK(run_cli("search --config " + cfg + " --out " + runs2) == 0);
    CHECK(run_cli("derive --runs " + runs2 + " --out " + (dir / "cell2.genotype").string()) == 0);
    CHECK(read_file((dir / "cell.genotype").string()) == read_file((dir / "cell2.genotype").string()));

    // CELLNAS_OUT picks the default directory
    const std::string env = "CELLNAS_OUT=" + (dir / "envout").string() + " ";
    CHECK(std::system((env + CELLNAS_CLI + " search --config " + cfg + " --seed 4 >/dev/null 2>&1").c_str()) == 0);
    CHECK(fs::exists(dir / "envout" / "seed_4" / "latest.ckpt"));

    CHECK(run_cli("train --config " + cfg + " --genotype " + (dir / "cell.genotype").string() + " --out " +
                  (dir / "model.ckpt").string()) == 0);
    CHECK(run_cli("eval --model " + (dir / "model.ckpt").string(), (dir / "eval.txt").string()) == 0);
    CHECK(read_file((dir / "eval.txt").string()).find("accuracy=") != std::string::npos);
    CHECK(run_cli("export-dot --genotype " + (dir / "cell.genotype").string() + " --out " + (dir / "cell.dot").string()) == 0);
    CHECK(read_file((dir / "cell.dot").string()).rfind("digraph", 0) == 0);
    CHECK(run_cli("oracle-quadratic --seed 1", (dir / "quad.txt").string()) == 0);
    CHECK(read_file((dir / "quad.txt").string()).find("eta_zero_identical=true") != std::string::npos);

    // config errors: exit 2 with a line-anchored message on stderr
    write_file((dir / "bad.cfg").string(), "[cell]\nchannels = 4\nwidth = 3\n");
    CHECK(run_cli("search --config " + (dir / "bad.cfg").string() + " --out " + runs, (dir / "err.txt").string()) == 2);
    CHECK(read_file((dir / "err.txt").string()).find("line 3") != std::string::npos);
    CHECK(run_cli("search --config /nonexistent.cfg") == 2);
    CHECK(run_cli("search --variant sideways --config " + cfg + " --out " + runs) == 2);
    CHECK(run_cli("oracle-enum --config " + std::string(CELLNAS_SOURCE_DIR) + "/configs/default.cfg") == 2);
    CHECK(run_cli("") == 2);

    // numerical abort: exit 3
    std::string blowup = read_file(cfg);
    blowup.replace(blowup.find("lr = 0.005\n", blowup.find("[retrain]")), 11, "lr = 1e200\n");
    write_file((dir / "blowup.cfg").string(), blowup);
    CHECK(run_cli("train --config " + (dir / "blowup.cfg").string() + " --genotype " + (dir / "cell.genotype").string() +
                  " --out " + (dir / "m2.ckpt").string()) == 3);
}
