#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ppgdpo/harness.hpp"

using namespace ppgdpo;

namespace {

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("ppgdpo_harness_" + name);
    std::filesystem::remove_all(p);
    return p.string();
}

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(v.size());
    int i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

/// Seconds-scale grid: d = 2, every method, a few dozen epochs.
ExperimentConfig tiny_config(const std::string& dir) {
    ExperimentConfig c;
    c.dims = {2};
    c.geometries = {"aligned"};
    c.s_values = {1e-2};
    c.N = 10;
    c.train.epochs = 24;
    c.train.eval_every = 4;
    c.train.arch.hidden = {8, 8};
    c.stage2.blocks = 4;
    c.distill.warmup = 8;
    c.distill.ramp = 4;
    c.distill.K_refresh = 8;
    c.distill.M_z = 8;
    c.ppo.actor_hidden = {8};
    c.ppo.critic_hidden = {8};
    c.ppo.epochs_per_update = 2;
    c.eval.points = 4;
    c.out_dir = dir;
    return c;
}

std::vector<std::string> result_lines(const std::string& dir) {
    std::ifstream in(dir + "/results.csv");
    std::vector<std::string> out;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

}  // namespace

TEST(EvalGrid, SixteenLogSpacedPoints) {
    const auto g = eval_grid();
    ASSERT_EQ(g.size(), 16u);
    EXPECT_DOUBLE_EQ(g.front(), 0.5);
    EXPECT_DOUBLE_EQ(g.back(), 2.0);
    for (std::size_t i = 1; i < g.size(); ++i) EXPECT_NEAR(g[i] / g[i - 1], std::pow(4.0, 1.0 / 15), 1e-12);
}

TEST(DecisionRmse, ReferenceAndConstantOffset) {
    const VectorXd ref = vec({0.3, -0.2});
    EXPECT_EQ(decision_rmse(std::vector<VectorXd>(16, ref), ref), 0.0);
    const std::vector<VectorXd> off(16, vec({0.85}));
    EXPECT_NEAR(decision_rmse(off, vec({0.75})), 0.1, 1e-15);
    EXPECT_THROW(decision_rmse({vec({1.0})}, ref), std::invalid_argument);
}

TEST(DecisionRmse, ConstantPolicyIsGridIndependent) {
    NetArchitecture a;
    a.hidden = {4};
    a.d = 2;
    PolicyNet net = make_policy_net(a, 1);
    net.layers.back().b << 0.4, -0.1;
    const VectorXd ref = vec({0.5, 0.1});
    const double r1 = decision_rmse(policy_on_grid(net, eval_grid(16, 0.5, 2.0)), ref);
    const double r2 = decision_rmse(policy_on_grid(net, eval_grid(5, 0.9, 3.0)), ref);
    EXPECT_EQ(r1, r2);
    EXPECT_NEAR(r1, (net.output_scale * vec({0.4, -0.1}) - ref).norm(), 1e-15);
}

TEST(TailMedian, ConventionsAndRobustness) {
    EXPECT_EQ(tail_median(std::vector<double>(9, 2.5)).value, 2.5);
    const auto t = tail_median({9, 9, 1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.value, 3.5);
    EXPECT_EQ(t.count, 6);
    EXPECT_FALSE(t.flagged);
    const std::vector<double> spike{0.2, 0.3, 0.25, 0.22, 0.28, 50.0};
    EXPECT_LE(tail_median(spike).value, 0.3);
    const auto short_run = tail_median({4.0, 1.0, 2.0});
    EXPECT_TRUE(short_run.flagged);
    EXPECT_EQ(short_run.value, 2.0);
    EXPECT_TRUE(std::isnan(tail_median({}).value));
}

TEST(HedgingMetrics, ExactGuardedAndReflected) {
    ReferenceAllocation ref;
    ref.pi_myopic = vec({0.5, 0.2, 0.1});
    ref.pi_hedge = vec({0.05, -0.02, 0.01});
    ref.pi = ref.pi_myopic + ref.pi_hedge;
    const std::vector<VectorXd> exact(16, ref.pi), myo(16, ref.pi_myopic), hed(16, ref.pi_hedge);
    const auto h = hedging_metrics(exact, ref, &myo, &hed);
    EXPECT_NEAR(h.cos_hedge, 1.0, 1e-14);
    EXPECT_EQ(h.rmse_myo, 0.0);
    EXPECT_EQ(h.rmse_hedge, 0.0);
    EXPECT_FALSE(h.cos_flag);

    const auto missed = hedging_metrics(myo, ref);
    EXPECT_EQ(missed.cos_hedge, 0.0);
    EXPECT_TRUE(missed.cos_flag);
    EXPECT_TRUE(std::isnan(missed.rmse_myo));

    const std::vector<VectorXd> neg(16, VectorXd(ref.pi_myopic - ref.pi_hedge));
    EXPECT_NEAR(hedging_metrics(neg, ref).cos_hedge, -1.0, 1e-14);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
    ExperimentConfig c;
    c.benchmark = "ou";
    c.dims = {3};
    c.train.epochs = 11;
    c.ou.rho0 = 0.25;
    ExperimentConfig back;
    from_json_into(to_json(c), back);
    EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
    EXPECT_THROW(from_json_into(json{{"dimz", {5}}}, back), std::invalid_argument);
    ExperimentConfig bad;
    bad.mc_regimes = {"huge"};
    EXPECT_THROW(validate(bad), std::invalid_argument);
    bad = ExperimentConfig{};
    bad.methods = {"sac"};
    EXPECT_THROW(validate(bad), std::invalid_argument);
}

TEST(Cells, BudgetsSeedsAndSharedMarket) {
    ExperimentConfig c;
    c.dims = {3};
    c.mc_regimes = {"base", "high"};
    const auto cells = plan_cells(c);
    ASSERT_EQ(cells.size(), 12u);
    const auto a = build_cell(c, cells[0]);
    const auto b = build_cell(c, cells.back());
    EXPECT_EQ(a.train.batch_size(), 300);
    EXPECT_EQ(b.train.batch_size(), 1200);
    EXPECT_EQ(b.stage2.n_theta, 1200);
    EXPECT_EQ(a.ppo.interactions(c.N), static_cast<long long>(a.train.epochs) * 300 * c.N);
    EXPECT_EQ(a.market_hash, b.market_hash);
    EXPECT_NE(a.seed, b.seed);
    EXPECT_NE(a.config_hash, b.config_hash);
    EXPECT_EQ(build_cell(c, cells[0]).config_hash, a.config_hash);
}

TEST(RunGrid, DryRunListsCellsWithoutExecuting) {
    const std::string dir = temp_dir("dry");
    ExperimentConfig c = tiny_config(dir);
    c.dims = {2, 3};
    c.geometries = {"aligned", "misaligned"};
    const auto rep = run_grid(c, {true, false});
    EXPECT_EQ(rep.planned.size(), 4u);
    EXPECT_TRUE(rep.records.empty());
    EXPECT_FALSE(std::filesystem::exists(dir));
}

TEST(RunGrid, SmokeGridEmitsEveryMethodAndReproducesRows) {
    const std::string dir = temp_dir("smoke");
    const ExperimentConfig c = tiny_config(dir);
    const auto rep = run_grid(c);
    ASSERT_GE(rep.records.size(), 5u);
    std::set<std::string> methods;
    for (const auto& r : rep.records) {
        EXPECT_EQ(r.status, "ok") << r.method;
        EXPECT_GE(r.rmse_full, 0.0) << r.method;
        EXPECT_EQ(r.market_hash, rep.records[0].market_hash);
        EXPECT_EQ(r.tail_window, 6);
        EXPECT_FALSE(r.checkpoint_id.empty());
        methods.insert(r.method);
    }
    EXPECT_EQ(methods.size(), 5u);
    for (const char* f : {"results.csv", "stage2_diag.csv", "config.json", "markets/d2.json", "timing.csv"})
        EXPECT_TRUE(std::filesystem::exists(dir + "/" + f)) << f;
    const auto first = result_lines(dir);
    ASSERT_EQ(first.size(), rep.records.size());

    // Same seeds: identical rows, byte for byte.
    const std::string dir2 = temp_dir("smoke2");
    ExperimentConfig c2 = c;
    c2.out_dir = dir2;
    run_grid(c2);
    auto second = result_lines(dir2);
    auto sorted_first = first;
    std::sort(sorted_first.begin(), sorted_first.end());
    std::sort(second.begin(), second.end());
    EXPECT_EQ(sorted_first, second);

    // Resume skips the completed cell.
    const auto again = run_grid(c, {false, true});
    EXPECT_EQ(again.skipped.size(), 1u);
    EXPECT_TRUE(again.records.empty());
    EXPECT_EQ(result_lines(dir).size(), first.size());
}

TEST(RunGrid, FailingCellIsTaggedAndGridContinues) {
    const std::string dir = temp_dir("fail");
    ExperimentConfig c = tiny_config(dir);
    c.benchmark = "ou";
    c.dims = {1, 2};
    c.ou.mfac = 2;  // needs k >= 2 factors, so d = 1 cannot host it
    c.methods = {"stage1", "stage1+stage2"};
    const auto rep = run_grid(c);
    ASSERT_EQ(rep.records.size(), 4u);
    int failed = 0;
    for (const auto& r : rep.records) {
        if (r.d == 1) {
            EXPECT_EQ(r.status.rfind("failed: ", 0), 0u) << r.status;
            ++failed;
        } else {
            EXPECT_EQ(r.status, "ok");
            EXPECT_GE(r.cos_hedge, -1.0);
            EXPECT_LE(r.cos_hedge, 1.0);
        }
    }
    EXPECT_EQ(failed, 2);
    const auto s2 = std::find_if(rep.records.begin(), rep.records.end(),
                                 [](const auto& r) { return r.d == 2 && r.method == "stage1+stage2"; });
    ASSERT_NE(s2, rep.records.end());
    EXPECT_GE(s2->rmse_myopic, 0.0);
    EXPECT_GE(s2->rmse_hedge, 0.0);
}
