#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <iostream>
#include <optional>
#include <string>

#include "ppgdpo/harness.hpp"

using namespace ppgdpo;

namespace {

struct CellOptions {
    std::string config;
    std::string benchmark;
    int d = 0;
    std::string geometry;
    double s = 0.0;
    std::string regime;
    std::optional<std::uint64_t> seed;
    std::optional<int> epochs;
    std::string market;
    std::string out = "runs/single";
};

void add_cell_options(CLI::App* app, CellOptions& o, bool with_out = true) {
    app->add_option("--config", o.config, "Experiment config JSON (defaults when omitted)");
    app->add_option("--benchmark", o.benchmark, "static | ou")->check(CLI::IsMember({"static", "ou"}));
    app->add_option("--d", o.d, "Number of assets")->check(CLI::PositiveNumber);
    app->add_option("--geometry", o.geometry, "aligned | misaligned")->check(CLI::IsMember({"aligned", "misaligned"}));
    app->add_option("--s", o.s, "Uncertainty scale s (static) or s0 (OU)")->check(CLI::PositiveNumber);
    app->add_option("--regime", o.regime, "Monte Carlo regime: base (100 d) | high (400 d)")
        ->check(CLI::IsMember({"base", "high"}));
    app->add_option("--seed", o.seed, "Run seed");
    app->add_option("--epochs", o.epochs, "Stage 1 epochs / PPO updates");
    app->add_option("--market", o.market, "Serialized market JSON replacing the generated instance");
    if (with_out) app->add_option("--out", o.out, "Output directory");
}

ExperimentConfig load_config(const CellOptions& o) {
    ExperimentConfig c;
    if (!o.config.empty()) from_json_into(read_json_file(o.config), c);
    if (!o.benchmark.empty()) c.benchmark = o.benchmark;
    if (o.seed) c.run_seed = *o.seed;
    if (o.epochs) c.train.epochs = *o.epochs;
    validate(c);
    return c;
}

CellSpec selected_cell(const ExperimentConfig& c, const CellOptions& o) {
    CellSpec cell;
    cell.benchmark = c.benchmark;
    cell.d = o.d > 0 ? o.d : c.dims.at(0);
    cell.geometry = !o.geometry.empty() ? o.geometry : c.geometries.at(0);
    cell.s = o.s > 0.0 ? o.s : c.s_values.at(0);
    cell.mc_regime = !o.regime.empty() ? o.regime : c.mc_regimes.at(0);
    return cell;
}

CellContext prepare(const ExperimentConfig& c, const CellOptions& o) {
    CellContext cx = build_cell(c, selected_cell(c, o));
    if (!o.market.empty()) use_market_json(cx, c, read_json_file(o.market));
    return cx;
}

void write_run_header(const std::string& dir, const ExperimentConfig& c, const CellContext& cx) {
    write_json_file(dir + "/config.json", {{"experiment", to_json(c)}, {"cell", cx.config}});
    write_json_file(dir + "/market.json", cx.market);
}

void write_eval(const std::string& path, const std::deque<Snapshot>& ring, const CellContext& cx) {
    CsvWriter w(path, {"epoch", "rmse_full", "cos_hedge"});
    for (const auto& s : ring) {
        const auto u = policy_on_grid(s.net, cx.grid);
        w.row({static_cast<long long>(s.epoch), decision_rmse(u, cx.ref.pi), hedging_metrics(u, cx.ref).cos_hedge});
    }
}

void print_tail(const std::string& method, const StageMetrics& sm, int window) {
    const TailStat t = tail_median(sm.rmse, window);
    std::cout << method << " tail-median RMSE " << fmt_double(t.value) << " over " << t.count << " snapshots"
              << (t.flagged ? " (short window)" : "") << "\n";
}

int cmd_generate_market(const CellOptions& o) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = build_cell(c, selected_cell(c, o));
    write_json_file(o.out, cx.market);
    std::cout << "wrote " << o.out << " (market hash " << hex64(fnv1a_hash(cx.market.dump())) << ")\n";
    return 0;
}

int cmd_train(const CellOptions& o) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    write_run_header(o.out, c, cx);
    const auto t0 = std::chrono::steady_clock::now();
    const TrainState st = train(cx.problem, cx.train);
    write_train_log(o.out + "/train_log.csv", st.log);
    save_ring(st.ring, o.out, ".", "stage1");
    write_eval(o.out + "/eval.csv", st.ring, cx);
    print_tail("stage1", snapshot_metrics(st.ring, cx), c.eval.tail_window);
    std::cout << "epochs " << st.epoch << ", skipped updates " << st.skip_count << ", "
              << seconds_since(t0) << " s; checkpoints in " << o.out << "/checkpoints\n";
    return 0;
}

int cmd_project(const CellOptions& o, const std::string& ckpt, const std::string& mode) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    const PolicyNet warm = policy_from_checkpoint(read_json_file(ckpt));
    Stage2Config s2 = cx.stage2;
    s2.mode = aggregation_from_string(mode);
    s2.seed = stream_key(cx.seed, {tag::costate});
    std::vector<QueryState> queries;
    for (double x : cx.grid) queries.push_back({0, x});
    const Stage2Result res = run_stage2(warm, cx.problem, queries, s2);
    std::filesystem::create_directories(o.out);
    CsvWriter diag(o.out + "/stage2_diag.csv", kStage2DiagHeader);
    append_stage2_diag(diag, "project/" + mode, res);
    std::vector<VectorXd> pi, myo, hedge;
    for (const auto& r : res.rules) {
        pi.push_back(r.pi);
        myo.push_back(r.pi_myo);
        hedge.push_back(r.pi_hedge);
    }
    const auto h = hedging_metrics(pi, cx.ref, &myo, &hedge);
    const json out{{"warm_rmse", decision_rmse(policy_on_grid(warm, cx.grid), cx.ref.pi)},
                   {"projected_rmse", decision_rmse(pi, cx.ref.pi)},
                   {"rmse_myopic", h.rmse_myo},
                   {"rmse_hedge", h.rmse_hedge},
                   {"cos_hedge", h.cos_hedge},
                   {"n_fallback", res.summary.n_fallback},
                   {"kappa_med", res.summary.kappa_med},
                   {"residual_q50", res.summary.residual_q50},
                   {"pi_at_x1", to_json_vector(pi[pi.size() / 2])}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_distill(const CellOptions& o) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    write_run_header(o.out, c, cx);
    const DistillRun run = distill_train(cx.problem, cx.train, cx.distill);
    write_distill_log(o.out + "/distill_log.csv", run.log);
    write_train_log(o.out + "/train_log.csv", run.state.log);
    save_ring(run.state.ring, o.out, ".", "distill");
    write_eval(o.out + "/eval.csv", run.state.ring, cx);
    print_tail("distill", snapshot_metrics(run.state.ring, cx), c.eval.tail_window);
    std::cout << "teacher refreshes " << run.refresh_epochs.size() << "\n";
    return 0;
}

int cmd_train_ppo(const CellOptions& o) {
    ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    write_run_header(o.out, c, cx);
    const PpoState st = ppo_train(cx.problem, cx.ppo);
    write_ppo_log(o.out + "/ppo_log.csv", st.log);
    save_ring(st.ring, o.out, ".", "ppo");
    write_eval(o.out + "/eval.csv", st.ring, cx);
    print_tail("ppo", snapshot_metrics(st.ring, cx), c.eval.tail_window);
    std::cout << "interactions " << st.interactions << ", skipped updates " << st.skip_count << "\n";
    return 0;
}

int cmd_reference(const CellOptions& o) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    const json out{{"cell", cx.spec.id()},
                   {"pi", to_json_vector(cx.ref.pi)},
                   {"pi_myopic", to_json_vector(cx.ref.pi_myopic)},
                   {"pi_hedge", to_json_vector(cx.ref.pi_hedge)},
                   {"gamma", c.gamma},
                   {"tau", c.T},
                   {"market_hash", cx.market_hash}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_evaluate(const CellOptions& o, const std::string& ckpt) {
    const ExperimentConfig c = load_config(o);
    const CellContext cx = prepare(c, o);
    const PolicyNet net = policy_from_checkpoint(read_json_file(ckpt));
    const auto u = policy_on_grid(net, cx.grid);
    const auto h = hedging_metrics(u, cx.ref);
    const json out{{"checkpoint", ckpt},
                   {"rmse_full", decision_rmse(u, cx.ref.pi)},
                   {"cos_hedge", h.cos_hedge},
                   {"cos_flag", h.cos_flag},
                   {"grid_points", cx.grid.size()}};
    std::cout << out.dump(2) << "\n";
    return 0;
}

int cmd_run_grid(const std::string& cfg_path, const std::string& out, bool dry, bool resume) {
    ExperimentConfig c;
    if (!cfg_path.empty()) from_json_into(read_json_file(cfg_path), c);
    if (!out.empty()) c.out_dir = out;
    validate(c);
    const auto rep = run_grid(c, {dry, resume});
    std::set<std::string> skipped(rep.skipped.begin(), rep.skipped.end());
    for (const auto& cell : rep.planned)
        std::cout << (dry ? "planned " : skipped.count(cell.id()) ? "skipped " : "ran     ") << cell.id() << "\n";
    if (dry) {
        std::cout << rep.planned.size() << " cells x " << c.methods.size() << " methods\n";
        return 0;
    }
    int failed = 0;
    for (const auto& r : rep.records) {
        std::cout << r.cell << " " << r.method << " rmse " << fmt_double(r.rmse_full) << " " << r.status << "\n";
        failed += r.status != "ok";
    }
    std::cout << "results in " << c.out_dir << "/results.csv (" << failed << " failed rows)\n";
    return 0;
}

int cmd_kalman_demo(double k, double xi, double b, double sigma2, double P0, double T, int steps, std::uint64_t seed,
                    const std::string& out) {
    OUFactorMarket ou;
    ou.d = 1;
    ou.mfac = 1;
    ou.K = MatrixXd::Constant(1, 1, k);
    ou.ybar = VectorXd::Zero(1);
    ou.Xi = MatrixXd::Constant(1, 1, xi);
    ou.B = MatrixXd::Constant(1, 1, b);
    ou.Sigma = MatrixXd::Constant(1, 1, sigma2);
    ou.rho = MatrixXd::Zero(1, 1);
    ou.q0 = GaussianLaw::point_mass(VectorXd::Zero(1));
    ou.validate();
    const double dt = T / steps;
    Stream rng(seed, {1});
    std::vector<double> times(steps + 1);
    std::vector<VectorXd> dZ(steps, VectorXd(1));
    double y = 0.0;
    for (int i = 0; i <= steps; ++i) times[i] = i * dt;
    for (int i = 0; i < steps; ++i) {
        dZ[i](0) = b * y * dt + std::sqrt(sigma2 * dt) * rng.normal();
        y += -k * y * dt + xi * std::sqrt(dt) * rng.normal();
    }
    const auto path = kalman_bucy_propagate(ou, VectorXd::Zero(1), MatrixXd::Constant(1, 1, P0), dZ, times);
    const double root = sigma2 * (-k + std::sqrt(k * k + xi * xi * b * b / sigma2)) / (b * b);
    double pmin = path.P[0](0, 0);
    for (const auto& P : path.P) pmin = std::min(pmin, P(0, 0));
    if (!out.empty()) {
        CsvWriter w(out, {"t", "Yhat", "P"});
        for (std::size_t i = 0; i < path.P.size(); i += std::max(1, steps / 1000))
            w.row({times[i], path.Yhat[i](0), path.P[i](0, 0)});
    }
    const json j{{"P_T", path.P.back()(0, 0)},
                 {"closed_form_root", root},
                 {"abs_error", std::abs(path.P.back()(0, 0) - root)},
                 {"min_P", pmin},
                 {"Yhat_T", path.Yhat.back()(0)},
                 {"Y_T", y}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PG-DPO / P-PGDPO solver and benchmark harness"};
    app.require_subcommand(1);

    CellOptions gen, tr, pr, di, pp, rf, ev;
    auto* g = app.add_subcommand("generate-market", "Generate and serialize one market instance");
    add_cell_options(g, gen);
    gen.out = "market.json";

    add_cell_options(app.add_subcommand("train", "Stage 1 training for one cell"), tr);

    std::string pr_ckpt, pr_mode = "mixed";
    auto* p = app.add_subcommand("project", "Stage 2 projection of a checkpoint on the evaluation grid");
    add_cell_options(p, pr);
    p->add_option("--checkpoint", pr_ckpt, "Warm policy checkpoint")->required()->check(CLI::ExistingFile);
    p->add_option("--mode", pr_mode, "mixed | decoupled")->check(CLI::IsMember({"mixed", "decoupled"}));

    add_cell_options(app.add_subcommand("distill", "Stage 1 training with interactive distillation"), di);
    add_cell_options(app.add_subcommand("train-ppo", "PPO baseline under the matched budget"), pp);
    add_cell_options(app.add_subcommand("reference", "Analytic decision-time reference for a cell"), rf, false);

    std::string ev_ckpt;
    auto* e = app.add_subcommand("evaluate", "Decision-time RMSE of a checkpoint");
    add_cell_options(e, ev, false);
    e->add_option("--checkpoint", ev_ckpt, "Policy checkpoint")->required()->check(CLI::ExistingFile);

    std::string grid_cfg, grid_out;
    bool dry = false, resume = false;
    auto* rg = app.add_subcommand("run-grid", "Run (method x geometry x s x d x regime) cells");
    rg->add_option("--config", grid_cfg, "Experiment config JSON");
    rg->add_option("--out", grid_out, "Run directory (overrides out_dir)");
    rg->add_flag("--dry-run", dry, "List planned cells only");
    rg->add_flag("--resume", resume, "Skip cells already present in results.csv");

    double kk = 1.0, kxi = 0.25, kb = 1.0, ks2 = 0.04, kP0 = 0.1, kT = 20.0;
    int ksteps = 200000;
    std::uint64_t kseed = 0;
    std::string kout;
    auto* kd = app.add_subcommand("kalman-demo", "Scalar Kalman-Bucy filter and its Riccati limit");
    kd->add_option("--k", kk, "Mean reversion");
    kd->add_option("--xi", kxi, "Factor volatility");
    kd->add_option("--b", kb, "Premium loading");
    kd->add_option("--sigma2", ks2, "Return variance");
    kd->add_option("--P0", kP0, "Initial variance");
    kd->add_option("--T", kT, "Horizon");
    kd->add_option("--steps", ksteps, "Euler steps")->check(CLI::PositiveNumber);
    kd->add_option("--seed", kseed, "Seed for the simulated returns");
    kd->add_option("--out", kout, "Optional CSV of the filter path");

    CLI11_PARSE(app, argc, argv);
    try {
        if (*g) return cmd_generate_market(gen);
        if (app.got_subcommand("train")) return cmd_train(tr);
        if (*p) return cmd_project(pr, pr_ckpt, pr_mode);
        if (app.got_subcommand("distill")) return cmd_distill(di);
        if (app.got_subcommand("train-ppo")) return cmd_train_ppo(pp);
        if (app.got_subcommand("reference")) return cmd_reference(rf);
        if (*e) return cmd_evaluate(ev, ev_ckpt);
        if (*rg) return cmd_run_grid(grid_cfg, grid_out, dry, resume);
        if (*kd) return cmd_kalman_demo(kk, kxi, kb, ks2, kP0, kT, ksteps, kseed, kout);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
