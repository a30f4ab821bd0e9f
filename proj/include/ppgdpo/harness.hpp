#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "distill.hpp"
#include "io.hpp"
#include "market.hpp"
#include "parallel.hpp"
#include "ppo.hpp"
#include "reference.hpp"
#include "stage1.hpp"
#include "stage2.hpp"

namespace ppgdpo {

// ---------------------------------------------------------------- metrics

/// N_eval wealth levels, log-spaced on [lo, hi].
inline std::vector<double> eval_grid(int n = 16, double lo = 0.5, double hi = 2.0) {
    if (n < 1 || !(lo > 0.0) || hi < lo) throw std::invalid_argument("eval_grid: need n >= 1 and 0 < lo <= hi");
    std::vector<double> g(n);
    for (int i = 0; i < n; ++i) g[i] = n == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1));
    return g;
}

/// Decision-time actions pi(0, x) on the grid.
inline std::vector<VectorXd> policy_on_grid(const PolicyNet& net, const std::vector<double>& grid) {
    std::vector<VectorXd> out;
    out.reserve(grid.size());
    for (double x : grid) out.push_back(policy_forward(net, 0.0, x));
    return out;
}

inline double decision_rmse(const std::vector<VectorXd>& u, const VectorXd& ref) {
    if (u.empty()) throw std::invalid_argument("decision_rmse: empty grid");
    double s = 0.0;
    for (const auto& v : u) {
        if (v.size() != ref.size())
            throw std::invalid_argument("decision_rmse: action has length " + std::to_string(v.size()) +
                                        ", reference has " + std::to_string(ref.size()));
        s += (v - ref).squaredNorm();
    }
    return std::sqrt(s / u.size());
}

struct TailStat {
    double value = std::nan("");
    int count = 0;
    bool flagged = false;  // fewer values than the window
};

inline TailStat tail_median(const std::vector<double>& v, int window = 6) {
    if (window < 1) throw std::invalid_argument("tail_median: window must be >= 1");
    TailStat t;
    if (v.empty()) {
        t.flagged = true;
        return t;
    }
    const int n = static_cast<int>(v.size());
    t.count = std::min(n, window);
    t.flagged = n < window;
    t.value = median(std::vector<double>(v.end() - t.count, v.end()));
    return t;
}

struct HedgeMetrics {
    double rmse_myo = std::nan("");
    double rmse_hedge = std::nan("");
    double cos_hedge = 0.0;
    bool cos_flag = false;  // a zero vector was met; its cosine counts as 0
};

/// cos_hedge averages cos(pi_eval - pi_myo_ref, pi_hedge_ref) over the grid. Component RMSEs need a
/// projected split (myo, hedge) and stay NaN without one.
inline HedgeMetrics hedging_metrics(const std::vector<VectorXd>& pi_eval, const ReferenceAllocation& ref,
                                    const std::vector<VectorXd>* myo = nullptr,
                                    const std::vector<VectorXd>* hedge = nullptr) {
    if (pi_eval.empty()) throw std::invalid_argument("hedging_metrics: empty grid");
    HedgeMetrics h;
    const double tiny = 1e-12 * std::max(1.0, ref.pi.norm());
    double c = 0.0;
    for (const auto& p : pi_eval) {
        if (p.size() != ref.pi.size()) throw std::invalid_argument("hedging_metrics: dimension mismatch");
        const VectorXd e = p - ref.pi_myopic;
        const double ne = e.norm(), nh = ref.pi_hedge.norm();
        if (ne <= tiny || nh <= tiny) {
            h.cos_flag = true;
            continue;
        }
        c += std::clamp(e.dot(ref.pi_hedge) / (ne * nh), -1.0, 1.0);
    }
    h.cos_hedge = c / pi_eval.size();
    if (myo) h.rmse_myo = decision_rmse(*myo, ref.pi_myopic);
    if (hedge) h.rmse_hedge = decision_rmse(*hedge, ref.pi_hedge);
    return h;
}

// ---------------------------------------------------------------- configuration

enum class Method { stage1, stage1_stage2, stage1_stage2_decoupled, distill, ppo };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::stage1: return "stage1";
        case Method::stage1_stage2: return "stage1+stage2";
        case Method::stage1_stage2_decoupled: return "stage1+stage2-decoupled";
        case Method::distill: return "distill";
        case Method::ppo: return "ppo";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::stage1, Method::stage1_stage2, Method::stage1_stage2_decoupled, Method::distill,
                     Method::ppo})
        if (to_string(m) == s) return m;
    throw std::invalid_argument("unknown method '" + s +
                                "' (expected stage1, stage1+stage2, stage1+stage2-decoupled, distill or ppo)");
}

inline const std::vector<std::string>& all_methods() {
    static const std::vector<std::string> m{"stage1", "stage1+stage2", "stage1+stage2-decoupled", "distill", "ppo"};
    return m;
}

struct EvalConfig {
    int points = 16;
    double x_lo = 0.5;
    double x_hi = 2.0;
    int tail_window = 6;
    int stage2_snapshots = 6;  // trailing snapshots that get a Stage 2 projection
};

struct ExperimentConfig {
    std::string benchmark = "static";  // static | ou
    std::vector<int> dims{5, 10};
    std::vector<std::string> geometries{"aligned", "misaligned"};
    std::vector<double> s_values{1e-3, 1e-2, 1e-1};  // s, or s0 for the OU benchmark
    std::vector<std::string> mc_regimes{"base"};
    std::vector<std::string> methods = all_methods();
    double gamma = 2.0;
    double T = 1.5;
    int N = 100;
    double x0_lo = 0.5;  // training start wealth, uniform
    double x0_hi = 1.5;
    AptScale apt;
    OuParams ou;
    std::uint64_t market_seed = 0;
    std::uint64_t run_seed = 0;
    EvalConfig eval;
    TrainConfig train;
    Stage2Config stage2;
    DistillConfig distill;
    PpoConfig ppo;
    std::string out_dir = "runs/grid";
    int grid_workers = 1;
};

inline int mc_budget(const std::string& regime, int d) {
    if (regime == "base") return 100 * d;
    if (regime == "high") return 400 * d;
    throw std::invalid_argument("unknown mc_regime '" + regime + "' (expected base or high)");
}

inline json to_json(const EvalConfig& e) {
    return {{"points", e.points},
            {"x_lo", e.x_lo},
            {"x_hi", e.x_hi},
            {"tail_window", e.tail_window},
            {"stage2_snapshots", e.stage2_snapshots}};
}

inline void from_json_into(const json& j, EvalConfig& e) {
    get_opt(j, "points", e.points);
    get_opt(j, "x_lo", e.x_lo);
    get_opt(j, "x_hi", e.x_hi);
    get_opt(j, "tail_window", e.tail_window);
    get_opt(j, "stage2_snapshots", e.stage2_snapshots);
}

inline json to_json(const ExperimentConfig& c) {
    return {{"benchmark", c.benchmark},
            {"dims", c.dims},
            {"geometries", c.geometries},
            {"s_values", c.s_values},
            {"mc_regimes", c.mc_regimes},
            {"methods", c.methods},
            {"gamma", c.gamma},
            {"T", c.T},
            {"N", c.N},
            {"x0_lo", c.x0_lo},
            {"x0_hi", c.x0_hi},
            {"apt", to_json(c.apt)},
            {"ou", to_json(c.ou)},
            {"market_seed", c.market_seed},
            {"run_seed", c.run_seed},
            {"eval", to_json(c.eval)},
            {"train", to_json(c.train)},
            {"stage2", to_json(c.stage2)},
            {"distill", to_json(c.distill)},
            {"ppo", to_json(c.ppo)},
            {"out_dir", c.out_dir},
            {"grid_workers", c.grid_workers}};
}

inline void from_json_into(const json& j, ExperimentConfig& c) {
    static const std::set<std::string> known{"benchmark", "dims",    "geometries", "s_values",    "mc_regimes",
                                             "methods",   "gamma",   "T",          "N",           "x0_lo",
                                             "x0_hi",     "apt",     "ou",         "market_seed", "run_seed",
                                             "eval",      "train",   "stage2",     "distill",     "ppo",
                                             "out_dir",   "grid_workers"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw std::invalid_argument("config: unknown key '" + it.key() + "'");
    get_opt(j, "benchmark", c.benchmark);
    get_opt(j, "dims", c.dims);
    get_opt(j, "geometries", c.geometries);
    get_opt(j, "s_values", c.s_values);
    get_opt(j, "mc_regimes", c.mc_regimes);
    get_opt(j, "methods", c.methods);
    get_opt(j, "gamma", c.gamma);
    get_opt(j, "T", c.T);
    get_opt(j, "N", c.N);
    get_opt(j, "x0_lo", c.x0_lo);
    get_opt(j, "x0_hi", c.x0_hi);
    if (j.contains("apt")) from_json_into(j.at("apt"), c.apt);
    if (j.contains("ou")) from_json_into(j.at("ou"), c.ou);
    get_opt(j, "market_seed", c.market_seed);
    get_opt(j, "run_seed", c.run_seed);
    if (j.contains("eval")) from_json_into(j.at("eval"), c.eval);
    if (j.contains("train")) from_json_into(j.at("train"), c.train);
    if (j.contains("stage2")) from_json_into(j.at("stage2"), c.stage2);
    if (j.contains("distill")) from_json_into(j.at("distill"), c.distill);
    if (j.contains("ppo")) from_json_into(j.at("ppo"), c.ppo);
    get_opt(j, "out_dir", c.out_dir);
    get_opt(j, "grid_workers", c.grid_workers);
}

inline void validate(const ExperimentConfig& c) {
    if (c.benchmark != "static" && c.benchmark != "ou")
        throw std::invalid_argument("config: benchmark must be static or ou, got '" + c.benchmark + "'");
    for (int d : c.dims)
        if (d < 1) throw std::invalid_argument("config: dims must be >= 1");
    for (const auto& g : c.geometries) geometry_from_string(g);
    for (double s : c.s_values)
        if (!(s > 0.0)) throw std::invalid_argument("config: s_values must be > 0");
    for (const auto& r : c.mc_regimes) mc_budget(r, 1);
    for (const auto& m : c.methods) method_from_string(m);
    if (!(c.gamma > 1.0)) throw std::invalid_argument("config: gamma must be > 1");
    if (c.N < 1 || !(c.T > 0.0)) throw std::invalid_argument("config: need N >= 1 and T > 0");
    if (c.eval.tail_window < 1 || c.eval.points < 1) throw std::invalid_argument("config: bad eval block");
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    ExperimentConfig c;
    from_json_into(read_json_file(path), c);
    validate(c);
    return c;
}

inline std::string hex64(std::uint64_t h) {
    char b[20];
    std::snprintf(b, sizeof b, "%016llx", static_cast<unsigned long long>(h));
    return b;
}

// ---------------------------------------------------------------- cells

struct CellSpec {
    std::string benchmark;
    int d = 0;
    std::string geometry;
    double s = 0.0;
    std::string mc_regime;

    std::string id() const {
        char b[32];
        std::snprintf(b, sizeof b, "%g", s);
        return benchmark + "_d" + std::to_string(d) + "_" + geometry + "_s" + b + "_" + mc_regime;
    }
};

inline std::vector<CellSpec> plan_cells(const ExperimentConfig& c) {
    std::vector<CellSpec> out;
    for (int d : c.dims)
        for (const auto& g : c.geometries)
            for (double s : c.s_values)
                for (const auto& r : c.mc_regimes) out.push_back({c.benchmark, d, g, s, r});
    return out;
}

/// The single market instance of dimension d; every cell and method of that d shares it.
inline StaticDriftMarket base_market(const ExperimentConfig& c, int d) {
    return gen_apt_market(d, default_factor_count(d), c.apt, c.market_seed);
}

inline std::string market_hash(const ExperimentConfig& c, int d) {
    return hex64(fnv1a_hash(to_json(base_market(c, d)).dump()));
}

/// Everything a cell needs, derived deterministically from (config, cell).
struct CellContext {
    CellSpec spec;
    Problem problem;
    ReferenceAllocation ref;
    json market;  // the cell's market including its latent law
    std::string market_hash;
    json config;
    std::string config_hash;
    std::uint64_t seed = 0;
    TrainConfig train;
    Stage2Config stage2;
    DistillConfig distill;
    PpoConfig ppo;
    std::vector<double> grid;
};

inline CellContext build_cell(const ExperimentConfig& c, const CellSpec& cell) {
    CellContext cx;
    cx.spec = cell;
    cx.seed = stream_key(c.run_seed, {fnv1a_hash(cell.id())});
    const StaticDriftMarket base = base_market(c, cell.d);
    cx.market_hash = hex64(fnv1a_hash(to_json(base).dump()));
    const Geometry geo = geometry_from_string(cell.geometry);
    RolloutConfig rc;
    rc.N = c.N;
    rc.T = c.T;
    InitialStateConfig nu;
    nu.x_lo = c.x0_lo;
    nu.x_hi = c.x0_hi;
    if (cell.benchmark == "static") {
        StaticDriftMarket mk = base;
        mk.q.mean = mk.m;
        mk.q.cov = geo == Geometry::aligned ? build_uncertainty_aligned(mk.Sigma, cell.s)
                                            : build_uncertainty_misaligned(mk, cell.s, c.market_seed);
        mk.validate();
        cx.problem = Problem::static_market(mk, c.gamma, rc, nu);
        cx.ref.pi = static_gaussian_reference(mk.m, mk.Sigma, mk.q.cov, c.gamma, c.T);
        cx.ref.pi_myopic = cx.ref.pi;
        cx.ref.pi_hedge = VectorXd::Zero(cell.d);
        cx.ref.gamma = c.gamma;
        cx.ref.tau = c.T;
        cx.ref.geometry = cell.geometry;
        cx.market = to_json(mk);
    } else {
        OUFactorMarket ou = make_ou_market(base, c.ou);
        ou.q0.cov = build_P0_geometry(ou, cell.s, geo, c.market_seed);
        ou.validate();
        cx.problem = Problem::ou_market(ou, c.gamma, rc, nu);
        cx.ref = ou_reference(ou, ou.q0.cov, ou.q0.mean, c.gamma, c.T, cell.geometry);
        cx.market = to_json(ou);
    }
    const int M = mc_budget(cell.mc_regime, cell.d);
    cx.train = c.train;
    cx.train.mc_budget = M;
    cx.train.seed = cx.seed;
    cx.train.ring = std::max(cx.train.ring, c.eval.tail_window);
    cx.stage2 = c.stage2;
    cx.stage2.n_theta = M + (M % 2);
    cx.distill = c.distill;
    cx.distill.stage2.n_theta = cx.stage2.n_theta;
    cx.ppo = ppo_matched_budget(cx.train, c.ppo);
    cx.ppo.ring = cx.train.ring;
    cx.grid = eval_grid(c.eval.points, c.eval.x_lo, c.eval.x_hi);

    json cj = to_json(c);
    for (const char* k : {"dims", "geometries", "s_values", "mc_regimes", "methods", "out_dir", "grid_workers"})
        cj.erase(k);
    cj["cell"] = {{"d", cell.d}, {"geometry", cell.geometry}, {"s", cell.s}, {"mc_regime", cell.mc_regime}};
    cj["train"] = to_json(cx.train);
    cj["stage2"] = to_json(cx.stage2);
    cj["distill"] = to_json(cx.distill);
    cj["ppo"] = to_json(cx.ppo);
    cx.config = cj;
    cx.config_hash = hex64(fnv1a_hash(cj.dump()));
    return cx;
}

/// Replaces the generated market of a cell with a serialized one (static or OU, latent law included).
inline void use_market_json(CellContext& cx, const ExperimentConfig& c, const json& market) {
    const std::string kind = market.value("kind", "");
    if (kind != cx.spec.benchmark)
        throw std::invalid_argument("market kind '" + kind + "' does not match benchmark '" + cx.spec.benchmark + "'");
    const Problem old = cx.problem;
    if (kind == "static") {
        const StaticDriftMarket mk = static_market_from_json(market);
        cx.problem = Problem::static_market(mk, c.gamma, old.rollout, old.nu);
        cx.ref.pi = static_gaussian_reference(mk.m, mk.Sigma, mk.q.cov, c.gamma, c.T);
        cx.ref.pi_myopic = cx.ref.pi;
        cx.ref.pi_hedge = VectorXd::Zero(mk.d);
    } else {
        const OUFactorMarket ou = ou_market_from_json(market);
        cx.problem = Problem::ou_market(ou, c.gamma, old.rollout, old.nu);
        cx.ref = ou_reference(ou, ou.q0.cov, ou.q0.mean, c.gamma, c.T, cx.spec.geometry);
    }
    cx.spec.d = cx.problem.model.d;
    cx.market = market;
    cx.market_hash = hex64(fnv1a_hash(market.dump()));
}

// ---------------------------------------------------------------- records

struct ExperimentRecord {
    std::string cell;
    std::string benchmark;
    std::string method;
    std::string geometry;
    double s = 0.0;
    int d = 0;
    std::string mc_regime;
    int snapshot_epoch = 0;  // last snapshot of the tail window
    double rmse_full = std::nan("");
    double rmse_myopic = std::nan("");
    double rmse_hedge = std::nan("");
    double cos_hedge = std::nan("");
    bool cos_flag = false;
    int tail_window = 6;
    int n_snapshots = 0;
    bool tail_flag = false;
    int n_fallback = 0;
    std::string diag_ref;
    std::string config_hash;
    std::string market_hash;
    std::uint64_t seed = 0;
    std::string checkpoint_id;
    std::string status = "ok";
};

inline const std::vector<std::string> kResultsHeader{
    "cell",        "benchmark",  "method",     "geometry",    "s",           "d",           "mc_regime",
    "snapshot_epoch", "rmse_full", "rmse_myopic", "rmse_hedge", "cos_hedge", "cos_flag",    "tail_window",
    "n_snapshots", "tail_flag",  "n_fallback", "diag_ref",    "config_hash", "market_hash", "seed",
    "checkpoint_id", "status"};

inline std::vector<CsvCell> record_cells(const ExperimentRecord& r) {
    return {r.cell,
            r.benchmark,
            r.method,
            r.geometry,
            r.s,
            static_cast<long long>(r.d),
            r.mc_regime,
            static_cast<long long>(r.snapshot_epoch),
            r.rmse_full,
            r.rmse_myopic,
            r.rmse_hedge,
            r.cos_hedge,
            static_cast<long long>(r.cos_flag),
            static_cast<long long>(r.tail_window),
            static_cast<long long>(r.n_snapshots),
            static_cast<long long>(r.tail_flag),
            static_cast<long long>(r.n_fallback),
            r.diag_ref,
            r.config_hash,
            r.market_hash,
            std::to_string(r.seed),
            r.checkpoint_id,
            r.status};
}

inline std::string record_line(const ExperimentRecord& r) { return csv_line(record_cells(r)); }

/// Serialized outputs of a run directory; every file has its own lock.
struct RunSinks {
    std::string dir;
    std::unique_ptr<CsvWriter> results, diag, timing;
    std::mutex results_mu, diag_mu, timing_mu;

    RunSinks(const std::string& d, bool append) : dir(d) {
        std::filesystem::create_directories(dir);
        results = std::make_unique<CsvWriter>(dir + "/results.csv", kResultsHeader, append);
        diag = std::make_unique<CsvWriter>(dir + "/stage2_diag.csv", kStage2DiagHeader, append);
        timing = std::make_unique<CsvWriter>(dir + "/timing.csv", std::vector<std::string>{"cell", "method", "seconds"},
                                             append);
    }

    void write(const ExperimentRecord& r) {
        std::lock_guard<std::mutex> lk(results_mu);
        results->row(record_cells(r));
    }
    void write_diag(const std::string& tag, const Stage2Result& res) {
        std::lock_guard<std::mutex> lk(diag_mu);
        append_stage2_diag(*diag, tag, res);
    }
    void write_time(const std::string& cell, const std::string& method, double s) {
        std::lock_guard<std::mutex> lk(timing_mu);
        timing->row({cell, method, s});
    }
};

// ---------------------------------------------------------------- cell execution

struct StageMetrics {
    std::vector<double> rmse, rmse_myo, rmse_hedge, cos;
    int n_fallback = 0;
    bool cos_flag = false;
};

inline ExperimentRecord base_record(const CellContext& cx, Method m, int tail_window) {
    ExperimentRecord r;
    r.cell = cx.spec.id();
    r.benchmark = cx.spec.benchmark;
    r.method = to_string(m);
    r.geometry = cx.spec.geometry;
    r.s = cx.spec.s;
    r.d = cx.spec.d;
    r.mc_regime = cx.spec.mc_regime;
    r.tail_window = tail_window;
    r.config_hash = cx.config_hash;
    r.market_hash = cx.market_hash;
    r.seed = cx.seed;
    return r;
}

inline void fill_tail(ExperimentRecord& r, const StageMetrics& sm, int window, bool hedge) {
    const TailStat t = tail_median(sm.rmse, window);
    r.rmse_full = t.value;
    r.n_snapshots = t.count;
    r.tail_flag = t.flagged;
    r.n_fallback = sm.n_fallback;
    if (hedge) {
        r.cos_hedge = tail_median(sm.cos, window).value;
        r.cos_flag = sm.cos_flag;
        if (!sm.rmse_myo.empty()) r.rmse_myopic = tail_median(sm.rmse_myo, window).value;
        if (!sm.rmse_hedge.empty()) r.rmse_hedge = tail_median(sm.rmse_hedge, window).value;
    }
}

/// Network-output metrics over snapshots (Stage 1, distilled, PPO rows).
inline StageMetrics snapshot_metrics(const std::deque<Snapshot>& ring, const CellContext& cx) {
    StageMetrics sm;
    for (const auto& s : ring) {
        const auto u = policy_on_grid(s.net, cx.grid);
        sm.rmse.push_back(decision_rmse(u, cx.ref.pi));
        const HedgeMetrics h = hedging_metrics(u, cx.ref);
        sm.cos.push_back(h.cos_hedge);
        sm.cos_flag |= h.cos_flag;
    }
    return sm;
}

inline std::string checkpoint_path(const std::string& dir, const std::string& cell, const std::string& method,
                                   int epoch) {
    return dir + "/checkpoints/" + cell + "/" + method + "_e" + std::to_string(epoch) + ".json";
}

inline std::string checkpoint_id(const std::string& cell, const std::string& method, int epoch) {
    return cell + "/" + method + "_e" + std::to_string(epoch);
}

inline void save_ring(const std::deque<Snapshot>& ring, const std::string& dir, const std::string& cell,
                      const std::string& method) {
    if (dir.empty()) return;
    for (const auto& s : ring) write_json_file(checkpoint_path(dir, cell, method, s.epoch), checkpoint_json(s.net, s.epoch));
}

/// Stage 2 at each trailing snapshot of a Stage 1 run. Both aggregation modes reuse one set of costate
/// estimates per snapshot.
inline std::map<Method, StageMetrics> stage2_metrics(const std::deque<Snapshot>& ring, const CellContext& cx,
                                                     const std::vector<Method>& modes, int n_snap, RunSinks* sinks) {
    std::map<Method, StageMetrics> out;
    std::vector<QueryState> queries;
    for (double x : cx.grid) queries.push_back({0, x});
    const int start = std::max(0, static_cast<int>(ring.size()) - n_snap);
    for (int i = start; i < static_cast<int>(ring.size()); ++i) {
        const Snapshot& snap = ring[i];
        Stage2Config s2 = cx.stage2;
        s2.seed = stream_key(cx.seed, {tag::costate, static_cast<std::uint64_t>(snap.epoch)});
        std::vector<QueryEstimates> est;
        stage2_inputs(snap.net, cx.problem, queries, s2, &est);
        for (Method m : modes) {
            s2.mode = m == Method::stage1_stage2 ? AggregationMode::mixed : AggregationMode::decoupled;
            const Stage2Result res = project_estimates(snap.net, cx.problem, queries, est, s2);
            std::vector<VectorXd> pi, myo, hedge;
            for (const auto& r : res.rules) {
                pi.push_back(r.pi);
                myo.push_back(r.pi_myo);
                hedge.push_back(r.pi_hedge);
            }
            StageMetrics& sm = out[m];
            sm.rmse.push_back(decision_rmse(pi, cx.ref.pi));
            const HedgeMetrics h = hedging_metrics(pi, cx.ref, &myo, &hedge);
            sm.rmse_myo.push_back(h.rmse_myo);
            sm.rmse_hedge.push_back(h.rmse_hedge);
            sm.cos.push_back(h.cos_hedge);
            sm.cos_flag |= h.cos_flag;
            sm.n_fallback += res.summary.n_fallback;
            if (sinks) sinks->write_diag(cx.spec.id() + "/" + to_string(m) + "_e" + std::to_string(snap.epoch), res);
        }
    }
    return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Runs every requested method of one cell. A failing method yields a row with status "failed: ..."
/// and the remaining methods still run.
inline std::vector<ExperimentRecord> run_cell(const ExperimentConfig& c, const CellSpec& cell, RunSinks* sinks = nullptr) {
    std::vector<Method> methods;
    for (const auto& m : c.methods) methods.push_back(method_from_string(m));
    const int W = c.eval.tail_window;
    const bool hedge = cell.benchmark == "ou";
    const std::string dir = sinks ? sinks->dir : "";
    std::vector<ExperimentRecord> rows;

    CellContext cx;
    try {
        cx = build_cell(c, cell);
    } catch (const std::exception& e) {
        for (Method m : methods) {
            ExperimentRecord r;
            r.cell = cell.id();
            r.benchmark = cell.benchmark;
            r.method = to_string(m);
            r.geometry = cell.geometry;
            r.s = cell.s;
            r.d = cell.d;
            r.mc_regime = cell.mc_regime;
            r.status = std::string("failed: ") + e.what();
            rows.push_back(r);
        }
        if (sinks)
            for (const auto& r : rows) sinks->write(r);
        return rows;
    }
    if (!dir.empty()) {
        write_json_file(dir + "/cells/" + cell.id() + "/market.json", cx.market);
        write_json_file(dir + "/cells/" + cell.id() + "/config.json", cx.config);
    }
    auto emit = [&](ExperimentRecord r) {
        if (sinks) sinks->write(r);
        rows.push_back(std::move(r));
    };
    auto fail = [&](Method m, const std::string& what) {
        ExperimentRecord r = base_record(cx, m, W);
        r.status = "failed: " + what;
        emit(r);
    };
    auto has = [&](Method m) { return std::find(methods.begin(), methods.end(), m) != methods.end(); };

    const bool need_s1 = has(Method::stage1) || has(Method::stage1_stage2) || has(Method::stage1_stage2_decoupled);
    if (need_s1) {
        std::vector<Method> s2_modes;
        for (Method m : {Method::stage1_stage2, Method::stage1_stage2_decoupled})
            if (has(m)) s2_modes.push_back(m);
        try {
            auto t0 = std::chrono::steady_clock::now();
            const auto rmse_eval = [&](const PolicyNet& n) { return decision_rmse(policy_on_grid(n, cx.grid), cx.ref.pi); };
            const TrainState st = train(cx.problem, cx.train, rmse_eval);
            if (sinks) sinks->write_time(cell.id(), "stage1", seconds_since(t0));
            if (!dir.empty()) {
                write_train_log(dir + "/cells/" + cell.id() + "/train_log.csv", st.log);
                save_ring(st.ring, dir, cell.id(), "stage1");
            }
            const int last = st.ring.empty() ? 0 : st.ring.back().epoch;
            if (has(Method::stage1)) {
                ExperimentRecord r = base_record(cx, Method::stage1, W);
                fill_tail(r, snapshot_metrics(st.ring, cx), W, hedge);
                r.snapshot_epoch = last;
                r.checkpoint_id = checkpoint_id(cell.id(), "stage1", last);
                emit(r);
            }
            if (!s2_modes.empty()) {
                try {
                    t0 = std::chrono::steady_clock::now();
                    const auto sm = stage2_metrics(st.ring, cx, s2_modes, c.eval.stage2_snapshots, sinks);
                    if (sinks) sinks->write_time(cell.id(), "stage2", seconds_since(t0));
                    for (Method m : s2_modes) {
                        ExperimentRecord r = base_record(cx, m, W);
                        fill_tail(r, sm.at(m), W, hedge);
                        r.snapshot_epoch = last;
                        r.checkpoint_id = checkpoint_id(cell.id(), "stage1", last);
                        r.diag_ref = "stage2_diag.csv#" + cell.id() + "/" + to_string(m);
                        emit(r);
                    }
                } catch (const std::exception& e) {
                    for (Method m : s2_modes) fail(m, e.what());
                }
            }
        } catch (const std::exception& e) {
            for (Method m : {Method::stage1, Method::stage1_stage2, Method::stage1_stage2_decoupled})
                if (has(m)) fail(m, e.what());
        }
    }
    if (has(Method::distill)) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            const DistillRun run = distill_train(cx.problem, cx.train, cx.distill);
            if (sinks) sinks->write_time(cell.id(), "distill", seconds_since(t0));
            if (!dir.empty()) {
                write_distill_log(dir + "/cells/" + cell.id() + "/distill_log.csv", run.log);
                save_ring(run.state.ring, dir, cell.id(), "distill");
            }
            ExperimentRecord r = base_record(cx, Method::distill, W);
            fill_tail(r, snapshot_metrics(run.state.ring, cx), W, hedge);
            r.snapshot_epoch = run.state.ring.empty() ? 0 : run.state.ring.back().epoch;
            r.checkpoint_id = checkpoint_id(cell.id(), "distill", r.snapshot_epoch);
            emit(r);
        } catch (const std::exception& e) {
            fail(Method::distill, e.what());
        }
    }
    if (has(Method::ppo)) {
        try {
            const auto t0 = std::chrono::steady_clock::now();
            const PpoState st = ppo_train(cx.problem, cx.ppo);
            if (sinks) sinks->write_time(cell.id(), "ppo", seconds_since(t0));
            if (!dir.empty()) {
                write_ppo_log(dir + "/cells/" + cell.id() + "/ppo_log.csv", st.log);
                save_ring(st.ring, dir, cell.id(), "ppo");
            }
            ExperimentRecord r = base_record(cx, Method::ppo, W);
            fill_tail(r, snapshot_metrics(st.ring, cx), W, hedge);
            r.snapshot_epoch = st.ring.empty() ? 0 : st.ring.back().epoch;
            r.checkpoint_id = checkpoint_id(cell.id(), "ppo", r.snapshot_epoch);
            emit(r);
        } catch (const std::exception& e) {
            fail(Method::ppo, e.what());
        }
    }
    return rows;
}

// ---------------------------------------------------------------- grid

struct GridOptions {
    bool dry_run = false;
    bool resume = false;
};

struct GridReport {
    std::vector<CellSpec> planned;
    std::vector<std::string> skipped;  // cells already complete on resume
    std::vector<ExperimentRecord> records;
};

/// Cells whose every requested method already has a row in results.csv.
inline std::set<std::string> completed_cells(const std::string& dir, const std::vector<std::string>& methods) {
    const auto [header, rows] = read_csv(dir + "/results.csv");
    std::map<std::string, std::set<std::string>> seen;
    if (header.size() < 3 || header[0] != "cell") return {};
    for (const auto& r : rows)
        if (r.size() == header.size()) seen[r[0]].insert(r[2]);
    std::set<std::string> done;
    for (const auto& [cell, ms] : seen) {
        bool all = true;
        for (const auto& m : methods) all = all && ms.count(m);
        if (all) done.insert(cell);
    }
    return done;
}

inline GridReport run_grid(const ExperimentConfig& c, const GridOptions& opt = {}) {
    validate(c);
    GridReport rep;
    rep.planned = plan_cells(c);
    if (opt.dry_run) return rep;
    std::filesystem::create_directories(c.out_dir);
    std::set<std::string> done;
    if (opt.resume) done = completed_cells(c.out_dir, c.methods);
    write_json_file(c.out_dir + "/config.json", to_json(c));
    std::set<int> dims(c.dims.begin(), c.dims.end());
    for (int d : dims)
        write_json_file(c.out_dir + "/markets/d" + std::to_string(d) + ".json", to_json(base_market(c, d)));
    RunSinks sinks(c.out_dir, opt.resume);
    std::vector<CellSpec> todo;
    for (const auto& cell : rep.planned) {
        if (done.count(cell.id()))
            rep.skipped.push_back(cell.id());
        else
            todo.push_back(cell);
    }
    std::vector<std::vector<ExperimentRecord>> out(todo.size());
    parallel_for(
        static_cast<int>(todo.size()), [&](int i) { out[i] = run_cell(c, todo[i], &sinks); }, c.grid_workers);
    for (auto& v : out)
        for (auto& r : v) rep.records.push_back(std::move(r));
    return rep;
}

}  // namespace ppgdpo
