#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "adjoint.hpp"
#include "parallel.hpp"
#include "stage1.hpp"

namespace ppgdpo {

/// Decision state where the projection is evaluated: grid step k and wealth x.
struct QueryState {
    int k = 0;
    double x = 1.0;
};

inline double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    const std::size_t n = v.size(), h = n / 2;
    std::nth_element(v.begin(), v.begin() + h, v.end());
    if (n % 2 == 1) return v[h];
    const double hi = v[h];
    const double lo = *std::max_element(v.begin(), v.begin() + h);
    return 0.5 * (lo + hi);
}

/// Linear-interpolation quantile, q in [0, 1].
inline double quantile(std::vector<double> v, double q) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const double pos = q * (v.size() - 1);
    const std::size_t i = static_cast<std::size_t>(std::floor(pos));
    if (i + 1 >= v.size()) return v.back();
    return v[i] + (pos - i) * (v[i + 1] - v[i]);
}

/// Median of `blocks` contiguous block means; plain mean when fewer samples than blocks.
inline double median_of_means(const std::vector<double>& v, int blocks) {
    const std::size_t n = v.size();
    if (n == 0) return std::nan("");
    if (blocks <= 1 || n < static_cast<std::size_t>(blocks)) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / n;
    }
    std::vector<double> means(blocks);
    for (int b = 0; b < blocks; ++b) {
        const std::size_t lo = n * b / blocks, hi = n * (b + 1) / blocks;
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) s += v[i];
        means[b] = s / (hi - lo);
    }
    return median(means);
}

/// Costate estimate at one query state under one frozen latent draw.
struct CostateEstimate {
    VectorXd theta;
    VectorXd b;  // drift b(y, theta) at the query state
    double p = 0.0;
    double p_x = 0.0;
    VectorXd p_y;
    double se_p = 0.0;
    int n_used = 0;
    int n_flagged = 0;
    bool unreliable = false;
};

/// All per-theta estimates at one query, plus the raw per-trajectory (p, x p_x) pairs for diagnostics.
struct QueryEstimates {
    QueryState z;
    std::vector<CostateEstimate> per_theta;
    std::vector<double> p_raw;
    std::vector<double> den_raw;
};

enum class AggregationMode { mixed, decoupled };

inline std::string to_string(AggregationMode m) { return m == AggregationMode::mixed ? "mixed" : "decoupled"; }

struct ProjectionGates {
    double cond_max = 1e8;
    double bad_sign_max = 0.2;
    double residual_mult = 10.0;
};

struct Stage2Config {
    int n_theta = 500;
    int n_mc = 1;
    bool antithetic = true;  // (theta, -theta) pairs share their Brownian paths
    AggregationMode mode = AggregationMode::mixed;
    int blocks = 8;
    std::uint64_t seed = 0;
    double ridge_rel = 1e-6;  // lambda = ridge_rel * tr(A) / d
    double unreliable_frac = 0.05;
    ProjectionGates gates;
};

/// Runs the warm policy from each query under every (theta, mc) pair and collects pathwise costates.
/// noise_pair[i] selects the Brownian streams of draw i.
inline std::vector<QueryEstimates> estimate_query_costates(const PolicyNet& net, const Problem& pb,
                                                           const std::vector<QueryState>& queries,
                                                           const std::vector<VectorXd>& thetas,
                                                           const std::vector<std::uint64_t>& noise_pair, int n_mc,
                                                           std::uint64_t seed, int blocks, double unreliable_frac) {
    if (thetas.empty()) throw std::invalid_argument("estimate_costates: empty theta set");
    if (noise_pair.size() != thetas.size()) throw std::invalid_argument("estimate_costates: noise pairing length");
    if (n_mc < 1) throw std::invalid_argument("estimate_costates: n_mc must be >= 1");
    const SimModel& model = pb.model;
    const RolloutConfig& cfg = pb.rollout;
    const int nth = static_cast<int>(thetas.size());
    const int per_q = nth * n_mc;
    const int nchunks = (per_q + kChunk - 1) / kChunk;
    const int Q = static_cast<int>(queries.size());
    std::vector<CostateBlocks> parts(static_cast<std::size_t>(Q) * nchunks);
    parallel_for(Q * nchunks, [&](int task) {
        const int q = task / nchunks, c = task % nchunks;
        const QueryState& z = queries[q];
        if (z.k < 0 || z.k > cfg.N) throw std::invalid_argument("estimate_costates: query step out of range");
        if (!(z.x > 0.0)) throw std::invalid_argument("estimate_costates: query wealth must be > 0");
        const int j0 = c * kChunk, j1 = std::min(per_q, j0 + kChunk), n = j1 - j0;
        MatrixXd drift = MatrixXd::Zero(model.d, n), y0 = MatrixXd::Zero(model.m, n);
        std::vector<std::uint64_t> keys(n);
        for (int col = j0; col < j1; ++col) {
            const int i = col / n_mc, j = col % n_mc;
            pb.place_theta(thetas[i], drift, y0, col - j0);
            keys[col - j0] = stream_key(seed, {tag::costate, noise_pair[i], static_cast<std::uint64_t>(j)});
        }
        const auto dZ = make_noise(model, cfg.N - z.k, cfg.dt(), keys, {});
        parts[task] = costate_blocks_from(net, model, cfg, z.k, RowVectorXd::Constant(n, z.x), y0, drift, dZ);
    });

    std::vector<QueryEstimates> out(Q);
    for (int q = 0; q < Q; ++q) {
        QueryEstimates& qe = out[q];
        qe.z = queries[q];
        const double x = queries[q].x;
        for (int i = 0; i < nth; ++i) {
            std::vector<double> p, px;
            std::vector<std::vector<double>> py(model.m);
            CostateEstimate e;
            e.theta = thetas[i];
            MatrixXd dcol = MatrixXd::Zero(model.d, 1), ycol = MatrixXd::Zero(model.m, 1);
            pb.place_theta(thetas[i], dcol, ycol, 0);
            e.b = dcol.col(0) + model.B * ycol.col(0);
            for (int j = 0; j < n_mc; ++j) {
                const int col = i * n_mc + j;
                const CostateBlocks& cb = parts[static_cast<std::size_t>(q) * nchunks + col / kChunk];
                const Index jj = col % kChunk;
                if (cb.flags[jj] != flag_ok) {
                    ++e.n_flagged;
                    continue;
                }
                p.push_back(cb.p(jj));
                px.push_back(cb.p_x(jj));
                for (int a = 0; a < model.m; ++a) py[a].push_back(cb.p_y(a, jj));
                qe.p_raw.push_back(cb.p(jj));
                qe.den_raw.push_back(x * cb.p_x(jj));
            }
            e.n_used = static_cast<int>(p.size());
            e.unreliable = e.n_flagged > unreliable_frac * n_mc;
            e.p_y = VectorXd::Zero(model.m);
            if (e.n_used > 0) {
                e.p = median_of_means(p, blocks);
                e.p_x = median_of_means(px, blocks);
                for (int a = 0; a < model.m; ++a) e.p_y(a) = median_of_means(py[a], blocks);
                if (e.n_used > 1) {
                    double mu = 0.0, ss = 0.0;
                    for (double v : p) mu += v;
                    mu /= e.n_used;
                    for (double v : p) ss += (v - mu) * (v - mu);
                    e.se_p = std::sqrt(ss / (e.n_used - 1) / e.n_used);
                }
            }
            qe.per_theta.push_back(std::move(e));
        }
    }
    return out;
}

/// Single-state form.
inline CostateEstimate estimate_costates(const PolicyNet& net, const Problem& pb, const QueryState& z,
                                         const VectorXd& theta, int n_mc, std::uint64_t seed, int blocks = 8,
                                         double unreliable_frac = 0.05) {
    return estimate_query_costates(net, pb, {z}, {theta}, {0}, n_mc, seed, blocks, unreliable_frac)[0].per_theta[0];
}

/// Aggregated stationarity ingredients: A pi + G = 0 at the projected rule. G = G_myo + G_hedge.
struct ProjectionInputs {
    MatrixXd A;
    VectorXd G;
    VectorXd G_myo;
    VectorXd G_hedge;
    int n_theta = 0;
    int n_mc = 0;
    AggregationMode mode = AggregationMode::mixed;
};

inline ProjectionInputs aggregate_inputs(const QueryEstimates& qe, AggregationMode mode, const SimModel& model,
                                         int n_mc = 1) {
    std::vector<const CostateEstimate*> use;
    for (const auto& e : qe.per_theta)
        if (e.n_used > 0) use.push_back(&e);
    if (use.empty()) throw std::invalid_argument("aggregate_inputs: empty theta set");
    const double n = static_cast<double>(use.size());
    const int d = model.d, m = model.m;
    const double x = qe.z.x;
    double mp = 0.0, mpx = 0.0;
    VectorXd mb = VectorXd::Zero(d), mpb = VectorXd::Zero(d), mpy = VectorXd::Zero(m);
    for (const auto* e : use) {
        mp += e->p;
        mpx += e->p_x;
        mb += e->b;
        mpb += e->p * e->b;
        mpy += e->p_y;
    }
    mp /= n;
    mpx /= n;
    mb /= n;
    mpb /= n;
    mpy /= n;
    ProjectionInputs in;
    in.n_theta = static_cast<int>(use.size());
    in.n_mc = n_mc;
    in.mode = mode;
    // Sigma is theta-invariant here, so both modes share the curvature term.
    in.A = x * mpx * model.Sigma;
    in.G_myo = (mode == AggregationMode::mixed) ? mpb : VectorXd(mp * mb);
    in.G_hedge = (m > 0) ? VectorXd(model.Sigma_SY() * mpy) : VectorXd::Zero(d);
    in.G = in.G_myo + in.G_hedge;
    return in;
}

struct ProjectionDiagnostics {
    double residual_norm = 0.0;
    double denom_q50 = 0.0;
    double kappa_med = std::nan("");
    double bad_sign_frac = 0.0;
    double cond_A = 0.0;
    bool skipped = false;
    std::string reason;
};

/// kappa = -p / (x p_x) per sample, denominator floored at 1e-8 of its median magnitude.
inline void fill_sample_diagnostics(const QueryEstimates& qe, ProjectionDiagnostics& dg) {
    const std::size_t n = qe.den_raw.size();
    if (n == 0) return;
    std::vector<double> mag(n);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mag[i] = std::abs(qe.den_raw[i]);
        if (qe.den_raw[i] >= 0.0) ++bad;
    }
    dg.denom_q50 = median(mag);
    dg.bad_sign_frac = static_cast<double>(bad) / n;
    const double floor = 1e-8 * dg.denom_q50;
    std::vector<double> kap(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double den = qe.den_raw[i];
        const double f = (den < 0.0 ? -1.0 : 1.0) * std::max(std::abs(den), floor);
        kap[i] = (f != 0.0) ? -qe.p_raw[i] / f : 0.0;
    }
    dg.kappa_med = median(kap);
}

struct ProjectedRule {
    VectorXd pi;
    VectorXd pi_myo;    // -A_lambda^{-1} G_myo
    VectorXd pi_hedge;  // -A_lambda^{-1} G_hedge
    bool fallback = false;
    double lambda = 0.0;
    double solve_residual = 0.0;
};

inline double default_ridge(const MatrixXd& A, double rel) { return rel * A.trace() / A.rows(); }

/// Residual-form projection pi = pi_warm - (A + lambda I)^{-1} (A pi_warm + G). Any failed gate, or a
/// singular system, returns the warm action. residual_gate <= 0 disables the residual gate.
inline std::pair<ProjectedRule, ProjectionDiagnostics> project(const ProjectionInputs& in, const VectorXd& pi_warm,
                                                               double lambda, const ProjectionGates& gates,
                                                               ProjectionDiagnostics dg = {},
                                                               double residual_gate = 0.0) {
    const Index d = in.A.rows();
    if (pi_warm.size() != d || in.G.size() != d) throw std::invalid_argument("project: dimension mismatch");
    ProjectedRule rule;
    rule.pi = pi_warm;
    rule.pi_myo = VectorXd::Zero(d);
    rule.pi_hedge = VectorXd::Zero(d);
    rule.lambda = lambda;
    const VectorXd r = in.A * pi_warm + in.G;
    dg.residual_norm = r.norm();
    auto fall = [&](const std::string& why) {
        rule.fallback = true;
        dg.skipped = true;
        dg.reason = why;
        return std::make_pair(rule, dg);
    };
    if (!in.A.allFinite() || !in.G.allFinite() || !pi_warm.allFinite()) return fall("non-finite inputs");
    const MatrixXd Al = in.A + lambda * MatrixXd::Identity(d, d);
    dg.cond_A = condition_number(Al);
    if (!(dg.cond_A <= gates.cond_max)) return fall("condition");
    if (dg.bad_sign_frac > gates.bad_sign_max) return fall("bad sign");
    if (residual_gate > 0.0 && dg.residual_norm > residual_gate) return fall("residual");
    const Eigen::FullPivLU<MatrixXd> lu(Al);
    if (!lu.isInvertible()) return fall("singular");
    const VectorXd delta = lu.solve(r);
    if (!delta.allFinite()) return fall("singular");
    rule.pi = pi_warm - delta;
    rule.pi_myo = -lu.solve(in.G_myo);
    rule.pi_hedge = -lu.solve(in.G_hedge);
    rule.solve_residual = (Al * delta - r).norm();
    return {rule, dg};
}

/// Direct form -(A + lambda I)^{-1} G.
inline VectorXd project_direct(const ProjectionInputs& in, double lambda) {
    const Index d = in.A.rows();
    return -(in.A + lambda * MatrixXd::Identity(d, d)).fullPivLu().solve(in.G);
}

struct Stage2Summary {
    double residual_q10 = 0.0;
    double residual_q50 = 0.0;
    double residual_q90 = 0.0;
    double denom_q50 = 0.0;
    double kappa_med = std::nan("");
    double bad_sign_frac = 0.0;
    double cond_max = 0.0;
    int n_fallback = 0;
    int n_unreliable = 0;
    int n_queries = 0;
};

struct Stage2Result {
    std::vector<QueryState> queries;
    std::vector<QueryEstimates> estimates;
    std::vector<ProjectionInputs> inputs;
    std::vector<ProjectedRule> rules;
    std::vector<ProjectionDiagnostics> diags;
    Stage2Summary summary;
};

/// Latent draws and their noise pairing for one Stage 2 run.
inline void stage2_draws(const Problem& pb, const Stage2Config& cfg, std::vector<VectorXd>& thetas,
                         std::vector<std::uint64_t>& pair) {
    Stream rng(cfg.seed, {tag::theta});
    const auto draws = sample_theta(pb.theta_law, cfg.n_theta, cfg.antithetic, rng);
    thetas.clear();
    pair.clear();
    for (int i = 0; i < cfg.n_theta; ++i) {
        thetas.push_back(draws[i].value);
        pair.push_back(cfg.antithetic ? static_cast<std::uint64_t>(*draws[i].antithetic_pair_id)
                                      : static_cast<std::uint64_t>(i));
    }
}

inline std::vector<ProjectionInputs> stage2_inputs(const PolicyNet& warm, const Problem& pb,
                                                   const std::vector<QueryState>& queries, const Stage2Config& cfg,
                                                   std::vector<QueryEstimates>* keep = nullptr) {
    std::vector<VectorXd> thetas;
    std::vector<std::uint64_t> pair;
    stage2_draws(pb, cfg, thetas, pair);
    auto est = estimate_query_costates(warm, pb, queries, thetas, pair, cfg.n_mc, cfg.seed, cfg.blocks,
                                       cfg.unreliable_frac);
    std::vector<ProjectionInputs> in;
    for (const auto& qe : est) in.push_back(aggregate_inputs(qe, cfg.mode, pb.model, cfg.n_mc));
    if (keep) *keep = std::move(est);
    return in;
}

/// Aggregates, projects and summarizes precomputed per-query estimates (cfg.mode picks the aggregation).
inline Stage2Result project_estimates(const PolicyNet& warm, const Problem& pb, const std::vector<QueryState>& queries,
                                      std::vector<QueryEstimates> estimates, const Stage2Config& cfg) {
    Stage2Result res;
    res.queries = queries;
    res.estimates = std::move(estimates);
    for (const auto& qe : res.estimates) res.inputs.push_back(aggregate_inputs(qe, cfg.mode, pb.model, cfg.n_mc));
    const int Q = static_cast<int>(queries.size());
    std::vector<VectorXd> warm_pi(Q);
    std::vector<double> rn(Q);
    for (int q = 0; q < Q; ++q) {
        warm_pi[q] = policy_forward(warm, pb.rollout.time(queries[q].k), queries[q].x);
        rn[q] = (res.inputs[q].A * warm_pi[q] + res.inputs[q].G).norm();
    }
    const double gate = cfg.gates.residual_mult * median(rn);
    Stage2Summary& s = res.summary;
    s.n_queries = Q;
    std::vector<double> kap, den;
    double bad = 0.0;
    for (int q = 0; q < Q; ++q) {
        ProjectionDiagnostics dg;
        fill_sample_diagnostics(res.estimates[q], dg);
        const double lam = default_ridge(res.inputs[q].A, cfg.ridge_rel);
        auto [rule, d2] = project(res.inputs[q], warm_pi[q], lam, cfg.gates, dg, gate > 0.0 ? gate : 0.0);
        s.n_fallback += rule.fallback;
        for (const auto& e : res.estimates[q].per_theta) s.n_unreliable += e.unreliable;
        kap.push_back(d2.kappa_med);
        den.push_back(d2.denom_q50);
        bad += d2.bad_sign_frac;
        s.cond_max = std::max(s.cond_max, d2.cond_A);
        res.rules.push_back(std::move(rule));
        res.diags.push_back(std::move(d2));
    }
    s.residual_q10 = quantile(rn, 0.1);
    s.residual_q50 = quantile(rn, 0.5);
    s.residual_q90 = quantile(rn, 0.9);
    s.kappa_med = median(kap);
    s.denom_q50 = median(den);
    s.bad_sign_frac = Q ? bad / Q : 0.0;
    return res;
}

/// Full Stage 2 pass: estimate, aggregate and project at every query, then summarize.
inline Stage2Result run_stage2(const PolicyNet& warm, const Problem& pb, const std::vector<QueryState>& queries,
                               const Stage2Config& cfg) {
    std::vector<QueryEstimates> est;
    stage2_inputs(warm, pb, queries, cfg, &est);
    return project_estimates(warm, pb, queries, std::move(est), cfg);
}

/// Empirical proxy for the projection-input error between two estimates over the same queries:
/// root-mean-square Frobenius distance of A and Euclidean distance of G.
struct DeltaReport {
    double a_term = 0.0;
    double g_term = 0.0;
    double total() const { return a_term + g_term; }
};

inline DeltaReport delta_bptt_report(const std::vector<ProjectionInputs>& a, const std::vector<ProjectionInputs>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("delta_bptt_report: query sets differ");
    DeltaReport r;
    for (std::size_t i = 0; i < a.size(); ++i) {
        r.a_term += (a[i].A - b[i].A).squaredNorm();
        r.g_term += (a[i].G - b[i].G).squaredNorm();
    }
    r.a_term = std::sqrt(r.a_term / a.size());
    r.g_term = std::sqrt(r.g_term / a.size());
    return r;
}

}  // namespace ppgdpo
