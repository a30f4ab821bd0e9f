#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "stage1.hpp"
#include "stage2.hpp"

namespace ppgdpo {

struct DistillConfig {
    int K_refresh = 250;
    int warmup = 1000;
    int ramp = 500;  // epochs of linear ramp from 0 to lambda_max
    double lambda_max = 1.0;
    double c = 0.5;
    double eps = 1e-8;
    int M_z = 64;
    int minibatch = 32;
    double x_lo = 0.5;  // query wealth, log-uniform on [x_lo, x_hi] at t = 0
    double x_hi = 2.0;
    Stage2Config stage2;
};

inline double lambda_schedule(const DistillConfig& c, int epoch) {
    if (epoch < c.warmup) return 0.0;
    if (c.ramp <= 0) return c.lambda_max;
    return c.lambda_max * std::min(1.0, static_cast<double>(epoch - c.warmup) / c.ramp);
}

struct TeacherEntry {
    QueryState z;
    VectorXd pi_teach;
    ProjectionDiagnostics diag;
    int refresh_epoch = 0;
};

struct TeacherBuffer {
    std::vector<TeacherEntry> entries;
    int capacity = 0;
    ProjectionGates gates;
    std::map<std::string, int> rejected;
    PolicyNet lagged;  // the frozen copy the teacher was built from

    int n_rejected() const {
        int n = 0;
        for (const auto& [k, v] : rejected) n += v;
        return n;
    }
};

inline std::vector<QueryState> sample_query_states(const DistillConfig& c, std::uint64_t seed, int epoch) {
    Stream s(seed, {tag::query, static_cast<std::uint64_t>(epoch)});
    std::vector<QueryState> q(c.M_z);
    const double a = std::log(c.x_lo), b = std::log(c.x_hi);
    for (auto& z : q) z = {0, std::exp(a == b ? a : s.uniform(a, b))};
    return q;
}

/// Freezes phi^- = current parameters, projects at M_z fresh query states and keeps the ones that pass
/// every gate. The buffer is overwritten; teacher actions are plain numbers (no sensitivity).
inline TeacherBuffer refresh_teacher(const PolicyNet& current, const Problem& pb, const DistillConfig& dc,
                                     std::uint64_t seed, int epoch) {
    TeacherBuffer buf;
    buf.capacity = dc.M_z;
    buf.gates = dc.stage2.gates;
    buf.lagged = current;
    Stage2Config s2 = dc.stage2;
    s2.seed = stream_key(seed, {tag::distill, static_cast<std::uint64_t>(epoch)});
    const auto res = run_stage2(buf.lagged, pb, sample_query_states(dc, seed, epoch), s2);
    for (std::size_t i = 0; i < res.rules.size(); ++i) {
        if (res.rules[i].fallback) {
            ++buf.rejected[res.diags[i].reason];
            continue;
        }
        buf.entries.push_back({res.queries[i], res.rules[i].pi, res.diags[i], epoch});
    }
    return buf;
}

/// L = (1/n) sum ||pi_phi(z_i) - pi_teach_i||^2 over the chosen entries and its exact parameter gradient.
inline double distill_loss(const PolicyNet& net, const TeacherBuffer& buf, const std::vector<int>& idx,
                           const RolloutConfig& rc, VectorXd* grad) {
    const int n = static_cast<int>(idx.size());
    if (n == 0) return 0.0;
    const int d = net.n_out();
    MatrixXd in(net.n_in(), n);
    MatrixXd target(d, n);
    for (int c = 0; c < n; ++c) {
        const TeacherEntry& e = buf.entries[idx[c]];
        RowVectorXd x(1);
        x(0) = e.z.x;
        in.col(c) = net.features(rc.time(e.z.k), x, MatrixXd(0, 1)).col(0);
        target.col(c) = e.pi_teach;
    }
    std::vector<MatrixXd> acts;
    const MatrixXd diff = mlp_forward_record(net, in, acts) - target;
    if (grad) mlp_backward(net, acts, (2.0 / n) * diff, *grad);
    return diff.squaredNorm() / n;
}

struct DistillLogRow {
    int epoch = 0;
    double lambda = 0.0;
    double lambda_eff = 0.0;
    double L_main = 0.0;
    double L_distill = 0.0;
    int buffer_size = 0;
    int rejected = 0;
};

/// One ascent step on J - lambda_eff * L_distill with lambda_eff = min(lambda, c |J| / (L_distill + eps)).
/// The distillation minibatch comes from its own stream, so lambda = 0 reproduces pgdpo_step exactly.
inline StepInfo hybrid_step(TrainState& st, const TeacherBuffer& buf, double lambda, const Problem& pb,
                            const TrainConfig& cfg, const DistillConfig& dc, const MatrixXd& F,
                            DistillLogRow* row = nullptr) {
    GradientResult g =
        batch_gradient(st.net, pb, F, cfg.batch_size(), cfg.seed, st.epoch, cfg.theta_mode, cfg.antithetic);
    double lam_eff = 0.0, Ld = 0.0;
    if (lambda > 0.0 && !buf.entries.empty() && g.n_valid > 0) {
        Stream s(cfg.seed, {tag::distill, static_cast<std::uint64_t>(st.epoch), 1});
        std::vector<int> idx(std::min<int>(dc.minibatch, static_cast<int>(buf.entries.size())));
        std::uniform_int_distribution<int> pick(0, static_cast<int>(buf.entries.size()) - 1);
        for (auto& i : idx) i = pick(s.engine());
        VectorXd gd = VectorXd::Zero(st.net.num_params());
        Ld = distill_loss(st.net, buf, idx, pb.rollout, &gd);
        const double cap = dc.c * std::abs(g.J) / (Ld + dc.eps);
        lam_eff = std::min(lambda, cap);
        if (!(lam_eff <= lambda && lam_eff <= cap)) throw std::logic_error("hybrid_step: lambda cap violated");
        g.grad -= lam_eff * gd;
    }
    StepInfo info;
    info.J = g.J;
    info.n_flagged = g.n_flagged;
    const int skips = st.skip_count;
    info.grad_norm = (g.n_valid > 0) ? ascent_update(st, g.grad, cfg) : std::nan("");
    if (g.n_valid == 0) ++st.skip_count;
    info.skipped = st.skip_count > skips;
    st.J_trace.push_back(g.J);
    ++st.epoch;
    st.log.push_back({st.epoch, g.J, info.grad_norm, st.skip_count});
    if (row) *row = {st.epoch, lambda, lam_eff, g.J, Ld, static_cast<int>(buf.entries.size()), buf.n_rejected()};
    return info;
}

struct DistillRun {
    TrainState state;
    std::vector<DistillLogRow> log;
    std::vector<int> refresh_epochs;
};

/// Stage 1 training with periodic teacher refreshes from a lagged copy once warm-up ends.
inline DistillRun distill_train(const Problem& pb, const TrainConfig& cfg, const DistillConfig& dc,
                                const Evaluator& eval = {}, const CheckpointSink& sink = {}) {
    if (dc.K_refresh < 1) throw std::invalid_argument("distill_train: K_refresh must be >= 1");
    DistillRun run;
    TrainState& st = run.state;
    st = init_train_state(pb, cfg);
    const MatrixXd F = psd_factor(pb.theta_law.cov);
    TeacherBuffer buf;
    while (st.epoch < cfg.epochs) {
        const double lam = lambda_schedule(dc, st.epoch);
        if (dc.lambda_max > 0.0 && st.epoch >= dc.warmup && (st.epoch - dc.warmup) % dc.K_refresh == 0) {
            buf = refresh_teacher(st.net, pb, dc, cfg.seed, st.epoch);
            run.refresh_epochs.push_back(st.epoch);
        }
        DistillLogRow row;
        hybrid_step(st, buf, lam, pb, cfg, dc, F, &row);
        run.log.push_back(row);
        if (is_eval_epoch(st.epoch, cfg.eval_every, cfg.epochs))
            st.push_snapshot({st.epoch, st.net, eval ? eval(st.net) : std::nan("")});
        if (sink && cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0) sink(st.epoch, st.net);
    }
    return run;
}

}  // namespace ppgdpo
