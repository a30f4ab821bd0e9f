#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "jet.hpp"
#include "linalg.hpp"
#include "policy.hpp"
#include "simulator.hpp"

namespace ppgdpo {

/// Forward record of one batched rollout: everything the adjoint sweep needs.
struct Tape {
    int k0 = 0;
    double dt = 0.0;
    std::vector<std::vector<MatrixXd>> acts;  // per step: MLP activations
    std::vector<MatrixXd> v;                  // per step: b dt + sigma dW, d x M
    std::vector<RowVectorXd> g;               // per step: wealth growth factor
    std::vector<RowVectorXd> X;               // steps + 1 entries
    RowVectorXd utility;
    std::vector<std::uint8_t> flags;
    int n_clamped = 0;
    int n_nonfinite = 0;
};

inline Tape record_tape(const PolicyNet& net, const SimModel& model, const RolloutBatch& b, const RolloutConfig& cfg) {
    check_batch(model, cfg, b);
    if (net.n_out() != model.d) throw std::invalid_argument("record_tape: policy output size differs from d");
    const double dt = cfg.dt();
    const Index M = b.size();
    const int d = model.d, m = model.m;
    Tape tp;
    tp.k0 = b.k0;
    tp.dt = dt;
    tp.flags.assign(M, flag_ok);
    tp.X.push_back(b.x0);
    const int steps = cfg.N - b.k0;
    tp.acts.resize(steps);
    tp.v.resize(steps);
    tp.g.resize(steps);
    MatrixXd Y = b.y0;
    const MatrixXd Ystep = MatrixXd::Identity(m, m) - model.K * dt;
    const VectorXd ypull = model.K * model.ybar * dt;
    for (int j = 0; j < steps; ++j) {
        const int k = b.k0 + j;
        const MatrixXd& Z = b.dZ[j];
        const RowVectorXd& X = tp.X.back();
        const MatrixXd pi = mlp_forward_record(net, net.features(cfg.time(k), X, Y), tp.acts[j]);
        MatrixXd v = dt * b.drift + model.sigma * Z.topRows(d);
        if (m > 0) v.noalias() += dt * (model.B * Y);
        RowVectorXd g = (pi.cwiseProduct(v)).colwise().sum();
        g.array() += 1.0 + model.r * dt;
        RowVectorXd Xn = X.cwiseProduct(g);
        guard_wealth(Xn, X, tp.flags, cfg.clamp_logx, tp.n_clamped, tp.n_nonfinite);
        if (m > 0) {
            MatrixXd Yn = Ystep * Y;
            Yn.colwise() += ypull;
            Yn.noalias() += model.Xi * Z.bottomRows(m);
            Y = std::move(Yn);
        }
        tp.v[j] = std::move(v);
        tp.g[j] = std::move(g);
        tp.X.push_back(std::move(Xn));
    }
    tp.utility.resize(M);
    for (Index j = 0; j < M; ++j) tp.utility(j) = crra(tp.X.back()(j), model.gamma);
    return tp;
}

struct GradientResult {
    VectorXd grad;        // d mean(U) / d phi over retained episodes
    double J = 0.0;       // mean terminal utility over retained episodes
    int n_valid = 0;
    int n_flagged = 0;
    RowVectorXd utility;
};

/// Adjoint sweep on a recorded tape. Flagged episodes get zero weight. Each retained episode is
/// weighted by 1/norm, or 1/n_valid when norm <= 0; J stays the retained-episode mean either way.
inline GradientResult tape_adjoint(const PolicyNet& net, const SimModel& model, const Tape& tp, double norm = 0.0) {
    const Index M = tp.utility.size();
    GradientResult res;
    res.utility = tp.utility;
    res.grad = VectorXd::Zero(net.num_params());
    RowVectorXd w = RowVectorXd::Zero(M);
    for (Index j = 0; j < M; ++j)
        if (tp.flags[j] == flag_ok) {
            w(j) = 1.0;
            ++res.n_valid;
        }
    res.n_flagged = static_cast<int>(M) - res.n_valid;
    if (res.n_valid == 0) return res;
    w /= (norm > 0.0 ? norm : static_cast<double>(res.n_valid));
    res.J = 0.0;
    for (Index j = 0; j < M; ++j)
        if (w(j) > 0.0) res.J += tp.utility(j);
    res.J /= res.n_valid;

    const RowVectorXd& XN = tp.X.back();
    RowVectorXd lam = w.cwiseProduct(XN.array().pow(-model.gamma).matrix());
    const int steps = static_cast<int>(tp.g.size());
    for (int j = steps - 1; j >= 0; --j) {
        const RowVectorXd& X = tp.X[j];
        const RowVectorXd lx = lam.cwiseProduct(X);
        MatrixXd dpi = tp.v[j];
        for (Index c = 0; c < M; ++c) dpi.col(c) *= lx(c);
        const MatrixXd din = mlp_backward(net, tp.acts[j], dpi, res.grad);
        RowVectorXd next = lam.cwiseProduct(tp.g[j]);
        next += din.row(1).cwiseQuotient(X);
        lam = std::move(next);
    }
    return res;
}

/// Exact gradient of the batch-mean terminal utility with respect to every network parameter.
inline GradientResult bptt_param_gradient(const PolicyNet& net, const SimModel& model, const RolloutBatch& b,
                                          const RolloutConfig& cfg) {
    return tape_adjoint(net, model, record_tape(net, model, b, cfg));
}

/// Pathwise costate blocks p = dU/dX_k, p_x = d2U/dX_k^2, p_y = d2U/dY_k dX_k per episode.
struct CostateBlocks {
    RowVectorXd p;
    RowVectorXd p_x;
    MatrixXd p_y;  // m x M
    std::vector<std::uint8_t> flags;
    int n_flagged = 0;
};

/// Jet pass of the MLP.
inline Jet2 mlp_forward_jet(const PolicyNet& net, const Jet2& in) {
    Jet2 a = in;
    const std::size_t nl = net.layers.size();
    for (std::size_t l = 0; l < nl; ++l) {
        Jet2 z = linear(net.layers[l].W, a, net.layers[l].b);
        a = (l + 1 < nl) ? tanh(z) : std::move(z);
    }
    return net.output_scale * a;
}

/// Re-simulates from step k with jets seeded in (X_k, Y_k) under the trajectories' frozen theta and
/// noise. dZ holds the increments of steps k..N-1.
inline CostateBlocks costate_blocks_from(const PolicyNet& net, const SimModel& model, const RolloutConfig& cfg, int k,
                                         const RowVectorXd& Xk, const MatrixXd& Yk, const MatrixXd& drift,
                                         const std::vector<MatrixXd>& dZ) {
    if (k < 0 || k > cfg.N) throw std::invalid_argument("costate_blocks: step index out of range");
    if (static_cast<int>(dZ.size()) != cfg.N - k) throw std::invalid_argument("costate_blocks: noise length");
    const int d = model.d, m = model.m, n = 1 + m;
    const Index M = Xk.size();
    const double dt = cfg.dt();
    CostateBlocks out;
    out.flags.assign(M, flag_ok);

    Jet2 X = Jet2::variable(Xk, 0, n);
    Jet2 Y = Jet2::constant(Yk, n);
    for (int i = 0; i < m; ++i) Y.d1[1 + i].row(i).setOnes();
    const MatrixXd Ystep = MatrixXd::Identity(m, m) - model.K * dt;
    const VectorXd ypull = model.K * model.ybar * dt;
    const MatrixXd Bdt = model.B * dt;

    for (int kk = k; kk < cfg.N; ++kk) {
        const MatrixXd& Z = dZ[kk - k];
        const Jet2 tj = Jet2::constant(MatrixXd::Constant(1, M, cfg.time(kk) / net.horizon), n);
        const Jet2 lx = log(X);
        Jet2 in;
        if (net.obs_y > 0) {
            Jet2 yo = Y;
            if (net.obs_y < m) {
                yo.val = Y.val.topRows(net.obs_y);
                for (auto& t : yo.d1) t = MatrixXd(t.topRows(net.obs_y));
                for (auto& t : yo.d2) t = MatrixXd(t.topRows(net.obs_y));
            }
            in = vstack({&tj, &lx, &yo});
        } else {
            in = vstack({&tj, &lx});
        }
        const Jet2 pi = mlp_forward_jet(net, in);
        MatrixXd vconst = dt * drift + model.sigma * Z.topRows(d);
        Jet2 v = (m > 0) ? linear(Bdt, Y) + vconst : Jet2::constant(vconst, n);
        Jet2 g = colsum(hadamard(pi, v)) + MatrixXd::Constant(1, M, 1.0 + model.r * dt);
        X = hadamard(X, g);
        if (m > 0) {
            MatrixXd shift = model.Xi * Z.bottomRows(m);
            shift.colwise() += ypull;
            Y = linear(Ystep, Y) + shift;
        }
        for (Index j = 0; j < M; ++j) {
            if (out.flags[j] != flag_ok) continue;
            const double x = X.val(0, j);
            if (!std::isfinite(x) || !(x > 0.0))
                out.flags[j] = flag_nonfinite;
            else if (std::abs(std::log(x)) > cfg.clamp_logx)
                out.flags[j] = flag_clamped;
        }
    }
    const Jet2 U = crra_utility(X, model.gamma);
    out.p = U.d1[0];
    out.p_x = U.h(0, 0);
    out.p_y = MatrixXd::Zero(m, M);
    for (int i = 0; i < m; ++i) out.p_y.row(i) = U.h(0, 1 + i);
    for (Index j = 0; j < M; ++j) {
        if (out.flags[j] == flag_ok &&
            !(std::isfinite(out.p(j)) && std::isfinite(out.p_x(j)) && out.p_y.col(j).allFinite()))
            out.flags[j] = flag_nonfinite;
        if (out.flags[j] != flag_ok) ++out.n_flagged;
    }
    return out;
}

/// Costates at step k of the rollout defined by the batch (which must start at or before k).
inline CostateBlocks costate_blocks(const PolicyNet& net, const SimModel& model, const RolloutBatch& b,
                                    const RolloutConfig& cfg, int k) {
    check_batch(model, cfg, b);
    if (k < b.k0 || k > cfg.N) throw std::invalid_argument("costate_blocks: step index out of range");
    RolloutConfig head = cfg;
    RowVectorXd Xk = b.x0;
    MatrixXd Yk = b.y0;
    if (k > b.k0) {
        head.N = k;
        RolloutBatch hb = b;
        hb.dZ.assign(b.dZ.begin(), b.dZ.begin() + (k - b.k0));
        // Keep the step size of the full horizon when truncating.
        head.T = cfg.time(k);
        const TrajectoryBundle tb = euler_rollout(net, model, hb, head);
        Xk = tb.X.back();
        Yk = tb.Y.back();
    }
    std::vector<MatrixXd> tail(b.dZ.begin() + (k - b.k0), b.dZ.end());
    return costate_blocks_from(net, model, cfg, k, Xk, Yk, b.drift, tail);
}

}  // namespace ppgdpo
