#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

#include "parallel.hpp"
#include "stage1.hpp"

namespace ppgdpo {

struct PpoConfig {
    std::vector<int> actor_hidden{32, 32};
    std::vector<int> critic_hidden{32, 32};
    double clip = 0.2;
    double gae_lambda = 0.95;
    double discount = 1.0;
    int epochs_per_update = 10;
    int minibatch = 5000;  // transitions
    int episodes_per_update = 500;
    int updates = 5000;
    double std_init = 0.5;
    double std_final = 0.05;
    double lr = 3e-4;
    double max_grad_norm = 0.5;
    int eval_every = 100;
    int ring = 6;
    std::uint64_t seed = 0;

    long long interactions(int N) const { return static_cast<long long>(updates) * episodes_per_update * N; }
};

/// Matches a PG-DPO run's budget: same episodes per update and one PPO update per Stage 1 epoch.
inline PpoConfig ppo_matched_budget(const TrainConfig& tc, PpoConfig base = {}) {
    base.episodes_per_update = tc.batch_size();
    base.updates = tc.epochs;
    base.eval_every = tc.eval_every;
    base.seed = tc.seed;
    return base;
}

inline double ppo_std_at(const PpoConfig& c, int update) {
    if (c.updates <= 1) return c.std_final;
    const double f = std::min(1.0, static_cast<double>(update) / (c.updates - 1));
    return c.std_init + f * (c.std_final - c.std_init);
}

/// Observation fed to both networks: (t / T, log x). Never theta, never Y.
inline constexpr int kPpoObsDim = 2;

inline MatrixXd ppo_observation(const RowVectorXd& t_over_T, const RowVectorXd& x) {
    MatrixXd o(kPpoObsDim, x.size());
    o.row(0) = t_over_T;
    o.row(1) = x.array().log().matrix();
    return o;
}

/// Minimal Adam for one parameter vector.
struct AdamVec {
    VectorXd m, v;
    long t = 0;
    void step(VectorXd& p, const VectorXd& g, double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) {
        if (m.size() != p.size()) {
            m = VectorXd::Zero(p.size());
            v = VectorXd::Zero(p.size());
        }
        ++t;
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g.cwiseAbs2();
        const double c1 = 1 - std::pow(b1, static_cast<double>(t)), c2 = 1 - std::pow(b2, static_cast<double>(t));
        p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    }
};

struct PpoLogRow {
    int update = 0;
    double mean_terminal_utility = 0.0;
    double actor_loss = 0.0;
    double critic_loss = 0.0;
    double action_std = 0.0;
    int n_flagged = 0;
    bool skipped = false;
};

struct PpoState {
    PolicyNet actor;
    PolicyNet critic;
    AdamVec actor_opt, critic_opt;
    int update = 0;
    long long interactions = 0;
    int skip_count = 0;
    std::deque<Snapshot> ring;
    int ring_capacity = 6;
    std::vector<PpoLogRow> log;
};

inline PpoState init_ppo_state(const Problem& pb, const PpoConfig& c) {
    PpoState st;
    NetArchitecture a;
    a.hidden = c.actor_hidden;
    a.d = pb.model.d;
    a.horizon = pb.rollout.T;
    st.actor = make_policy_net(a, stream_key(c.seed, {tag::ppo, 0}));
    NetArchitecture v;
    v.hidden = c.critic_hidden;
    v.d = 1;
    v.horizon = pb.rollout.T;
    v.output_scale = 1.0;
    st.critic = make_policy_net(v, stream_key(c.seed, {tag::ppo, 1}));
    if (st.actor.n_in() != kPpoObsDim || st.critic.n_in() != kPpoObsDim)
        throw std::logic_error("ppo: observation must be (t, x) only");
    st.ring_capacity = std::max(6, c.ring);
    return st;
}

/// Transitions of one update, laid out step-major: column k * E + e.
struct PpoBatch {
    MatrixXd obs;      // 2 x (N E)
    MatrixXd actions;  // d x (N E)
    MatrixXd mean_old;
    RowVectorXd adv;
    RowVectorXd ret;
    RowVectorXd terminal_utility;
    int n_flagged = 0;
};

inline PpoBatch ppo_collect(const PpoState& st, const Problem& pb, const PpoConfig& c, double stdev) {
    const SimModel& model = pb.model;
    const RolloutConfig& rc = pb.rollout;
    const int E = c.episodes_per_update, N = rc.N, d = model.d;
    const double dt = rc.dt();
    const std::uint64_t u = static_cast<std::uint64_t>(st.update);
    const MatrixXd F = psd_factor(pb.theta_law.cov);
    std::vector<double> x0(E);
    std::vector<VectorXd> theta(E);
    std::vector<std::uint64_t> keys(E);
    for (int e = 0; e < E; ++e) {
        Stream s(c.seed, {tag::ppo, 2, u, static_cast<std::uint64_t>(e)});
        x0[e] = draw_x0(pb.nu, s);
        VectorXd z(pb.latent_dim());
        for (Index i = 0; i < z.size(); ++i) z(i) = s.normal();
        theta[e] = pb.theta_law.mean + F * z;
        keys[e] = stream_key(c.seed, {tag::ppo, 3, u, static_cast<std::uint64_t>(e)});
    }
    const RolloutBatch b = make_batch(pb, x0, theta, keys);
    std::vector<Stream> explore;
    explore.reserve(E);
    for (int e = 0; e < E; ++e) explore.emplace_back(c.seed, std::initializer_list<std::uint64_t>{tag::ppo, 4, u, static_cast<std::uint64_t>(e)});

    PpoBatch out;
    out.obs.resize(kPpoObsDim, static_cast<Index>(N) * E);
    out.actions.resize(d, static_cast<Index>(N) * E);
    out.mean_old.resize(d, static_cast<Index>(N) * E);
    RowVectorXd X = b.x0;
    MatrixXd Y = b.y0;
    std::vector<std::uint8_t> flags(E, flag_ok);
    int nc = 0, nn = 0;
    const MatrixXd Ystep = MatrixXd::Identity(model.m, model.m) - model.K * dt;
    const VectorXd ypull = model.K * model.ybar * dt;
    for (int k = 0; k < N; ++k) {
        const MatrixXd o = ppo_observation(RowVectorXd::Constant(E, rc.time(k) / rc.T), X);
        const MatrixXd mu = st.actor.forward_features(o);
        MatrixXd a = mu;
        for (int e = 0; e < E; ++e)
            for (int i = 0; i < d; ++i) a(i, e) += stdev * explore[e].normal();
        const MatrixXd& Z = b.dZ[k];
        MatrixXd v = dt * b.drift + model.sigma * Z.topRows(d);
        if (model.m > 0) v.noalias() += dt * (model.B * Y);
        RowVectorXd g = a.cwiseProduct(v).colwise().sum();
        g.array() += 1.0 + model.r * dt;
        RowVectorXd Xn = X.cwiseProduct(g);
        guard_wealth(Xn, X, flags, rc.clamp_logx, nc, nn);
        if (model.m > 0) {
            MatrixXd Yn = Ystep * Y;
            Yn.colwise() += ypull;
            Yn.noalias() += model.Xi * Z.bottomRows(model.m);
            Y = std::move(Yn);
        }
        out.obs.middleCols(static_cast<Index>(k) * E, E) = o;
        out.actions.middleCols(static_cast<Index>(k) * E, E) = a;
        out.mean_old.middleCols(static_cast<Index>(k) * E, E) = mu;
        X = std::move(Xn);
    }
    out.n_flagged = nc + nn;
    out.terminal_utility.resize(E);
    for (int e = 0; e < E; ++e) out.terminal_utility(e) = crra(X(e), model.gamma);

    // GAE with reward only on the last transition and V(terminal) = 0.
    const RowVectorXd V = st.critic.forward_features(out.obs).row(0);
    out.adv.resize(static_cast<Index>(N) * E);
    out.ret.resize(static_cast<Index>(N) * E);
    for (int e = 0; e < E; ++e) {
        double gae = 0.0;
        for (int k = N - 1; k >= 0; --k) {
            const Index col = static_cast<Index>(k) * E + e;
            const double next_v = (k == N - 1) ? 0.0 : V(col + E);
            const double rwd = (k == N - 1) ? out.terminal_utility(e) : 0.0;
            const double delta = rwd + c.discount * next_v - V(col);
            gae = delta + c.discount * c.gae_lambda * gae;
            out.adv(col) = gae;
            out.ret(col) = gae + V(col);
        }
    }
    return out;
}

inline void clip_norm(VectorXd& g, double max_norm) {
    const double n = g.norm();
    if (max_norm > 0.0 && n > max_norm) g *= max_norm / n;
}

/// Clipped surrogate loss -mean(min(r A, clip(r) A)) for a fixed-std Gaussian actor, and its gradient
/// with respect to the actor mean (d x n) when dmu is given.
inline double ppo_actor_loss(const PolicyNet& actor, const MatrixXd& o, const MatrixXd& a, const MatrixXd& mean_old,
                             const RowVectorXd& A, double clip, double stdev, std::vector<MatrixXd>& acts,
                             MatrixXd* dmu) {
    const Index n = o.cols();
    const double inv_var = 1.0 / (stdev * stdev);
    const MatrixXd mu = mlp_forward_record(actor, o, acts);
    if (dmu) *dmu = MatrixXd::Zero(mu.rows(), n);
    double la = 0.0;
    for (Index j = 0; j < n; ++j) {
        const double lr_new = -0.5 * inv_var * (a.col(j) - mu.col(j)).squaredNorm();
        const double lr_old = -0.5 * inv_var * (a.col(j) - mean_old.col(j)).squaredNorm();
        const double ratio = std::exp(lr_new - lr_old);
        const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
        la += -std::min(ratio * A(j), clipped * A(j));
        const bool active = (A(j) >= 0.0) ? (ratio < 1.0 + clip) : (ratio > 1.0 - clip);
        if (dmu && active) dmu->col(j) = -A(j) * ratio * inv_var * (a.col(j) - mu.col(j)) / n;
    }
    return la / n;
}

/// One PPO update: collect, then epochs of clipped-surrogate actor and squared-error critic steps.
inline PpoLogRow ppo_update(PpoState& st, const Problem& pb, const PpoConfig& c) {
    const double stdev = ppo_std_at(c, st.update);
    PpoBatch b = ppo_collect(st, pb, c, stdev);
    const Index T = b.obs.cols();
    PpoLogRow row;
    row.update = st.update + 1;
    row.action_std = stdev;
    row.n_flagged = b.n_flagged;
    row.mean_terminal_utility = b.terminal_utility.mean();
    const double am = b.adv.mean();
    const double asd = std::sqrt((b.adv.array() - am).square().mean());
    RowVectorXd adv = (b.adv.array() - am) / (asd + 1e-8);

    std::vector<Index> idx(T);
    std::iota(idx.begin(), idx.end(), 0);
    Stream shuf(c.seed, {tag::ppo, 5, static_cast<std::uint64_t>(st.update)});
    const int d = pb.model.d;
    VectorXd pa = st.actor.params(), pc = st.critic.params();
    double la_sum = 0.0, lc_sum = 0.0;
    int nmb = 0;
    bool bad = false;
    for (int ep = 0; ep < c.epochs_per_update && !bad; ++ep) {
        std::shuffle(idx.begin(), idx.end(), shuf.engine());
        for (Index s0 = 0; s0 < T; s0 += c.minibatch) {
            const Index n = std::min<Index>(c.minibatch, T - s0);
            MatrixXd o(kPpoObsDim, n), a(d, n), mo(d, n);
            RowVectorXd A(n), R(n);
            for (Index j = 0; j < n; ++j) {
                const Index col = idx[s0 + j];
                o.col(j) = b.obs.col(col);
                a.col(j) = b.actions.col(col);
                mo.col(j) = b.mean_old.col(col);
                A(j) = adv(col);
                R(j) = b.ret(col);
            }
            std::vector<MatrixXd> acts_a, acts_c;
            MatrixXd dmu;
            const double la = ppo_actor_loss(st.actor, o, a, mo, A, c.clip, stdev, acts_a, &dmu);
            const MatrixXd vv = mlp_forward_record(st.critic, o, acts_c);
            const RowVectorXd ev = vv.row(0) - R;
            const double lc = ev.squaredNorm() / n;
            if (!std::isfinite(la) || !std::isfinite(lc)) {
                bad = true;
                break;
            }
            VectorXd ga = VectorXd::Zero(pa.size()), gc = VectorXd::Zero(pc.size());
            mlp_backward(st.actor, acts_a, dmu, ga);
            mlp_backward(st.critic, acts_c, (2.0 / n) * ev, gc);
            if (!ga.allFinite() || !gc.allFinite()) {
                bad = true;
                break;
            }
            clip_norm(ga, c.max_grad_norm);
            clip_norm(gc, c.max_grad_norm);
            st.actor_opt.step(pa, ga, c.lr);
            st.critic_opt.step(pc, gc, c.lr);
            st.actor.set_params(pa);
            st.critic.set_params(pc);
            la_sum += la;
            lc_sum += lc;
            ++nmb;
        }
    }
    if (bad) {
        ++st.skip_count;
        row.skipped = true;
    }
    row.actor_loss = nmb ? la_sum / nmb : std::nan("");
    row.critic_loss = nmb ? lc_sum / nmb : std::nan("");
    st.interactions += static_cast<long long>(c.episodes_per_update) * pb.rollout.N;
    ++st.update;
    st.log.push_back(row);
    return row;
}

/// Deterministic mean action of the actor, as a PolicyNet usable by every evaluator.
inline const PolicyNet& ppo_mean_policy(const PpoState& st) { return st.actor; }

inline PpoState ppo_train(const Problem& pb, const PpoConfig& c, const Evaluator& eval = {}) {
    PpoState st = init_ppo_state(pb, c);
    while (st.update < c.updates) {
        ppo_update(st, pb, c);
        if (is_eval_epoch(st.update, c.eval_every, c.updates)) {
            st.ring.push_back({st.update, st.actor, eval ? eval(st.actor) : std::nan("")});
            while (static_cast<int>(st.ring.size()) > st.ring_capacity) st.ring.pop_front();
        }
    }
    return st;
}

}  // namespace ppgdpo
