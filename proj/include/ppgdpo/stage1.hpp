#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "adjoint.hpp"
#include "parallel.hpp"

namespace ppgdpo {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool cosine = true;
    double lr_min = 0.0;
};

inline double lr_at(const AdamConfig& a, int epoch, int epochs) {
    if (!a.cosine || epochs <= 0) return a.lr;
    const double f = std::min(1.0, static_cast<double>(epoch) / epochs);
    return a.lr_min + 0.5 * (a.lr - a.lr_min) * (1.0 + std::cos(std::numbers::pi * f));
}

enum class ThetaMode { per_episode, batch_shared };

struct TrainConfig {
    int epochs = 5000;
    int batch = 500;
    AdamConfig adam;
    ThetaMode theta_mode = ThetaMode::per_episode;
    bool antithetic = true;
    int eval_every = 100;
    int checkpoint_every = 0;
    int mc_budget = 0;  // trajectories per update; overrides batch when > 0
    std::uint64_t seed = 0;
    double grad_clip = 10.0;
    int ring = 6;
    NetArchitecture arch;

    int batch_size() const { return mc_budget > 0 ? mc_budget : batch; }
};

/// Episodes per rollout chunk. Fixed so that gradients do not depend on the worker count.
inline constexpr int kChunk = 128;

/// Draws episodes [j0, j1) of the training batch for one epoch. Episode j uses streams keyed by
/// (seed, epoch, j); antithetic partners (2i, 2i+1) share wealth and mirror the theta shock and noise.
inline RolloutBatch training_batch(const Problem& pb, const MatrixXd& F, int j0, int j1, std::uint64_t seed,
                                   std::uint64_t epoch, ThetaMode mode, bool antithetic) {
    const int n = j1 - j0, k = pb.latent_dim();
    std::vector<double> x0(n), sign(n, 1.0);
    std::vector<VectorXd> theta(n);
    std::vector<std::uint64_t> keys(n);
    VectorXd shared;
    if (mode == ThetaMode::batch_shared) {
        Stream s(seed, {tag::theta, epoch});
        VectorXd z(k);
        for (int i = 0; i < k; ++i) z(i) = s.normal();
        shared = pb.theta_law.mean + F * z;
    }
    for (int j = j0; j < j1; ++j) {
        const std::uint64_t base = antithetic ? j / 2 : j;
        const double sg = (antithetic && j % 2 == 1) ? -1.0 : 1.0;
        Stream s(seed, {tag::start, epoch, base});
        x0[j - j0] = draw_x0(pb.nu, s);
        if (mode == ThetaMode::batch_shared) {
            theta[j - j0] = shared;
        } else {
            Stream st(seed, {tag::theta, epoch, base});
            VectorXd z(k);
            for (int i = 0; i < k; ++i) z(i) = st.normal();
            theta[j - j0] = pb.theta_law.mean + sg * (F * z);
        }
        keys[j - j0] = stream_key(seed, {tag::noise, epoch, base});
        sign[j - j0] = sg;
    }
    return make_batch(pb, x0, theta, keys, sign);
}

/// Batch-mean BPTT gradient over M episodes, computed chunkwise and reduced in chunk order.
inline GradientResult batch_gradient(const PolicyNet& net, const Problem& pb, const MatrixXd& F, int M,
                                     std::uint64_t seed, std::uint64_t epoch, ThetaMode mode, bool antithetic) {
    if (M < 1) throw std::invalid_argument("batch_gradient: batch must be >= 1");
    if (antithetic && M % 2 != 0) throw std::invalid_argument("batch_gradient: antithetic batches need even M");
    const int nc = (M + kChunk - 1) / kChunk;
    std::vector<Tape> tapes(nc);
    parallel_for(nc, [&](int c) {
        const int j0 = c * kChunk, j1 = std::min(M, j0 + kChunk);
        tapes[c] = record_tape(net, pb.model, training_batch(pb, F, j0, j1, seed, epoch, mode, antithetic), pb.rollout);
    });
    int n_valid = 0;
    for (const auto& tp : tapes)
        for (auto f : tp.flags) n_valid += (f == flag_ok);
    std::vector<GradientResult> parts(nc);
    if (n_valid > 0)
        parallel_for(nc, [&](int c) { parts[c] = tape_adjoint(net, pb.model, tapes[c], n_valid); });
    GradientResult out;
    out.grad = VectorXd::Zero(net.num_params());
    out.utility.resize(M);
    out.n_valid = n_valid;
    out.n_flagged = M - n_valid;
    double Jsum = 0.0;
    for (int c = 0; c < nc; ++c) {
        const Tape& tp = tapes[c];
        out.utility.segment(c * kChunk, tp.utility.size()) = tp.utility;
        for (Index j = 0; j < tp.utility.size(); ++j)
            if (tp.flags[j] == flag_ok) Jsum += tp.utility(j);
        if (n_valid > 0) out.grad += parts[c].grad;
    }
    out.J = n_valid > 0 ? Jsum / n_valid : std::nan("");
    return out;
}

struct Snapshot {
    int epoch = 0;
    PolicyNet net;
    double metric = std::nan("");
};

struct TrainLogRow {
    int epoch = 0;
    double J = 0.0;
    double grad_norm = 0.0;
    int skip_count = 0;
};

struct TrainState {
    PolicyNet net;
    VectorXd adam_m;
    VectorXd adam_v;
    long adam_t = 0;
    int epoch = 0;
    std::vector<double> J_trace;
    std::deque<Snapshot> ring;
    int ring_capacity = 6;
    int skip_count = 0;
    std::vector<TrainLogRow> log;

    void push_snapshot(Snapshot s) {
        ring.push_back(std::move(s));
        while (static_cast<int>(ring.size()) > ring_capacity) ring.pop_front();
    }
};

inline TrainState init_train_state(const Problem& pb, const TrainConfig& cfg) {
    NetArchitecture a = cfg.arch;
    a.d = pb.model.d;
    a.horizon = pb.rollout.T;
    TrainState st;
    st.net = make_policy_net(a, cfg.seed);
    st.adam_m = VectorXd::Zero(st.net.num_params());
    st.adam_v = VectorXd::Zero(st.net.num_params());
    st.ring_capacity = std::max(6, cfg.ring);
    return st;
}

/// One Adam ascent step along `grad` (a gradient of the objective to maximize). A non-finite gradient
/// skips the step and leaves the optimizer untouched. Returns the pre-clip gradient norm.
inline double ascent_update(TrainState& st, VectorXd grad, const TrainConfig& cfg) {
    const double gn = grad.norm();
    if (!std::isfinite(gn)) {
        ++st.skip_count;
        return gn;
    }
    if (cfg.grad_clip > 0.0 && gn > cfg.grad_clip) grad *= cfg.grad_clip / gn;
    const AdamConfig& a = cfg.adam;
    ++st.adam_t;
    st.adam_m = a.beta1 * st.adam_m + (1.0 - a.beta1) * grad;
    st.adam_v = a.beta2 * st.adam_v + (1.0 - a.beta2) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(a.beta1, static_cast<double>(st.adam_t));
    const double c2 = 1.0 - std::pow(a.beta2, static_cast<double>(st.adam_t));
    const double lr = lr_at(a, st.epoch, cfg.epochs);
    const VectorXd step =
        (st.adam_m.array() / c1) / ((st.adam_v.array() / c2).sqrt() + a.eps);
    st.net.set_params(st.net.params() + lr * step);
    return gn;
}

struct StepInfo {
    double J = 0.0;
    double grad_norm = 0.0;
    bool skipped = false;
    int n_flagged = 0;
};

/// One PG-DPO update with the batch-mean BPTT gradient. Deterministic given (state, seed, epoch).
inline StepInfo pgdpo_step(TrainState& st, const Problem& pb, const TrainConfig& cfg, const MatrixXd& F) {
    const GradientResult g =
        batch_gradient(st.net, pb, F, cfg.batch_size(), cfg.seed, st.epoch, cfg.theta_mode, cfg.antithetic);
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
    return info;
}

inline StepInfo pgdpo_step(TrainState& st, const Problem& pb, const TrainConfig& cfg) {
    return pgdpo_step(st, pb, cfg, psd_factor(pb.theta_law.cov));
}

/// metric(net) is evaluated every eval_every epochs and stored with the snapshot.
using Evaluator = std::function<double(const PolicyNet&)>;
using CheckpointSink = std::function<void(int epoch, const PolicyNet&)>;

inline bool is_eval_epoch(int epoch, int eval_every, int epochs) {
    return (eval_every > 0 && epoch % eval_every == 0) || epoch == epochs;
}

/// Full Stage 1 loop from a fresh initialization.
inline TrainState train(const Problem& pb, const TrainConfig& cfg, const Evaluator& eval = {},
                        const CheckpointSink& sink = {}) {
    TrainState st = init_train_state(pb, cfg);
    const MatrixXd F = psd_factor(pb.theta_law.cov);
    while (st.epoch < cfg.epochs) {
        pgdpo_step(st, pb, cfg, F);
        if (is_eval_epoch(st.epoch, cfg.eval_every, cfg.epochs))
            st.push_snapshot({st.epoch, st.net, eval ? eval(st.net) : std::nan("")});
        if (sink && cfg.checkpoint_every > 0 && st.epoch % cfg.checkpoint_every == 0) sink(st.epoch, st.net);
    }
    return st;
}

/// Trailing moving average with the given window (shorter at the start).
inline std::vector<double> moving_average(const std::vector<double>& v, int window) {
    std::vector<double> out(v.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        acc += v[i];
        if (i >= static_cast<std::size_t>(window)) acc -= v[i - window];
        out[i] = acc / std::min<std::size_t>(i + 1, window);
    }
    return out;
}

}  // namespace ppgdpo
