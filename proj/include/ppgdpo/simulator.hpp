#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "market.hpp"
#include "policy.hpp"
#include "rng.hpp"

namespace ppgdpo {

/// Coefficients shared by both benchmark families: b = theta + B Y, return volatility sigma = Sigma^{1/2},
/// factor drift K(ybar - Y), factor volatility Xi, return-factor correlation rho. Static markets have m = 0.
struct SimModel {
    double r = 0.03;
    double gamma = 2.0;
    int d = 0;
    int m = 0;
    MatrixXd Sigma;
    MatrixXd sigma;
    MatrixXd B;
    MatrixXd K;
    VectorXd ybar;
    MatrixXd Xi;
    MatrixXd rho;
    MatrixXd joint_chol;

    /// sigma rho Xi^T: return-factor covariation rate.
    MatrixXd Sigma_SY() const { return sigma * rho * Xi.transpose(); }

    void finalize() {
        sigma = sym_sqrt(Sigma);
        const int n = d + m;
        MatrixXd C = MatrixXd::Identity(n, n);
        if (m > 0) {
            C.topRightCorner(d, m) = rho;
            C.bottomLeftCorner(m, d) = rho.transpose();
        }
        Eigen::LLT<MatrixXd> llt(C);
        if (llt.info() != Eigen::Success)
            throw std::invalid_argument("SimModel: joint increment covariance [[I, rho], [rho^T, I]] is not positive definite");
        joint_chol = llt.matrixL();
    }

    static SimModel from_static(const StaticDriftMarket& mk, double gamma) {
        SimModel s;
        s.r = mk.r;
        s.gamma = gamma;
        s.d = mk.d;
        s.m = 0;
        s.Sigma = mk.Sigma;
        s.B = MatrixXd::Zero(mk.d, 0);
        s.K = MatrixXd::Zero(0, 0);
        s.ybar = VectorXd::Zero(0);
        s.Xi = MatrixXd::Zero(0, 0);
        s.rho = MatrixXd::Zero(mk.d, 0);
        s.finalize();
        return s;
    }

    static SimModel from_ou(const OUFactorMarket& ou, double gamma) {
        SimModel s;
        s.r = ou.r;
        s.gamma = gamma;
        s.d = ou.d;
        s.m = ou.mfac;
        s.Sigma = ou.Sigma;
        s.B = ou.B;
        s.K = ou.K;
        s.ybar = ou.ybar;
        s.Xi = ou.Xi;
        s.rho = ou.rho;
        s.finalize();
        return s;
    }
};

struct RolloutConfig {
    int N = 100;
    double t0 = 0.0;
    double T = 1.5;
    double clamp_logx = 20.0;

    double dt() const {
        const double h = (T - t0) / N;
        if (!(N >= 1) || !(h > 0.0)) throw std::invalid_argument("RolloutConfig: need N >= 1 and T > t0");
        return h;
    }
    double time(int k) const { return t0 + k * dt(); }
};

/// One batch of frozen-theta episodes started at step k0. dZ[j] holds the (d + m) x M correlated
/// increments (dW; dW^Y) of step k0 + j.
struct RolloutBatch {
    int k0 = 0;
    RowVectorXd x0;
    MatrixXd drift;  // d x M, static theta (zero for OU)
    MatrixXd y0;     // m x M
    std::vector<MatrixXd> dZ;

    Index size() const { return x0.size(); }
};

enum EpisodeFlag : std::uint8_t { flag_ok = 0, flag_clamped = 1, flag_nonfinite = 2 };

/// Fills steps x (d + m) standard normals per episode from its own stream; sign[j] = -1 mirrors the
/// draw (antithetic partner). Returns scaled, correlated increments.
inline std::vector<MatrixXd> make_noise(const SimModel& model, int steps, double dt,
                                        const std::vector<std::uint64_t>& keys, const std::vector<double>& sign) {
    const int n = model.d + model.m;
    const Index M = static_cast<Index>(keys.size());
    std::vector<MatrixXd> Z(steps, MatrixXd(n, M));
    for (Index j = 0; j < M; ++j) {
        Stream s(keys[j]);
        const double sg = sign.empty() ? 1.0 : sign[j];
        for (int k = 0; k < steps; ++k)
            for (int i = 0; i < n; ++i) Z[k](i, j) = sg * s.normal();
    }
    const MatrixXd L = std::sqrt(dt) * model.joint_chol;
    for (auto& z : Z) z = L * z;
    return Z;
}

struct TrajectoryBundle {
    std::vector<RowVectorXd> X;  // steps + 1 entries, 1 x M
    std::vector<MatrixXd> Y;     // steps + 1 entries, m x M
    std::vector<MatrixXd> pi;    // steps entries, d x M
    RowVectorXd utility;
    MatrixXd drift;
    std::vector<std::uint8_t> flags;
    int n_clamped = 0;
    int n_nonfinite = 0;

    double flag_rate() const { return flags.empty() ? 0.0 : double(n_clamped + n_nonfinite) / flags.size(); }
};

inline double crra(double x, double gamma) { return std::pow(x, 1.0 - gamma) / (1.0 - gamma); }

inline void check_batch(const SimModel& model, const RolloutConfig& cfg, const RolloutBatch& b) {
    const Index M = b.size();
    if (b.drift.rows() != model.d || b.drift.cols() != M) throw std::invalid_argument("RolloutBatch: drift shape");
    if (b.y0.rows() != model.m || b.y0.cols() != M) throw std::invalid_argument("RolloutBatch: y0 shape");
    if (b.k0 < 0 || b.k0 > cfg.N) throw std::invalid_argument("RolloutBatch: start step out of range");
    if (static_cast<int>(b.dZ.size()) != cfg.N - b.k0) throw std::invalid_argument("RolloutBatch: noise length");
    for (const auto& z : b.dZ)
        if (z.rows() != model.d + model.m || z.cols() != M) throw std::invalid_argument("RolloutBatch: noise shape");
}

/// Marks newly invalid episodes and freezes flagged ones at their last valid wealth.
inline void guard_wealth(RowVectorXd& Xn, const RowVectorXd& Xo, std::vector<std::uint8_t>& flags, double clamp,
                         int& n_clamped, int& n_nonfinite) {
    for (Index j = 0; j < Xn.size(); ++j) {
        if (flags[j] != flag_ok) {
            Xn(j) = Xo(j);
            continue;
        }
        const double v = Xn(j);
        if (!std::isfinite(v) || !(v > 0.0)) {
            flags[j] = flag_nonfinite;
            ++n_nonfinite;
            Xn(j) = Xo(j);
        } else if (std::abs(std::log(v)) > clamp) {
            flags[j] = flag_clamped;
            ++n_clamped;
            Xn(j) = std::exp(std::log(v) > 0 ? clamp : -clamp);
        }
    }
}

/// Euler-Maruyama rollout of wealth and factors under the policy, from step k0 to N.
inline TrajectoryBundle euler_rollout(const PolicyNet& net, const SimModel& model, const RolloutBatch& b,
                                      const RolloutConfig& cfg) {
    check_batch(model, cfg, b);
    if (net.n_out() != model.d) throw std::invalid_argument("euler_rollout: policy output size differs from d");
    const double dt = cfg.dt();
    const Index M = b.size();
    const int d = model.d, m = model.m;
    TrajectoryBundle tb;
    tb.drift = b.drift;
    tb.flags.assign(M, flag_ok);
    tb.X.push_back(b.x0);
    tb.Y.push_back(b.y0);
    for (Index j = 0; j < M; ++j)
        if (!(b.x0(j) > 0.0) || !std::isfinite(b.x0(j))) throw std::invalid_argument("euler_rollout: x0 must be > 0");
    const MatrixXd Ystep = MatrixXd::Identity(m, m) - model.K * dt;
    const VectorXd ypull = model.K * model.ybar * dt;
    for (int k = b.k0; k < cfg.N; ++k) {
        const MatrixXd& Z = b.dZ[k - b.k0];
        const RowVectorXd& X = tb.X.back();
        const MatrixXd& Y = tb.Y.back();
        MatrixXd pi = net.forward_batch(cfg.time(k), X, Y);
        MatrixXd v = dt * b.drift + model.sigma * Z.topRows(d);
        if (m > 0) v.noalias() += dt * (model.B * Y);
        RowVectorXd g = (pi.cwiseProduct(v)).colwise().sum();
        g.array() += 1.0 + model.r * dt;
        RowVectorXd Xn = X.cwiseProduct(g);
        guard_wealth(Xn, X, tb.flags, cfg.clamp_logx, tb.n_clamped, tb.n_nonfinite);
        MatrixXd Yn = Ystep * Y;
        if (m > 0) {
            Yn.colwise() += ypull;
            Yn.noalias() += model.Xi * Z.bottomRows(m);
        }
        tb.pi.push_back(std::move(pi));
        tb.X.push_back(std::move(Xn));
        tb.Y.push_back(std::move(Yn));
    }
    tb.utility.resize(M);
    for (Index j = 0; j < M; ++j) tb.utility(j) = crra(tb.X.back()(j), model.gamma);
    return tb;
}

/// Sampler nu for initial wealth: uniform on [x_lo, x_hi] (x_lo == x_hi is a point mass).
struct InitialStateConfig {
    double t0 = 0.0;
    double x_lo = 0.5;
    double x_hi = 1.5;
};

struct InitialState {
    double t0 = 0.0;
    double x0 = 1.0;
    VectorXd y0;
};

inline double draw_x0(const InitialStateConfig& nu, Stream& s) {
    if (nu.x_hi < nu.x_lo || !(nu.x_lo > 0.0)) throw std::invalid_argument("InitialStateConfig: need 0 < x_lo <= x_hi");
    return nu.x_lo == nu.x_hi ? nu.x_lo : s.uniform(nu.x_lo, nu.x_hi);
}

/// Initial states; y0 is drawn from q0 when one is given (OU runs).
inline std::vector<InitialState> sample_initial_states(const InitialStateConfig& nu, int M, Stream& rng,
                                                       const GaussianLaw* q0 = nullptr) {
    std::vector<InitialState> out(M);
    MatrixXd F;
    if (q0) F = psd_factor(q0->cov);
    for (int j = 0; j < M; ++j) {
        out[j].t0 = nu.t0;
        out[j].x0 = draw_x0(nu, rng);
        if (q0) {
            VectorXd z(q0->dim());
            for (Index i = 0; i < z.size(); ++i) z(i) = rng.normal();
            out[j].y0 = q0->mean + F * z;
        }
    }
    return out;
}

enum class BenchmarkKind { static_drift, ou };

/// Everything a trainer needs: the simulator coefficients, the latent law and the episode sampler.
/// The latent draw is the drift theta (static) or the initial factor Y_0 (OU).
struct Problem {
    BenchmarkKind kind = BenchmarkKind::static_drift;
    SimModel model;
    GaussianLaw theta_law;
    RolloutConfig rollout;
    InitialStateConfig nu;

    int latent_dim() const { return kind == BenchmarkKind::static_drift ? model.d : model.m; }

    /// Initial conditions (drift column, factor column) implied by one latent draw.
    void place_theta(const VectorXd& theta, MatrixXd& drift, MatrixXd& y0, Index col) const {
        if (kind == BenchmarkKind::static_drift) {
            drift.col(col) = theta;
        } else {
            drift.col(col).setZero();
            y0.col(col) = theta;
        }
    }

    static Problem static_market(const StaticDriftMarket& mk, double gamma, const RolloutConfig& rc = {},
                                 const InitialStateConfig& nu = {}) {
        Problem p;
        p.kind = BenchmarkKind::static_drift;
        p.model = SimModel::from_static(mk, gamma);
        p.theta_law = mk.q;
        p.rollout = rc;
        p.nu = nu;
        return p;
    }

    static Problem ou_market(const OUFactorMarket& ou, double gamma, const RolloutConfig& rc = {},
                             const InitialStateConfig& nu = {}) {
        Problem p;
        p.kind = BenchmarkKind::ou;
        p.model = SimModel::from_ou(ou, gamma);
        p.theta_law = ou.q0;
        p.rollout = rc;
        p.nu = nu;
        return p;
    }
};

/// Assembles a batch from per-episode wealth, latent draw and noise stream key (sign -1 mirrors it).
inline RolloutBatch make_batch(const Problem& pb, const std::vector<double>& x0, const std::vector<VectorXd>& theta,
                               const std::vector<std::uint64_t>& noise_keys, const std::vector<double>& sign = {},
                               int k0 = 0) {
    const Index M = static_cast<Index>(x0.size());
    if (theta.size() != x0.size() || noise_keys.size() != x0.size() || (!sign.empty() && sign.size() != x0.size()))
        throw std::invalid_argument("make_batch: per-episode inputs differ in length");
    RolloutBatch b;
    b.k0 = k0;
    b.x0.resize(M);
    b.drift = MatrixXd::Zero(pb.model.d, M);
    b.y0 = MatrixXd::Zero(pb.model.m, M);
    for (Index j = 0; j < M; ++j) {
        b.x0(j) = x0[j];
        if (theta[j].size() != pb.latent_dim()) throw std::invalid_argument("make_batch: latent draw has wrong length");
        pb.place_theta(theta[j], b.drift, b.y0, j);
    }
    b.dZ = make_noise(pb.model, pb.rollout.N - k0, pb.rollout.dt(), noise_keys, sign);
    return b;
}

}  // namespace ppgdpo
