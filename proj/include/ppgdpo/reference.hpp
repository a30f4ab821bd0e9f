#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "linalg.hpp"
#include "market.hpp"

namespace ppgdpo {

inline void require_gamma_above_one(double gamma, const std::string& what) {
    if (!(gamma > 1.0))
        throw std::domain_error(what + ": unsupported parameter gamma=" + std::to_string(gamma) +
                                " (closed forms need gamma > 1)");
}

/// Solves (gamma Sigma + (gamma - 1) tau P) pi = m.
inline VectorXd static_gaussian_reference(const VectorXd& m, const MatrixXd& Sigma, const MatrixXd& P, double gamma,
                                          double tau) {
    require_gamma_above_one(gamma, "static_gaussian_reference");
    if (!(tau > 0.0)) throw std::invalid_argument("static_gaussian_reference: tau must be > 0");
    require_square(Sigma, m.size(), "static_gaussian_reference: Sigma");
    require_square(P, m.size(), "static_gaussian_reference: P");
    const MatrixXd S = gamma * Sigma + (gamma - 1.0) * tau * P;
    return spd_solve(S, m, "static_gaussian_reference");
}

/// Ex-ante CRRA value of holding pi constant over tau under theta ~ N(m, P).
inline double constant_pi_objective(const VectorXd& pi, double x0, double r, const VectorXd& m, const MatrixXd& Sigma,
                                    const MatrixXd& P, double gamma, double tau) {
    require_gamma_above_one(gamma, "constant_pi_objective");
    if (!(x0 > 0.0)) throw std::invalid_argument("constant_pi_objective: x0 must be > 0");
    const double g1 = 1.0 - gamma;
    const VectorXd u = g1 * tau * pi;
    const double quad = pi.dot(Sigma * pi);
    return std::pow(x0, g1) / g1 * std::exp(g1 * r * tau - 0.5 * gamma * g1 * tau * quad) *
           std::exp(u.dot(m) + 0.5 * u.dot(P * u));
}

inline double constant_pi_objective(const VectorXd& pi, double x0, const StaticDriftMarket& mk, double gamma,
                                    double tau) {
    return constant_pi_objective(pi, x0, mk.r, mk.q.mean, mk.Sigma, mk.q.cov, gamma, tau);
}

struct OUHorizonMoments {
    MatrixXd A_tau;   // m x m
    VectorXd m_I;     // m
    MatrixXd C_I;     // m x m
    MatrixXd C_IW;    // m x d
    MatrixXd M_cross; // d x d
    double tau = 0.0;
};

/// A(u) = K^-1 (I - exp(-K u)).
inline MatrixXd ou_A(const MatrixXd& K, double u) {
    const Index m = K.rows();
    return K.partialPivLu().solve(MatrixXd::Identity(m, m) - expm(-K * u));
}

inline OUHorizonMoments ou_horizon_moments(const OUFactorMarket& ou, const MatrixXd& P_t, const VectorXd& m_t,
                                           double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("ou_horizon_moments: tau must be > 0");
    const Index m = ou.mfac;
    require_square(ou.K, m, "ou_horizon_moments: K");
    require_square(P_t, m, "ou_horizon_moments: P_t");
    if (m_t.size() != m) throw std::invalid_argument("ou_horizon_moments: m_t has wrong length");
    Eigen::FullPivLU<MatrixXd> lu(ou.K);
    if (!lu.isInvertible()) throw std::domain_error("ou_horizon_moments: K is singular");

    OUHorizonMoments out;
    out.tau = tau;
    out.A_tau = ou_A(ou.K, tau);
    out.m_I = tau * ou.ybar + out.A_tau * (m_t - ou.ybar);
    const MatrixXd XiXiT = ou.Xi * ou.Xi.transpose();
    const MatrixXd XiRhoT = ou.Xi * ou.rho.transpose();
    auto ci = simpson([&](double u) -> MatrixXd {
        const MatrixXd A = ou_A(ou.K, u);
        return A * XiXiT * A.transpose();
    }, 0.0, tau);
    out.C_I = symmetrize(out.A_tau * P_t * out.A_tau.transpose() + ci.value);
    auto ciw = simpson([&](double u) -> MatrixXd { return ou_A(ou.K, u) * XiRhoT; }, 0.0, tau);
    out.C_IW = ciw.value;
    const MatrixXd Sh = sym_sqrt(ou.Sigma);
    const MatrixXd half = ou.B * out.C_IW * Sh.transpose();
    out.M_cross = half + half.transpose();
    return out;
}

struct ReferenceAllocation {
    VectorXd pi;
    VectorXd pi_myopic;
    VectorXd pi_hedge;
    double gamma = 0.0;
    double tau = 0.0;
    std::string geometry;
};

inline ReferenceAllocation ou_reference(const OUFactorMarket& ou, const MatrixXd& P_t, const VectorXd& m_t,
                                        double gamma, double tau, const std::string& geometry = "") {
    require_gamma_above_one(gamma, "ou_reference");
    const OUHorizonMoments mo = ou_horizon_moments(ou, P_t, m_t, tau);
    const MatrixXd base = gamma * tau * ou.Sigma + (gamma - 1.0) * (ou.B * mo.C_I * ou.B.transpose());
    const VectorXd rhs = ou.B * mo.m_I;
    ReferenceAllocation ref;
    ref.gamma = gamma;
    ref.tau = tau;
    ref.geometry = geometry;
    ref.pi = spd_solve(base + (gamma - 1.0) * mo.M_cross, rhs, "ou_reference");
    ref.pi_myopic = spd_solve(base, rhs, "ou_reference (myopic)");
    ref.pi_hedge = ref.pi - ref.pi_myopic;
    return ref;
}

/// Law of the horizon-averaged premium B I / tau, used by the independence-case reduction.
inline GaussianLaw ou_effective_law(const OUFactorMarket& ou, const OUHorizonMoments& mo) {
    GaussianLaw g;
    g.mean = ou.B * mo.m_I / mo.tau;
    g.cov = symmetrize(ou.B * mo.C_I * ou.B.transpose() / (mo.tau * mo.tau));
    return g;
}

struct KalmanPath {
    std::vector<VectorXd> Yhat;
    std::vector<MatrixXd> P;
    double dt = 0.0;
};

/// Euler integration of the Kalman-Bucy filter for the OU market. dZ[k] is the return increment
/// observed over [t_k, t_k + dt]; times must be uniform with spacing dt.
inline KalmanPath kalman_bucy_propagate(const OUFactorMarket& ou, const VectorXd& Yhat0, const MatrixXd& P0,
                                        const std::vector<VectorXd>& dZ, const std::vector<double>& times) {
    if (times.size() != dZ.size() + 1)
        throw std::invalid_argument("kalman_bucy_propagate: need one more time point than increments");
    if (times.size() < 2) throw std::invalid_argument("kalman_bucy_propagate: need at least one step");
    const double dt = times[1] - times[0];
    if (!(dt > 0.0)) throw std::invalid_argument("kalman_bucy_propagate: time grid must increase");
    for (std::size_t k = 1; k + 1 < times.size(); ++k)
        if (std::abs((times[k + 1] - times[k]) - dt) > 1e-9 * std::max(1.0, std::abs(dt)))
            throw std::invalid_argument("kalman_bucy_propagate: non-uniform time grid at step " + std::to_string(k));
    const MatrixXd Sinv_B = Eigen::LLT<MatrixXd>(ou.Sigma).solve(ou.B);
    const MatrixXd BtSiB = ou.B.transpose() * Sinv_B;
    const MatrixXd XiXiT = ou.Xi * ou.Xi.transpose();

    KalmanPath path;
    path.dt = dt;
    path.Yhat.reserve(times.size());
    path.P.reserve(times.size());
    VectorXd y = Yhat0;
    MatrixXd P = symmetrize(P0);
    path.Yhat.push_back(y);
    path.P.push_back(P);
    for (const VectorXd& dz : dZ) {
        const MatrixXd gain = P * Sinv_B.transpose();  // P B^T Sigma^-1
        const VectorXd innov = dz - ou.B * y * dt;
        const VectorXd ynew = y + ou.K * (ou.ybar - y) * dt + gain * innov;
        const MatrixXd Pdot = -ou.K * P - P * ou.K.transpose() + XiXiT - P * BtSiB * P;
        P = symmetrize(P + Pdot * dt);
        y = ynew;
        path.Yhat.push_back(y);
        path.P.push_back(P);
    }
    return path;
}

/// Receding-horizon rule: static reference on the conditional law of the averaged premium.
inline VectorXd kalman_plugin_rule(const VectorXd& Yhat, const MatrixXd& P, const OUFactorMarket& ou, double gamma,
                                   double tau) {
    OUFactorMarket indep = ou;
    indep.rho.setZero();
    const OUHorizonMoments mo = ou_horizon_moments(indep, P, Yhat, tau);
    const GaussianLaw eff = ou_effective_law(indep, mo);
    return static_gaussian_reference(eff.mean, ou.Sigma, eff.cov, gamma, tau);
}

/// (average of full-information Merton rules, q-optimal constant rule) for the 1-D toy model.
inline std::pair<double, double> toy_merton_pair(double m, double p, double sigma2, double gamma, double tau) {
    require_gamma_above_one(gamma, "toy_merton_pair");
    return {m / (gamma * sigma2), m / (gamma * sigma2 + (gamma - 1.0) * tau * p)};
}

}  // namespace ppgdpo
