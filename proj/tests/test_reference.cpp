#include <gtest/gtest.h>

#include <cmath>

#include "ppgdpo/reference.hpp"

using namespace ppgdpo;

namespace {

VectorXd vec1(double a) { return VectorXd::Constant(1, a); }
MatrixXd mat1(double a) { return MatrixXd::Constant(1, 1, a); }

/// Independent oracle: maximize a 1-D objective on a uniform grid.
template <class F>
double grid_argmax(F&& f, double lo, double hi, double step) {
    double best = lo, fbest = f(lo);
    const long n = static_cast<long>(std::round((hi - lo) / step));
    for (long i = 1; i <= n; ++i) {
        const double x = lo + i * step;
        const double v = f(x);
        if (v > fbest) {
            fbest = v;
            best = x;
        }
    }
    return best;
}

OUFactorMarket scalar_ou(double k, double xi, double b, double sigma2, double rho) {
    OUFactorMarket ou;
    ou.r = 0.03;
    ou.d = 1;
    ou.mfac = 1;
    ou.K = mat1(k);
    ou.ybar = vec1(0.3);
    ou.Xi = mat1(xi);
    ou.B = mat1(b);
    ou.Sigma = mat1(sigma2);
    ou.rho = mat1(rho);
    ou.q0 = GaussianLaw::point_mass(ou.ybar);
    return ou;
}

}  // namespace

TEST(StaticReference, ZeroUncertaintyIsMerton) {
    const VectorXd pi = static_gaussian_reference(vec1(0.06), mat1(0.04), mat1(0.0), 2.0, 1.5);
    EXPECT_NEAR(pi(0), 0.75, 1e-15);
}

TEST(StaticReference, ShrinkageExampleMatchesGridOracle) {
    const VectorXd pi = static_gaussian_reference(vec1(0.06), mat1(0.04), mat1(0.01), 2.0, 1.5);
    EXPECT_NEAR(pi(0), 0.06 / 0.095, 1e-14);
    EXPECT_NEAR(pi(0), 0.631579, 1e-6);
    const double g = grid_argmax([](double p) {
        return constant_pi_objective(vec1(p), 1.0, 0.03, vec1(0.06), mat1(0.04), mat1(0.01), 2.0, 1.5);
    }, 0.0, 1.5, 1e-5);
    EXPECT_NEAR(g, pi(0), 1e-5);
}

TEST(StaticReference, LinearInPremiumAndSmallResidual) {
    const auto mk = gen_apt_market(6, 4, AptScale{}, 5);
    const MatrixXd P = build_uncertainty_aligned(mk.Sigma, 0.1);
    const VectorXd a = static_gaussian_reference(mk.m, mk.Sigma, P, 3.0, 1.5);
    const VectorXd b = static_gaussian_reference(2.5 * mk.m, mk.Sigma, P, 3.0, 1.5);
    EXPECT_LT((b - 2.5 * a).norm(), 1e-12 * b.norm());
    const MatrixXd S = 3.0 * mk.Sigma + 2.0 * 1.5 * P;
    EXPECT_LE((S * a - mk.m).norm(), 1e-10 * mk.m.norm());
}

TEST(StaticReference, RejectsGammaAtMostOne) {
    EXPECT_THROW(static_gaussian_reference(vec1(0.06), mat1(0.04), mat1(0.0), 1.0, 1.5), std::domain_error);
    EXPECT_THROW(static_gaussian_reference(vec1(0.06), mat1(0.04), mat1(0.0), 0.5, 1.5), std::domain_error);
}

TEST(ConstantPiObjective, CashOnly) {
    const double v = constant_pi_objective(vec1(0.0), 1.3, 0.03, vec1(0.06), mat1(0.04), mat1(0.01), 3.0, 1.5);
    EXPECT_NEAR(v, std::pow(1.3, -2.0) / -2.0 * std::exp(-2.0 * 0.03 * 1.5), 1e-15);
}

TEST(ConstantPiObjective, ReferenceIsLocalMaximum) {
    const auto mk = gen_apt_market(4, 2, AptScale{}, 8);
    const MatrixXd P = build_uncertainty_aligned(mk.Sigma, 0.1);
    const VectorXd pi = static_gaussian_reference(mk.m, mk.Sigma, P, 2.0, 1.5);
    const double v0 = constant_pi_objective(pi, 1.0, 0.03, mk.m, mk.Sigma, P, 2.0, 1.5);
    for (int i = 0; i < 4; ++i)
        for (double sgn : {-1.0, 1.0}) {
            VectorXd q = pi;
            q(i) *= 1.0 + sgn * 0.01;
            EXPECT_GT(v0, constant_pi_objective(q, 1.0, 0.03, mk.m, mk.Sigma, P, 2.0, 1.5));
        }
}

TEST(ConstantPiObjective, DiagonalTwoDimensionalGridAgreement) {
    // Diagonal Sigma and P make the objective separable; grid each coordinate.
    Stream rng(17, {0});
    for (int inst = 0; inst < 5; ++inst) {
        VectorXd m(2), s2(2), p(2);
        for (int i = 0; i < 2; ++i) {
            m(i) = rng.uniform(0.02, 0.08);
            s2(i) = rng.uniform(0.02, 0.06);
            p(i) = rng.uniform(0.0, 0.02);
        }
        const double gamma = rng.uniform(1.5, 4.0);
        const VectorXd pi = static_gaussian_reference(m, s2.asDiagonal(), p.asDiagonal(), gamma, 1.5);
        for (int i = 0; i < 2; ++i) {
            const double g = grid_argmax([&](double x) {
                VectorXd q = pi;
                q(i) = x;
                return constant_pi_objective(q, 1.0, 0.03, m, s2.asDiagonal(), p.asDiagonal(), gamma, 1.5);
            }, -1.0, 3.0, 1e-5);
            EXPECT_NEAR(g, pi(i), 1e-4);
        }
    }
}

TEST(OuMoments, ScalarAClosedForm) {
    const auto ou = scalar_ou(1.0, 0.25, 1.0, 0.04, 0.5);
    const auto mo = ou_horizon_moments(ou, mat1(0.0), vec1(0.3), 1.0);
    EXPECT_NEAR(mo.A_tau(0, 0), 1.0 - std::exp(-1.0), 1e-14);
    EXPECT_NEAR(mo.A_tau(0, 0), 0.6321206, 1e-7);
}

TEST(OuMoments, ScalarIntegralsMatchClosedForms) {
    const double k = 1.3, xi = 0.25, tau = 1.5, P = 0.02, rho = 0.4, b = 0.7, s2 = 0.04;
    const auto ou = scalar_ou(k, xi, b, s2, rho);
    const auto mo = ou_horizon_moments(ou, mat1(P), vec1(0.1), tau);
    const double A = (1.0 - std::exp(-k * tau)) / k;
    const double intA = (tau - A) / k;
    const double intA2 = (tau - 2.0 * (1.0 - std::exp(-k * tau)) / k + (1.0 - std::exp(-2.0 * k * tau)) / (2.0 * k)) / (k * k);
    EXPECT_NEAR(mo.m_I(0), tau * 0.3 + A * (0.1 - 0.3), 1e-14);
    EXPECT_NEAR(mo.C_I(0, 0), A * A * P + xi * xi * intA2, 1e-11);
    EXPECT_NEAR(mo.C_IW(0, 0), xi * rho * intA, 1e-11);
    EXPECT_NEAR(mo.M_cross(0, 0), 2.0 * b * mo.C_IW(0, 0) * std::sqrt(s2), 1e-14);
}

TEST(OuMoments, DegenerateCases) {
    auto ou = scalar_ou(1.0, 0.25, 1.0, 0.04, 0.0);
    auto mo = ou_horizon_moments(ou, mat1(0.01), vec1(0.3), 1.5);
    EXPECT_EQ(mo.C_IW.norm(), 0.0);
    EXPECT_EQ(mo.M_cross.norm(), 0.0);
    ou.Xi = mat1(0.0);
    mo = ou_horizon_moments(ou, mat1(0.0), vec1(0.3), 1.5);
    EXPECT_EQ(mo.C_I.norm(), 0.0);
    ou.K = mat1(0.0);
    EXPECT_THROW(ou_horizon_moments(ou, mat1(0.0), vec1(0.3), 1.5), std::domain_error);
}

TEST(OuMoments, ShortHorizonLimits) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 2);
    OuParams pr;
    pr.mfac = 3;
    auto ou = make_ou_market(base, pr);
    ou.K(0, 1) = 0.2;
    const VectorXd mt = VectorXd::LinSpaced(3, 0.1, 0.5);
    const double tau = 1e-6;
    const auto mo = ou_horizon_moments(ou, MatrixXd::Zero(3, 3), mt, tau);
    EXPECT_LT((mo.m_I / tau - mt).norm(), 1e-6);
    EXPECT_LT(mo.C_I.norm() / (tau * tau), 1e-6);
    EXPECT_LT(max_asymmetry(mo.C_I), 1e-10);
    EXPECT_LT(max_asymmetry(mo.M_cross), 1e-10);
}

TEST(OuMoments, SimpsonConvergesAtFourthOrder) {
    const double k = 2.0, tau = 1.5;
    auto f = [&](double u) { const double a = (1.0 - std::exp(-k * u)) / k; return MatrixXd::Constant(1, 1, a * a); };
    const double exact = (tau - 2.0 * (1.0 - std::exp(-k * tau)) / k + (1.0 - std::exp(-2.0 * k * tau)) / (2.0 * k)) / (k * k);
    double prev = -1.0;
    for (long panels : {4L, 8L, 16L, 32L}) {
        const double err = std::abs(simpson(f, 0.0, tau, 0.0, panels).value(0, 0) - exact);
        if (prev > 0.0) EXPECT_GE(prev / err, 12.0) << "panels " << panels;
        prev = err;
    }
}

TEST(OuReference, IndependenceReducesToStaticFormulaOnEffectiveLaw) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 21);
    OuParams pr;
    pr.mfac = 2;
    pr.rho0 = 0.0;
    pr.loading_scale = 1.0;
    const auto ou = make_ou_market(base, pr);
    const MatrixXd P0 = build_P0_geometry(ou, 1e-2, Geometry::aligned, 1);
    const auto ref = ou_reference(ou, P0, ou.ybar, 2.0, 1.5);
    const auto mo = ou_horizon_moments(ou, P0, ou.ybar, 1.5);
    const auto eff = ou_effective_law(ou, mo);
    const VectorXd st = static_gaussian_reference(eff.mean, ou.Sigma, eff.cov, 2.0, 1.5);
    EXPECT_LE((ref.pi - st).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE(ref.pi_hedge.norm(), 1e-10);
}

TEST(OuReference, DecompositionAndHedgeChannel) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 21);
    OuParams pr;
    const auto ou = make_ou_market(base, pr);
    const MatrixXd P0 = build_P0_geometry(ou, 1e-3, Geometry::aligned, 1);
    const auto ref = ou_reference(ou, P0, ou.ybar, 2.0, 1.5);
    EXPECT_TRUE((ref.pi_myopic + ref.pi_hedge).isApprox(ref.pi, 1e-15));
    EXPECT_GT(ref.pi_hedge.norm(), 1e-6);
    auto z = ou;
    z.B.setZero();
    EXPECT_EQ(ou_reference(z, P0, ou.ybar, 2.0, 1.5).pi.norm(), 0.0);
}

TEST(OuReference, ScalarGridOracleFromClosedFormMoments) {
    const double k = 1.0, xi = 0.25, b = 0.6, s2 = 0.04, rho = 0.5, tau = 1.5, gamma = 2.0, P = 0.01, r = 0.03;
    auto ou = scalar_ou(k, xi, b, s2, rho);
    const auto ref = ou_reference(ou, mat1(P), ou.ybar, gamma, tau);
    // Moments of (I, W_tau) in closed form; exact lognormal objective of a constant pi.
    const double A = (1.0 - std::exp(-k * tau)) / k;
    const double intA = (tau - A) / k;
    const double intA2 = (tau - 2.0 * (1.0 - std::exp(-k * tau)) / k + (1.0 - std::exp(-2.0 * k * tau)) / (2.0 * k)) / (k * k);
    const double mI = tau * 0.3;
    const double CI = A * A * P + xi * xi * intA2;
    const double CIW = xi * rho * intA;
    const double sig = std::sqrt(s2);
    auto J = [&](double p) {
        const double g1 = 1.0 - gamma;
        const double mean = r * tau - 0.5 * tau * s2 * p * p + p * b * mI;
        const double var = p * p * (b * b * CI + 2.0 * b * sig * CIW + s2 * tau);
        return std::exp(g1 * mean + 0.5 * g1 * g1 * var) / g1;
    };
    const double g = grid_argmax(J, -2.0, 4.0, 1e-5);
    EXPECT_NEAR(ref.pi(0), g, 1e-4);
}

TEST(OuReference, HedgeVanishesWithoutCorrelation) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 33);
    OuParams pr;
    pr.rho0 = 0.0;
    const auto ou = make_ou_market(base, pr);
    const auto ref = ou_reference(ou, build_P0_geometry(ou, 1e-3, Geometry::aligned, 1), ou.ybar, 2.0, 1.5);
    EXPECT_LE(ref.pi_hedge.norm(), 1e-10);
}

TEST(Kalman, ScalarRiccatiSteadyState) {
    const auto ou = scalar_ou(1.0, 0.25, 1.0, 0.04, 0.0);
    const double root = (-2.0 + std::sqrt(4.0 + 4.0 * 25.0 * 0.0625)) / 50.0;
    EXPECT_NEAR(-25.0 * root * root - 2.0 * root + 0.0625, 0.0, 1e-15);
    EXPECT_NEAR(root, 0.024031, 1e-6);
    const int n = 10000;
    const double dt = 1e-3;
    std::vector<double> times(n + 1);
    for (int i = 0; i <= n; ++i) times[i] = i * dt;
    const std::vector<VectorXd> dZ(n, VectorXd::Zero(1));
    const auto path = kalman_bucy_propagate(ou, vec1(0.3), mat1(0.1), dZ, times);
    EXPECT_NEAR(path.P.back()(0, 0), root, 1e-5);
    for (const auto& P : path.P) EXPECT_GE(P(0, 0), 0.0);
    // Started at the fixed point it stays there.
    const auto still = kalman_bucy_propagate(ou, vec1(0.3), mat1(root), dZ, times);
    for (const auto& P : still.P) EXPECT_NEAR(P(0, 0), root, 1e-12);
}

TEST(Kalman, NoInformationLimit) {
    auto ou = scalar_ou(0.8, 0.3, 0.0, 0.04, 0.0);
    const int n = 500;
    const double dt = 2e-3;
    std::vector<double> times(n + 1);
    for (int i = 0; i <= n; ++i) times[i] = i * dt;
    std::vector<VectorXd> dZ(n, vec1(0.01));
    const auto path = kalman_bucy_propagate(ou, vec1(1.0), mat1(0.05), dZ, times);
    double y = 1.0, P = 0.05;
    for (int i = 0; i < n; ++i) {
        y += 0.8 * (0.3 - y) * dt;
        P += (-1.6 * P + 0.09) * dt;
        EXPECT_NEAR(path.Yhat[i + 1](0), y, 1e-13);
        EXPECT_NEAR(path.P[i + 1](0, 0), P, 1e-13);
    }
}

TEST(Kalman, MultiFactorPathStaysPsdAndRejectsNonUniformGrid) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 4);
    OuParams pr;
    pr.mfac = 3;
    pr.loading_scale = 1.0;
    const auto ou = make_ou_market(base, pr);
    Stream rng(4, {1});
    const int n = 2000;
    const double dt = 1e-3;
    std::vector<double> times(n + 1);
    std::vector<VectorXd> dZ(n, VectorXd::Zero(5));
    for (int i = 0; i <= n; ++i) times[i] = i * dt;
    for (auto& z : dZ)
        for (int j = 0; j < 5; ++j) z(j) = 0.2 * std::sqrt(dt) * rng.normal();
    const auto path = kalman_bucy_propagate(ou, ou.ybar, 0.05 * MatrixXd::Identity(3, 3), dZ, times);
    for (const auto& P : path.P) {
        EXPECT_LE(max_asymmetry(P), 1e-15);
        EXPECT_GE(min_eigenvalue(P), -1e-12);
    }
    times[5] += 1e-4;
    EXPECT_THROW(kalman_bucy_propagate(ou, ou.ybar, MatrixXd::Identity(3, 3), dZ, times), std::invalid_argument);
}

TEST(KalmanPlugin, Limits) {
    const auto base = gen_apt_market(5, 5, AptScale{}, 6);
    OuParams pr;
    pr.mfac = 2;
    pr.loading_scale = 1.0;
    auto ou = make_ou_market(base, pr);
    const double gamma = 2.0;
    // Fast mean reversion: the averaged premium collapses to B ybar.
    ou.K = 1e4 * MatrixXd::Identity(2, 2);
    const VectorXd merton = (gamma * ou.Sigma).llt().solve(ou.B * ou.ybar);
    const VectorXd fast = kalman_plugin_rule(VectorXd(ou.ybar.array() + 0.1), MatrixXd::Zero(2, 2), ou, gamma, 1.5);
    EXPECT_LT((fast - merton).norm(), 1e-3 * merton.norm());
    // Short horizon: myopic rule on the current estimate.
    ou.K = MatrixXd::Identity(2, 2);
    const VectorXd yh = VectorXd::Constant(2, 0.1);
    const VectorXd shorth = kalman_plugin_rule(yh, 0.05 * MatrixXd::Identity(2, 2), ou, gamma, 1e-6);
    EXPECT_LT((shorth - (gamma * ou.Sigma).llt().solve(ou.B * yh)).norm(), 1e-6);
    ou.ybar.setZero();
    EXPECT_EQ(kalman_plugin_rule(VectorXd::Zero(2), MatrixXd::Zero(2, 2), ou, gamma, 1.5).norm(), 0.0);
}

TEST(ToyMerton, PairFormulas) {
    auto [a, q] = toy_merton_pair(0.06, 0.0, 0.04, 2.0, 1.5);
    EXPECT_EQ(a, q);
    EXPECT_NEAR(a, 0.75, 1e-15);
    std::tie(a, q) = toy_merton_pair(0.06, 0.01, 0.04, 2.0, 1.5);
    EXPECT_NEAR(a, 0.75, 1e-15);
    EXPECT_NEAR(q, 0.631579, 1e-6);
    EXPECT_LT(q, a);
    const double g = grid_argmax([](double p) {
        return constant_pi_objective(vec1(p), 1.0, 0.03, vec1(0.06), mat1(0.04), mat1(0.01), 2.0, 1.5);
    }, 0.0, 1.5, 1e-5);
    EXPECT_NEAR(g, q, 1e-5);
}
