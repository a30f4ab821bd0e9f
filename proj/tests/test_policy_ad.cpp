#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ppgdpo/adjoint.hpp"

using namespace ppgdpo;

namespace {

/// Static market with a drift draw, or OU market with a factor draw.
Problem static_problem(int d, int N, std::uint64_t seed, double s = 0.05) {
    auto mk = gen_apt_market(d, std::min(5, d), AptScale{}, seed);
    if (s > 0.0) mk.q.cov = build_uncertainty_aligned(mk.Sigma, s);
    RolloutConfig rc;
    rc.N = N;
    return Problem::static_market(mk, 2.0, rc);
}

Problem ou_problem(int d, int m, int N, std::uint64_t seed) {
    const auto base = gen_apt_market(d, std::min(5, d), AptScale{}, seed);
    OuParams p;
    p.mfac = m;
    p.loading_scale = 1.0;
    auto ou = make_ou_market(base, p);
    ou.q0.cov = build_P0_geometry(ou, 1e-2, Geometry::aligned, seed);
    RolloutConfig rc;
    rc.N = N;
    return Problem::ou_market(ou, 3.0, rc);
}

/// Non-trivial random net (head not zero) so every parameter matters.
PolicyNet random_net(int d, int obs_y, std::uint64_t seed, std::vector<int> hidden = {8, 8}) {
    NetArchitecture a;
    a.hidden = hidden;
    a.d = d;
    a.obs_y = obs_y;
    a.zero_output = false;
    PolicyNet net = make_policy_net(a, seed);
    // Shrink so leverage stays moderate.
    net.output_scale *= 0.5;
    return net;
}

RolloutBatch one_batch(const Problem& pb, int M, std::uint64_t seed) {
    Stream s(seed, {42});
    std::vector<double> x0;
    std::vector<std::uint64_t> keys;
    for (int j = 0; j < M; ++j) {
        x0.push_back(s.uniform(0.5, 1.5));
        keys.push_back(stream_key(seed, {tag::noise, static_cast<std::uint64_t>(j)}));
    }
    auto th = sample_theta(pb.theta_law, M, false, s);
    std::vector<VectorXd> tv;
    for (auto& t : th) tv.push_back(t.value);
    return make_batch(pb, x0, tv, keys);
}

double mean_utility(const PolicyNet& net, const Problem& pb, const RolloutBatch& b) {
    return euler_rollout(net, pb.model, b, pb.rollout).utility.mean();
}

/// Relative error with a floor tied to the overall gradient scale.
double rel_err(double a, double b, double floor) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor}); }

}  // namespace

TEST(Jet2Test, ScalarProductAndChainRulesMatchFiniteDifferences) {
    // f(u, v) = tanh(u v) * log(u) + exp(v) u, at (0.7, 1.3).
    auto f = [](double u, double v) { return std::tanh(u * v) * std::log(u) + std::exp(v) * u; };
    const double u0 = 0.7, v0 = 1.3, h = 1e-4;
    Jet2 u = Jet2::variable(MatrixXd::Constant(1, 1, u0), 0, 2);
    Jet2 v = Jet2::variable(MatrixXd::Constant(1, 1, v0), 1, 2);
    Jet2 F = hadamard(ppgdpo::tanh(hadamard(u, v)), ppgdpo::log(u)) + hadamard(ppgdpo::exp(v), u);
    EXPECT_NEAR(F.val(0, 0), f(u0, v0), 1e-15);
    const double fu = (f(u0 + h, v0) - f(u0 - h, v0)) / (2 * h);
    const double fv = (f(u0, v0 + h) - f(u0, v0 - h)) / (2 * h);
    const double fuu = (f(u0 + h, v0) - 2 * f(u0, v0) + f(u0 - h, v0)) / (h * h);
    const double fvv = (f(u0, v0 + h) - 2 * f(u0, v0) + f(u0, v0 - h)) / (h * h);
    const double fuv = (f(u0 + h, v0 + h) - f(u0 + h, v0 - h) - f(u0 - h, v0 + h) + f(u0 - h, v0 - h)) / (4 * h * h);
    EXPECT_LE(rel_err(F.d1[0](0, 0), fu, 1e-12), 1e-6);
    EXPECT_LE(rel_err(F.d1[1](0, 0), fv, 1e-12), 1e-6);
    EXPECT_LE(rel_err(F.h(0, 0)(0, 0), fuu, 1e-12), 1e-6);
    EXPECT_LE(rel_err(F.h(1, 1)(0, 0), fvv, 1e-12), 1e-6);
    EXPECT_LE(rel_err(F.h(0, 1)(0, 0), fuv, 1e-12), 1e-6);
}

TEST(Jet2Test, CrraUtilityDerivativesExact) {
    const double x = 1.7, g = 3.0;
    const Jet2 U = crra_utility(Jet2::variable(MatrixXd::Constant(1, 1, x), 0, 1), g);
    EXPECT_DOUBLE_EQ(U.val(0, 0), std::pow(x, -2.0) / -2.0);
    EXPECT_DOUBLE_EQ(U.d1[0](0, 0), std::pow(x, -g));
    EXPECT_DOUBLE_EQ(U.h(0, 0)(0, 0), -g * std::pow(x, -g) / x);
}

TEST(PolicyForward, ZeroHeadGivesZeroAndIsDeterministic) {
    NetArchitecture a;
    a.d = 4;
    PolicyNet net = make_policy_net(a, 1);
    EXPECT_EQ(policy_forward(net, 0.3, 1.2).norm(), 0.0);
    PolicyNet r = random_net(4, 2, 3);
    const VectorXd y = VectorXd::Constant(2, 0.1);
    const VectorXd a1 = policy_forward(r, 0.3, 1.2, y), a2 = policy_forward(r, 0.3, 1.2, y);
    EXPECT_EQ(std::memcmp(a1.data(), a2.data(), sizeof(double) * 4), 0);
    EXPECT_THROW(policy_forward(r, 0.3, -1.0, y), std::invalid_argument);
    EXPECT_THROW(policy_forward(r, 0.3, std::nan(""), y), std::invalid_argument);
    EXPECT_EQ(net.output_scale, 0.5);
}

TEST(PolicyForward, JetJacobianMatchesFiniteDifferences) {
    const PolicyNet net = random_net(3, 2, 9);
    const double t = 0.4, x = 1.3, h = 1e-4;
    VectorXd y(2);
    y << 0.2, -0.1;
    const Jet2 tj = Jet2::constant(MatrixXd::Constant(1, 1, t / net.horizon), 3);
    const Jet2 lx = Jet2::variable(MatrixXd::Constant(1, 1, std::log(x)), 0, 3);
    Jet2 yj = Jet2::constant(y, 3);
    yj.d1[1](0, 0) = 1.0;
    yj.d1[2](1, 0) = 1.0;
    const Jet2 out = mlp_forward_jet(net, vstack({&tj, &lx, &yj}));
    for (int i = 0; i < 3; ++i) {
        const double dlx = (policy_forward(net, t, x * std::exp(h), y)(i) - policy_forward(net, t, x * std::exp(-h), y)(i)) / (2 * h);
        EXPECT_LE(rel_err(out.d1[0](i, 0), dlx, 1e-10), 1e-6);
        for (int k = 0; k < 2; ++k) {
            VectorXd yp = y, ym = y;
            yp(k) += h;
            ym(k) -= h;
            const double dy = (policy_forward(net, t, x, yp)(i) - policy_forward(net, t, x, ym)(i)) / (2 * h);
            EXPECT_LE(rel_err(out.d1[1 + k](i, 0), dy, 1e-10), 1e-6);
        }
    }
}

TEST(Bptt, ZeroOutputScaleBlocksAllSensitivity) {
    auto pb = static_problem(3, 20, 1);
    pb.model.r = 0.0;
    PolicyNet net = random_net(3, 0, 2);
    net.output_scale = 0.0;
    const auto b = one_batch(pb, 4, 3);
    const auto g = bptt_param_gradient(net, pb.model, b, pb.rollout);
    EXPECT_EQ(g.grad.norm(), 0.0);
}

TEST(Bptt, OneStepChainRuleClosedForm) {
    // d = 1, N = 1: dU/dphi = U'(X_1) X_0 (theta dt + sigma dW) dpi/dphi.
    StaticDriftMarket mk;
    mk.d = 1;
    mk.r = 0.03;
    mk.m = VectorXd::Constant(1, 0.06);
    mk.Sigma = MatrixXd::Constant(1, 1, 0.04);
    mk.q = GaussianLaw::point_mass(mk.m);
    RolloutConfig rc;
    rc.N = 1;
    auto pb = Problem::static_market(mk, 2.0, rc);
    const PolicyNet net = random_net(1, 0, 4, {5});
    const auto b = one_batch(pb, 1, 5);
    const auto g = bptt_param_gradient(net, pb.model, b, pb.rollout);
    const double X0 = b.x0(0);
    const double v = 0.06 * 1.5 + 0.2 * b.dZ[0](0, 0);
    const double pi = policy_forward(net, 0.0, X0)(0);
    const double X1 = X0 * (1.0 + 0.03 * 1.5 + pi * v);
    // dpi/dphi from the MLP reverse pass alone.
    std::vector<MatrixXd> acts;
    RowVectorXd xr(1);
    xr(0) = X0;
    mlp_forward_record(net, net.features(0.0, xr, MatrixXd(0, 1)), acts);
    VectorXd dpi = VectorXd::Zero(net.num_params());
    mlp_backward(net, acts, MatrixXd::Ones(1, 1), dpi);
    const VectorXd expect = std::pow(X1, -2.0) * X0 * v * dpi;
    EXPECT_LE((g.grad - expect).cwiseAbs().maxCoeff(), 1e-12 * std::max(1.0, expect.cwiseAbs().maxCoeff()));
}

TEST(Bptt, MatchesCentralFiniteDifferences) {
    for (std::uint64_t rep = 0; rep < 3; ++rep) {
        const auto pb = (rep == 2) ? ou_problem(3, 2, 30, 10 + rep) : static_problem(3, 30, 10 + rep);
        PolicyNet net = random_net(3, rep == 2 ? 2 : 0, 20 + rep);
        const auto b = one_batch(pb, 1, 30 + rep);
        const auto g = bptt_param_gradient(net, pb.model, b, pb.rollout);
        const VectorXd phi = net.params();
        const double h = 1e-5;
        const double floor = 1e-8 * g.grad.cwiseAbs().maxCoeff();
        int bad = 0;
        for (Index i = 0; i < phi.size(); ++i) {
            VectorXd p = phi;
            p(i) += h;
            net.set_params(p);
            const double up = mean_utility(net, pb, b);
            p(i) -= 2 * h;
            net.set_params(p);
            const double dn = mean_utility(net, pb, b);
            net.set_params(phi);
            if (rel_err(g.grad(i), (up - dn) / (2 * h), floor) > 1e-4) ++bad;
        }
        EXPECT_LE(bad, phi.size() / 100) << "rep " << rep;
    }
}

TEST(Bptt, TapeReplayIsBitIdentical) {
    const auto pb = static_problem(3, 20, 3);
    const PolicyNet net = random_net(3, 0, 5);
    const auto b = one_batch(pb, 16, 7);
    const Tape tp = record_tape(net, pb.model, b, pb.rollout);
    const auto g1 = tape_adjoint(net, pb.model, tp);
    const auto g2 = tape_adjoint(net, pb.model, tp);
    ASSERT_EQ(g1.grad.size(), g2.grad.size());
    EXPECT_EQ(std::memcmp(g1.grad.data(), g2.grad.data(), sizeof(double) * g1.grad.size()), 0);
}

TEST(Bptt, AntitheticNoiseLowersGradientVariance) {
    const auto pb = static_problem(2, 20, 4, 0.0);
    const PolicyNet net = random_net(2, 0, 6);
    const int pairs = 1000;
    auto pair_grad = [&](bool anti, int i) {
        const std::uint64_t k1 = stream_key(77, {tag::noise, std::uint64_t(2 * i)});
        const std::uint64_t k2 = anti ? k1 : stream_key(77, {tag::noise, std::uint64_t(2 * i + 1)});
        const std::vector<double> sg = {1.0, anti ? -1.0 : 1.0};
        const std::vector<VectorXd> th(2, pb.theta_law.mean);
        const auto b = make_batch(pb, {1.0, 1.0}, th, {k1, k2}, sg);
        return bptt_param_gradient(net, pb.model, b, pb.rollout).grad;
    };
    auto total_var = [&](bool anti) {
        std::vector<VectorXd> gs;
        for (int i = 0; i < pairs; ++i) gs.push_back(pair_grad(anti, i));
        VectorXd mean = VectorXd::Zero(gs[0].size());
        for (auto& g : gs) mean += g;
        mean /= pairs;
        double v = 0.0;
        for (auto& g : gs) v += (g - mean).squaredNorm();
        return v / (pairs - 1);
    };
    EXPECT_LT(total_var(true), total_var(false));
}

TEST(Costates, TerminalConditionsExact) {
    const auto pb = ou_problem(2, 1, 10, 5);
    const PolicyNet net = random_net(2, 1, 1);
    const auto b = one_batch(pb, 5, 2);
    const auto cb = costate_blocks(net, pb.model, b, pb.rollout, pb.rollout.N);
    const auto tb = euler_rollout(net, pb.model, b, pb.rollout);
    for (Index j = 0; j < 5; ++j) {
        const double X = tb.X.back()(j);
        EXPECT_EQ(cb.p(j), std::pow(X, -3.0));
        EXPECT_EQ(cb.p_x(j), -3.0 * std::pow(X, -3.0) / X);
        EXPECT_EQ(cb.p_y(0, j), 0.0);
    }
}

TEST(Costates, ZeroPolicyClosedForm) {
    const auto pb = static_problem(3, 40, 6);
    NetArchitecture a;
    a.d = 3;
    a.hidden = {8};
    const PolicyNet net = make_policy_net(a, 3);
    const auto b = one_batch(pb, 3, 4);
    const int k = 15;
    const auto cb = costate_blocks(net, pb.model, b, pb.rollout, k);
    const double growth = 1.0 + pb.model.r * pb.rollout.dt();
    const auto tb = euler_rollout(net, pb.model, b, pb.rollout);
    for (Index j = 0; j < 3; ++j) {
        const double XN = tb.X.back()(j);
        EXPECT_NEAR(cb.p(j), std::pow(XN, -2.0) * std::pow(growth, 40 - k), 1e-13 * cb.p(j));
        EXPECT_NEAR(cb.p_x(j), -2.0 * std::pow(XN, -3.0) * std::pow(growth, 2 * (40 - k)), 1e-13 * std::abs(cb.p_x(j)));
    }
}

TEST(Costates, MatchSecondOrderFiniteDifferences) {
    const auto pb = ou_problem(3, 2, 25, 8);
    const PolicyNet net = random_net(3, 2, 11);
    const auto b = one_batch(pb, 1, 12);
    const int m = 2;
    for (int k : {0, 7, 19}) {
        // State at step k from the plain rollout, then perturb (X_k, Y_k).
        RolloutConfig head = pb.rollout;
        RolloutBatch hb = b;
        hb.dZ.resize(k);
        head.N = k;
        head.T = pb.rollout.time(k);
        RowVectorXd Xk = b.x0;
        MatrixXd Yk = b.y0;
        if (k > 0) {
            const auto tb = euler_rollout(net, pb.model, hb, head);
            Xk = tb.X.back();
            Yk = tb.Y.back();
        }
        const std::vector<MatrixXd> tail(b.dZ.begin() + k, b.dZ.end());
        const auto cb = costate_blocks_from(net, pb.model, pb.rollout, k, Xk, Yk, b.drift, tail);
        auto U = [&](double dx, const VectorXd& dy) {
            RolloutBatch tb2;
            tb2.k0 = k;
            tb2.x0 = Xk.array() + dx;
            tb2.y0 = Yk + dy;
            tb2.drift = b.drift;
            tb2.dZ = tail;
            return euler_rollout(net, pb.model, tb2, pb.rollout).utility(0);
        };
        const double hx = 1e-3 * Xk(0), hy = 1e-3;
        const VectorXd z = VectorXd::Zero(m);
        const double px = (U(hx, z) - U(-hx, z)) / (2 * hx);
        const double pxx = (U(hx, z) - 2 * U(0, z) + U(-hx, z)) / (hx * hx);
        EXPECT_LE(rel_err(cb.p(0), px, 1e-12), 1e-4) << "k=" << k;
        EXPECT_LE(rel_err(cb.p_x(0), pxx, 1e-12), 1e-4) << "k=" << k;
        for (int i = 0; i < m; ++i) {
            VectorXd e = VectorXd::Zero(m);
            e(i) = hy;
            const double pxy = (U(hx, e) - U(hx, -e) - U(-hx, e) + U(-hx, -e)) / (4 * hx * hy);
            EXPECT_LE(rel_err(cb.p_y(i, 0), pxy, 1e-6 * std::abs(cb.p(0))), 1e-4) << "k=" << k << " i=" << i;
        }
    }
}

TEST(Costates, ConstantPolicyHomogeneityAndNoCrossBlock) {
    const auto pb = static_problem(2, 20, 9);
    NetArchitecture a;
    a.d = 2;
    a.hidden = {4};
    PolicyNet net = make_policy_net(a, 1);
    net.layers.back().b << 0.4, -0.2;  // constant policy
    auto b = one_batch(pb, 4, 3);
    const auto c1 = costate_blocks(net, pb.model, b, pb.rollout, 0);
    b.x0 *= 2.0;
    const auto c2 = costate_blocks(net, pb.model, b, pb.rollout, 0);
    for (Index j = 0; j < 4; ++j) {
        EXPECT_NEAR(c2.p(j), std::pow(2.0, -2.0) * c1.p(j), 1e-12 * c1.p(j));
        EXPECT_NEAR(c2.p_x(j), std::pow(2.0, -3.0) * c1.p_x(j), 1e-12 * std::abs(c1.p_x(j)));
        EXPECT_EQ(c1.p_y.rows(), 0);
    }
    // For a policy that ignores state on a factor market, the cross block is pure drift exposure; on a
    // factor-free market it does not exist: check p_y = 0 when B = 0.
    auto pou = ou_problem(2, 1, 20, 4);
    pou.model.B.setZero();
    PolicyNet c = make_policy_net(NetArchitecture{{4}, 2, 1, 1.5, -1.0, true}, 2);
    c.layers.back().b << 0.3, 0.1;
    const auto bo = one_batch(pou, 3, 5);
    const auto co = costate_blocks(c, pou.model, bo, pou.rollout, 0);
    EXPECT_EQ(co.p_y.cwiseAbs().maxCoeff(), 0.0);
}
