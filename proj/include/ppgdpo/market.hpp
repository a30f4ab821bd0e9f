#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "rng.hpp"

namespace ppgdpo {

struct GaussianLaw {
    VectorXd mean;
    MatrixXd cov;

    Index dim() const { return mean.size(); }

    void validate(const std::string& what = "GaussianLaw") const {
        require_square(cov, mean.size(), what + ".cov");
        require_symmetric_psd(cov, what + ".cov");
    }

    static GaussianLaw point_mass(const VectorXd& m) { return {m, MatrixXd::Zero(m.size(), m.size())}; }
};

struct FactorData {
    MatrixXd B;        // d x k loadings
    MatrixXd Sigma_f;  // k x k factor covariance
    VectorXd D;        // idiosyncratic variances
    VectorXd lambda_m; // factor prices
};

struct StaticDriftMarket {
    double r = 0.03;
    int d = 0;
    VectorXd m;
    MatrixXd Sigma;
    GaussianLaw q;
    FactorData factor_data;

    void validate() const {
        if (d < 1) throw std::invalid_argument("StaticDriftMarket: d must be >= 1");
        if (m.size() != d) throw std::invalid_argument("StaticDriftMarket: m has wrong length");
        require_square(Sigma, d, "StaticDriftMarket.Sigma");
        require_symmetric_psd(Sigma, "StaticDriftMarket.Sigma");
        if (min_eigenvalue(Sigma) <= 0.0) throw std::invalid_argument("StaticDriftMarket.Sigma: not positive definite");
        if (q.dim() != d) throw std::invalid_argument("StaticDriftMarket.q: wrong dimension");
        q.validate("StaticDriftMarket.q");
    }
};

struct OUFactorMarket {
    double r = 0.03;
    int d = 0;
    int mfac = 0;
    MatrixXd K;     // m x m, Hurwitz under the K(ybar - Y) convention
    VectorXd ybar;  // m
    MatrixXd Xi;    // m x m
    MatrixXd B;     // d x m
    MatrixXd Sigma; // d x d
    MatrixXd rho;   // d x m
    GaussianLaw q0; // law of Y_0

    void validate() const {
        if (d < 1 || mfac < 1) throw std::invalid_argument("OUFactorMarket: need d >= 1 and m >= 1");
        require_square(K, mfac, "OUFactorMarket.K");
        require_square(Xi, mfac, "OUFactorMarket.Xi");
        require_square(Sigma, d, "OUFactorMarket.Sigma");
        if (ybar.size() != mfac) throw std::invalid_argument("OUFactorMarket.ybar: wrong length");
        if (B.rows() != d || B.cols() != mfac) throw std::invalid_argument("OUFactorMarket.B: wrong shape");
        if (rho.rows() != d || rho.cols() != mfac) throw std::invalid_argument("OUFactorMarket.rho: wrong shape");
        Eigen::EigenSolver<MatrixXd> es(K, false);
        if (es.eigenvalues().real().minCoeff() <= 0.0)
            throw std::invalid_argument("OUFactorMarket.K: not Hurwitz (eigenvalue with non-positive real part)");
        require_symmetric_psd(Sigma, "OUFactorMarket.Sigma");
        if (min_eigenvalue(Sigma) <= 0.0) throw std::invalid_argument("OUFactorMarket.Sigma: not positive definite");
        Eigen::SelfAdjointEigenSolver<MatrixXd> rr(rho.transpose() * rho, Eigen::EigenvaluesOnly);
        if (rr.eigenvalues().maxCoeff() > 1.0 + 1e-10)
            throw std::invalid_argument("OUFactorMarket.rho: rho^T rho exceeds identity");
        if (q0.dim() != mfac) throw std::invalid_argument("OUFactorMarket.q0: wrong dimension");
        q0.validate("OUFactorMarket.q0");
    }
};

struct ThetaDraw {
    VectorXd value;
    std::optional<int> antithetic_pair_id;
};

/// Generation ranges for APT-style instances.
struct AptScale {
    double loading_sd = 0.2;
    double factor_var_lo = 0.02, factor_var_hi = 0.06;
    double idio_var_lo = 0.01, idio_var_hi = 0.04;
    double lambda_lo = 0.04, lambda_hi = 0.12;
    double r = 0.03;
};

inline int default_factor_count(int d) { return std::min(5, d); }

inline StaticDriftMarket gen_apt_market(int d, int k, const AptScale& sc, std::uint64_t seed) {
    if (d < 1) throw std::invalid_argument("gen_apt_market: d must be >= 1, got " + std::to_string(d));
    if (k < 0 || k > d)
        throw std::invalid_argument("gen_apt_market: need 0 <= k <= d, got k=" + std::to_string(k) +
                                    " d=" + std::to_string(d));
    if (sc.idio_var_lo <= 0.0 || sc.idio_var_hi < sc.idio_var_lo || sc.factor_var_lo < 0.0 ||
        sc.factor_var_hi < sc.factor_var_lo || sc.loading_sd < 0.0)
        throw std::invalid_argument("gen_apt_market: invalid scale parameters");
    const bool no_factor = (k == 0);
    const int kk = no_factor ? 1 : k;
    Stream rng(seed, {tag::market, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(k)});

    FactorData f;
    f.B = MatrixXd::Zero(d, kk);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < kk; ++j) f.B(i, j) = sc.loading_sd * rng.normal();
    f.Sigma_f = MatrixXd::Zero(kk, kk);
    for (int j = 0; j < kk; ++j) f.Sigma_f(j, j) = rng.uniform(sc.factor_var_lo, sc.factor_var_hi);
    f.D.resize(d);
    for (int i = 0; i < d; ++i) f.D(i) = rng.uniform(sc.idio_var_lo, sc.idio_var_hi);
    f.lambda_m.resize(kk);
    for (int j = 0; j < kk; ++j) f.lambda_m(j) = rng.uniform(sc.lambda_lo, sc.lambda_hi);
    if (no_factor) {
        f.B.setZero();
        f.lambda_m.setZero();
    }

    StaticDriftMarket mk;
    mk.r = sc.r;
    mk.d = d;
    mk.Sigma = f.B * f.Sigma_f * f.B.transpose();
    mk.Sigma.diagonal() += f.D;
    mk.Sigma = symmetrize(mk.Sigma);
    mk.m = f.B * f.lambda_m;
    mk.q = GaussianLaw::point_mass(mk.m);
    mk.factor_data = std::move(f);
    return mk;
}

inline MatrixXd build_uncertainty_aligned(const MatrixXd& Sigma, double s) {
    if (!(s > 0.0)) throw std::invalid_argument("build_uncertainty_aligned: s must be > 0");
    return s * Sigma;
}

/// Misaligned uncertainty: a fresh loading matrix with its columns projected off the market
/// factor directions, rescaled to carry the same factor trace as the aligned construction.
/// When k >= d the factor span is the whole space; the projection then removes the d-1 leading
/// factor directions, which leaves the least-loaded direction.
inline MatrixXd build_uncertainty_misaligned(const StaticDriftMarket& mk, double s, std::uint64_t seed,
                                             const AptScale& sc = {}) {
    if (!(s > 0.0)) throw std::invalid_argument("build_uncertainty_misaligned: s must be > 0");
    const FactorData& f = mk.factor_data;
    const int d = mk.d;
    const int k = static_cast<int>(f.B.cols());
    if (f.B.rows() != d) throw std::invalid_argument("build_uncertainty_misaligned: factor data has wrong shape");
    Stream rng(seed, {tag::misaligned, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(k)});

    MatrixXd Bt(d, k);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < k; ++j) Bt(i, j) = sc.loading_sd * rng.normal();
    MatrixXd Sft = MatrixXd::Zero(k, k);
    for (int j = 0; j < k; ++j) Sft(j, j) = rng.uniform(sc.factor_var_lo, sc.factor_var_hi);

    const MatrixXd F = f.B * f.Sigma_f.cwiseMax(0.0).cwiseSqrt();
    Eigen::JacobiSVD<MatrixXd> svd(F, Eigen::ComputeThinU);
    const auto& sv = svd.singularValues();
    int rank = 0;
    const double svtol = 1e-12 * std::max(1.0, sv.size() ? sv(0) : 0.0);
    for (Index i = 0; i < sv.size(); ++i)
        if (sv(i) > svtol) ++rank;
    const int r = std::min(rank, d - 1);
    if (r > 0) {
        const MatrixXd U = svd.matrixU().leftCols(r);
        Bt -= U * (U.transpose() * Bt);
        Bt -= U * (U.transpose() * Bt);  // second pass for orthogonality to round-off
    }

    MatrixXd factor = Bt * Sft * Bt.transpose();
    const double target = s * (f.B * f.Sigma_f * f.B.transpose()).trace();
    const double tr = factor.trace();
    if (tr > 0.0)
        factor *= target / tr;
    else
        factor.setZero();
    MatrixXd P = factor;
    P.diagonal() += s * f.D;
    return symmetrize(P);
}

/// Haar orthogonal matrix: QR of a Gaussian matrix with the sign of diag(R) fixed positive.
inline MatrixXd haar_orthogonal(int n, Stream& rng) {
    MatrixXd G(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) G(i, j) = rng.normal();
    Eigen::HouseholderQR<MatrixXd> qr(G);
    MatrixXd Q = qr.householderQ() * MatrixXd::Identity(n, n);
    const MatrixXd R = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < n; ++j)
        if (R(j, j) < 0.0) Q.col(j) *= -1.0;
    return Q;
}

enum class Geometry { aligned, misaligned };

inline std::string to_string(Geometry g) { return g == Geometry::aligned ? "aligned" : "misaligned"; }

inline Geometry geometry_from_string(const std::string& s) {
    if (s == "aligned") return Geometry::aligned;
    if (s == "misaligned") return Geometry::misaligned;
    throw std::invalid_argument("unknown geometry '" + s + "' (expected aligned or misaligned)");
}

inline MatrixXd build_P0_geometry(const OUFactorMarket& ou, double s0, Geometry mode, std::uint64_t seed) {
    if (!(s0 > 0.0)) throw std::invalid_argument("build_P0_geometry: s0 must be > 0");
    const MatrixXd Si_B = Eigen::LLT<MatrixXd>(ou.Sigma).solve(ou.B);
    const MatrixXd info = symmetrize(ou.B.transpose() * Si_B);
    Eigen::SelfAdjointEigenSolver<MatrixXd> ei(info);
    const VectorXd& w = ei.eigenvalues();
    const double wmax = std::max(w.cwiseAbs().maxCoeff(), 1e-300);
    int defect = 0;
    for (Index i = 0; i < w.size(); ++i)
        if (w(i) <= 1e-12 * wmax) ++defect;
    if (defect > 0)
        throw std::domain_error("build_P0_geometry: B^T Sigma^-1 B is singular (rank defect " +
                                std::to_string(defect) + " of " + std::to_string(w.size()) + ")");
    const MatrixXd U = ei.eigenvectors();
    VectorXd lam = w.cwiseInverse();
    const int m = ou.mfac;
    lam *= s0 * m / lam.sum();
    MatrixXd V = U;
    if (mode == Geometry::misaligned) {
        Stream rng(seed, {tag::rotation, static_cast<std::uint64_t>(m)});
        V = U * haar_orthogonal(m, rng);
    }
    return symmetrize(V * lam.asDiagonal() * V.transpose());
}

/// Derived OU instance: the first m APT factors become the premium factors.
struct OuParams {
    int mfac = 1;
    double loading_scale = 0.05;
    double kappa = 1.0;
    double xi = 0.25;
    double rho0 = 0.5;
};

inline MatrixXd rho_matrix(int d, int m, double rho0) {
    if (m > d) throw std::invalid_argument("rho_matrix: need m <= d");
    MatrixXd rho = MatrixXd::Zero(d, m);
    rho.topRows(m) = rho0 * MatrixXd::Identity(m, m);
    return rho;
}

inline OUFactorMarket make_ou_market(const StaticDriftMarket& base, const OuParams& p) {
    const FactorData& f = base.factor_data;
    const int kf = static_cast<int>(f.B.cols());
    if (p.mfac < 1 || p.mfac > kf)
        throw std::invalid_argument("make_ou_market: need 1 <= m <= k (k=" + std::to_string(kf) + ")");
    if (!(p.kappa > 0.0)) throw std::invalid_argument("make_ou_market: kappa must be > 0");
    if (std::abs(p.rho0) > 1.0) throw std::invalid_argument("make_ou_market: |rho0| must be <= 1");
    OUFactorMarket ou;
    ou.r = base.r;
    ou.d = base.d;
    ou.mfac = p.mfac;
    ou.K = p.kappa * MatrixXd::Identity(p.mfac, p.mfac);
    ou.ybar = f.lambda_m.head(p.mfac);
    ou.Xi = p.xi * MatrixXd::Identity(p.mfac, p.mfac);
    ou.B = p.loading_scale * f.B.leftCols(p.mfac);
    ou.Sigma = base.Sigma;
    ou.rho = rho_matrix(base.d, p.mfac, p.rho0);
    ou.q0 = GaussianLaw::point_mass(ou.ybar);
    return ou;
}

/// theta = mean + F z with F F^T = cov; antithetic mode emits (z, -z) pairs.
inline std::vector<ThetaDraw> sample_theta(const GaussianLaw& q, int n, bool antithetic, Stream& rng) {
    if (n < 1) throw std::invalid_argument("sample_theta: n must be >= 1");
    if (antithetic && n % 2 != 0) throw std::invalid_argument("sample_theta: antithetic sampling needs even n");
    const MatrixXd F = psd_factor(q.cov);
    const Index k = q.dim();
    std::vector<ThetaDraw> out;
    out.reserve(n);
    VectorXd z(k);
    for (int i = 0; i < n; ++i) {
        if (!antithetic || i % 2 == 0)
            for (Index j = 0; j < k; ++j) z(j) = rng.normal();
        const VectorXd zz = (antithetic && i % 2 == 1) ? VectorXd(-z) : z;
        ThetaDraw t;
        t.value = k ? VectorXd(q.mean + F * zz) : q.mean;
        if (antithetic) t.antithetic_pair_id = i / 2;
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace ppgdpo
