#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

namespace ppgdpo {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::RowVectorXd;
using Eigen::VectorXd;

/// Largest absolute entry of M - M^T.
inline double max_asymmetry(const MatrixXd& M) {
    if (M.rows() != M.cols()) throw std::invalid_argument("max_asymmetry: matrix not square");
    if (M.size() == 0) return 0.0;
    return (M - M.transpose()).cwiseAbs().maxCoeff();
}

inline MatrixXd symmetrize(const MatrixXd& M) { return 0.5 * (M + M.transpose()); }

/// Smallest eigenvalue of the symmetric part.
inline double min_eigenvalue(const MatrixXd& M) {
    if (M.size() == 0) return 0.0;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(M), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

inline void require_square(const MatrixXd& M, Index n, const std::string& what) {
    if (M.rows() != n || M.cols() != n)
        throw std::invalid_argument(what + ": expected " + std::to_string(n) + "x" + std::to_string(n) +
                                    ", got " + std::to_string(M.rows()) + "x" + std::to_string(M.cols()));
}

inline void require_symmetric_psd(const MatrixXd& M, const std::string& what, double tol = 1e-10) {
    if (M.rows() != M.cols()) throw std::invalid_argument(what + ": not square");
    if (!M.allFinite()) throw std::invalid_argument(what + ": non-finite entries");
    const double asym = max_asymmetry(M);
    if (asym > tol) throw std::invalid_argument(what + ": asymmetric (max |M - M^T| = " + std::to_string(asym) + ")");
    const double lmin = min_eigenvalue(M);
    if (lmin < -tol) throw std::invalid_argument(what + ": not PSD (min eigenvalue " + std::to_string(lmin) + ")");
}

/// Symmetric PSD square root via eigendecomposition.
inline MatrixXd sym_sqrt(const MatrixXd& M) {
    if (M.size() == 0) return M;
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(M));
    VectorXd w = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * w.asDiagonal() * es.eigenvectors().transpose();
}

/// Factor F with F F^T = C. Cholesky when possible, eigen-based for singular PSD input.
inline MatrixXd psd_factor(const MatrixXd& C, double tol = 1e-10) {
    if (C.size() == 0) return C;
    Eigen::LLT<MatrixXd> llt(C);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrize(C));
    const double lmin = es.eigenvalues().minCoeff();
    const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
    if (lmin < -tol * scale)
        throw std::invalid_argument("psd_factor: indefinite covariance (min eigenvalue " + std::to_string(lmin) + ")");
    VectorXd w = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * w.asDiagonal();
}

/// Solve S x = b for symmetric positive definite S; throws with the min eigenvalue otherwise.
inline VectorXd spd_solve(const MatrixXd& S, const VectorXd& b, const std::string& what) {
    Eigen::LLT<MatrixXd> llt(symmetrize(S));
    if (llt.info() != Eigen::Success)
        throw std::domain_error(what + ": system matrix not positive definite (min eigenvalue " +
                                std::to_string(min_eigenvalue(S)) + ")");
    return llt.solve(b);
}

/// exp(M) by Pade(13) scaling and squaring.
inline MatrixXd expm(const MatrixXd& M) {
    if (M.size() == 0) return M;
    return M.exp();
}

/// 2-norm condition number of a square matrix.
inline double condition_number(const MatrixXd& M) {
    if (M.size() == 0) return 1.0;
    Eigen::JacobiSVD<MatrixXd> svd(M);
    const auto& s = svd.singularValues();
    const double smin = s(s.size() - 1);
    if (!(smin > 0.0)) return std::numeric_limits<double>::infinity();
    return s(0) / smin;
}

struct QuadratureResult {
    MatrixXd value;
    long panels = 0;
    bool converged = false;
};

/// Composite Simpson for a matrix-valued integrand on [a, b], doubling the panel count until
/// successive estimates agree to rel_tol (Frobenius), capped at max_panels.
template <class F>
QuadratureResult simpson(F&& f, double a, double b, double rel_tol = 1e-10, long max_panels = 1L << 16) {
    const MatrixXd fa = f(a);
    const MatrixXd fb = f(b);
    long n = 2;
    double h = (b - a) / n;
    MatrixXd ends = fa + fb;
    MatrixXd even = MatrixXd::Zero(fa.rows(), fa.cols());
    MatrixXd odd = f(a + h);
    MatrixXd prev = h / 3.0 * (ends + 4.0 * odd + 2.0 * even);
    QuadratureResult out;
    while (n < max_panels) {
        even += odd;
        n *= 2;
        h = (b - a) / n;
        odd.setZero();
        for (long i = 1; i < n; i += 2) odd += f(a + i * h);
        MatrixXd cur = h / 3.0 * (ends + 4.0 * odd + 2.0 * even);
        const double diff = (cur - prev).norm();
        const double mag = cur.norm();
        prev = std::move(cur);
        if (diff <= rel_tol * mag || (mag == 0.0 && diff == 0.0)) {
            out.converged = true;
            break;
        }
    }
    out.value = std::move(prev);
    out.panels = n;
    return out;
}

/// In-place tanh through the vectorized exponential; tanh(x) = 1 - 2 / (exp(2x) + 1).
template <class Derived>
inline void tanh_inplace(Eigen::MatrixBase<Derived>& M) {
    M.derived() = (1.0 - 2.0 / ((2.0 * M.array()).exp() + 1.0)).matrix();
}

inline std::uint64_t fnv1a_hash(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace ppgdpo
