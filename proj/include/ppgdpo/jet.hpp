#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "linalg.hpp"

namespace ppgdpo {

/// Second-order forward jet over n seeded directions. Each field is a rows x cols block so one Jet2
/// carries a whole batch of independent scalars (columns are trajectories); a 1x1 block is the scalar
/// case. d2 stores the symmetric Hessian block packed as (i <= j).
struct Jet2 {
    MatrixXd val;
    std::vector<MatrixXd> d1;
    std::vector<MatrixXd> d2;

    int n_dirs() const { return static_cast<int>(d1.size()); }
    Index rows() const { return val.rows(); }
    Index cols() const { return val.cols(); }

    static int idx(int i, int j, int n) {
        if (i > j) std::swap(i, j);
        return i * n - i * (i - 1) / 2 + (j - i);
    }
    static int packed_size(int n) { return n * (n + 1) / 2; }

    const MatrixXd& h(int i, int j) const { return d2[idx(i, j, n_dirs())]; }
    MatrixXd& h(int i, int j) { return d2[idx(i, j, n_dirs())]; }

    static Jet2 constant(const MatrixXd& v, int n) {
        Jet2 J;
        J.val = v;
        J.d1.assign(n, MatrixXd::Zero(v.rows(), v.cols()));
        J.d2.assign(packed_size(n), MatrixXd::Zero(v.rows(), v.cols()));
        return J;
    }
    /// Independent variable seeded along direction dir (every entry gets unit tangent).
    static Jet2 variable(const MatrixXd& v, int dir, int n) {
        Jet2 J = constant(v, n);
        J.d1[dir].setOnes();
        return J;
    }

    bool all_finite() const {
        if (!val.allFinite()) return false;
        for (const auto& m : d1)
            if (!m.allFinite()) return false;
        for (const auto& m : d2)
            if (!m.allFinite()) return false;
        return true;
    }
};

inline void check_same_shape(const Jet2& a, const Jet2& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols() || a.n_dirs() != b.n_dirs())
        throw std::invalid_argument(std::string("Jet2 ") + op + ": shape mismatch");
}

inline Jet2 operator+(const Jet2& a, const Jet2& b) {
    check_same_shape(a, b, "+");
    Jet2 c = a;
    c.val += b.val;
    for (int i = 0; i < a.n_dirs(); ++i) c.d1[i] += b.d1[i];
    for (std::size_t k = 0; k < a.d2.size(); ++k) c.d2[k] += b.d2[k];
    return c;
}

inline Jet2 operator-(const Jet2& a, const Jet2& b) {
    check_same_shape(a, b, "-");
    Jet2 c = a;
    c.val -= b.val;
    for (int i = 0; i < a.n_dirs(); ++i) c.d1[i] -= b.d1[i];
    for (std::size_t k = 0; k < a.d2.size(); ++k) c.d2[k] -= b.d2[k];
    return c;
}

inline Jet2 operator*(double s, const Jet2& a) {
    Jet2 c = a;
    c.val *= s;
    for (auto& m : c.d1) m *= s;
    for (auto& m : c.d2) m *= s;
    return c;
}

/// a + constant block.
inline Jet2 operator+(const Jet2& a, const MatrixXd& k) {
    Jet2 c = a;
    c.val += k;
    return c;
}

/// W a + b (b broadcast over columns; may be empty).
inline Jet2 linear(const MatrixXd& W, const Jet2& a, const VectorXd& b = VectorXd()) {
    Jet2 c;
    c.val = W * a.val;
    if (b.size()) c.val.colwise() += b;
    c.d1.reserve(a.d1.size());
    for (const auto& m : a.d1) c.d1.push_back(W * m);
    c.d2.reserve(a.d2.size());
    for (const auto& m : a.d2) c.d2.push_back(W * m);
    return c;
}

/// Elementwise product of equally shaped jets.
inline Jet2 hadamard(const Jet2& a, const Jet2& b) {
    check_same_shape(a, b, "hadamard");
    const int n = a.n_dirs();
    Jet2 c;
    c.val = a.val.cwiseProduct(b.val);
    c.d1.resize(n);
    for (int i = 0; i < n; ++i) c.d1[i] = a.d1[i].cwiseProduct(b.val) + a.val.cwiseProduct(b.d1[i]);
    c.d2.resize(a.d2.size());
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            const int k = Jet2::idx(i, j, n);
            c.d2[k] = a.d2[k].cwiseProduct(b.val) + a.val.cwiseProduct(b.d2[k]) + a.d1[i].cwiseProduct(b.d1[j]) +
                      a.d1[j].cwiseProduct(b.d1[i]);
        }
    return c;
}

/// Column sums: rows x M -> 1 x M.
inline Jet2 colsum(const Jet2& a) {
    Jet2 c;
    c.val = a.val.colwise().sum();
    for (const auto& m : a.d1) c.d1.push_back(m.colwise().sum());
    for (const auto& m : a.d2) c.d2.push_back(m.colwise().sum());
    return c;
}

/// Elementwise f given its value and first two derivatives at a.val.
inline Jet2 apply_unary(const Jet2& a, const MatrixXd& f0, const MatrixXd& f1, const MatrixXd& f2) {
    const int n = a.n_dirs();
    Jet2 c;
    c.val = f0;
    c.d1.resize(n);
    for (int i = 0; i < n; ++i) c.d1[i] = f1.cwiseProduct(a.d1[i]);
    c.d2.resize(a.d2.size());
    for (int i = 0; i < n; ++i)
        for (int j = i; j < n; ++j) {
            const int k = Jet2::idx(i, j, n);
            c.d2[k] = f1.cwiseProduct(a.d2[k]) + f2.cwiseProduct(a.d1[i].cwiseProduct(a.d1[j]));
        }
    return c;
}

inline Jet2 tanh(const Jet2& a) {
    MatrixXd t = a.val;
    tanh_inplace(t);
    const MatrixXd f1 = (1.0 - t.array().square()).matrix();
    const MatrixXd f2 = (-2.0 * t.array() * f1.array()).matrix();
    return apply_unary(a, t, f1, f2);
}

inline Jet2 log(const Jet2& a) {
    const MatrixXd inv = a.val.cwiseInverse();
    return apply_unary(a, a.val.array().log().matrix(), inv, (-inv.array().square()).matrix());
}

inline Jet2 exp(const Jet2& a) {
    const MatrixXd e = a.val.array().exp().matrix();
    return apply_unary(a, e, e, e);
}

/// U(x) = x^{1-gamma} / (1-gamma).
inline Jet2 crra_utility(const Jet2& x, double gamma) {
    const double g1 = 1.0 - gamma;
    const MatrixXd p = x.val.array().pow(-gamma).matrix();
    const MatrixXd f0 = (x.val.array() * p.array() / g1).matrix();
    const MatrixXd f2 = (-gamma * p.array() / x.val.array()).matrix();
    return apply_unary(x, f0, p, f2);
}

/// Stack jets vertically (same columns and directions).
inline Jet2 vstack(const std::vector<const Jet2*>& parts) {
    if (parts.empty()) throw std::invalid_argument("Jet2 vstack: nothing to stack");
    Index rows = 0;
    const Index cols = parts[0]->cols();
    const int n = parts[0]->n_dirs();
    for (const Jet2* p : parts) {
        if (p->cols() != cols || p->n_dirs() != n) throw std::invalid_argument("Jet2 vstack: shape mismatch");
        rows += p->rows();
    }
    Jet2 c = Jet2::constant(MatrixXd::Zero(rows, cols), n);
    Index o = 0;
    for (const Jet2* p : parts) {
        const Index r = p->rows();
        c.val.middleRows(o, r) = p->val;
        for (int i = 0; i < n; ++i) c.d1[i].middleRows(o, r) = p->d1[i];
        for (std::size_t k = 0; k < c.d2.size(); ++k) c.d2[k].middleRows(o, r) = p->d2[k];
        o += r;
    }
    return c;
}

/// Replicate a 1 x M jet across `rows` rows.
inline Jet2 broadcast_rows(const Jet2& a, Index rows) {
    if (a.rows() != 1) throw std::invalid_argument("Jet2 broadcast_rows: expects a single row");
    Jet2 c;
    c.val = a.val.replicate(rows, 1);
    for (const auto& m : a.d1) c.d1.push_back(m.replicate(rows, 1));
    for (const auto& m : a.d2) c.d2.push_back(m.replicate(rows, 1));
    return c;
}

}  // namespace ppgdpo
