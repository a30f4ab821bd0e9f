#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "linalg.hpp"
#include "rng.hpp"

namespace ppgdpo {

struct Layer {
    MatrixXd W;
    VectorXd b;
};

/// Feedback policy pi(t, x, y): tanh MLP on (t/T, log x, y_1..y_obs) with a linear head scaled by
/// output_scale. obs_y = 0 gives a Y-blind policy.
struct PolicyNet {
    std::vector<Layer> layers;
    double output_scale = 1.0;
    double horizon = 1.5;
    int obs_y = 0;

    int n_in() const { return 2 + obs_y; }
    int n_out() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows()); }

    Index num_params() const {
        Index n = 0;
        for (const auto& L : layers) n += L.W.size() + L.b.size();
        return n;
    }

    std::vector<int> hidden_sizes() const {
        std::vector<int> h;
        for (std::size_t i = 0; i + 1 < layers.size(); ++i) h.push_back(static_cast<int>(layers[i].W.rows()));
        return h;
    }

    /// Flat parameter vector: per layer, W column-major then b.
    VectorXd params() const {
        VectorXd p(num_params());
        Index o = 0;
        for (const auto& L : layers) {
            p.segment(o, L.W.size()) = Eigen::Map<const VectorXd>(L.W.data(), L.W.size());
            o += L.W.size();
            p.segment(o, L.b.size()) = L.b;
            o += L.b.size();
        }
        return p;
    }

    void set_params(const VectorXd& p) {
        if (p.size() != num_params()) throw std::invalid_argument("PolicyNet::set_params: wrong length");
        Index o = 0;
        for (auto& L : layers) {
            Eigen::Map<VectorXd>(L.W.data(), L.W.size()) = p.segment(o, L.W.size());
            o += L.W.size();
            L.b = p.segment(o, L.b.size());
            o += L.b.size();
        }
    }

    /// inputs: n_in x M normalized features -> n_out x M actions.
    MatrixXd forward_features(const MatrixXd& inputs) const {
        MatrixXd a = inputs;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            MatrixXd z = layers[l].W * a;
            z.colwise() += layers[l].b;
            if (l + 1 < layers.size()) tanh_inplace(z);
            a = std::move(z);
        }
        return output_scale * a;
    }

    MatrixXd features(double t, const RowVectorXd& x, const MatrixXd& y) const {
        const Index M = x.size();
        MatrixXd in(n_in(), M);
        in.row(0).setConstant(t / horizon);
        in.row(1) = x.array().log().matrix();
        if (obs_y > 0) {
            if (y.rows() < obs_y || y.cols() != M) throw std::invalid_argument("PolicyNet: factor input has wrong shape");
            in.bottomRows(obs_y) = y.topRows(obs_y);
        }
        return in;
    }

    MatrixXd forward_batch(double t, const RowVectorXd& x, const MatrixXd& y) const {
        return forward_features(features(t, x, y));
    }
};

/// pi(t, x, y) for one state.
inline VectorXd policy_forward(const PolicyNet& net, double t, double x, const VectorXd& y = VectorXd()) {
    if (!std::isfinite(t) || !std::isfinite(x) || !y.allFinite())
        throw std::invalid_argument("policy_forward: non-finite input");
    if (!(x > 0.0)) throw std::invalid_argument("policy_forward: wealth must be > 0");
    RowVectorXd xr(1);
    xr(0) = x;
    MatrixXd ym(y.size(), 1);
    if (y.size()) ym.col(0) = y;
    return net.forward_batch(t, xr, ym).col(0);
}

struct NetArchitecture {
    std::vector<int> hidden{64, 64, 64};
    int d = 1;
    int obs_y = 0;
    double horizon = 1.5;
    double output_scale = -1.0;  // negative: d^{-1/2}
    bool zero_output = true;
};

/// Glorot-uniform hidden layers; the head starts at zero so the initial policy is all cash.
inline PolicyNet make_policy_net(const NetArchitecture& arch, std::uint64_t seed) {
    if (arch.d < 1) throw std::invalid_argument("make_policy_net: d must be >= 1");
    PolicyNet net;
    net.horizon = arch.horizon;
    net.obs_y = arch.obs_y;
    net.output_scale = arch.output_scale < 0.0 ? 1.0 / std::sqrt(static_cast<double>(arch.d)) : arch.output_scale;
    Stream rng(seed, {tag::init});
    int fan_in = 2 + arch.obs_y;
    std::vector<int> sizes = arch.hidden;
    sizes.push_back(arch.d);
    for (std::size_t l = 0; l < sizes.size(); ++l) {
        const int fan_out = sizes[l];
        Layer L;
        L.W = MatrixXd::Zero(fan_out, fan_in);
        L.b = VectorXd::Zero(fan_out);
        const bool head = (l + 1 == sizes.size());
        if (!(head && arch.zero_output)) {
            const double lim = std::sqrt(6.0 / (fan_in + fan_out));
            for (Index j = 0; j < L.W.cols(); ++j)
                for (Index i = 0; i < L.W.rows(); ++i) L.W(i, j) = rng.uniform(-lim, lim);
        }
        net.layers.push_back(std::move(L));
        fan_in = fan_out;
    }
    return net;
}

/// Reverse pass through the MLP for a batch. acts[0] = inputs, acts[l] = output of hidden layer l.
/// Given dL/d(output) (n_out x M, before output_scale is undone), accumulates parameter gradients into
/// grad (flat layout of PolicyNet::params) and returns dL/d(inputs).
inline MatrixXd mlp_backward(const PolicyNet& net, const std::vector<MatrixXd>& acts, const MatrixXd& dout,
                             VectorXd& grad) {
    const std::size_t nl = net.layers.size();
    std::vector<Index> offs(nl);
    Index o = 0;
    for (std::size_t l = 0; l < nl; ++l) {
        offs[l] = o;
        o += net.layers[l].W.size() + net.layers[l].b.size();
    }
    MatrixXd delta = net.output_scale * dout;
    for (std::size_t li = nl; li-- > 0;) {
        const Layer& L = net.layers[li];
        if (li + 1 < nl) delta.array() *= (1.0 - acts[li + 1].array().square());
        Eigen::Map<MatrixXd> gW(grad.data() + offs[li], L.W.rows(), L.W.cols());
        gW.noalias() += delta * acts[li].transpose();
        grad.segment(offs[li] + L.W.size(), L.b.size()) += delta.rowwise().sum();
        MatrixXd prev = L.W.transpose() * delta;
        delta = std::move(prev);
    }
    return delta;
}

/// Forward pass that keeps the activations needed by mlp_backward.
inline MatrixXd mlp_forward_record(const PolicyNet& net, const MatrixXd& inputs, std::vector<MatrixXd>& acts) {
    const std::size_t nl = net.layers.size();
    acts.resize(nl);
    acts[0] = inputs;
    MatrixXd out;
    for (std::size_t l = 0; l < nl; ++l) {
        MatrixXd z = net.layers[l].W * acts[l];
        z.colwise() += net.layers[l].b;
        if (l + 1 < nl) {
            tanh_inplace(z);
            acts[l + 1] = std::move(z);
        } else {
            out = net.output_scale * z;
        }
    }
    return out;
}

}  // namespace ppgdpo
