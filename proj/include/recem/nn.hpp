#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recem/rng.hpp"
#include "recem/tensor.hpp"

namespace recem {

// ---- layers -------------------------------------------------------------

struct LinearLayer {
    Tensor weight;  // [out x in]
    Tensor bias;    // [out]
    std::size_t in_dim = 0, out_dim = 0;

    LinearLayer() = default;
    LinearLayer(std::size_t in, std::size_t out) : in_dim(in), out_dim(out) {
        weight = Tensor::zeros({out, in}, true);
        bias = Tensor::zeros({out}, true);
    }
};

/// Fan-in uniform init: W ~ U(-sqrt(1/in), sqrt(1/in)), bias 0.
inline void init_params(LinearLayer& layer, SplitMix64 rng) {
    double bound = std::sqrt(1.0 / static_cast<double>(layer.in_dim));
    for (double& w : layer.weight.values_mut()) w = rng.uniform(-bound, bound);
    for (double& b : layer.bias.values_mut()) b = 0.0;
}

/// y = x W^T + b, fused so the bias needs no broadcast machinery.
inline Tensor linear_forward(const LinearLayer& layer, const Tensor& x) {
    if (x.rank() != 2 || x.dim(1) != layer.in_dim) {
        throw std::invalid_argument("linear_forward: input " + shape_str(x.shape()) + " does not match in_dim " + std::to_string(layer.in_dim));
    }
    std::size_t B = x.dim(0), in = layer.in_dim, out = layer.out_dim;
    std::vector<double> y(B * out);
    detail::mm_abt(x.values().data(), layer.weight.values().data(), y.data(), B, in, out, false);
    const auto& bv = layer.bias.values();
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < out; ++j) y[i * out + j] += bv[j];
    return detail::make_op("linear", {B, out}, std::move(y), {x.node(), layer.weight.node(), layer.bias.node()},
                           [B, in, out](TensorNode& self) {
                               TensorNode& px = *self.parents[0];
                               TensorNode& pw = *self.parents[1];
                               TensorNode& pb = *self.parents[2];
                               const double* g = self.grad.data();
                               if (double* gx = px.grad_buf()) detail::mm_ab(g, pw.values.data(), gx, B, out, in, true);
                               if (double* gw = pw.grad_buf()) detail::mm_atb(g, px.values.data(), gw, B, out, in, true);
                               if (double* gb = pb.grad_buf()) {
                                   for (std::size_t i = 0; i < B; ++i)
                                       for (std::size_t j = 0; j < out; ++j) gb[j] += g[i * out + j];
                               }
                           });
}

/// Two-layer relu MLP, the stand-in backbone for vector inputs.
struct Mlp {
    LinearLayer l1, l2;

    Mlp() = default;
    Mlp(std::size_t in, std::size_t hidden, std::size_t out) : l1(in, hidden), l2(hidden, out) {}

    Tensor forward(const Tensor& x) const { return linear_forward(l2, relu(linear_forward(l1, x))); }
};

// ---- gradient reversal ----------------------------------------------------

/// Identity forward; backward multiplies the incoming gradient by -lambda.
inline Tensor grl(const Tensor& x, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("grl: lambda must be >= 0");
    return detail::make_op("grl", x.shape(), x.values(), {x.node()}, [lambda](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            for (std::size_t i = 0; i < self.values.size(); ++i) g[i] += -lambda * self.grad[i];
        }
    });
}

// ---- losses ---------------------------------------------------------------

/// Row-wise softmax over the last axis of a [B x M] tensor.
inline Tensor softmax(const Tensor& logits) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax: expected rank-2 logits");
    std::size_t B = logits.dim(0), M = logits.dim(1);
    std::vector<double> out(B * M);
    const auto& v = logits.values();
    for (std::size_t i = 0; i < B; ++i) {
        double mx = v[i * M];
        for (std::size_t j = 1; j < M; ++j) mx = std::max(mx, v[i * M + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < M; ++j) {
            out[i * M + j] = std::exp(v[i * M + j] - mx);
            z += out[i * M + j];
        }
        for (std::size_t j = 0; j < M; ++j) out[i * M + j] /= z;
    }
    return detail::make_op("softmax", logits.shape(), std::move(out), {logits.node()}, [B, M](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            for (std::size_t i = 0; i < B; ++i) {
                const double* s = self.values.data() + i * M;
                const double* up = self.grad.data() + i * M;
                double dot = 0.0;
                for (std::size_t j = 0; j < M; ++j) dot += up[j] * s[j];
                for (std::size_t j = 0; j < M; ++j) g[i * M + j] += s[j] * (up[j] - dot);
            }
        }
    });
}

/// Mean over the batch of -log softmax(logits)[label], max-stabilized.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("softmax_cross_entropy: expected rank-2 logits");
    std::size_t B = logits.dim(0), M = logits.dim(1);
    if (labels.size() != B) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    const auto& v = logits.values();
    double loss = 0.0;
    std::vector<double> probs(B * M);  // saved for backward
    for (std::size_t i = 0; i < B; ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= M) throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(M) + ")");
        double mx = v[i * M];
        for (std::size_t j = 1; j < M; ++j) mx = std::max(mx, v[i * M + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < M; ++j) z += std::exp(v[i * M + j] - mx);
        double logz = std::log(z) + mx;
        loss += logz - v[i * M + y];
        for (std::size_t j = 0; j < M; ++j) probs[i * M + j] = std::exp(v[i * M + j] - logz);
    }
    loss /= static_cast<double>(B);
    return detail::make_op("softmax_cross_entropy", {1}, {loss}, {logits.node()},
                           [B, M, probs = std::move(probs), labels](TensorNode& self) {
                               if (double* g = self.parents[0]->grad_buf()) {
                                   double up = self.grad[0] / static_cast<double>(B);
                                   for (std::size_t i = 0; i < B; ++i)
                                       for (std::size_t j = 0; j < M; ++j) {
                                           double d = probs[i * M + j] - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0);
                                           g[i * M + j] += up * d;
                                       }
                               }
                           });
}

/// Mean over all entries of -[t log p + (1-t) log(1-p)], p clamped to
/// [1e-7, 1-1e-7]. Targets must be exactly 0 or 1.
inline Tensor binary_cross_entropy(const Tensor& p, const Tensor& targets) {
    if (p.shape() != targets.shape()) throw std::invalid_argument("binary_cross_entropy: shape mismatch");
    constexpr double kLo = 1e-7, kHi = 1.0 - 1e-7;
    const auto& pv = p.values();
    const auto& tv = targets.values();
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        double t = tv[i];
        if (t != 0.0 && t != 1.0) throw std::invalid_argument("binary_cross_entropy: non-binary target " + std::to_string(t));
        double pc = std::min(kHi, std::max(kLo, pv[i]));
        loss += -(t * std::log(pc) + (1.0 - t) * std::log(1.0 - pc));
    }
    std::size_t n = pv.size();
    loss /= static_cast<double>(n);
    return detail::make_op("binary_cross_entropy", {1}, {loss}, {p.node(), targets.node()}, [n](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            const auto& pv = self.parents[0]->values;
            const auto& tv = self.parents[1]->values;
            double up = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (pv[i] < kLo || pv[i] > kHi) continue;  // clamp region: zero slope
                g[i] += up * ((1.0 - tv[i]) / (1.0 - pv[i]) - tv[i] / pv[i]);
            }
        }
    });
}

// ---- optimizer ------------------------------------------------------------

/// Plain SGD with heavyball momentum: v <- m v + grad; p <- p - lr v.
/// step() zeroes gradients afterwards.
class SgdOptimizer {
public:
    /// allow_missing_grad: parameters that never received a gradient are
    /// treated as having zero gradient (submodules unused by the active
    /// loss weights) instead of raising.
    SgdOptimizer(std::vector<Tensor> params, double lr, double momentum = 0.0, bool allow_missing_grad = false)
        : params_(std::move(params)), lr_(lr), momentum_(momentum), allow_missing_(allow_missing_grad) {
        if (lr <= 0.0) throw std::invalid_argument("sgd: learning rate must be positive");
        if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("sgd: momentum must be in [0,1)");
        velocity_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) velocity_[i].assign(params_[i].numel(), 0.0);
    }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (p.grad().empty()) {
                if (allow_missing_) continue;
                throw std::runtime_error("sgd: parameter has no gradient (missing backward?)");
            }
            auto& v = velocity_[i];
            auto& val = p.values_mut();
            const auto& g = p.grad();
            for (std::size_t j = 0; j < val.size(); ++j) {
                v[j] = momentum_ * v[j] + g[j];
                val[j] -= lr_ * v[j];
            }
            p.zero_grad();
        }
    }

    void zero_grad() {
        for (Tensor& p : params_) p.zero_grad();
    }

    double lr() const { return lr_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double lr_;
    double momentum_;
    bool allow_missing_ = false;
};

}  // namespace recem
