#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "recem/models.hpp"
#include "recem/nn.hpp"
#include "recem/tensor.hpp"

namespace recem {

// ---- beta annealing ---------------------------------------------------

/// Linear ramp from 0 to beta_max over warmup_epochs.
struct BetaSchedule {
    double beta_max = 0.2;
    std::size_t warmup_epochs = 30;

    BetaSchedule() = default;
    BetaSchedule(double bmax, std::size_t warmup) : beta_max(bmax), warmup_epochs(warmup) {
        if (bmax < 0.0 || bmax > 1.0) throw std::invalid_argument("beta schedule: beta_max must be in [0,1]");
        if (warmup == 0) throw std::invalid_argument("beta schedule: warmup must be >= 1 epoch");
    }

    double beta_at(std::size_t epoch) const {
        double frac = static_cast<double>(epoch) / static_cast<double>(warmup_epochs);
        return beta_max * std::min(1.0, frac);
    }
};

// ---- HSIC -----------------------------------------------------------------

/// Biased empirical HSIC with Gaussian kernels:
///   tr(K_X H K_Y H) / (B-1)^2,  k(a,b) = exp(-|a-b|^2 / (2 sigma^2)).
/// sigma defaults to the median pairwise distance (floored at 1e-8) and is
/// treated as a constant in the gradient. Differentiable w.r.t. both X and Y.
inline Tensor hsic(const Tensor& X, const Tensor& Y, double sigma_x = 0.0, double sigma_y = 0.0) {
    if (X.rank() != 2 || Y.rank() != 2 || X.dim(0) != Y.dim(0)) throw std::invalid_argument("hsic: expected rank-2 inputs with matching batch");
    std::size_t B = X.dim(0);
    if (B < 4) throw std::invalid_argument("hsic: needs batch size >= 4");

    auto pairwise_sq = [B](const std::vector<double>& v, std::size_t dim) {
        std::vector<double> d2(B * B, 0.0);
        for (std::size_t i = 0; i < B; ++i) {
            for (std::size_t j = i + 1; j < B; ++j) {
                const double* a = v.data() + i * dim;
                const double* b = v.data() + j * dim;
                double acc = 0.0;
                for (std::size_t p = 0; p < dim; ++p) {
                    double diff = a[p] - b[p];
                    acc += diff * diff;
                }
                d2[i * B + j] = d2[j * B + i] = acc;
            }
        }
        return d2;
    };
    auto median_sigma = [B](const std::vector<double>& d2) {
        std::vector<double> dist;
        dist.reserve(B * (B - 1) / 2);
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = i + 1; j < B; ++j) dist.push_back(std::sqrt(d2[i * B + j]));
        std::size_t mid = dist.size() / 2;
        std::nth_element(dist.begin(), dist.begin() + mid, dist.end());
        return std::max(dist[mid], 1e-8);
    };
    auto kernel = [B](const std::vector<double>& d2, double sigma) {
        std::vector<double> k(B * B);
        double inv = 1.0 / (2.0 * sigma * sigma);
        for (std::size_t i = 0; i < B * B; ++i) k[i] = std::exp(-d2[i] * inv);
        return k;
    };
    auto center = [B](const std::vector<double>& k) {  // H K H
        std::vector<double> row(B, 0.0);
        double grand = 0.0;
        for (std::size_t i = 0; i < B; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < B; ++j) acc += k[i * B + j];
            row[i] = acc / static_cast<double>(B);
            grand += acc;
        }
        grand /= static_cast<double>(B * B);
        std::vector<double> out(B * B);
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < B; ++j) out[i * B + j] = k[i * B + j] - row[i] - row[j] + grand;
        return out;
    };

    std::size_t p = X.dim(1), q = Y.dim(1);
    std::vector<double> d2x = pairwise_sq(X.values(), p);
    std::vector<double> d2y = pairwise_sq(Y.values(), q);
    double sx = sigma_x > 0.0 ? sigma_x : median_sigma(d2x);
    double sy = sigma_y > 0.0 ? sigma_y : median_sigma(d2y);
    std::vector<double> kx = kernel(d2x, sx);
    std::vector<double> ky = kernel(d2y, sy);
    std::vector<double> kcx = center(kx);
    std::vector<double> kcy = center(ky);

    double norm = 1.0 / (static_cast<double>(B - 1) * static_cast<double>(B - 1));
    double value = 0.0;
    for (std::size_t i = 0; i < B * B; ++i) value += kcx[i] * kcy[i];
    value *= norm;

    return detail::make_op(
        "hsic", {1}, {value}, {X.node(), Y.node()},
        [B, p, q, sx, sy, norm, kx = std::move(kx), ky = std::move(ky), kcx = std::move(kcx), kcy = std::move(kcy)](TensorNode& self) {
            double up = self.grad[0] * norm;
            // dV/dx_i = 2 sum_j W_ij K_ij (x_j - x_i) / sigma^2, W = centered
            // kernel of the *other* input; sigma held constant.
            auto scatter = [&](TensorNode& node, const std::vector<double>& K, const std::vector<double>& W, double sigma, std::size_t dim) {
                double* g = node.grad_buf();
                if (!g) return;
                const auto& v = node.values;
                double inv = 1.0 / (sigma * sigma);
                for (std::size_t i = 0; i < B; ++i) {
                    for (std::size_t j = 0; j < B; ++j) {
                        if (i == j) continue;
                        double coef = 2.0 * up * W[i * B + j] * K[i * B + j] * inv;
                        const double* xi = v.data() + i * dim;
                        const double* xj = v.data() + j * dim;
                        double* gi = g + i * dim;
                        for (std::size_t t = 0; t < dim; ++t) gi[t] += coef * (xj[t] - xi[t]);
                    }
                }
            };
            scatter(*self.parents[0], kx, kcy, sx, p);
            scatter(*self.parents[1], ky, kcx, sy, q);
        });
}

// ---- reliability losses -----------------------------------------------

/// Concept-vector disentanglement loss: adversary cross-entropy (gradient
/// reaches shared parameters only through the GRL inside the adversary
/// path) plus beta * HSIC(z_hat, C_true).
inline Tensor loss_cvd(const Tensor& adv_logits, const std::vector<int>& y, const Tensor& z_hat, const Tensor& c_true_flat, double beta) {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("loss_cvd: beta must be in [0,1]");
    Tensor ce = softmax_cross_entropy(adv_logits, y);
    if (beta == 0.0) return ce;
    return add(ce, scale(hsic(z_hat, c_true_flat), beta));
}

/// Mean over the batch of the per-sample L1 reconstruction error.
inline Tensor loss_rec(const Tensor& h, const Tensor& h_rec) {
    if (h.shape() != h_rec.shape()) throw std::invalid_argument("loss_rec: shape mismatch");
    return scale(l1_norm(sub(h, h_rec)), 1.0 / static_cast<double>(h.dim(0)));
}

// ---- concept mixup ----------------------------------------------------

/// Per-concept mean of active-sample positive embeddings, computed from a
/// mini-batch. The mean is a constant target: no gradient flows through it.
struct SemanticMeanBank {
    std::size_t n_concepts = 0, embed_dim = 0;
    std::vector<double> means;        // K x d
    std::vector<std::size_t> counts;  // active samples that contributed
    std::vector<std::uint8_t> has_mean;

    bool defined(std::size_t k) const { return has_mean[k] != 0; }
};

inline SemanticMeanBank semantic_mean(const Tensor& c_plus, const std::vector<double>& c_gt) {
    std::size_t B = c_plus.dim(0), K = c_plus.dim(1), d = c_plus.dim(2);
    if (c_gt.size() != B * K) throw std::invalid_argument("semantic_mean: label size mismatch");
    SemanticMeanBank bank;
    bank.n_concepts = K;
    bank.embed_dim = d;
    bank.means.assign(K * d, 0.0);
    bank.counts.assign(K, 0);
    bank.has_mean.assign(K, 0);
    const auto& v = c_plus.values();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            if (c_gt[b * K + k] == 1.0) {
                bank.counts[k] += 1;
                const double* src = v.data() + (b * K + k) * d;
                double* dst = bank.means.data() + k * d;
                for (std::size_t t = 0; t < d; ++t) dst[t] += src[t];
            }
    for (std::size_t k = 0; k < K; ++k) {
        if (bank.counts[k] > 0) {
            bank.has_mean[k] = 1;
            double inv = 1.0 / static_cast<double>(bank.counts[k]);
            for (std::size_t t = 0; t < d; ++t) bank.means[k * d + t] *= inv;
        }
    }
    return bank;
}

/// Optional EMA mode: fold a fresh batch bank into the running one.
inline void ema_update(SemanticMeanBank& running, const SemanticMeanBank& batch, double decay) {
    if (running.n_concepts == 0) {
        running = batch;
        return;
    }
    std::size_t K = running.n_concepts, d = running.embed_dim;
    for (std::size_t k = 0; k < K; ++k) {
        if (!batch.defined(k)) continue;
        if (!running.defined(k)) {
            std::copy(batch.means.begin() + k * d, batch.means.begin() + (k + 1) * d, running.means.begin() + k * d);
            running.has_mean[k] = 1;
        } else {
            for (std::size_t t = 0; t < d; ++t) {
                double& m = running.means[k * d + t];
                m = decay * m + (1.0 - decay) * batch.means[k * d + t];
            }
        }
        running.counts[k] += batch.counts[k];
    }
}

/// Aligned embedding: active concepts move toward the semantic mean,
///   c_dot = beta * mean_k + (1-beta) * c_plus   (active, mean defined)
///   c_dot = c_plus                              (active, mean undefined)
///   c_dot = c_mixed                             (inactive)
inline Tensor align(const Tensor& c_plus, const Tensor& c_mixed, const std::vector<double>& c_gt, const SemanticMeanBank& bank, double beta) {
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("align: beta must be in [0,1]");
    std::size_t B = c_plus.dim(0), K = c_plus.dim(1), d = c_plus.dim(2);
    if (c_gt.size() != B * K) throw std::invalid_argument("align: label size mismatch");
    std::vector<double> coef_plus(B * K), coef_mixed(B * K), mean_term(B * K * d, 0.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) {
            std::size_t i = b * K + k;
            bool active = c_gt[i] == 1.0;
            double bk = (active && bank.defined(k)) ? beta : 0.0;
            coef_plus[i] = active ? (1.0 - bk) : 0.0;
            coef_mixed[i] = active ? 0.0 : 1.0;
            if (active && bk > 0.0) {
                const double* m = bank.means.data() + k * d;
                double* dst = mean_term.data() + i * d;
                for (std::size_t t = 0; t < d; ++t) dst[t] = bk * m[t];
            }
        }
    Tensor cp_term = mul(c_plus, Tensor::from({B, K, 1}, std::move(coef_plus)));
    Tensor cm_term = mul(c_mixed, Tensor::from({B, K, 1}, std::move(coef_mixed)));
    return add(Tensor::from({B, K, d}, std::move(mean_term)), add(cp_term, cm_term));
}

/// Concept mixup loss: cross-entropy of the label head applied to the
/// aligned representation.
inline Tensor loss_mixup(const ConceptModel& model, const Tensor& c_aligned_flat, const std::vector<int>& y) {
    return softmax_cross_entropy(model.mixup_logits(c_aligned_flat), y);
}

// ---- combined objective -------------------------------------------------

struct LossBreakdown {
    double task = 0.0, concept_loss = 0.0, mixup = 0.0, cvd = 0.0, rec = 0.0, total = 0.0;
    Tensor total_tensor;  // backward root
};

/// total = task + alpha*concept_loss + lambda_m*mixup + lambda_cvd*cvd +
/// lambda_rec*rec. Undefined component tensors contribute nothing.
inline LossBreakdown total_loss(const Tensor& task, const Tensor& concept_term, const Tensor& mixup, const Tensor& cvd, const Tensor& rec,
                                double alpha, double lambda_m, double lambda_cvd, double lambda_rec) {
    for (double w : {alpha, lambda_m, lambda_cvd, lambda_rec})
        if (w < 0.0) throw std::invalid_argument("total_loss: negative loss weight");
    LossBreakdown out;
    out.task = task.item();
    Tensor total = task;
    auto add_term = [&](const Tensor& t, double w, double& slot) {
        if (!t.defined()) return;
        slot = t.item();
        if (w > 0.0) total = add(total, scale(t, w));
    };
    add_term(concept_term, alpha, out.concept_loss);
    add_term(mixup, lambda_m, out.mixup);
    add_term(cvd, lambda_cvd, out.cvd);
    add_term(rec, lambda_rec, out.rec);
    out.total = total.item();
    out.total_tensor = total;
    return out;
}

}  // namespace recem
