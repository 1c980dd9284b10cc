#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "recem/models.hpp"
#include "recem/rng.hpp"
#include "recem/synthdata.hpp"

namespace recem {

// ---- accuracies -----------------------------------------------------------

/// Percent of (sample, concept) entries where thresholded p_hat matches.
inline double concept_accuracy(const Tensor& p_hat, const std::vector<double>& c_gt) {
    if (p_hat.numel() != c_gt.size()) throw std::invalid_argument("concept_accuracy: shape mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < c_gt.size(); ++i) hits += ((p_hat.values()[i] >= 0.5 ? 1.0 : 0.0) == c_gt[i]) ? 1 : 0;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(c_gt.size());
}

/// Percent argmax matches; ties break to the lowest class index.
inline double task_accuracy(const Tensor& logits, const std::vector<int>& y) {
    std::size_t B = logits.dim(0), M = logits.dim(1);
    if (y.size() != B) throw std::invalid_argument("task_accuracy: label count mismatch");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < M; ++j)
            if (logits.values()[i * M + j] > logits.values()[i * M + best]) best = j;
        hits += (static_cast<int>(best) == y[i]) ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(B);
}

// ---- embedding diagnostics ----------------------------------------------

/// Mean squared distance to the empirical mean embedding of concept k.
inline double intra_concept_variance(const std::vector<double>& embeddings, std::size_t n, std::size_t d) {
    if (n < 2) throw std::invalid_argument("intra_concept_variance: needs >= 2 samples");
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < d; ++t) mean[t] += embeddings[i * d + t];
    for (double& m : mean) m /= static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dist = 0.0;
        for (std::size_t t = 0; t < d; ++t) {
            double diff = embeddings[i * d + t] - mean[t];
            dist += diff * diff;
        }
        acc += dist;
    }
    return acc / static_cast<double>(n);
}

struct DistributionSummary {
    double mean = 0.0;
    double stddev = 0.0;
    std::size_t count = 0;
    std::size_t skipped = 0;                    // zero-norm pairs
    std::vector<std::size_t> histogram;         // 20 bins over [-1, 1]
    static constexpr std::size_t kBins = 20;

    static std::size_t bin_of(double v) {
        auto b = static_cast<long>(std::floor((v + 1.0) / 0.1));
        return static_cast<std::size_t>(std::clamp(b, 0L, 19L));
    }
};

inline DistributionSummary summarize_cosines(const std::vector<double>& cosines, std::size_t skipped) {
    DistributionSummary s;
    s.histogram.assign(DistributionSummary::kBins, 0);
    s.count = cosines.size();
    s.skipped = skipped;
    if (cosines.empty()) return s;
    for (double v : cosines) {
        s.mean += v;
        ++s.histogram[DistributionSummary::bin_of(v)];
    }
    s.mean /= static_cast<double>(cosines.size());
    for (double v : cosines) s.stddev += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(s.stddev / static_cast<double>(cosines.size()));
    return s;
}

inline double cosine(const double* a, const double* b, std::size_t n) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return std::nan("");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// ---- 2-means clustering (CAS) -----------------------------------------

struct TwoMeans {
    std::vector<std::uint8_t> assign;
    bool degenerate = false;  // collapsed to a single cluster
};

/// 2-means with k-means++ seeding and a fixed iteration budget. Distances
/// drive everything, so uniformly rotating the points cannot change the
/// assignments.
inline TwoMeans two_means(const std::vector<double>& pts, std::size_t n, std::size_t d, SplitMix64 rng, std::size_t iters = 50) {
    TwoMeans out;
    out.assign.assign(n, 0);
    auto dist2 = [&](const double* a, const double* b) {
        double acc = 0.0;
        for (std::size_t t = 0; t < d; ++t) {
            double diff = a[t] - b[t];
            acc += diff * diff;
        }
        return acc;
    };
    // k-means++: first center uniform, second weighted by squared distance
    std::size_t c0 = rng.below(n);
    std::vector<double> w(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        w[i] = dist2(pts.data() + i * d, pts.data() + c0 * d);
        total += w[i];
    }
    if (total == 0.0) {
        out.degenerate = true;  // all points identical
        return out;
    }
    double pick = rng.uniform() * total;
    std::size_t c1 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        pick -= w[i];
        if (pick <= 0.0) {
            c1 = i;
            break;
        }
    }
    std::vector<double> centers(2 * d);
    std::copy(pts.begin() + c0 * d, pts.begin() + (c0 + 1) * d, centers.begin());
    std::copy(pts.begin() + c1 * d, pts.begin() + (c1 + 1) * d, centers.begin() + d);

    for (std::size_t it = 0; it < iters; ++it) {
        bool changed = false;
        std::size_t n0 = 0;
        for (std::size_t i = 0; i < n; ++i) {
            double d0 = dist2(pts.data() + i * d, centers.data());
            double d1 = dist2(pts.data() + i * d, centers.data() + d);
            std::uint8_t a = d1 < d0 ? 1 : 0;
            changed = changed || a != out.assign[i];
            out.assign[i] = a;
            n0 += a == 0 ? 1 : 0;
        }
        if (n0 == 0 || n0 == n) {
            out.degenerate = true;
            return out;
        }
        std::fill(centers.begin(), centers.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double* c = centers.data() + out.assign[i] * d;
            for (std::size_t t = 0; t < d; ++t) c[t] += pts[i * d + t];
        }
        for (std::size_t t = 0; t < d; ++t) {
            centers[t] /= static_cast<double>(n0);
            centers[d + t] /= static_cast<double>(n - n0);
        }
        if (!changed && it > 0) break;
    }
    return out;
}

/// Concept alignment score surrogate: per concept, cluster the mixed
/// embeddings into two groups and score the best cluster-to-state mapping
/// against the ground truth; average over concepts, in percent.
inline double cas(const Tensor& c_mixed, const std::vector<double>& c_gt, std::uint64_t seed = 1234) {
    std::size_t B = c_mixed.dim(0), K = c_mixed.dim(1), d = c_mixed.dim(2);
    double acc = 0.0;
    std::vector<double> pts(B * d);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t b = 0; b < B; ++b)
            std::copy(c_mixed.values().begin() + (b * K + k) * d, c_mixed.values().begin() + (b * K + k) * d + d, pts.begin() + b * d);
        TwoMeans tm = two_means(pts, B, d, SplitMix64::stream(seed, "cas", k));
        double score;
        if (tm.degenerate) {
            double active = 0.0;
            for (std::size_t b = 0; b < B; ++b) active += c_gt[b * K + k];
            double share = active / static_cast<double>(B);
            score = std::max(share, 1.0 - share);  // majority fallback
        } else {
            std::size_t match_direct = 0;
            for (std::size_t b = 0; b < B; ++b) match_direct += (static_cast<double>(tm.assign[b]) == c_gt[b * K + k]) ? 1 : 0;
            score = std::max(match_direct, B - match_direct) / static_cast<double>(B);
        }
        acc += score;
    }
    return 100.0 * acc / static_cast<double>(K);
}

// ---- logistic probes (OIS and data diagnostics) -------------------------

namespace detail {

struct ProbeSplit {
    std::vector<std::size_t> train, held;
};

inline ProbeSplit probe_split(std::size_t n, SplitMix64 rng, double train_frac = 0.7) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t i = n; i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
    std::size_t cut = static_cast<std::size_t>(train_frac * static_cast<double>(n));
    ProbeSplit s;
    s.train.assign(idx.begin(), idx.begin() + cut);
    s.held.assign(idx.begin() + cut, idx.end());
    return s;
}

}  // namespace detail

/// Binary logistic probe: standardize on the held-in split, 200 full-batch
/// gradient steps from zero init, report balanced accuracy on the held-out
/// split. Throws if the target is single-state.
inline double logistic_probe_balanced_accuracy(const std::vector<double>& X, std::size_t n, std::size_t dim, const std::vector<double>& target,
                                               std::uint64_t seed, std::size_t epochs = 200) {
    bool has0 = false, has1 = false;
    for (double t : target) {
        has0 = has0 || t == 0.0;
        has1 = has1 || t == 1.0;
    }
    if (!has0 || !has1) throw std::invalid_argument("logistic probe: single-state target");

    detail::ProbeSplit split = detail::probe_split(n, SplitMix64::stream(seed, "probe_split"));
    std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
    for (std::size_t i : split.train)
        for (std::size_t t = 0; t < dim; ++t) mean[t] += X[i * dim + t];
    for (double& m : mean) m /= static_cast<double>(split.train.size());
    for (std::size_t i : split.train)
        for (std::size_t t = 0; t < dim; ++t) {
            double diff = X[i * dim + t] - mean[t];
            sd[t] += diff * diff;
        }
    for (double& s : sd) s = std::max(std::sqrt(s / static_cast<double>(split.train.size())), 1e-8);

    std::vector<double> w(dim + 1, 0.0);  // last = bias
    auto margin = [&](std::size_t i) {
        double z = w[dim];
        for (std::size_t t = 0; t < dim; ++t) z += w[t] * (X[i * dim + t] - mean[t]) / sd[t];
        return z;
    };
    double lr = 0.5;
    std::vector<double> grad(dim + 1);
    for (std::size_t e = 0; e < epochs; ++e) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i : split.train) {
            double p = 1.0 / (1.0 + std::exp(-margin(i)));
            double err = p - target[i];
            for (std::size_t t = 0; t < dim; ++t) grad[t] += err * (X[i * dim + t] - mean[t]) / sd[t];
            grad[dim] += err;
        }
        for (std::size_t t = 0; t <= dim; ++t) w[t] -= lr * grad[t] / static_cast<double>(split.train.size());
    }

    std::size_t tp = 0, tn = 0, np = 0, nn = 0;
    for (std::size_t i : split.held) {
        bool pred = margin(i) >= 0.0;
        if (target[i] == 1.0) {
            ++np;
            tp += pred ? 1 : 0;
        } else {
            ++nn;
            tn += pred ? 0 : 1;
        }
    }
    double tpr = np ? static_cast<double>(tp) / static_cast<double>(np) : 0.5;
    double tnr = nn ? static_cast<double>(tn) / static_cast<double>(nn) : 0.5;
    return 0.5 * (tpr + tnr);
}

/// Multinomial logistic probe accuracy (softmax regression), for the
/// background-spuriousness diagnostics.
inline double softmax_probe_accuracy(const std::vector<double>& X, std::size_t n, std::size_t dim, const std::vector<int>& y, std::size_t M,
                                     std::uint64_t seed, std::size_t epochs = 200) {
    detail::ProbeSplit split = detail::probe_split(n, SplitMix64::stream(seed, "probe_split"));
    std::vector<double> W(M * (dim + 1), 0.0);
    std::vector<double> logits(M), grad(M * (dim + 1));
    double lr = 0.5;
    auto fill_logits = [&](std::size_t i) {
        for (std::size_t m = 0; m < M; ++m) {
            double z = W[m * (dim + 1) + dim];
            for (std::size_t t = 0; t < dim; ++t) z += W[m * (dim + 1) + t] * X[i * dim + t];
            logits[m] = z;
        }
    };
    for (std::size_t e = 0; e < epochs; ++e) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (std::size_t i : split.train) {
            fill_logits(i);
            double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (std::size_t m = 0; m < M; ++m) z += std::exp(logits[m] - mx);
            for (std::size_t m = 0; m < M; ++m) {
                double p = std::exp(logits[m] - mx) / z;
                double err = p - (static_cast<std::size_t>(y[i]) == m ? 1.0 : 0.0);
                for (std::size_t t = 0; t < dim; ++t) grad[m * (dim + 1) + t] += err * X[i * dim + t];
                grad[m * (dim + 1) + dim] += err;
            }
        }
        for (std::size_t j = 0; j < W.size(); ++j) W[j] -= lr * grad[j] / static_cast<double>(split.train.size());
    }
    std::size_t hits = 0;
    for (std::size_t i : split.held) {
        fill_logits(i);
        std::size_t best = 0;
        for (std::size_t m = 1; m < M; ++m)
            if (logits[m] > logits[best]) best = m;
        hits += static_cast<int>(best) == y[i] ? 1 : 0;
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(split.held.size());
}

// ---- OIS ------------------------------------------------------------------

struct OisReport {
    double value = 0.0;
    std::vector<std::size_t> excluded;  // single-state concepts left out
    std::vector<double> impurity;       // P, row-major over kept concepts
    std::vector<double> oracle;         // O
};

/// Oracle impurity surrogate: P[k,j] = balanced probe accuracy predicting
/// concept j's label from concept k's mixed embedding; O[k,j] = the same
/// probe from the scalar ground-truth label of k. OIS = |P-O|_F / |O|_F,
/// in percent.
inline OisReport ois(const Tensor& c_mixed, const std::vector<double>& c_gt, std::uint64_t seed = 1234) {
    std::size_t B = c_mixed.dim(0), K = c_mixed.dim(1), d = c_mixed.dim(2);
    OisReport rep;
    std::vector<std::size_t> kept;
    for (std::size_t k = 0; k < K; ++k) {
        bool has0 = false, has1 = false;
        for (std::size_t b = 0; b < B; ++b) {
            has0 = has0 || c_gt[b * K + k] == 0.0;
            has1 = has1 || c_gt[b * K + k] == 1.0;
        }
        if (has0 && has1)
            kept.push_back(k);
        else
            rep.excluded.push_back(k);
    }
    std::size_t n = kept.size();
    if (n == 0) throw std::invalid_argument("ois: no two-state concepts available");
    rep.impurity.assign(n * n, 0.0);
    rep.oracle.assign(n * n, 0.0);

    std::vector<double> emb(B * d), scalar(B), target(B);
    for (std::size_t a = 0; a < n; ++a) {
        std::size_t k = kept[a];
        for (std::size_t b = 0; b < B; ++b) {
            std::copy(c_mixed.values().begin() + (b * K + k) * d, c_mixed.values().begin() + (b * K + k) * d + d, emb.begin() + b * d);
            scalar[b] = c_gt[b * K + k];
        }
        for (std::size_t c = 0; c < n; ++c) {
            std::size_t j = kept[c];
            for (std::size_t b = 0; b < B; ++b) target[b] = c_gt[b * K + j];
            std::uint64_t probe_seed = SplitMix64::mix(seed) + k * K + j;
            rep.impurity[a * n + c] = logistic_probe_balanced_accuracy(emb, B, d, target, probe_seed);
            rep.oracle[a * n + c] = logistic_probe_balanced_accuracy(scalar, B, 1, target, probe_seed);
        }
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n * n; ++i) {
        double diff = rep.impurity[i] - rep.oracle[i];
        num += diff * diff;
        den += rep.oracle[i] * rep.oracle[i];
    }
    rep.value = 100.0 * std::sqrt(num) / std::sqrt(den);
    return rep;
}

// ---- cosine similarity diagnostics --------------------------------------

/// Representation used for similarity diagnostics: the flattened mixed
/// embeddings when the variant has them, else the bottleneck activations.
inline Tensor similarity_representation(const ForwardOutput& out) {
    if (out.c_mixed_flat.defined()) return out.c_mixed_flat;
    return out.activations;
}

/// Per-sample cosine between representations before and after a shift.
inline DistributionSummary cosine_shift_similarity(const ConceptModel& model, const SynDataset& test, const SynDataset& shifted) {
    if (test.size() != shifted.size()) throw std::invalid_argument("cosine_shift_similarity: datasets must pair sample-for-sample");
    NoGradGuard ng;
    std::vector<std::size_t> idx(test.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Tensor rep_a = similarity_representation(model.forward(make_batch(test, idx).x, Mode::Eval));
    Tensor rep_b = similarity_representation(model.forward(make_batch(shifted, idx).x, Mode::Eval));
    std::size_t dim = rep_a.dim(1);
    std::vector<double> cosines;
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        double c = cosine(rep_a.values().data() + i * dim, rep_b.values().data() + i * dim, dim);
        if (std::isnan(c))
            ++skipped;
        else
            cosines.push_back(c);
    }
    return summarize_cosines(cosines, skipped);
}

/// Cross-sample cosine similarity of one concept's embedding over samples
/// where the concept is active (subsampled to at most max_pairs pairs).
inline DistributionSummary cosine_concept_consistency(const ConceptModel& model, const SynDataset& ds, std::size_t k, std::uint64_t seed = 1234,
                                                      std::size_t max_pairs = 2000) {
    std::size_t K = ds.k(), d = model.config().embed_dim;
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.concepts()[i * K + k] == 1) active.push_back(i);
    if (active.size() < 2) throw std::invalid_argument("cosine_concept_consistency: fewer than 2 active samples for concept " + std::to_string(k));

    NoGradGuard ng;
    Tensor rep = model.forward(make_batch(ds, active).x, Mode::Eval).c_mixed;
    if (!rep.defined()) throw std::invalid_argument("cosine_concept_consistency: variant has no concept embeddings");

    std::size_t n = active.size();
    std::size_t total_pairs = n * (n - 1) / 2;
    SplitMix64 rng = SplitMix64::stream(seed, "consistency", k);
    std::vector<double> cosines;
    std::size_t skipped = 0;
    auto emb = [&](std::size_t row) { return rep.values().data() + (row * K + k) * d; };
    auto push_pair = [&](std::size_t i, std::size_t j) {
        double c = cosine(emb(i), emb(j), d);
        if (std::isnan(c))
            ++skipped;
        else
            cosines.push_back(c);
    };
    if (total_pairs <= max_pairs) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) push_pair(i, j);
    } else {
        for (std::size_t p = 0; p < max_pairs; ++p) {
            std::size_t i = rng.below(n), j = rng.below(n - 1);
            if (j >= i) ++j;
            push_pair(std::min(i, j), std::max(i, j));
        }
    }
    return summarize_cosines(cosines, skipped);
}

// ---- intervention curve -----------------------------------------------

struct InterventionCurve {
    std::vector<double> ratios;         // sorted ascending
    std::vector<double> mean_accuracy;  // over seeds
};

inline InterventionCurve intervention_curve(const ConceptModel& model, const SynDataset& ds, std::vector<double> ratios,
                                            const std::vector<std::uint64_t>& seeds) {
    std::sort(ratios.begin(), ratios.end());
    NoGradGuard ng;
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Batch batch = make_batch(ds, idx);
    ForwardOutput out = model.forward(batch.x, Mode::Eval);
    InterventionCurve curve;
    curve.ratios = ratios;
    for (double r : ratios) {
        double acc = 0.0;
        for (std::uint64_t s : seeds) acc += task_accuracy(model.intervene(out, batch.c_gt, r, s), batch.y);
        curve.mean_accuracy.push_back(acc / static_cast<double>(seeds.size()));
    }
    return curve;
}

}  // namespace recem
