#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "recem/config.hpp"
#include "recem/metrics.hpp"
#include "recem/models.hpp"
#include "recem/reliability.hpp"
#include "recem/synthdata.hpp"

namespace recem {

struct EpochLog {
    std::size_t epoch = 0;
    double task = 0, concept_loss = 0, mixup = 0, cvd = 0, rec = 0, total = 0;
    double val_task_acc = 0, val_concept_acc = 0;
    double beta_align = 0, beta_hsic = 0;
    double wall_ms = 0;
};

struct RunLog {
    std::vector<EpochLog> epochs;
};

struct TrainResult {
    ConceptModel model;  // best-validation-accuracy snapshot
    RunLog log;
    double best_val_task = 0.0;
    std::size_t best_epoch = 0;
    std::uint64_t seed = 0;
};

/// Forward a whole dataset in eval mode, in chunks.
inline std::pair<double, double> accuracy_on(const ConceptModel& model, const SynDataset& ds, std::size_t chunk = 512) {
    NoGradGuard ng;
    std::size_t hits_task = 0, hits_concept = 0, n_concept = 0;
    for (std::size_t start = 0; start < ds.size(); start += chunk) {
        std::size_t stop = std::min(ds.size(), start + chunk);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        Batch b = make_batch(ds, idx);
        ForwardOutput out = model.forward(b.x, Mode::Eval);
        hits_task += static_cast<std::size_t>(task_accuracy(out.logits, b.y) / 100.0 * static_cast<double>(idx.size()) + 0.5);
        hits_concept += static_cast<std::size_t>(concept_accuracy(out.p_hat, b.c_gt) / 100.0 * static_cast<double>(b.c_gt.size()) + 0.5);
        n_concept += b.c_gt.size();
    }
    return {100.0 * static_cast<double>(hits_task) / static_cast<double>(ds.size()),
            100.0 * static_cast<double>(hits_concept) / static_cast<double>(n_concept)};
}

/// Mini-batch SGD over the shuffled training split. Non-reliability
/// variants (and zeroed weights) skip the corresponding loss terms, so a
/// RECEM run with all three extra weights at zero consumes exactly the
/// same random draws and gradients as CEM under the same seed.
inline TrainResult train_model(const RunConfig& cfg, std::uint64_t seed, const SynSplits& data) {
    if (data.train.k() != cfg.model.n_concepts || data.train.n_in() != cfg.model.n_in)
        throw ConfigError("train: dataset dimensions do not match the model config");

    ConceptModel model(cfg.model, seed);
    SgdOptimizer opt(model.params(), cfg.lr, cfg.momentum, /*allow_missing_grad=*/true);

    TrainResult result{ConceptModel(cfg.model, seed), {}, 0.0, 0, seed};
    if (cfg.epochs == 0) return result;

    std::size_t warmup = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.model.beta_warmup_frac * static_cast<double>(cfg.epochs) + 0.5));
    BetaSchedule sched_hsic(cfg.model.beta_max_hsic >= 0.0 ? cfg.model.beta_max_hsic : cfg.model.beta_max, warmup);
    BetaSchedule sched_align(cfg.model.beta_max_align >= 0.0 ? cfg.model.beta_max_align : cfg.model.beta_max, warmup);

    const ModelConfig& mc = cfg.model;
    bool rel = mc.has_reliability();
    SemanticMeanBank ema_bank;  // only used in EMA mode

    std::vector<std::vector<double>> best_params;
    double best_val = -1.0;
    std::size_t best_epoch = 0;

    TrainingPhaseGuard guard;
    std::vector<std::size_t> order(data.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        double beta_a = sched_align.beta_at(epoch);
        double beta_h = sched_hsic.beta_at(epoch);

        SplitMix64 shuffle_rng = SplitMix64::stream(seed, "shuffle", epoch);
        for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[shuffle_rng.below(i + 1)]);
        SplitMix64 randint_rng = SplitMix64::stream(seed, "randint", epoch);

        EpochLog log;
        log.epoch = epoch;
        log.beta_align = beta_a;
        log.beta_hsic = beta_h;
        std::size_t n_batches = 0;

        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t stop = std::min(order.size(), start + cfg.batch_size);
            if (stop - start < 4) break;  // HSIC needs a few samples; drop the tail
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + stop);
            Batch batch = make_batch(data.train, idx);
            std::size_t B = idx.size();

            ForwardOutput out = model.forward(batch.x, Mode::Train, &batch.c_gt, &randint_rng);
            Tensor task = softmax_cross_entropy(out.logits, batch.y);
            Tensor concept_term = binary_cross_entropy(out.p_hat, Tensor::from({B, mc.n_concepts}, batch.c_gt));

            Tensor mixup_term, cvd_term, rec_term;
            if (rel && mc.lambda_m > 0.0) {
                SemanticMeanBank batch_bank = semantic_mean(out.c_plus, batch.c_gt);
                const SemanticMeanBank* bank = &batch_bank;
                if (mc.mixup_ema) {
                    ema_update(ema_bank, batch_bank, mc.mixup_ema_decay);
                    bank = &ema_bank;
                }
                Tensor aligned = align(out.c_plus, out.c_mixed, batch.c_gt, *bank, beta_a);
                mixup_term = loss_mixup(model, reshape(aligned, {B, mc.n_concepts * mc.embed_dim}), batch.y);
            }
            if (rel && mc.lambda_cvd > 0.0) cvd_term = loss_cvd(out.adv_logits, batch.y, out.z_hat, out.c_true_flat, beta_h);
            // h is the reconstruction target: the term trains D, the true
            // embeddings, and z_hat to retain h's information, not h to
            // become easy to reconstruct (which collapses the backbone).
            if (rel && mc.lambda_rec > 0.0) rec_term = loss_rec(detach(out.h), out.h_rec);

            LossBreakdown losses = total_loss(task, concept_term, mixup_term, cvd_term, rec_term, mc.alpha, mc.lambda_m, mc.lambda_cvd, mc.lambda_rec);
            if (!std::isfinite(losses.total))
                throw DivergenceError("training diverged at epoch " + std::to_string(epoch) + ", batch " + std::to_string(n_batches) + " (total loss " + std::to_string(losses.total) + ")");

            backward(losses.total_tensor);
            opt.step();

            log.task += losses.task;
            log.concept_loss += losses.concept_loss;
            log.mixup += losses.mixup;
            log.cvd += losses.cvd;
            log.rec += losses.rec;
            log.total += losses.total;
            ++n_batches;
        }
        double inv = 1.0 / static_cast<double>(n_batches);
        log.task *= inv;
        log.concept_loss *= inv;
        log.mixup *= inv;
        log.cvd *= inv;
        log.rec *= inv;
        log.total *= inv;

        auto [val_task, val_concept] = accuracy_on(model, data.val);
        log.val_task_acc = val_task;
        log.val_concept_acc = val_concept;
        log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        result.log.epochs.push_back(log);

        if (val_task > best_val) {
            best_val = val_task;
            best_epoch = epoch;
            best_params.clear();
            for (const auto& [name, t] : model.named_params()) best_params.push_back(t.values());
        }
    }

    result.best_val_task = best_val;
    result.best_epoch = best_epoch;
    std::size_t i = 0;
    for (auto& [name, t] : result.model.named_params()) t.values_mut() = best_params[i++];
    return result;
}

// ---- evaluation -----------------------------------------------------------

/// A [B x K x d'] concept-representation view: mixed embeddings for
/// embedding variants, the raw activations (d'=1) for plain CBMs.
inline Tensor concept_representation(const ForwardOutput& out, std::size_t K) {
    if (out.c_mixed.defined()) return out.c_mixed;
    std::size_t B = out.activations.dim(0);
    return reshape(out.activations, {B, K, 1});
}

struct MetricsReport {
    std::string label;
    double concept_acc = 0.0;
    double task_acc = 0.0;
    double cas_score = 0.0;
    OisReport ois_rep;
    std::vector<double> intra_variance;  // per concept
    struct ShiftRow {
        ShiftKind kind = ShiftKind::InDistribution;
        double task_acc = 0.0;
        double concept_acc = 0.0;
        DistributionSummary cosine;  // vs the unshifted test set
    };
    std::vector<ShiftRow> shifts;
    std::vector<std::pair<std::size_t, DistributionSummary>> consistency;  // sampled concepts
    InterventionCurve intervention;
};

/// All metrics over the in-distribution test set plus one row per
/// requested shift kind.
inline MetricsReport evaluate_model(const ConceptModel& model, const SynDataset& test, const std::vector<ShiftKind>& kinds,
                                    std::uint64_t eval_seed = 1234, bool with_ois = true) {
    NoGradGuard ng;
    MetricsReport rep;
    rep.label = variant_name(model.config().variant) + (model.config().mechanisms ? "+mech" : "");
    std::size_t K = model.config().n_concepts;

    std::vector<std::size_t> idx(test.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Batch batch = make_batch(test, idx);
    ForwardOutput out = model.forward(batch.x, Mode::Eval);
    rep.concept_acc = concept_accuracy(out.p_hat, batch.c_gt);
    rep.task_acc = task_accuracy(out.logits, batch.y);
    Tensor rep_tensor = concept_representation(out, K);
    rep.cas_score = cas(rep_tensor, batch.c_gt, eval_seed);
    if (with_ois) rep.ois_rep = ois(rep_tensor, batch.c_gt, eval_seed);

    std::size_t d = rep_tensor.dim(2);
    std::vector<double> emb(test.size() * d);
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t b = 0; b < test.size(); ++b)
            std::copy(rep_tensor.values().begin() + (b * K + k) * d, rep_tensor.values().begin() + (b * K + k) * d + d, emb.begin() + b * d);
        rep.intra_variance.push_back(intra_concept_variance(emb, test.size(), d));
    }

    for (ShiftKind kind : kinds) {
        MetricsReport::ShiftRow row;
        row.kind = kind;
        SynDataset shifted = apply_shift(test, kind, eval_seed);
        auto [task_a, concept_a] = accuracy_on(model, shifted);
        row.task_acc = task_a;
        row.concept_acc = concept_a;
        row.cosine = cosine_shift_similarity(model, test, shifted);
        rep.shifts.push_back(std::move(row));
    }

    // same-concept cross-sample consistency over up to 6 sampled concepts
    if (model.config().uses_embeddings()) {
        SplitMix64 pick = SplitMix64::stream(eval_seed, "consistency_pick");
        std::vector<std::size_t> ks;
        while (ks.size() < std::min<std::size_t>(6, K)) {
            std::size_t k = pick.below(K);
            bool dup = false;
            for (std::size_t seen : ks) dup = dup || seen == k;
            if (!dup) ks.push_back(k);
        }
        for (std::size_t k : ks) {
            try {
                rep.consistency.emplace_back(k, cosine_concept_consistency(model, test, k, eval_seed));
            } catch (const std::invalid_argument&) {
                // concept never active in the test split: skip
            }
        }
    }

    rep.intervention = intervention_curve(model, test, {0.0, 0.25, 0.5, 0.75, 1.0},
                                          {SplitMix64::mix(eval_seed) + 1, SplitMix64::mix(eval_seed) + 2, SplitMix64::mix(eval_seed) + 3});
    return rep;
}

}  // namespace recem
