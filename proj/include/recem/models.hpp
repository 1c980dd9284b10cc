#pragma once

#include <cstdint>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recem/nn.hpp"
#include "recem/rng.hpp"
#include "recem/tensor.hpp"

namespace recem {

enum class Variant { BoolCbm, FuzzyCbm, Cem, Recem };

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::BoolCbm: return "BoolCBM";
        case Variant::FuzzyCbm: return "FuzzyCBM";
        case Variant::Cem: return "CEM";
        case Variant::Recem: return "RECEM";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "BoolCBM") return Variant::BoolCbm;
    if (s == "FuzzyCBM") return Variant::FuzzyCbm;
    if (s == "CEM") return Variant::Cem;
    if (s == "RECEM") return Variant::Recem;
    throw std::invalid_argument("unknown variant '" + s + "' (expected BoolCBM|FuzzyCBM|CEM|RECEM)");
}

struct ModelConfig {
    Variant variant = Variant::Recem;
    bool mechanisms = false;  // attach disentanglement+mixup to Bool/Fuzzy (appendix-style variants)
    std::size_t n_concepts = 16;   // K
    std::size_t n_classes = 8;     // M
    std::size_t embed_dim = 16;    // d
    std::size_t n_hidden = 64;
    std::size_t n_in = 64;
    double grl_lambda = 1.0;
    double randint_prob = 0.25;
    double alpha = 1.0;        // concept loss weight
    double lambda_m = 0.1;     // concept mixup
    double lambda_cvd = 0.05;  // disentanglement
    double lambda_rec = 1.0;   // reconstruction
    double beta_max = 0.2;
    double beta_warmup_frac = 0.3;
    double beta_max_hsic = -1.0;   // <0: follow beta_max
    double beta_max_align = -1.0;  // <0: follow beta_max
    bool mixup_ema = false;
    double mixup_ema_decay = 0.9;

    bool uses_embeddings() const { return variant == Variant::Cem || variant == Variant::Recem || mechanisms; }
    bool has_reliability() const { return variant == Variant::Recem || mechanisms; }
    std::size_t predictor_in() const {
        bool embeds_to_f = variant == Variant::Cem || variant == Variant::Recem;
        return embeds_to_f ? n_concepts * embed_dim : n_concepts;
    }

    void validate() const {
        if (n_concepts < 1 || n_classes < 1 || embed_dim < 1 || n_hidden < 1 || n_in < 1)
            throw std::invalid_argument("model config: all dimensions must be >= 1");
        auto nonneg = [](double v, const char* name) {
            if (!(v >= 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("model config: ") + name + " must be finite and >= 0");
        };
        nonneg(grl_lambda, "grl_lambda");
        nonneg(alpha, "alpha");
        nonneg(lambda_m, "lambda_m");
        nonneg(lambda_cvd, "lambda_cvd");
        nonneg(lambda_rec, "lambda_rec");
        if (randint_prob < 0.0 || randint_prob > 1.0) throw std::invalid_argument("model config: randint_prob must be in [0,1]");
        if (beta_max < 0.0 || beta_max > 1.0) throw std::invalid_argument("model config: beta_max must be in [0,1]");
        if (beta_warmup_frac <= 0.0 || beta_warmup_frac > 1.0) throw std::invalid_argument("model config: beta_warmup_frac must be in (0,1]");
        if (mechanisms && (variant == Variant::Cem || variant == Variant::Recem))
            throw std::invalid_argument("model config: mechanisms flag applies to BoolCBM/FuzzyCBM only");
    }
};

enum class Mode { Train, Eval };

/// Everything a single forward pass produces; fields are left undefined
/// when the variant/mode does not compute them.
struct ForwardOutput {
    Tensor h;             // [B x n_hidden]
    Tensor p_hat;         // [B x K], raw predicted probabilities
    Tensor p_used;        // [B x K], after RandInt substitution (train)
    Tensor c_plus;        // [B x K x d]
    Tensor c_minus;       // [B x K x d]
    Tensor c_mixed;       // [B x K x d]
    Tensor c_mixed_flat;  // [B x K*d]
    Tensor c_true;        // [B x K x d]  (train, reliability variants)
    Tensor c_true_flat;   // [B x K*d]
    Tensor z_hat;         // [B x K*d]
    Tensor h_rec;         // [B x n_hidden] (train, reliability variants)
    Tensor adv_logits;    // [B x M]
    Tensor adv_probs;     // [B x M]
    Tensor activations;   // [B x K]  (Bool/Fuzzy bottleneck values fed to f)
    Tensor logits;        // [B x M]
};

/// p*c_plus + (1-p)*c_minus per (sample, concept). p entries must lie in
/// [0,1]; anything else signals an upstream bug.
inline Tensor mix_embeddings(const Tensor& p, const Tensor& c_plus, const Tensor& c_minus) {
    for (double v : p.values())
        if (v < 0.0 || v > 1.0) throw std::invalid_argument("mix: probability " + std::to_string(v) + " outside [0,1]");
    std::size_t B = p.dim(0), K = p.dim(1);
    Tensor p3 = reshape(p, {B, K, 1});
    Tensor one_minus = sub(Tensor::full({B, K, 1}, 1.0), p3);
    return add(mul(c_plus, p3), mul(c_minus, one_minus));
}

/// Ground-truth-mask mixture (Eq. of the true embedding): mask entries are
/// exactly 0 or 1.
inline Tensor true_embedding(const std::vector<double>& mask, std::size_t B, std::size_t K, const Tensor& c_plus, const Tensor& c_minus) {
    if (mask.size() != B * K) throw std::invalid_argument("true_embedding: mask size mismatch");
    for (double m : mask)
        if (m != 0.0 && m != 1.0) throw std::invalid_argument("true_embedding: mask must be binary");
    Tensor mu = Tensor::from({B, K, 1}, mask);
    Tensor one_minus = sub(Tensor::full({B, K, 1}, 1.0), mu);
    return add(mul(c_plus, mu), mul(c_minus, one_minus));
}

/// The four model variants share one implementation; which submodules are
/// instantiated, and what the label predictor consumes, depends on config.
class ConceptModel {
public:
    ConceptModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        auto init = [&](LinearLayer& l, std::size_t in, std::size_t out, const std::string& name) {
            l = LinearLayer(in, out);
            init_params(l, SplitMix64::stream(seed, "init:" + name));
            names_.emplace_back(name + ".weight", l.weight);
            names_.emplace_back(name + ".bias", l.bias);
        };
        std::size_t K = cfg_.n_concepts, d = cfg_.embed_dim, Kd = K * d;
        init(psi_.l1, cfg_.n_in, cfg_.n_hidden, "psi.l1");
        init(psi_.l2, cfg_.n_hidden, cfg_.n_hidden, "psi.l2");
        if (cfg_.uses_embeddings()) {
            phi_pos_.resize(K);
            phi_neg_.resize(K);
            for (std::size_t k = 0; k < K; ++k) {
                init(phi_pos_[k], cfg_.n_hidden, d, "phi_pos." + std::to_string(k));
                init(phi_neg_[k], cfg_.n_hidden, d, "phi_neg." + std::to_string(k));
            }
            init(scorer_, 2 * d, 1, "scorer");
        } else {
            init(concept_head_, cfg_.n_hidden, K, "concept_head");
        }
        init(predictor_, cfg_.predictor_in(), cfg_.n_classes, "predictor");
        if (cfg_.mechanisms) init(mix_head_, Kd, cfg_.n_classes, "mix_head");
        if (cfg_.has_reliability()) {
            init(dis_encoder_, cfg_.n_hidden, Kd, "dis_encoder");
            init(adv_head_, Kd, cfg_.n_classes, "adversary");
            init(decoder_, 2 * Kd, cfg_.n_hidden, "decoder");
        }
    }

    const ModelConfig& config() const { return cfg_; }

    Tensor backbone(const Tensor& x) const {
        if (x.rank() != 2 || x.dim(1) != cfg_.n_in) throw std::invalid_argument("backbone: input " + shape_str(x.shape()) + " does not match n_in");
        return psi_.forward(x);
    }

    /// Per-concept positive/negative embeddings, stacked [B x K x d].
    std::pair<Tensor, Tensor> embed_pair(const Tensor& h) const {
        std::size_t B = h.dim(0), K = cfg_.n_concepts, d = cfg_.embed_dim;
        std::vector<Tensor> pos, negv;
        pos.reserve(K);
        negv.reserve(K);
        for (std::size_t k = 0; k < K; ++k) {
            pos.push_back(reshape(linear_forward(phi_pos_[k], h), {B, 1, d}));
            negv.push_back(reshape(linear_forward(phi_neg_[k], h), {B, 1, d}));
        }
        return {concat(pos, 1), concat(negv, 1)};
    }

    /// Shared scorer across concepts: sigmoid(w [c+; c-] + b).
    Tensor score(const Tensor& c_plus, const Tensor& c_minus) const {
        std::size_t B = c_plus.dim(0), K = c_plus.dim(1), d = c_plus.dim(2);
        Tensor both = concat({c_plus, c_minus}, 2);                    // [B,K,2d]
        Tensor flat = reshape(both, {B * K, 2 * d});
        Tensor s = sigmoid(linear_forward(scorer_, flat));             // [B*K,1]
        return reshape(s, {B, K});
    }

    Tensor predict_label(const Tensor& flat) const { return linear_forward(predictor_, flat); }

    /// Head used by the mixup loss: the main predictor when it consumes
    /// embeddings, the auxiliary head for Bool/Fuzzy-with-mechanisms.
    Tensor mixup_logits(const Tensor& c_flat) const {
        if (cfg_.mechanisms) return linear_forward(mix_head_, c_flat);
        return linear_forward(predictor_, c_flat);
    }

    Tensor dis_encode(const Tensor& h) const { return linear_forward(dis_encoder_, h); }

    /// Adversary class logits on the gradient-reversed disentangled vector.
    Tensor adversary_logits(const Tensor& z_hat) const { return linear_forward(adv_head_, grl(z_hat, cfg_.grl_lambda)); }

    Tensor decode(const Tensor& c_true_flat, const Tensor& z_hat) const {
        return linear_forward(decoder_, concat({c_true_flat, z_hat}, 1));
    }

    /// Full forward pass. c_gt (flattened row-major B*K, binary) is required
    /// in train mode for RandInt and for the reliability paths; eval mode
    /// must not receive it at all.
    ForwardOutput forward(const Tensor& x, Mode mode, const std::vector<double>* c_gt = nullptr, SplitMix64* randint_rng = nullptr) const {
        if (mode == Mode::Eval && c_gt != nullptr) throw std::invalid_argument("forward: eval mode must not receive concept labels");
        if (mode == Mode::Train && cfg_.has_reliability() && c_gt == nullptr) throw std::invalid_argument("forward: train mode requires concept labels for this variant");
        std::size_t B = x.dim(0), K = cfg_.n_concepts, d = cfg_.embed_dim;

        ForwardOutput out;
        out.h = backbone(x);
        if (cfg_.uses_embeddings()) {
            auto [cp, cm] = embed_pair(out.h);
            out.c_plus = cp;
            out.c_minus = cm;
            out.p_hat = score(cp, cm);
        } else {
            out.p_hat = sigmoid(linear_forward(concept_head_, out.h));
        }

        // RandInt: per concept, with probability randint_prob, substitute the
        // ground-truth state for the predicted probability (train only).
        out.p_used = out.p_hat;
        if (mode == Mode::Train && randint_rng != nullptr && cfg_.randint_prob > 0.0) {
            if (c_gt == nullptr) throw std::invalid_argument("forward: RandInt requires concept labels");
            std::vector<double> keep(B * K), replace(B * K);
            for (std::size_t i = 0; i < B * K; ++i) {
                bool r = randint_rng->bernoulli(cfg_.randint_prob);
                keep[i] = r ? 0.0 : 1.0;
                replace[i] = r ? (*c_gt)[i] : 0.0;
            }
            out.p_used = add(mul(out.p_hat, Tensor::from({B, K}, keep)), Tensor::from({B, K}, replace));
        }

        switch (cfg_.variant) {
            case Variant::BoolCbm:
                out.activations = hard_threshold(out.p_used);
                out.logits = predict_label(out.activations);
                break;
            case Variant::FuzzyCbm:
                out.activations = out.p_used;
                out.logits = predict_label(out.activations);
                break;
            case Variant::Cem:
            case Variant::Recem:
                out.c_mixed = mix_embeddings(out.p_used, out.c_plus, out.c_minus);
                out.c_mixed_flat = reshape(out.c_mixed, {B, K * d});
                out.logits = predict_label(out.c_mixed_flat);
                break;
        }
        if (cfg_.mechanisms) {
            // mechanisms variants still build the embedding mixture; the
            // reliability losses and metrics read it.
            out.c_mixed = mix_embeddings(out.p_used, out.c_plus, out.c_minus);
            out.c_mixed_flat = reshape(out.c_mixed, {B, K * d});
        }

        if (cfg_.has_reliability()) {
            out.z_hat = dis_encode(out.h);
            out.adv_logits = adversary_logits(out.z_hat);
            out.adv_probs = softmax(out.adv_logits);
            if (mode == Mode::Train) {
                out.c_true = true_embedding(*c_gt, B, K, out.c_plus, out.c_minus);
                out.c_true_flat = reshape(out.c_true, {B, K * d});
                // TODO(wiring experiment): pick one path and delete the env knob
                const char* wiring = std::getenv("RECEM_REC_WIRING");
                if (wiring && std::string(wiring) == "sidecar") {
                    out.h_rec = decode(detach(out.c_true_flat), dis_encode(detach(out.h)));
                } else {
                    out.h_rec = decode(detach(out.c_true_flat), out.z_hat);
                }
            }
        }
        return out;
    }

    /// Test-time intervention: overwrite p_hat with ground truth on a
    /// per-sample random subset of floor(ratio*K) concepts, rebuild the
    /// bottleneck, and recompute logits. Returns the new logits.
    Tensor intervene(const ForwardOutput& out, const std::vector<double>& c_gt, double ratio, std::uint64_t seed) const {
        if (ratio < 0.0 || ratio > 1.0) throw std::invalid_argument("intervene: ratio must be in [0,1]");
        std::size_t B = out.p_hat.dim(0), K = cfg_.n_concepts;
        std::size_t n_pick = static_cast<std::size_t>(ratio * static_cast<double>(K) + 1e-12);
        std::vector<double> p_new = out.p_hat.values();
        std::vector<std::size_t> idx(K);
        for (std::size_t b = 0; b < B; ++b) {
            SplitMix64 rng = SplitMix64::stream(seed, "intervene", b);
            for (std::size_t k = 0; k < K; ++k) idx[k] = k;
            for (std::size_t k = 0; k < n_pick; ++k) {  // partial Fisher-Yates
                std::size_t j = k + rng.below(K - k);
                std::swap(idx[k], idx[j]);
                p_new[b * K + idx[k]] = c_gt[b * K + idx[k]];
            }
        }
        return logits_from_probs(out, Tensor::from({B, K}, p_new));
    }

    /// Intervention with an explicit shared concept mask.
    Tensor intervene(const ForwardOutput& out, const std::vector<double>& c_gt, const std::vector<std::uint8_t>& mask) const {
        std::size_t B = out.p_hat.dim(0), K = cfg_.n_concepts;
        if (mask.size() != K) throw std::invalid_argument("intervene: mask size must equal concept count");
        std::vector<double> p_new = out.p_hat.values();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t k = 0; k < K; ++k)
                if (mask[k]) p_new[b * K + k] = c_gt[b * K + k];
        return logits_from_probs(out, Tensor::from({B, K}, p_new));
    }

    const std::vector<std::pair<std::string, Tensor>>& named_params() const { return names_; }
    std::vector<std::pair<std::string, Tensor>>& named_params() { return names_; }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        out.reserve(names_.size());
        for (const auto& [name, t] : names_) out.push_back(t);
        return out;
    }

    /// Overwrite one named parameter (checkpoint loading).
    void set_param(const std::string& name, const std::vector<double>& values) {
        for (auto& [n, t] : names_) {
            if (n == name) {
                if (t.numel() != values.size()) throw std::runtime_error("parameter '" + name + "' size mismatch: ckpt " + std::to_string(values.size()) + " vs model " + std::to_string(t.numel()));
                t.values_mut() = values;
                return;
            }
        }
        throw std::runtime_error("unknown parameter '" + name + "' in checkpoint");
    }

private:
    Tensor logits_from_probs(const ForwardOutput& out, const Tensor& p) const {
        std::size_t B = p.dim(0), K = cfg_.n_concepts, d = cfg_.embed_dim;
        switch (cfg_.variant) {
            case Variant::BoolCbm: return predict_label(hard_threshold(p));
            case Variant::FuzzyCbm: return predict_label(p);
            case Variant::Cem:
            case Variant::Recem: {
                Tensor mixed = mix_embeddings(p, out.c_plus, out.c_minus);
                return predict_label(reshape(mixed, {B, K * d}));
            }
        }
        throw std::logic_error("unreachable");
    }

    ModelConfig cfg_;
    Mlp psi_;
    LinearLayer concept_head_;  // plain Bool/Fuzzy only
    std::vector<LinearLayer> phi_pos_, phi_neg_;
    LinearLayer scorer_;
    LinearLayer predictor_;
    LinearLayer mix_head_;
    LinearLayer dis_encoder_;
    LinearLayer adv_head_;
    LinearLayer decoder_;
    std::vector<std::pair<std::string, Tensor>> names_;
};

}  // namespace recem
