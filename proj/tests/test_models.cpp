#include <catch2/catch_amalgamated.hpp>

#include "recem/models.hpp"
#include "testutil.hpp"

using namespace recem;

namespace {
Tensor random_input(const ModelConfig& cfg, std::size_t B, std::uint64_t seed) {
    SplitMix64 rng(seed);
    return testutil::random_tensor({B, cfg.n_in}, rng);
}

std::vector<double> random_cgt(const ModelConfig& cfg, std::size_t B, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<double> c(B * cfg.n_concepts);
    for (double& v : c) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    return c;
}
}  // namespace

TEST_CASE("backbone shape and determinism", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 42);
    Tensor x = random_input(cfg, 3, 1);
    Tensor h1 = m.backbone(x);
    Tensor h2 = m.backbone(x);
    CHECK(h1.shape() == Shape{3, cfg.n_hidden});
    CHECK(h1.values() == h2.values());
    CHECK_THROWS_AS(m.backbone(make_tensor({3, 2}, std::vector<double>(6, 0.0))), std::invalid_argument);

    auto f = [&](const Tensor& t) { return sum(sigmoid(m.backbone(t))); };
    CHECK(grad_check(f, x) <= 1e-4);
}

TEST_CASE("embed_pair uses per-concept parameters", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 43);
    Tensor x = random_input(cfg, 2, 2);
    Tensor h = m.backbone(x);
    auto [cp, cm] = m.embed_pair(h);
    CHECK(cp.shape() == Shape{2, cfg.n_concepts, cfg.embed_dim});
    CHECK(cm.shape() == Shape{2, cfg.n_concepts, cfg.embed_dim});

    // perturbing phi_pos.0 must leave concepts k>0 unchanged
    for (auto& [name, t] : m.named_params()) {
        if (name == "phi_pos.0.weight") t.values_mut()[0] += 0.5;
    }
    auto [cp2, cm2] = m.embed_pair(m.backbone(x));
    std::size_t d = cfg.embed_dim, K = cfg.n_concepts;
    bool first_changed = false;
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t t = 0; t < d; ++t) first_changed = first_changed || cp.values()[(b * K) * d + t] != cp2.values()[(b * K) * d + t];
        for (std::size_t k = 1; k < K; ++k)
            for (std::size_t t = 0; t < d; ++t) CHECK(cp.values()[(b * K + k) * d + t] == cp2.values()[(b * K + k) * d + t]);
    }
    CHECK(first_changed);
    CHECK(cm.values() == cm2.values());
}

TEST_CASE("score shares one scorer across concepts", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 44);
    std::size_t B = 2, K = cfg.n_concepts, d = cfg.embed_dim;

    // identical embeddings in every concept slot -> identical probabilities
    SplitMix64 rng(3);
    std::vector<double> one(d), other(d);
    for (double& v : one) v = rng.uniform(-1, 1);
    for (double& v : other) v = rng.uniform(-1, 1);
    std::vector<double> cp(B * K * d), cm(B * K * d);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t t = 0; t < d; ++t) {
                cp[(b * K + k) * d + t] = one[t];
                cm[(b * K + k) * d + t] = other[t];
            }
    Tensor p = m.score(Tensor::from({B, K, d}, cp), Tensor::from({B, K, d}, cm));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k) CHECK(p.values()[b * K + k] == p.values()[b * K]);

    auto f = [&](const Tensor& t) { return sum(m.score(t, Tensor::from({B, K, d}, cm))); };
    CHECK(grad_check(f, Tensor::from({B, K, d}, cp)) <= 1e-4);
}

TEST_CASE("score is 0.5 with zeroed scorer", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 45);
    for (auto& [name, t] : m.named_params())
        if (name.rfind("scorer", 0) == 0)
            for (double& v : t.values_mut()) v = 0.0;
    Tensor x = random_input(cfg, 3, 4);
    ForwardOutput out = m.forward(x, Mode::Eval);
    for (double v : out.p_hat.values()) CHECK(v == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("mix algebra", "[models]") {
    std::size_t B = 1, K = 2, d = 2;
    Tensor cp = make_tensor({B, K, d}, {2, 0, 1, 1});
    Tensor cm = make_tensor({B, K, d}, {0, 2, -1, 3});

    CHECK(mix_embeddings(make_tensor({B, K}, {1, 1}), cp, cm).values() == cp.values());
    CHECK(mix_embeddings(make_tensor({B, K}, {0, 0}), cp, cm).values() == cm.values());
    Tensor half = mix_embeddings(make_tensor({B, K}, {0.5, 0.5}), cp, cm);
    CHECK(half.values() == std::vector<double>{1, 1, 0, 2});

    // complementary mixtures sum to a + b, and swapping both the
    // probability and the embedding roles is a no-op
    SplitMix64 rng(5);
    Tensor p = testutil::random_tensor({B, K}, rng, 0.0, 1.0);
    std::vector<double> q(p.values());
    for (double& v : q) v = 1.0 - v;
    Tensor pq = Tensor::from({B, K}, q);
    Tensor lhs = add(mix_embeddings(p, cp, cm), mix_embeddings(pq, cp, cm));
    Tensor rhs = add(cp, cm);
    for (std::size_t i = 0; i < lhs.numel(); ++i) CHECK(lhs.values()[i] == Catch::Approx(rhs.values()[i]).margin(1e-12));
    Tensor swapped = mix_embeddings(pq, cm, cp);
    Tensor straight = mix_embeddings(p, cp, cm);
    for (std::size_t i = 0; i < swapped.numel(); ++i) CHECK(swapped.values()[i] == Catch::Approx(straight.values()[i]).margin(1e-12));

    CHECK_THROWS_AS(mix_embeddings(make_tensor({B, K}, {1.2, 0.5}), cp, cm), std::invalid_argument);

    // affine in p: d c_mixed / d p = c_plus - c_minus exactly
    Tensor pg = Tensor::from({B, K}, {0.3, 0.7}, true);
    Tensor picked = slice(slice(mix_embeddings(pg, cp, cm), 1, 0, 1), 2, 0, 1);  // element (0,0,0)
    backward(sum(picked));
    CHECK(pg.grad()[0] == cp.values()[0] - cm.values()[0]);
    CHECK(pg.grad()[1] == 0.0);
}

TEST_CASE("true embedding selects by mask", "[models]") {
    std::size_t B = 1, K = 2, d = 2;
    Tensor cp = make_tensor({B, K, d}, {2, 0, 1, 1});
    Tensor cm = make_tensor({B, K, d}, {0, 2, -1, 3});
    CHECK(true_embedding({1, 1}, B, K, cp, cm).values() == cp.values());
    CHECK(true_embedding({0, 0}, B, K, cp, cm).values() == cm.values());
    CHECK(true_embedding({1, 0}, B, K, cp, cm).values() == std::vector<double>{2, 0, -1, 3});
    CHECK_THROWS_AS(true_embedding({0.5, 1}, B, K, cp, cm), std::invalid_argument);
}

TEST_CASE("predict_label is a single linear map", "[models]") {
    ModelConfig cfg = testutil::tiny_config(Variant::Cem);
    ConceptModel m(cfg, 46);
    for (auto& [name, t] : m.named_params())
        if (name.rfind("predictor", 0) == 0)
            for (double& v : t.values_mut()) v = 0.0;
    Tensor x = random_input(cfg, 4, 6);
    ForwardOutput out = m.forward(x, Mode::Eval);
    CHECK(softmax_cross_entropy(out.logits, {0, 1, 2, 3}).item() == Catch::Approx(std::log(static_cast<double>(cfg.n_classes))).margin(1e-12));

    // permuting batch rows permutes logits rows
    ConceptModel m2(cfg, 47);
    Tensor xa = random_input(cfg, 3, 7);
    std::vector<double> xp(xa.values());
    std::vector<double> swapped(xp);
    for (std::size_t j = 0; j < cfg.n_in; ++j) std::swap(swapped[0 * cfg.n_in + j], swapped[2 * cfg.n_in + j]);
    Tensor la = m2.forward(xa, Mode::Eval).logits;
    Tensor lb = m2.forward(Tensor::from(xa.shape(), swapped), Mode::Eval).logits;
    std::size_t M = cfg.n_classes;
    for (std::size_t j = 0; j < M; ++j) {
        CHECK(la.values()[0 * M + j] == lb.values()[2 * M + j]);
        CHECK(la.values()[1 * M + j] == lb.values()[1 * M + j]);
    }
}

TEST_CASE("forward per variant", "[models]") {
    std::size_t B = 5;
    SECTION("BoolCBM thresholds at 0.5 and blocks task gradient") {
        ModelConfig cfg = testutil::tiny_config(Variant::BoolCbm);
        ConceptModel m(cfg, 48);
        Tensor x = random_input(cfg, B, 8);
        ForwardOutput out = m.forward(x, Mode::Eval);
        for (std::size_t i = 0; i < B * cfg.n_concepts; ++i)
            CHECK(out.activations.values()[i] == (out.p_hat.values()[i] >= 0.5 ? 1.0 : 0.0));
        CHECK_FALSE(out.activations.requires_grad());

        // invariance to sub-threshold perturbations of p_hat
        Tensor logits1 = m.forward(x, Mode::Eval).logits;
        CHECK(logits1.values() == out.logits.values());
    }
    SECTION("FuzzyCBM feeds probabilities") {
        ModelConfig cfg = testutil::tiny_config(Variant::FuzzyCbm);
        ConceptModel m(cfg, 49);
        Tensor x = random_input(cfg, B, 9);
        ForwardOutput out = m.forward(x, Mode::Eval);
        CHECK(out.activations.values() == out.p_hat.values());
        CHECK_FALSE(out.c_mixed.defined());
    }
    SECTION("CEM composes mix(score(embed_pair(backbone)))") {
        ModelConfig cfg = testutil::tiny_config(Variant::Cem);
        ConceptModel m(cfg, 50);
        Tensor x = random_input(cfg, B, 10);
        ForwardOutput out = m.forward(x, Mode::Eval);
        Tensor h = m.backbone(x);
        auto [cp, cm] = m.embed_pair(h);
        Tensor ref = mix_embeddings(m.score(cp, cm), cp, cm);
        CHECK(out.c_mixed.values() == ref.values());
        CHECK_FALSE(out.z_hat.defined());
    }
    SECTION("RECEM computes the reliability paths") {
        ModelConfig cfg = testutil::tiny_config(Variant::Recem);
        ConceptModel m(cfg, 51);
        Tensor x = random_input(cfg, B, 11);
        auto c_gt = random_cgt(cfg, B, 12);
        ForwardOutput out = m.forward(x, Mode::Train, &c_gt);
        CHECK(out.z_hat.shape() == Shape{B, cfg.n_concepts * cfg.embed_dim});
        CHECK(out.h_rec.shape() == Shape{B, cfg.n_hidden});
        CHECK(out.c_true.shape() == Shape{B, cfg.n_concepts, cfg.embed_dim});
        for (std::size_t i = 0; i < B; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < cfg.n_classes; ++j) acc += out.adv_probs.values()[i * cfg.n_classes + j];
            CHECK(std::fabs(acc - 1.0) <= 1e-9);
        }
        CHECK_THROWS_AS(m.forward(x, Mode::Train), std::invalid_argument);  // needs c_gt
    }
}

TEST_CASE("eval mode never receives concept labels", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 52);
    Tensor x = random_input(cfg, 2, 13);
    auto c_gt = random_cgt(cfg, 2, 14);
    CHECK_THROWS_AS(m.forward(x, Mode::Eval, &c_gt), std::invalid_argument);
}

TEST_CASE("RandInt substitution", "[models]") {
    ModelConfig cfg = testutil::tiny_config(Variant::Recem);
    cfg.randint_prob = 1.0;
    ConceptModel m(cfg, 53);
    std::size_t B = 4;
    Tensor x = random_input(cfg, B, 15);
    auto c_gt = random_cgt(cfg, B, 16);
    SplitMix64 rng(17);
    ForwardOutput out = m.forward(x, Mode::Train, &c_gt, &rng);
    CHECK(out.p_used.values() == c_gt);  // prob 1: c_gt exactly

    // mixture equals the true-embedding path in that limit
    Tensor ref = true_embedding(c_gt, B, cfg.n_concepts, out.c_plus, out.c_minus);
    for (std::size_t i = 0; i < ref.numel(); ++i) CHECK(out.c_mixed.values()[i] == Catch::Approx(ref.values()[i]).margin(1e-12));

    cfg.randint_prob = 0.0;
    ConceptModel m0(cfg, 53);
    SplitMix64 rng0(17);
    ForwardOutput out0 = m0.forward(x, Mode::Train, &c_gt, &rng0);
    CHECK(out0.p_used.values() == out0.p_hat.values());
}

TEST_CASE("intervention", "[models]") {
    ModelConfig cfg = testutil::tiny_config(Variant::Cem);
    ConceptModel m(cfg, 54);
    std::size_t B = 6;
    Tensor x = random_input(cfg, B, 18);
    auto c_gt = random_cgt(cfg, B, 19);
    NoGradGuard ng;
    ForwardOutput out = m.forward(x, Mode::Eval);

    Tensor same = m.intervene(out, c_gt, 0.0, 99);
    CHECK(same.values() == out.logits.values());

    // ratio 1 equals feeding ground-truth concepts through the mixture
    Tensor full = m.intervene(out, c_gt, 1.0, 99);
    Tensor ref = m.predict_label(reshape(true_embedding(c_gt, B, cfg.n_concepts, out.c_plus, out.c_minus), {B, cfg.n_concepts * cfg.embed_dim}));
    for (std::size_t i = 0; i < full.numel(); ++i) CHECK(full.values()[i] == Catch::Approx(ref.values()[i]).margin(1e-12));

    // explicit mask form
    std::vector<std::uint8_t> mask(cfg.n_concepts, 1);
    Tensor masked = m.intervene(out, c_gt, mask);
    for (std::size_t i = 0; i < full.numel(); ++i) CHECK(masked.values()[i] == Catch::Approx(full.values()[i]).margin(1e-12));
    CHECK_THROWS_AS(m.intervene(out, c_gt, std::vector<std::uint8_t>(cfg.n_concepts + 1, 1)), std::invalid_argument);
    CHECK_THROWS_AS(m.intervene(out, c_gt, 1.5, 99), std::invalid_argument);

    // determinism in the random-subset form
    Tensor a = m.intervene(out, c_gt, 0.5, 7);
    Tensor b = m.intervene(out, c_gt, 0.5, 7);
    CHECK(a.values() == b.values());
}

TEST_CASE("config validation", "[models]") {
    ModelConfig cfg = testutil::tiny_config();
    cfg.lambda_m = -0.1;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = testutil::tiny_config(Variant::Cem);
    cfg.mechanisms = true;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = testutil::tiny_config();
    cfg.randint_prob = 1.5;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("mechanism variants host embeddings and an aux head", "[models]") {
    ModelConfig cfg = testutil::tiny_config(Variant::FuzzyCbm);
    cfg.mechanisms = true;
    ConceptModel m(cfg, 55);
    std::size_t B = 3;
    Tensor x = random_input(cfg, B, 20);
    auto c_gt = random_cgt(cfg, B, 21);
    ForwardOutput out = m.forward(x, Mode::Train, &c_gt);
    CHECK(out.c_mixed.defined());
    CHECK(out.z_hat.defined());
    CHECK(out.activations.shape() == Shape{B, cfg.n_concepts});
    CHECK(out.logits.shape() == Shape{B, cfg.n_classes});
    Tensor mix_logits = m.mixup_logits(out.c_true_flat);
    CHECK(mix_logits.shape() == Shape{B, cfg.n_classes});
}
