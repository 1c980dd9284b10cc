#include <catch2/catch_amalgamated.hpp>

#include "recem/reliability.hpp"
#include "testutil.hpp"

using namespace recem;

namespace {
Tensor find_param(ConceptModel& m, const std::string& name) {
    for (auto& [n, t] : m.named_params())
        if (n == name) return t;
    throw std::runtime_error("param not found: " + name);
}

double hsic_value(const Tensor& x, const Tensor& y) {
    NoGradGuard ng;
    return hsic(x, y).item();
}

/// Null distribution by permuting Y's rows; returns the q-th percentile.
double permutation_percentile(const Tensor& x, const Tensor& y, int n_perm, double q, std::uint64_t seed) {
    std::size_t B = y.dim(0), dim = y.dim(1);
    SplitMix64 rng(seed);
    std::vector<double> stats;
    std::vector<std::size_t> idx(B);
    for (int p = 0; p < n_perm; ++p) {
        for (std::size_t i = 0; i < B; ++i) idx[i] = i;
        for (std::size_t i = B; i-- > 1;) std::swap(idx[i], idx[rng.below(i + 1)]);
        std::vector<double> perm(B * dim);
        for (std::size_t i = 0; i < B; ++i)
            std::copy(y.values().begin() + idx[i] * dim, y.values().begin() + (idx[i] + 1) * dim, perm.begin() + i * dim);
        stats.push_back(hsic_value(x, Tensor::from({B, dim}, perm)));
    }
    std::sort(stats.begin(), stats.end());
    std::size_t rank = static_cast<std::size_t>(q * static_cast<double>(stats.size() - 1));
    return stats[rank];
}
}  // namespace

TEST_CASE("dis_encode and decode are single linear maps", "[reliability]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 60);
    std::size_t B = 3, Kd = cfg.n_concepts * cfg.embed_dim;
    SplitMix64 rng(61);
    Tensor h = testutil::random_tensor({B, cfg.n_hidden}, rng);
    CHECK(m.dis_encode(h).shape() == Shape{B, Kd});

    for (double& v : find_param(m, "dis_encoder.weight").values_mut()) v = 0.0;
    std::vector<double>& bias = find_param(m, "dis_encoder.bias").values_mut();
    SplitMix64 brng(62);
    for (double& v : bias) v = brng.uniform(-1, 1);
    Tensor z = m.dis_encode(h);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < Kd; ++j) CHECK(z.values()[b * Kd + j] == bias[j]);

    CHECK(grad_check([&](const Tensor& t) { return sum(sigmoid(m.dis_encode(t))); }, h) <= 1e-4);

    Tensor ct = testutil::random_tensor({B, Kd}, rng);
    Tensor zz = testutil::random_tensor({B, Kd}, rng);
    CHECK(m.decode(ct, zz).shape() == Shape{B, cfg.n_hidden});
    CHECK(grad_check([&](const Tensor& t) { return sum(sigmoid(m.decode(t, zz))); }, ct) <= 1e-4);
    CHECK(grad_check([&](const Tensor& t) { return sum(sigmoid(m.decode(ct, t))); }, zz) <= 1e-4);
}

TEST_CASE("adversary probabilities and GRL wiring", "[reliability]") {
    ModelConfig cfg = testutil::tiny_config();
    cfg.grl_lambda = 1.7;
    ConceptModel m(cfg, 63);
    std::size_t B = 4, Kd = cfg.n_concepts * cfg.embed_dim, M = cfg.n_classes;
    SplitMix64 rng(64);

    // zero adversary weights -> uniform softmax rows
    ConceptModel mz(cfg, 63);
    for (double& v : find_param(mz, "adversary.weight").values_mut()) v = 0.0;
    for (double& v : find_param(mz, "adversary.bias").values_mut()) v = 0.0;
    Tensor zin = testutil::random_tensor({B, Kd}, rng);
    Tensor probs = softmax(mz.adversary_logits(zin));
    for (double v : probs.values()) CHECK(v == Catch::Approx(1.0 / static_cast<double>(M)).margin(1e-12));

    // gradient reaching z equals -lambda x the un-reversed classifier's gradient
    std::vector<int> y{0, 1, 2, 3};
    Tensor za = Tensor::from({B, Kd}, zin.values(), true);
    backward(softmax_cross_entropy(m.adversary_logits(za), y));
    LinearLayer plain(Kd, M);
    plain.weight = detach(find_param(m, "adversary.weight"));
    plain.bias = detach(find_param(m, "adversary.bias"));
    Tensor zb = Tensor::from({B, Kd}, zin.values(), true);
    backward(softmax_cross_entropy(linear_forward(plain, zb), y));
    for (std::size_t i = 0; i < za.grad().size(); ++i) CHECK(za.grad()[i] == -cfg.grl_lambda * zb.grad()[i]);

    // full path finite-difference check (lambda folds in as a -lambda scale)
    auto f = [&](const Tensor& t) { return softmax_cross_entropy(m.adversary_logits(t), y); };
    Tensor xg = Tensor::from({B, Kd}, zin.values(), true);
    Tensor loss = f(xg);
    backward(loss);
    std::vector<double> analytic = xg.grad();
    NoGradGuard ng;
    double worst = 0.0;
    std::vector<double> v = zin.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        double orig = v[i];
        v[i] = orig + 1e-5;
        double fp = f(Tensor::from({B, Kd}, v)).item();
        v[i] = orig - 1e-5;
        double fm = f(Tensor::from({B, Kd}, v)).item();
        v[i] = orig;
        double numeric = -cfg.grl_lambda * (fp - fm) / 2e-5;  // forward ignores GRL; gradient does not
        worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric)));
    }
    CHECK(worst <= 1e-4);
}

TEST_CASE("hsic basic properties", "[reliability]") {
    SplitMix64 rng(65);
    CHECK_THROWS_AS(hsic(testutil::random_tensor({3, 2}, rng), testutil::random_tensor({3, 2}, rng)), std::invalid_argument);

    // constant rows -> centering kills everything
    Tensor c = Tensor::full({8, 3}, 2.5);
    Tensor y = testutil::random_tensor({8, 4}, rng);
    CHECK(std::fabs(hsic_value(c, y)) <= 1e-12);

    // symmetry
    Tensor a = testutil::random_tensor({16, 3}, rng);
    Tensor b = testutil::random_tensor({16, 5}, rng);
    CHECK(std::fabs(hsic_value(a, b) - hsic_value(b, a)) <= 1e-12);

    // translation invariance
    std::vector<double> shifted = a.values();
    for (std::size_t i = 0; i < shifted.size(); ++i) shifted[i] += 5.0 + static_cast<double>(i % 3);
    CHECK(std::fabs(hsic_value(a, b) - hsic_value(Tensor::from(a.shape(), shifted), b)) <= 1e-10);

    CHECK((hsic_value(a, b) >= 0.0 || std::fabs(hsic_value(a, b)) < 1e-12));
}

TEST_CASE("hsic permutation calibration", "[reliability]") {
    SplitMix64 rng(66);
    // dependent: X = Y = 100 samples on a line
    std::vector<double> lane(100);
    for (std::size_t i = 0; i < 100; ++i) lane[i] = rng.uniform(-2, 2);
    Tensor x = Tensor::from({100, 1}, lane);
    double stat = hsic_value(x, x);
    CHECK(stat > permutation_percentile(x, x, 200, 0.99, 67));

    // independent standard normals, B = 200
    std::vector<double> xv(200 * 2), yv(200 * 2);
    for (double& v : xv) v = rng.normal();
    for (double& v : yv) v = rng.normal();
    Tensor xi = Tensor::from({200, 2}, xv);
    Tensor yi = Tensor::from({200, 2}, yv);
    CHECK(hsic_value(xi, yi) < permutation_percentile(xi, yi, 200, 0.95, 68));
}

TEST_CASE("hsic gradient vs finite differences (fixed sigma)", "[reliability]") {
    SplitMix64 rng(69);
    Tensor y = testutil::random_tensor({6, 3}, rng);
    auto f = [&](const Tensor& t) { return hsic(t, y, 1.3, 0.9); };
    CHECK(grad_check(f, testutil::random_tensor({6, 2}, rng)) <= 1e-4);
    Tensor x = testutil::random_tensor({6, 2}, rng);
    auto g = [&](const Tensor& t) { return hsic(x, t, 1.3, 0.9); };
    CHECK(grad_check(g, testutil::random_tensor({6, 3}, rng)) <= 1e-4);
}

TEST_CASE("hsic sigma floor on coincident points", "[reliability]") {
    Tensor c = Tensor::full({5, 2}, 1.0);
    CHECK(std::isfinite(hsic_value(c, c)));
    CHECK(std::fabs(hsic_value(c, c)) <= 1e-12);
}

TEST_CASE("loss_cvd composition", "[reliability]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 70);
    std::size_t B = 8, Kd = cfg.n_concepts * cfg.embed_dim, M = cfg.n_classes;
    SplitMix64 rng(71);
    Tensor z = testutil::random_tensor({B, Kd}, rng);
    Tensor ct = testutil::random_tensor({B, Kd}, rng);
    std::vector<int> y;
    for (std::size_t i = 0; i < B; ++i) y.push_back(static_cast<int>(rng.below(M)));

    Tensor adv = m.adversary_logits(z);
    double ce = softmax_cross_entropy(adv, y).item();
    CHECK(loss_cvd(adv, y, z, ct, 0.0).item() == Catch::Approx(ce).margin(1e-15));

    Tensor uniform_logits = Tensor::zeros({B, M});
    CHECK(loss_cvd(uniform_logits, y, z, ct, 0.0).item() == Catch::Approx(std::log(static_cast<double>(M))).margin(1e-12));

    // beta = 1 with dependent z/ct strictly exceeds the beta = 0 value
    Tensor dep = Tensor::from({B, Kd}, z.values());
    CHECK(loss_cvd(adv, y, z, dep, 1.0).item() > loss_cvd(adv, y, z, dep, 0.0).item());
    CHECK_THROWS_AS(loss_cvd(adv, y, z, ct, 1.5), std::invalid_argument);
}

TEST_CASE("loss_rec mean per-sample L1", "[reliability]") {
    Tensor h = make_tensor({2, 2}, {1, 2, 3, 4});
    CHECK(loss_rec(h, h).item() == 0.0);

    Tensor h2 = make_tensor({2, 2}, {2, 1, 4, 3});  // per-sample diff [1,-1]
    CHECK(loss_rec(h, h2).item() == Catch::Approx(2.0).margin(1e-12));
    CHECK_THROWS_AS(loss_rec(h, make_tensor({2, 3}, std::vector<double>(6, 0.0))), std::invalid_argument);

    SplitMix64 rng(72);
    Tensor target = testutil::random_tensor({3, 4}, rng);
    auto f = [&](const Tensor& t) { return loss_rec(t, target); };
    // keep all diffs away from the |.| kink
    std::vector<double> far(12);
    for (std::size_t i = 0; i < 12; ++i) far[i] = target.values()[i] + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.2, 1.0);
    CHECK(grad_check(f, Tensor::from({3, 4}, far)) <= 1e-4);
}

TEST_CASE("semantic mean bank", "[reliability]") {
    std::size_t B = 3, K = 2, d = 2;
    Tensor cp = make_tensor({B, K, d}, {1, 0, 9, 9, 3, 2, 8, 8, 5, 5, 7, 7});
    // concept 0 active in samples 0,1; concept 1 never active
    std::vector<double> c_gt{1, 0, 1, 0, 0, 0};
    SemanticMeanBank bank = semantic_mean(cp, c_gt);
    CHECK(bank.defined(0));
    CHECK_FALSE(bank.defined(1));
    CHECK(bank.counts[0] == 2);
    CHECK(bank.means[0] == Catch::Approx(2.0));  // mean of [1,0] and [3,2]
    CHECK(bank.means[1] == Catch::Approx(1.0));

    std::vector<double> single{0, 0, 1, 0, 0, 0};
    SemanticMeanBank b2 = semantic_mean(cp, single);
    CHECK(b2.means[0] == Catch::Approx(3.0));
    CHECK(b2.means[1] == Catch::Approx(2.0));
    CHECK(b2.counts[0] == 1);
}

TEST_CASE("ema bank update", "[reliability]") {
    std::size_t B = 2, K = 1, d = 1;
    Tensor cp1 = make_tensor({B, K, d}, {2, 4});
    Tensor cp2 = make_tensor({B, K, d}, {10, 10});
    std::vector<double> all{1, 1};
    SemanticMeanBank running = semantic_mean(cp1, all);  // mean 3
    ema_update(running, semantic_mean(cp2, all), 0.9);
    CHECK(running.means[0] == Catch::Approx(0.9 * 3.0 + 0.1 * 10.0));
}

TEST_CASE("align endpoints and fallbacks", "[reliability]") {
    std::size_t B = 3, K = 2, d = 2;
    SplitMix64 rng(73);
    Tensor cp = testutil::random_tensor({B, K, d}, rng);
    Tensor cm = testutil::random_tensor({B, K, d}, rng);
    Tensor p = testutil::random_tensor({B, K}, rng, 0.1, 0.9);
    Tensor mixed = mix_embeddings(p, cp, cm);
    std::vector<double> c_gt{1, 0, 1, 0, 0, 1};  // concept 0 active in 0,1; concept 1 active in 2
    SemanticMeanBank bank = semantic_mean(cp, c_gt);

    Tensor a0 = align(cp, mixed, c_gt, bank, 0.0);
    Tensor a1 = align(cp, mixed, c_gt, bank, 1.0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t t = 0; t < d; ++t) {
                std::size_t i = (b * K + k) * d + t;
                if (c_gt[b * K + k] == 1.0) {
                    CHECK(a0.values()[i] == cp.values()[i]);
                    CHECK(a1.values()[i] == Catch::Approx(bank.means[k * d + t]).margin(1e-12));
                } else {
                    CHECK(a0.values()[i] == mixed.values()[i]);  // bit-identical
                    CHECK(a1.values()[i] == mixed.values()[i]);
                }
            }

    // undefined mean -> fall back to the sample's own c_plus
    SemanticMeanBank empty;
    empty.n_concepts = K;
    empty.embed_dim = d;
    empty.means.assign(K * d, 0.0);
    empty.counts.assign(K, 0);
    empty.has_mean.assign(K, 0);
    Tensor afb = align(cp, mixed, c_gt, empty, 0.7);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t t = 0; t < d; ++t) {
                std::size_t i = (b * K + k) * d + t;
                CHECK(afb.values()[i] == (c_gt[b * K + k] == 1.0 ? cp.values()[i] : mixed.values()[i]));
            }

    CHECK_THROWS_AS(align(cp, mixed, c_gt, bank, 1.2), std::invalid_argument);
}

TEST_CASE("alignment contraction identity", "[reliability]") {
    // per-concept intra-batch variance of aligned active embeddings scales by (1-beta)^2
    std::size_t B = 16, K = 3, d = 4;
    SplitMix64 rng(74);
    Tensor cp = testutil::random_tensor({B, K, d}, rng);
    Tensor cm = testutil::random_tensor({B, K, d}, rng);
    Tensor p = testutil::random_tensor({B, K}, rng, 0.1, 0.9);
    Tensor mixed = mix_embeddings(p, cp, cm);
    std::vector<double> c_gt(B * K);
    for (double& v : c_gt) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
    SemanticMeanBank bank = semantic_mean(cp, c_gt);

    auto active_variance = [&](const Tensor& emb, std::size_t k) {
        std::vector<std::size_t> act;
        for (std::size_t b = 0; b < B; ++b)
            if (c_gt[b * K + k] == 1.0) act.push_back(b);
        std::vector<double> mean(d, 0.0);
        for (std::size_t b : act)
            for (std::size_t t = 0; t < d; ++t) mean[t] += emb.values()[(b * K + k) * d + t];
        for (double& m : mean) m /= static_cast<double>(act.size());
        double var = 0.0;
        for (std::size_t b : act) {
            double acc = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                double diff = emb.values()[(b * K + k) * d + t] - mean[t];
                acc += diff * diff;
            }
            var += acc;
        }
        return var / static_cast<double>(act.size());
    };

    Tensor a_half = align(cp, mixed, c_gt, bank, 0.5);
    Tensor a_one = align(cp, mixed, c_gt, bank, 1.0);
    for (std::size_t k = 0; k < K; ++k) {
        double v0 = active_variance(cp, k);
        CHECK(active_variance(a_one, k) <= 1e-20);
        CHECK(active_variance(a_half, k) == Catch::Approx(0.25 * v0).margin(1e-9));
    }
}

TEST_CASE("loss_mixup", "[reliability]") {
    ModelConfig cfg = testutil::tiny_config();
    ConceptModel m(cfg, 75);
    std::size_t B = 4, K = cfg.n_concepts, d = cfg.embed_dim, M = cfg.n_classes;
    SplitMix64 rng(76);
    std::vector<int> y;
    for (std::size_t i = 0; i < B; ++i) y.push_back(static_cast<int>(rng.below(M)));

    // zero predictor -> ln M
    ConceptModel mz(cfg, 75);
    for (double& v : find_param(mz, "predictor.weight").values_mut()) v = 0.0;
    for (double& v : find_param(mz, "predictor.bias").values_mut()) v = 0.0;
    Tensor flat = testutil::random_tensor({B, K * d}, rng);
    CHECK(loss_mixup(mz, flat, y).item() == Catch::Approx(std::log(static_cast<double>(M))).margin(1e-12));

    // beta=0 with p_hat == mask: aligned rows equal the mixed rows, so the
    // mixup loss equals the task CE on that representation
    std::vector<double> c_gt(B * K);
    for (double& v : c_gt) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    Tensor x = testutil::random_tensor({B, cfg.n_in}, rng);
    Tensor h = m.backbone(x);
    auto [cp, cm] = m.embed_pair(h);
    Tensor p_gt = Tensor::from({B, K}, c_gt);
    Tensor mixed = mix_embeddings(p_gt, cp, cm);
    SemanticMeanBank bank = semantic_mean(cp, c_gt);
    Tensor aligned = align(cp, mixed, c_gt, bank, 0.0);
    double lm = loss_mixup(m, reshape(aligned, {B, K * d}), y).item();
    double task = softmax_cross_entropy(m.predict_label(reshape(mixed, {B, K * d})), y).item();
    CHECK(lm == Catch::Approx(task).margin(1e-12));

    // gradient through align at fixed beta
    SemanticMeanBank fixed_bank = bank;
    auto f = [&](const Tensor& cpt) {
        Tensor mx = mix_embeddings(p_gt, cpt, cm);
        Tensor al = align(cpt, mx, c_gt, fixed_bank, 0.4);
        return loss_mixup(m, reshape(al, {B, K * d}), y);
    };
    CHECK(grad_check(f, Tensor::from(cp.shape(), cp.values())) <= 1e-4);
}

TEST_CASE("total_loss assembly", "[reliability]") {
    Tensor task = Tensor::scalar(1.0);
    Tensor concept_term = Tensor::scalar(2.0);
    Tensor mixup = Tensor::scalar(3.0);
    Tensor cvd = Tensor::scalar(4.0);
    Tensor rec = Tensor::scalar(5.0);

    LossBreakdown full = total_loss(task, concept_term, mixup, cvd, rec, 1.0, 0.1, 0.05, 1.0);
    CHECK(full.total == Catch::Approx(1 + 2 + 0.3 + 0.2 + 5).margin(1e-12));
    CHECK(std::fabs(full.total - (full.task + 1.0 * full.concept_loss + 0.1 * full.mixup + 0.05 * full.cvd + 1.0 * full.rec)) <= 1e-9);

    LossBreakdown cem = total_loss(task, concept_term, Tensor(), Tensor(), Tensor(), 1.0, 0.0, 0.0, 0.0);
    CHECK(cem.total == Catch::Approx(3.0).margin(1e-12));
    CHECK(cem.mixup == 0.0);

    CHECK_THROWS_AS(total_loss(task, concept_term, mixup, cvd, rec, -1.0, 0.1, 0.05, 1.0), std::invalid_argument);
}

TEST_CASE("beta schedule", "[reliability]") {
    BetaSchedule s(0.4, 10);
    CHECK(s.beta_at(0) == 0.0);
    CHECK(s.beta_at(10) == Catch::Approx(0.4));
    CHECK(s.beta_at(5) == Catch::Approx(0.2));
    CHECK(s.beta_at(50) == Catch::Approx(0.4));  // clamped
    for (std::size_t e = 1; e < 20; ++e) CHECK(s.beta_at(e) >= s.beta_at(e - 1));
    CHECK_THROWS_AS(BetaSchedule(1.4, 10), std::invalid_argument);
    CHECK_THROWS_AS(BetaSchedule(0.4, 0), std::invalid_argument);
}
