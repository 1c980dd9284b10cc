#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "recem/rng.hpp"
#include "recem/tensor.hpp"

namespace recem {

static_assert(std::endian::native == std::endian::little, "dataset/checkpoint formats assume a little-endian host");

/// Generator parameters. Labels are a deterministic function of the first
/// log2(M) concepts, so M must be a power of two.
struct SyntheticSpec {
    std::size_t n_concepts = 16;  // K
    std::size_t n_classes = 8;    // M
    std::size_t n_in = 64;
    std::size_t dim_r = 32;
    std::size_t dim_z = 16;
    double rho = 0.9;           // spurious z->label correlation strength
    double concept_corr = 0.3;  // pairwise correlation of the first K/4 concept pairs
    double noise_sigma = 0.05;
    std::size_t n_train = 4000, n_val = 1000, n_test = 2000;
    std::uint64_t seed = 7;
    bool incomplete = false;  // drop the last label-relevant concept from annotations

    std::size_t label_bits() const {
        std::size_t bits = 0;
        while ((std::size_t{1} << bits) < n_classes) ++bits;
        return bits;
    }

    std::size_t annotated_k() const { return incomplete ? n_concepts - 1 : n_concepts; }

    void validate() const {
        if (n_concepts < 1 || n_classes < 2 || n_in < 1 || dim_r < 1 || dim_z < 1) throw std::invalid_argument("synthetic spec: dimensions must be positive");
        if ((n_classes & (n_classes - 1)) != 0) throw std::invalid_argument("synthetic spec: n_classes must be a power of two (labels are binary-coded concepts)");
        if (label_bits() > n_concepts) throw std::invalid_argument("synthetic spec: need at least log2(M) concepts");
        if (n_in < dim_r + dim_z) throw std::invalid_argument("synthetic spec: n_in must be >= dim_r + dim_z");
        if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("synthetic spec: rho must be in [0,1]");
        if (concept_corr < 0.0 || concept_corr > 1.0) throw std::invalid_argument("synthetic spec: concept_corr must be in [0,1]");
        if (noise_sigma < 0.0) throw std::invalid_argument("synthetic spec: noise_sigma must be >= 0");
        if (n_train == 0 || n_val == 0 || n_test == 0) throw std::invalid_argument("synthetic spec: split sizes must be positive");
        if (incomplete && annotated_k() < 1) throw std::invalid_argument("synthetic spec: incomplete mode needs K >= 2");
    }
};

enum class ShiftKind { InDistribution, RandomShift, FixedShift, ZeroShift };

inline std::string shift_name(ShiftKind k) {
    switch (k) {
        case ShiftKind::InDistribution: return "InDistribution";
        case ShiftKind::RandomShift: return "RandomShift";
        case ShiftKind::FixedShift: return "FixedShift";
        case ShiftKind::ZeroShift: return "ZeroShift";
    }
    return "?";
}

inline ShiftKind parse_shift(const std::string& s) {
    if (s == "InDistribution") return ShiftKind::InDistribution;
    if (s == "RandomShift") return ShiftKind::RandomShift;
    if (s == "FixedShift") return ShiftKind::FixedShift;
    if (s == "ZeroShift") return ShiftKind::ZeroShift;
    throw std::invalid_argument("unknown shift kind '" + s + "'");
}

/// RAII guard marking the training phase; test-split supervision reads
/// abort while one is alive.
struct TrainingPhaseGuard;

/// One split of a generated dataset. Hidden generator latents (r, z, eps)
/// travel with it for shift reconstruction and diagnostics.
class SynDataset {
public:
    SynDataset() = default;

    static bool& training_phase() {
        static thread_local bool flag = false;
        return flag;
    }

    std::size_t size() const { return n_; }
    std::size_t k() const { return k_annotated_; }
    std::size_t n_in() const { return spec_.n_in; }
    const SyntheticSpec& spec() const { return spec_; }
    const std::string& split() const { return split_; }
    ShiftKind shift() const { return shift_; }

    const std::vector<double>& features() const { return features_; }

    const std::vector<std::uint8_t>& concepts() const {
        guard_supervision();
        return concepts_;
    }
    const std::vector<std::uint32_t>& labels() const {
        guard_supervision();
        return labels_;
    }

    const std::vector<double>& latent_r() const { return r_; }
    const std::vector<double>& latent_z() const { return z_; }
    const std::vector<double>& latent_eps() const { return eps_; }

    /// Row-major [n x k] concept matrix as doubles (for batching).
    std::vector<double> concepts_f64() const {
        const auto& c = concepts();
        return std::vector<double>(c.begin(), c.end());
    }

    std::vector<int> labels_int() const {
        const auto& l = labels();
        return std::vector<int>(l.begin(), l.end());
    }

    friend struct SynGenerator;
    friend SynDataset apply_shift(const SynDataset&, ShiftKind, std::uint64_t);
    friend void save_dataset(const SynDataset&, const std::string&);
    friend SynDataset load_dataset(const std::string&);

private:
    void guard_supervision() const {
        if (training_phase() && split_ == "test") throw std::logic_error("test-split supervision accessed during training");
    }

    SyntheticSpec spec_;
    std::string split_;
    ShiftKind shift_ = ShiftKind::InDistribution;
    std::size_t n_ = 0, k_annotated_ = 0;
    std::vector<double> features_;        // n x n_in
    std::vector<std::uint8_t> concepts_;  // n x k_annotated
    std::vector<std::uint32_t> labels_;   // n
    std::vector<double> r_, z_, eps_;     // n x dim_r / dim_z / n_in
};

struct TrainingPhaseGuard {
    TrainingPhaseGuard() { SynDataset::training_phase() = true; }
    ~TrainingPhaseGuard() { SynDataset::training_phase() = false; }
    TrainingPhaseGuard(const TrainingPhaseGuard&) = delete;
    TrainingPhaseGuard& operator=(const TrainingPhaseGuard&) = delete;
};

struct SynSplits {
    SynDataset train, val, test;
};

/// Deterministic generator. Structure per sample:
///   concepts c: Bernoulli(0.5); the first K/4 pairs share a latent coin
///     (copy prob sqrt(concept_corr), so pair correlation == concept_corr)
///   label y: binary code of the first log2(M) concepts
///   r = R c + 0.05 N(0,I)           concept-relevant latent
///   z = class anchor e_y with prob rho, else N(0,I)   background latent
///   x = A r + B z + eps,  eps ~ N(0, noise_sigma^2)
struct SynGenerator {
    const SyntheticSpec spec;
    std::vector<double> R, A, B;        // dim_r x K, n_in x dim_r, n_in x dim_z
    std::vector<double> anchors;        // M x dim_z

    // The object channel is noisy and the background channel is salient,
    // mirroring images where most pixels are background: with rho high, a
    // model that never disentangles leans on the background and pays for
    // it under shift.
    static constexpr double kLatentNoise = 0.3;     // sigma of the r-channel noise
    static constexpr double kBackgroundGain = 2.0;  // amplitude of B z relative to A r

    explicit SynGenerator(const SyntheticSpec& s) : spec(s) {
        spec.validate();
        SplitMix64 mats = SplitMix64::stream(spec.seed, "matrices");
        auto fill = [&](std::vector<double>& m, std::size_t rows, std::size_t cols, double gain) {
            m.resize(rows * cols);
            double scale = gain / std::sqrt(static_cast<double>(cols));
            for (double& v : m) v = mats.normal() * scale;
        };
        fill(R, spec.dim_r, spec.n_concepts, 1.0);
        fill(A, spec.n_in, spec.dim_r, 1.0);
        fill(B, spec.n_in, spec.dim_z, kBackgroundGain);
        SplitMix64 anc = SplitMix64::stream(spec.seed, "anchors");
        anchors.resize(spec.n_classes * spec.dim_z);
        for (double& v : anchors) v = anc.normal();
    }

    std::uint32_t label_of(const std::vector<std::uint8_t>& c_full) const {
        std::uint32_t y = 0;
        for (std::size_t j = 0; j < spec.label_bits(); ++j) y |= static_cast<std::uint32_t>(c_full[j]) << j;
        return y;
    }

    /// Generate one sample into the dataset buffers. `index` is the global
    /// sample counter, which doubles as the PRNG stream id.
    void sample(std::size_t index, SynDataset& ds, std::size_t row) const {
        std::size_t K = spec.n_concepts, L = spec.label_bits();
        SplitMix64 rng = SplitMix64::stream(spec.seed, "sample", index);

        std::vector<std::uint8_t> c(K);
        std::size_t n_pairs = K / 4;
        double copy_p = std::sqrt(spec.concept_corr);
        for (std::size_t pr = 0; pr < n_pairs; ++pr) {
            std::uint8_t coin = rng.bernoulli(0.5) ? 1 : 0;
            for (std::size_t m = 0; m < 2; ++m) c[2 * pr + m] = rng.bernoulli(copy_p) ? coin : (rng.bernoulli(0.5) ? 1 : 0);
        }
        for (std::size_t k = 2 * n_pairs; k < K; ++k) c[k] = rng.bernoulli(0.5) ? 1 : 0;
        std::uint32_t y = label_of(c);

        double* zr = ds.z_.data() + row * spec.dim_z;
        if (rng.bernoulli(spec.rho)) {
            const double* e = anchors.data() + y * spec.dim_z;
            std::copy(e, e + spec.dim_z, zr);
        } else {
            for (std::size_t t = 0; t < spec.dim_z; ++t) zr[t] = rng.normal();
        }

        double* rr = ds.r_.data() + row * spec.dim_r;
        for (std::size_t i = 0; i < spec.dim_r; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc += R[i * K + k] * c[k];
            rr[i] = acc;
        }
        for (std::size_t i = 0; i < spec.dim_r; ++i) rr[i] += kLatentNoise * rng.normal();

        double* er = ds.eps_.data() + row * spec.n_in;
        for (std::size_t i = 0; i < spec.n_in; ++i) er[i] = spec.noise_sigma * rng.normal();

        compose_features(ds, row);

        std::size_t ka = spec.annotated_k();
        std::uint8_t* cr = ds.concepts_.data() + row * ka;
        std::size_t w = 0;
        for (std::size_t k = 0; k < K; ++k) {
            if (spec.incomplete && k == L - 1) continue;  // hidden label-relevant concept
            cr[w++] = c[k];
        }
        ds.labels_[row] = y;
    }

    /// x_row = A r + B z + eps from the stored latents.
    void compose_features(SynDataset& ds, std::size_t row) const {
        const double* rr = ds.r_.data() + row * spec.dim_r;
        const double* zr = ds.z_.data() + row * spec.dim_z;
        const double* er = ds.eps_.data() + row * spec.n_in;
        double* xr = ds.features_.data() + row * spec.n_in;
        for (std::size_t i = 0; i < spec.n_in; ++i) {
            double acc = er[i];
            for (std::size_t j = 0; j < spec.dim_r; ++j) acc += A[i * spec.dim_r + j] * rr[j];
            for (std::size_t j = 0; j < spec.dim_z; ++j) acc += B[i * spec.dim_z + j] * zr[j];
            xr[i] = acc;
        }
    }

    SynDataset make_split(const std::string& name, std::size_t n, std::size_t index_base) const {
        SynDataset ds;
        ds.spec_ = spec;
        ds.split_ = name;
        ds.n_ = n;
        ds.k_annotated_ = spec.annotated_k();
        ds.features_.resize(n * spec.n_in);
        ds.concepts_.resize(n * ds.k_annotated_);
        ds.labels_.resize(n);
        ds.r_.resize(n * spec.dim_r);
        ds.z_.resize(n * spec.dim_z);
        ds.eps_.resize(n * spec.n_in);
        for (std::size_t i = 0; i < n; ++i) sample(index_base + i, ds, i);
        return ds;
    }
};

inline SynSplits generate(const SyntheticSpec& spec) {
    SynGenerator gen(spec);
    SynSplits out;
    out.train = gen.make_split("train", spec.n_train, 0);
    out.val = gen.make_split("val", spec.n_val, spec.n_train);
    out.test = gen.make_split("test", spec.n_test, spec.n_train + spec.n_val);
    return out;
}

/// Rebuild features with the background latent replaced per the shift kind;
/// concepts, labels, object latents, and noise stay fixed.
inline SynDataset apply_shift(const SynDataset& test, ShiftKind kind, std::uint64_t seed) {
    if (test.r_.empty() || test.z_.empty() || test.eps_.empty()) throw std::invalid_argument("apply_shift: dataset is missing stored latents");
    if (kind == ShiftKind::InDistribution) return test;

    SynDataset out = test;
    out.shift_ = kind;
    const SyntheticSpec& spec = test.spec_;
    SynGenerator gen(spec);

    std::vector<std::uint32_t> derangement;
    if (kind == ShiftKind::FixedShift) {
        std::size_t M = spec.n_classes;
        derangement.resize(M);
        SplitMix64 rng = SplitMix64::stream(seed, "derange");
        bool ok = false;
        while (!ok) {
            for (std::size_t m = 0; m < M; ++m) derangement[m] = static_cast<std::uint32_t>(m);
            for (std::size_t m = M; m-- > 1;) std::swap(derangement[m], derangement[rng.below(m + 1)]);
            ok = true;
            for (std::size_t m = 0; m < M; ++m) ok = ok && derangement[m] != m;
        }
    }

    for (std::size_t i = 0; i < out.n_; ++i) {
        double* zr = out.z_.data() + i * spec.dim_z;
        switch (kind) {
            case ShiftKind::RandomShift: {
                SplitMix64 rng = SplitMix64::stream(seed, "shift", i);
                for (std::size_t t = 0; t < spec.dim_z; ++t) zr[t] = rng.normal();
                break;
            }
            case ShiftKind::FixedShift: {
                const double* e = gen.anchors.data() + derangement[out.labels_[i]] * spec.dim_z;
                std::copy(e, e + spec.dim_z, zr);
                break;
            }
            case ShiftKind::ZeroShift:
                std::fill(zr, zr + spec.dim_z, 0.0);
                break;
            case ShiftKind::InDistribution:
                break;
        }
        gen.compose_features(out, i);
    }
    return out;
}

// ---- serialization ----------------------------------------------------

namespace detail {
inline void write_block(std::ofstream& f, const void* data, std::size_t bytes) { f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes)); }
inline void read_block(std::ifstream& f, void* data, std::size_t bytes, const char* what) {
    f.read(static_cast<char*>(data), static_cast<std::streamsize>(bytes));
    if (static_cast<std::size_t>(f.gcount()) != bytes) throw std::runtime_error(std::string("dataset file truncated while reading ") + what);
}
}  // namespace detail

inline void save_dataset(const SynDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    const SyntheticSpec& s = ds.spec_;
    f << "RECEMDATA v1\n";
    f << "split = " << ds.split_ << "\n";
    f << "shift = " << shift_name(ds.shift_) << "\n";
    f << "n = " << ds.n_ << "\n";
    f << "k_annotated = " << ds.k_annotated_ << "\n";
    f << "K = " << s.n_concepts << "\nM = " << s.n_classes << "\nn_in = " << s.n_in << "\ndim_r = " << s.dim_r << "\ndim_z = " << s.dim_z << "\n";
    char buf[64];
    auto put = [&](const char* key, double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        f << key << " = " << buf << "\n";
    };
    put("rho", s.rho);
    put("concept_corr", s.concept_corr);
    put("noise_sigma", s.noise_sigma);
    f << "n_train = " << s.n_train << "\nn_val = " << s.n_val << "\nn_test = " << s.n_test << "\n";
    f << "seed = " << s.seed << "\nincomplete = " << (s.incomplete ? 1 : 0) << "\n";
    f << "binary\n";
    detail::write_block(f, ds.features_.data(), ds.features_.size() * 8);
    detail::write_block(f, ds.concepts_.data(), ds.concepts_.size());
    detail::write_block(f, ds.labels_.data(), ds.labels_.size() * 4);
    detail::write_block(f, ds.r_.data(), ds.r_.size() * 8);
    detail::write_block(f, ds.z_.data(), ds.z_.size() * 8);
    detail::write_block(f, ds.eps_.data(), ds.eps_.size() * 8);
    if (!f) throw std::runtime_error("write failure on '" + path + "'");
}

inline SynDataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "RECEMDATA v1") throw std::runtime_error("'" + path + "': bad or missing dataset header (expected 'RECEMDATA v1')");

    std::map<std::string, std::string> kv;
    while (std::getline(f, line)) {
        if (line == "binary") break;
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw std::runtime_error("'" + path + "': malformed header line '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 3);
    }
    if (line != "binary") throw std::runtime_error("'" + path + "': missing binary marker");
    auto need = [&](const char* key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw std::runtime_error("'" + path + "': missing header field '" + std::string(key) + "'");
        return it->second;
    };

    SynDataset ds;
    SyntheticSpec s;
    s.n_concepts = std::stoul(need("K"));
    s.n_classes = std::stoul(need("M"));
    s.n_in = std::stoul(need("n_in"));
    s.dim_r = std::stoul(need("dim_r"));
    s.dim_z = std::stoul(need("dim_z"));
    s.rho = std::stod(need("rho"));
    s.concept_corr = std::stod(need("concept_corr"));
    s.noise_sigma = std::stod(need("noise_sigma"));
    s.n_train = std::stoul(need("n_train"));
    s.n_val = std::stoul(need("n_val"));
    s.n_test = std::stoul(need("n_test"));
    s.seed = std::stoull(need("seed"));
    s.incomplete = need("incomplete") == "1";
    ds.spec_ = s;
    ds.split_ = need("split");
    ds.shift_ = parse_shift(need("shift"));
    ds.n_ = std::stoul(need("n"));
    ds.k_annotated_ = std::stoul(need("k_annotated"));

    ds.features_.resize(ds.n_ * s.n_in);
    ds.concepts_.resize(ds.n_ * ds.k_annotated_);
    ds.labels_.resize(ds.n_);
    ds.r_.resize(ds.n_ * s.dim_r);
    ds.z_.resize(ds.n_ * s.dim_z);
    ds.eps_.resize(ds.n_ * s.n_in);
    detail::read_block(f, ds.features_.data(), ds.features_.size() * 8, "features");
    detail::read_block(f, ds.concepts_.data(), ds.concepts_.size(), "concepts");
    detail::read_block(f, ds.labels_.data(), ds.labels_.size() * 4, "labels");
    detail::read_block(f, ds.r_.data(), ds.r_.size() * 8, "latent r");
    detail::read_block(f, ds.z_.data(), ds.z_.size() * 8, "latent z");
    detail::read_block(f, ds.eps_.data(), ds.eps_.size() * 8, "latent eps");
    return ds;
}

// ---- batching -------------------------------------------------------------

struct Batch {
    Tensor x;                  // [B x n_in]
    std::vector<double> c_gt;  // B*K flattened, binary
    std::vector<int> y;        // B
};

inline Batch make_batch(const SynDataset& ds, const std::vector<std::size_t>& indices) {
    std::size_t B = indices.size(), n_in = ds.n_in(), K = ds.k();
    std::vector<double> x(B * n_in);
    Batch batch;
    batch.c_gt.resize(B * K);
    batch.y.resize(B);
    const auto& feats = ds.features();
    const auto& cons = ds.concepts();
    const auto& labs = ds.labels();
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t i = indices[b];
        std::copy(feats.begin() + i * n_in, feats.begin() + (i + 1) * n_in, x.begin() + b * n_in);
        for (std::size_t k = 0; k < K; ++k) batch.c_gt[b * K + k] = cons[i * K + k];
        batch.y[b] = static_cast<int>(labs[i]);
    }
    batch.x = Tensor::from({B, n_in}, std::move(x));
    return batch;
}

}  // namespace recem
