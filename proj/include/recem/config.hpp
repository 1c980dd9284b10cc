#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "recem/models.hpp"
#include "recem/synthdata.hpp"

namespace recem {

/// Rejected configuration or command line; CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training aborted on a non-finite loss; CLI maps this to exit code 3.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Parse `key = value` lines; '#' starts a comment, blank lines ignored.
inline KeyValues parse_kv_text(const std::string& text) {
    KeyValues out;
    std::istringstream ss(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto notspace = [](unsigned char c) { return !std::isspace(c); };
        line.erase(line.begin(), std::find_if(line.begin(), line.end(), notspace));
        line.erase(std::find_if(line.rbegin(), line.rend(), notspace).base(), line.end());
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        key.erase(std::find_if(key.rbegin(), key.rend(), notspace).base(), key.end());
        val.erase(val.begin(), std::find_if(val.begin(), val.end(), notspace));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        out.emplace_back(key, val);
    }
    return out;
}

/// Everything one run needs: model, data, optimizer, seeds, and the
/// experiment selector. Flat key=value on disk.
struct RunConfig {
    ModelConfig model;
    SyntheticSpec data;
    double lr = 0.05;
    double momentum = 0.9;
    std::size_t epochs = 100;
    std::size_t batch_size = 128;
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::string out_dir = "runs/out";
    std::string experiment = "baselines";

    /// Model dims mirror the dataset; call after any mutation.
    void resolve() {
        try {
            data.validate();
            model.n_concepts = data.annotated_k();
            model.n_classes = data.n_classes;
            model.n_in = data.n_in;
            model.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        if (lr <= 0.0 || momentum < 0.0 || momentum >= 1.0) throw ConfigError("optimizer: need lr > 0 and momentum in [0,1)");
        if (batch_size == 0) throw ConfigError("optimizer: batch_size must be positive");
        if (seeds.empty()) throw ConfigError("run: need at least one seed");
    }

    void apply(const std::string& key, const std::string& val) {
        auto as_u = [&](const char* what) -> std::size_t {
            try {
                return std::stoul(val);
            } catch (...) {
                throw ConfigError(std::string(what) + ": bad unsigned value '" + val + "'");
            }
        };
        auto as_d = [&](const char* what) -> double {
            try {
                return std::stod(val);
            } catch (...) {
                throw ConfigError(std::string(what) + ": bad numeric value '" + val + "'");
            }
        };
        auto as_b = [&](const char* what) -> bool {
            if (val == "true" || val == "1") return true;
            if (val == "false" || val == "0") return false;
            throw ConfigError(std::string(what) + ": bad boolean '" + val + "'");
        };
        if (key == "variant") {
            try {
                model.variant = parse_variant(val);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        } else if (key == "mechanisms")
            model.mechanisms = as_b("mechanisms");
        else if (key == "embedding_dim")
            model.embed_dim = as_u("embedding_dim");
        else if (key == "n_hidden")
            model.n_hidden = as_u("n_hidden");
        else if (key == "grl_lambda")
            model.grl_lambda = as_d("grl_lambda");
        else if (key == "randint_prob")
            model.randint_prob = as_d("randint_prob");
        else if (key == "alpha")
            model.alpha = as_d("alpha");
        else if (key == "lambda_m")
            model.lambda_m = as_d("lambda_m");
        else if (key == "lambda_cvd")
            model.lambda_cvd = as_d("lambda_cvd");
        else if (key == "lambda_rec")
            model.lambda_rec = as_d("lambda_rec");
        else if (key == "beta_max")
            model.beta_max = as_d("beta_max");
        else if (key == "beta_warmup_frac")
            model.beta_warmup_frac = as_d("beta_warmup_frac");
        else if (key == "beta_max_hsic")
            model.beta_max_hsic = val.empty() ? -1.0 : as_d("beta_max_hsic");
        else if (key == "beta_max_align")
            model.beta_max_align = val.empty() ? -1.0 : as_d("beta_max_align");
        else if (key == "mixup_ema")
            model.mixup_ema = as_b("mixup_ema");
        else if (key == "mixup_ema_decay")
            model.mixup_ema_decay = as_d("mixup_ema_decay");
        else if (key == "K")
            data.n_concepts = as_u("K");
        else if (key == "M")
            data.n_classes = as_u("M");
        else if (key == "n_in")
            data.n_in = as_u("n_in");
        else if (key == "dim_r")
            data.dim_r = as_u("dim_r");
        else if (key == "dim_z")
            data.dim_z = as_u("dim_z");
        else if (key == "rho")
            data.rho = as_d("rho");
        else if (key == "concept_corr")
            data.concept_corr = as_d("concept_corr");
        else if (key == "noise_sigma")
            data.noise_sigma = as_d("noise_sigma");
        else if (key == "n_train")
            data.n_train = as_u("n_train");
        else if (key == "n_val")
            data.n_val = as_u("n_val");
        else if (key == "n_test")
            data.n_test = as_u("n_test");
        else if (key == "data_seed")
            data.seed = as_u("data_seed");
        else if (key == "incomplete")
            data.incomplete = as_b("incomplete");
        else if (key == "lr")
            lr = as_d("lr");
        else if (key == "momentum")
            momentum = as_d("momentum");
        else if (key == "epochs")
            epochs = as_u("epochs");
        else if (key == "batch_size")
            batch_size = as_u("batch_size");
        else if (key == "seeds") {
            seeds.clear();
            std::istringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, ',')) {
                if (tok.empty()) continue;
                try {
                    seeds.push_back(std::stoull(tok));
                } catch (...) {
                    throw ConfigError("seeds: bad entry '" + tok + "'");
                }
            }
        } else if (key == "out_dir")
            out_dir = val;
        else if (key == "experiment")
            experiment = val;
        else
            throw ConfigError("unknown config key '" + key + "'");
    }

    static RunConfig from_kv(const KeyValues& kv) {
        RunConfig cfg;
        for (const auto& [k, v] : kv) cfg.apply(k, v);
        cfg.resolve();
        return cfg;
    }

    static RunConfig from_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file '" + path + "'");
        std::stringstream ss;
        ss << f.rdbuf();
        return from_kv(parse_kv_text(ss.str()));
    }

    KeyValues to_kv() const {
        KeyValues kv;
        kv.emplace_back("variant", variant_name(model.variant));
        kv.emplace_back("mechanisms", model.mechanisms ? "true" : "false");
        kv.emplace_back("embedding_dim", std::to_string(model.embed_dim));
        kv.emplace_back("n_hidden", std::to_string(model.n_hidden));
        kv.emplace_back("grl_lambda", format_double(model.grl_lambda));
        kv.emplace_back("randint_prob", format_double(model.randint_prob));
        kv.emplace_back("alpha", format_double(model.alpha));
        kv.emplace_back("lambda_m", format_double(model.lambda_m));
        kv.emplace_back("lambda_cvd", format_double(model.lambda_cvd));
        kv.emplace_back("lambda_rec", format_double(model.lambda_rec));
        kv.emplace_back("beta_max", format_double(model.beta_max));
        kv.emplace_back("beta_warmup_frac", format_double(model.beta_warmup_frac));
        if (model.beta_max_hsic >= 0.0) kv.emplace_back("beta_max_hsic", format_double(model.beta_max_hsic));
        if (model.beta_max_align >= 0.0) kv.emplace_back("beta_max_align", format_double(model.beta_max_align));
        kv.emplace_back("mixup_ema", model.mixup_ema ? "true" : "false");
        kv.emplace_back("mixup_ema_decay", format_double(model.mixup_ema_decay));
        kv.emplace_back("K", std::to_string(data.n_concepts));
        kv.emplace_back("M", std::to_string(data.n_classes));
        kv.emplace_back("n_in", std::to_string(data.n_in));
        kv.emplace_back("dim_r", std::to_string(data.dim_r));
        kv.emplace_back("dim_z", std::to_string(data.dim_z));
        kv.emplace_back("rho", format_double(data.rho));
        kv.emplace_back("concept_corr", format_double(data.concept_corr));
        kv.emplace_back("noise_sigma", format_double(data.noise_sigma));
        kv.emplace_back("n_train", std::to_string(data.n_train));
        kv.emplace_back("n_val", std::to_string(data.n_val));
        kv.emplace_back("n_test", std::to_string(data.n_test));
        kv.emplace_back("data_seed", std::to_string(data.seed));
        kv.emplace_back("incomplete", data.incomplete ? "true" : "false");
        kv.emplace_back("lr", format_double(lr));
        kv.emplace_back("momentum", format_double(momentum));
        kv.emplace_back("epochs", std::to_string(epochs));
        kv.emplace_back("batch_size", std::to_string(batch_size));
        std::string s;
        for (std::size_t i = 0; i < seeds.size(); ++i) s += (i ? "," : "") + std::to_string(seeds[i]);
        kv.emplace_back("seeds", s);
        kv.emplace_back("out_dir", out_dir);
        kv.emplace_back("experiment", experiment);
        return kv;
    }

    std::string to_text() const {
        std::string out;
        for (const auto& [k, v] : to_kv()) out += k + " = " + v + "\n";
        return out;
    }
};

}  // namespace recem
