#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "recem/config.hpp"
#include "recem/models.hpp"

namespace recem {

namespace detail {

inline const char* b64_alphabet() { return "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/"; }

inline std::string base64_encode(const unsigned char* data, std::size_t len) {
    const char* tab = b64_alphabet();
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        std::uint32_t v = data[i] << 16;
        if (i + 1 < len) v |= data[i + 1] << 8;
        if (i + 2 < len) v |= data[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(i + 1 < len ? tab[(v >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? tab[v & 63] : '=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s, const std::string& what) {
    auto bad = [&](const std::string& why) { return std::runtime_error("checkpoint: corrupt base64 in '" + what + "': " + why); };
    if (s.size() % 4 != 0) throw bad("length not a multiple of 4");
    auto val = [&](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw bad(std::string("invalid character '") + c + "'");
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (std::size_t i = 0; i < s.size(); i += 4) {
        int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
        if (a < 0 || b < 0) throw bad("misplaced padding");
        std::uint32_t v = (static_cast<std::uint32_t>(a) << 18) | (static_cast<std::uint32_t>(b) << 12);
        out.push_back((v >> 16) & 0xFF);
        if (c >= 0) {
            v |= static_cast<std::uint32_t>(c) << 6;
            out.push_back((v >> 8) & 0xFF);
        } else if (d >= 0) {
            throw bad("misplaced padding");
        }
        if (d >= 0) {
            v |= static_cast<std::uint32_t>(d);
            out.push_back(v & 0xFF);
        }
    }
    return out;
}

}  // namespace detail

/// Format: header `RECEMCKPT v1`, one `name;d0,d1;base64(f64 LE)` line per
/// parameter in the model's canonical order, a blank line, then the run
/// config as `key = value` lines.
inline void save_checkpoint(const ConceptModel& model, const RunConfig& config, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << "RECEMCKPT v1\n";
    for (const auto& [name, t] : model.named_params()) {
        f << name << ";";
        const Shape& s = t.shape();
        for (std::size_t i = 0; i < s.size(); ++i) f << (i ? "," : "") << s[i];
        f << ";";
        const auto& v = t.values();
        f << detail::base64_encode(reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double));
        f << "\n";
    }
    f << "\n" << config.to_text();
    if (!f) throw std::runtime_error("write failure on '" + path + "'");
}

struct LoadedCheckpoint {
    RunConfig config;
    ConceptModel model;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "RECEMCKPT v1") throw std::runtime_error("'" + path + "': bad or missing checkpoint header (expected 'RECEMCKPT v1')");

    struct ParamRec {
        std::string name;
        Shape shape;
        std::vector<double> values;
    };
    std::vector<ParamRec> params;
    std::string config_text;
    bool in_config = false;
    while (std::getline(f, line)) {
        if (!in_config) {
            if (line.empty()) {
                in_config = true;
                continue;
            }
            auto p1 = line.find(';');
            auto p2 = line.find(';', p1 == std::string::npos ? p1 : p1 + 1);
            if (p1 == std::string::npos || p2 == std::string::npos) throw std::runtime_error("'" + path + "': malformed parameter line '" + line.substr(0, 40) + "'");
            ParamRec rec;
            rec.name = line.substr(0, p1);
            std::istringstream dims(line.substr(p1 + 1, p2 - p1 - 1));
            std::string tok;
            while (std::getline(dims, tok, ',')) rec.shape.push_back(std::stoul(tok));
            std::vector<unsigned char> bytes = detail::base64_decode(line.substr(p2 + 1), rec.name);
            if (bytes.size() % sizeof(double) != 0 || bytes.size() / sizeof(double) != shape_numel(rec.shape))
                throw std::runtime_error("checkpoint: parameter '" + rec.name + "' payload does not match its shape");
            rec.values.resize(bytes.size() / sizeof(double));
            std::memcpy(rec.values.data(), bytes.data(), bytes.size());
            params.push_back(std::move(rec));
        } else {
            config_text += line + "\n";
        }
    }
    if (!in_config || config_text.empty()) throw std::runtime_error("'" + path + "': missing config block");

    RunConfig cfg;
    try {
        cfg = RunConfig::from_kv(parse_kv_text(config_text));
    } catch (const ConfigError& e) {
        throw std::runtime_error("'" + path + "': bad config block: " + std::string(e.what()));
    }

    ConceptModel model(cfg.model, 0);
    std::size_t used = 0;
    for (auto& [name, tensor] : model.named_params()) {
        bool found = false;
        for (const ParamRec& rec : params) {
            if (rec.name == name) {
                if (rec.shape != tensor.shape())
                    throw std::runtime_error("checkpoint: parameter '" + name + "' shape " + shape_str(rec.shape) + " does not match model " + shape_str(tensor.shape()));
                tensor.values_mut() = rec.values;
                found = true;
                ++used;
                break;
            }
        }
        if (!found) throw std::runtime_error("checkpoint: missing parameter '" + name + "' required by variant " + variant_name(cfg.model.variant));
    }
    if (used != params.size()) {
        for (const ParamRec& rec : params) {
            bool known = false;
            for (const auto& [name, t] : model.named_params()) known = known || name == rec.name;
            if (!known) throw std::runtime_error("checkpoint: parameter '" + rec.name + "' is not part of variant " + variant_name(cfg.model.variant));
        }
    }
    return {std::move(cfg), std::move(model)};
}

}  // namespace recem
