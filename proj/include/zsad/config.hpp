/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Flat key=value settings. Every tunable default in the library has exactly
// one key here; typed views (ModelConfig, TrainConfig, ...) are derived from
// a Settings instance and never constructed from loose flags.

#include "zsad/archive.hpp"
#include "zsad/core.hpp"
#include "zsad/data_io.hpp"
#include "zsad/metrics.hpp"
#include "zsad/model.hpp"
#include "zsad/prompt_bank.hpp"
#include "zsad/trainer.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace zsad {

struct SettingSpec {
    std::string key;
    std::string default_value;
    std::string help;
};

inline const std::vector<SettingSpec>& setting_specs()
{
    static const std::vector<SettingSpec> specs = {
        // backbone / preprocessing
        {"backbone", "", "backbone archive path, or standin:<tiny|small>"},
        {"image_size", "518", "square model input resolution in pixels"},
        {"k_layers", "4", "number of final layers summed into the e_attn map"},
        {"self_correlation", "qq+kk+vv", "self-correlation terms, any nonempty subset of qq, kk, vv"},
        // spatial guidance
        {"spatial_encoder", "", "d_attn encoder: archive path or pixel"},
        {"epsilon", "0", "d_attn similarity threshold, at most 1"},
        {"d_attn_temperature", "1", "d_attn softmax temperature"},
        {"spatial_resize", "false", "bilinearly realign a mismatched spatial-encoder grid"},
        // prompts
        {"prompt_tokens", "12", "learnable tokens per prompt"},
        {"deep_tokens", "4", "deep tokens inserted per tuned layer"},
        {"deep_layers", "9", "number of text layers receiving deep tokens"},
        {"context_conditioning", "true", "append the projected global token to each prompt"},
        // scoring
        {"branches", "e_attn", "comma-separated local branches: e_attn, d_attn"},
        {"logit_scale", "100", "multiplicative scale on cosine similarities"},
        {"fusion", "true", "anomaly-aware local-to-global fusion"},
        {"sigma", "4", "gaussian smoothing sigma in output pixels"},
        {"smooth", "true", "apply gaussian smoothing to the rendered map"},
        // objectives
        {"global_loss_input", "global_token", "global loss embedding: global_token or fused_global"},
        {"focal_gamma", "2", "focal loss focusing exponent"},
        {"dice_mode", "anomaly", "dice channels: anomaly or both"},
        {"lambda", "1", "weight on the summed local losses"},
        // trainer
        {"lr", "0.001", "adam learning rate"},
        {"beta1", "0.6", "adam first-moment decay"},
        {"beta2", "0.999", "adam second-moment decay"},
        {"adam_eps", "1e-8", "adam denominator epsilon"},
        {"batch_size", "8", "images per optimizer step"},
        {"epochs", "5", "passes over the training split"},
        {"max_steps", "0", "stop after this many steps, 0 for no cap"},
        {"seed", "111", "seed for prompt initialisation and shuffling"},
        {"train_split", "test", "manifest split used for training"},
        {"train_mask_size", "0", "training mask resolution, 0 for image_size"},
        // metrics
        {"aupro_fpr_limit", "0.3", "upper false-positive-rate bound of the aupro integral"},
        {"aupro_integration", "trapezoid", "aupro curve integration: trapezoid or step"},
        {"aupro_connectivity", "8", "region connectivity for aupro: 4 or 8"},
        // runtime
        {"workers", "1", "evaluation worker threads"},
    };
    return specs;
}

class Settings {
public:
    Settings()
    {
        for (const auto& s : setting_specs()) {
            values_[s.key] = s.default_value;
        }
    }

    static bool known(const std::string& key) { return find(key) != nullptr; }

    void set(const std::string& key, const std::string& value)
    {
        if (!known(key)) {
            throw ConfigError("unknown setting '" + key + "'");
        }
        values_[key] = value;
    }

    /// "key=value"
    void assign(const std::string& assignment)
    {
        const auto eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("expected key=value, got '" + assignment + "'");
        }
        set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    }

    /// Lines of key = value; '#' starts a comment.
    void merge_file(const std::filesystem::path& path)
    {
        std::ifstream in(path);
        if (!in) {
            throw ConfigError("cannot read config file " + path.string());
        }
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) {
                line.resize(hash);
            }
            line = trim(line);
            if (line.empty()) {
                continue;
            }
            try {
                assign(line);
            } catch (const ConfigError& e) {
                throw ConfigError(detail::concat(path.string(), ":", lineno, ": ", e.what()));
            }
        }
    }

    const std::string& get(const std::string& key) const
    {
        const auto it = values_.find(key);
        if (it == values_.end()) {
            throw ConfigError("unknown setting '" + key + "'");
        }
        return it->second;
    }

    double get_double(const std::string& key) const
    {
        const std::string& v = get(key);
        try {
            std::size_t used = 0;
            const double d = std::stod(v, &used);
            if (used == v.size()) {
                return d;
            }
        } catch (const std::exception&) {
        }
        throw ConfigError("setting '" + key + "' expects a number, got '" + v + "'");
    }

    long long get_int(const std::string& key) const
    {
        const std::string& v = get(key);
        long long out = 0;
        const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || ptr != v.data() + v.size()) {
            throw ConfigError("setting '" + key + "' expects an integer, got '" + v + "'");
        }
        return out;
    }

    bool get_bool(const std::string& key) const
    {
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "on" || v == "yes") {
            return true;
        }
        if (v == "false" || v == "0" || v == "off" || v == "no") {
            return false;
        }
        throw ConfigError("setting '" + key + "' expects true or false, got '" + v + "'");
    }

    /// Registry order, for stable run metadata.
    Json to_json() const
    {
        Json j = Json::object();
        for (const auto& s : setting_specs()) {
            j[s.key] = values_.at(s.key);
        }
        return j;
    }

private:
    static const SettingSpec* find(const std::string& key)
    {
        for (const auto& s : setting_specs()) {
            if (s.key == key) {
                return &s;
            }
        }
        return nullptr;
    }

    static std::string trim(const std::string& s)
    {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) {
            return {};
        }
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

// ---------------------------------------------------------------------------
// Typed views

inline std::vector<Branch> parse_branches(const std::string& text)
{
    std::vector<Branch> out;
    std::string tok;
    std::istringstream is(text);
    while (std::getline(is, tok, ',')) {
        if (tok.empty()) {
            continue;
        }
        const Branch b = branch_from_string(tok);
        if (std::find(out.begin(), out.end(), b) == out.end()) {
            out.push_back(b);
        }
    }
    if (out.empty()) {
        throw ConfigError("setting 'branches' must name at least one branch");
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline ModelConfig model_config(const Settings& s)
{
    ModelConfig m;
    m.adapter.k_layers = static_cast<int>(s.get_int("k_layers"));
    m.adapter.terms = SelfCorrelationSet::parse(s.get("self_correlation"));
    m.spatial.epsilon = s.get_double("epsilon");
    m.spatial.temperature = s.get_double("d_attn_temperature");
    m.spatial.resize_to_backbone = s.get_bool("spatial_resize");
    m.branches = parse_branches(s.get("branches"));
    m.logit_scale = s.get_double("logit_scale");
    m.fusion = s.get_bool("fusion");
    m.sigma = s.get_double("sigma");
    m.smooth = s.get_bool("smooth");
    const std::string gli = s.get("global_loss_input");
    if (gli == "global_token") {
        m.global_loss_input = GlobalLossInput::global_token;
    } else if (gli == "fused_global") {
        m.global_loss_input = GlobalLossInput::fused_global;
    } else {
        throw ConfigError("setting 'global_loss_input' expects global_token or fused_global, got '" + gli + "'");
    }
    m.focal_gamma = s.get_double("focal_gamma");
    m.dice_mode = dice_mode_from_string(s.get("dice_mode"));
    m.lambda = s.get_double("lambda");

    if (m.adapter.k_layers < 1) {
        throw ConfigError("setting 'k_layers' must be >= 1");
    }
    if (m.spatial.epsilon > 1.0) {
        throw ConfigError("setting 'epsilon' must be <= 1 (cosine similarity bound)");
    }
    if (m.spatial.temperature <= 0.0) {
        throw ConfigError("setting 'd_attn_temperature' must be > 0");
    }
    if (m.focal_gamma < 0.0 || m.lambda < 0.0 || m.logit_scale <= 0.0) {
        throw ConfigError("settings 'focal_gamma' and 'lambda' must be >= 0 and 'logit_scale' > 0");
    }
    return m;
}

inline PromptConfig prompt_config(const Settings& s)
{
    PromptConfig p;
    p.prompt_tokens = static_cast<int>(s.get_int("prompt_tokens"));
    p.deep_tokens = static_cast<int>(s.get_int("deep_tokens"));
    p.deep_layers = static_cast<int>(s.get_int("deep_layers"));
    p.context_conditioning = s.get_bool("context_conditioning");
    return p;
}

inline TrainConfig train_config(const Settings& s)
{
    TrainConfig t;
    t.learning_rate = s.get_double("lr");
    t.beta1 = s.get_double("beta1");
    t.beta2 = s.get_double("beta2");
    t.adam_eps = s.get_double("adam_eps");
    t.batch_size = static_cast<int>(s.get_int("batch_size"));
    t.epochs = static_cast<int>(s.get_int("epochs"));
    t.max_steps = static_cast<int>(s.get_int("max_steps"));
    t.seed = static_cast<std::uint64_t>(s.get_int("seed"));
    t.split = s.get("train_split");
    t.mask_size = static_cast<int>(s.get_int("train_mask_size"));
    if (t.beta1 < 0.0 || t.beta1 >= 1.0 || t.beta2 < 0.0 || t.beta2 >= 1.0) {
        throw ConfigError("settings 'beta1' and 'beta2' must lie in [0, 1)");
    }
    return t;
}

inline AuproOptions aupro_options(const Settings& s)
{
    AuproOptions o;
    o.fpr_limit = s.get_double("aupro_fpr_limit");
    const std::string mode = s.get("aupro_integration");
    if (mode == "trapezoid") {
        o.integration = CurveIntegration::trapezoid;
    } else if (mode == "step") {
        o.integration = CurveIntegration::step;
    } else {
        throw ConfigError("setting 'aupro_integration' expects trapezoid or step, got '" + mode + "'");
    }
    o.connectivity = static_cast<int>(s.get_int("aupro_connectivity"));
    if (o.connectivity != 4 && o.connectivity != 8) {
        throw ConfigError("setting 'aupro_connectivity' expects 4 or 8");
    }
    if (o.fpr_limit <= 0.0 || o.fpr_limit > 1.0) {
        throw ConfigError("setting 'aupro_fpr_limit' must lie in (0, 1]");
    }
    return o;
}

/// Mean/std follow the backbone.
inline PreprocessSpec preprocess_spec(const Settings& s, const VisionTower& tower)
{
    PreprocessSpec p;
    p.size = static_cast<int>(s.get_int("image_size"));
    if (p.size <= 0) {
        throw ConfigError("setting 'image_size' must be positive");
    }
    p.mean = tower.mean;
    p.stdev = tower.stdev;
    return p;
}

}  // namespace zsad
