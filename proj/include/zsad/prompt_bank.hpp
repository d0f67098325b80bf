/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Learnable object-agnostic prompts, deep text tokens and the context path
// that turns the image's global embedding into one prompt token.

#include "zsad/archive.hpp"
#include "zsad/autograd.hpp"
#include "zsad/core.hpp"
#include "zsad/transformer.hpp"

#include <random>
#include <string>
#include <utility>
#include <vector>

namespace zsad {

struct PromptConfig {
    int prompt_tokens = 12;  // learnable tokens per prompt
    int deep_tokens = 4;     // overwritten slots per tuned layer
    int deep_layers = 9;     // tuned layers, starting at layer 2
    bool context_conditioning = true;
};

enum class PromptState { normal, abnormal };

struct PromptBank {
    PromptConfig config;
    Matrix normal_tokens;    // E x Dt
    Matrix abnormal_tokens;  // E x Dt
    std::vector<Matrix> deep_tokens;  // deep_tokens[i] is used before layer i + 2
    Matrix context_w;  // Dt x D (visual joint width)
    Matrix context_b;  // 1 x Dt
    std::vector<int> normal_stem;
    std::vector<int> abnormal_stem;

    /// Named trainable tensors, in a fixed order.
    std::vector<std::pair<std::string, Matrix*>> named_parameters()
    {
        std::vector<std::pair<std::string, Matrix*>> out{{"normal_tokens", &normal_tokens},
                                                         {"abnormal_tokens", &abnormal_tokens}};
        for (std::size_t i = 0; i < deep_tokens.size(); ++i) {
            out.emplace_back("deep_tokens." + std::to_string(i + 2), &deep_tokens[i]);
        }
        out.emplace_back("context_w", &context_w);
        out.emplace_back("context_b", &context_b);
        return out;
    }

    std::vector<std::pair<std::string, const Matrix*>> named_parameters() const
    {
        std::vector<std::pair<std::string, const Matrix*>> out;
        for (auto& [n, p] : const_cast<PromptBank*>(this)->named_parameters()) {
            out.emplace_back(n, p);
        }
        return out;
    }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& [name, p] : named_parameters()) {
            n += static_cast<std::size_t>(p->size());
        }
        return n;
    }

    std::uint64_t checksum() const
    {
        Fnv1a h;
        for (const auto& [name, p] : named_parameters()) {
            h.update(*p);
        }
        return h.digest();
    }
};

/// Graph leaves for one forward pass over a bank.
struct BankVars {
    ag::Var normal_tokens;
    ag::Var abnormal_tokens;
    std::vector<ag::Var> deep_tokens;
    ag::Var context_w;
    ag::Var context_b;

    std::vector<ag::Var> all() const
    {
        std::vector<ag::Var> v{normal_tokens, abnormal_tokens};
        v.insert(v.end(), deep_tokens.begin(), deep_tokens.end());
        v.push_back(context_w);
        v.push_back(context_b);
        return v;
    }
};

inline BankVars bind(const PromptBank& bank, bool trainable)
{
    auto leaf = [trainable](const Matrix& m) { return trainable ? ag::parameter(m) : ag::constant(m); };
    BankVars v;
    v.normal_tokens = leaf(bank.normal_tokens);
    v.abnormal_tokens = leaf(bank.abnormal_tokens);
    for (const auto& d : bank.deep_tokens) {
        v.deep_tokens.push_back(leaf(d));
    }
    v.context_w = leaf(bank.context_w);
    v.context_b = leaf(bank.context_b);
    return v;
}

inline void validate_prompt_config(const PromptConfig& cfg, const TextTower& tower)
{
    if (cfg.prompt_tokens < 1) {
        throw ConfigError("prompt_tokens must be >= 1");
    }
    if (cfg.deep_tokens < 0 || cfg.deep_layers < 0) {
        throw ConfigError("deep_tokens and deep_layers must be >= 0");
    }
    if (cfg.deep_layers + 1 > tower.shape.layers) {
        throw ConfigError(detail::concat("deep_layers = ", cfg.deep_layers, " needs at least ", cfg.deep_layers + 1,
                                         " text layers, tower has ", tower.shape.layers));
    }
}

inline PromptBank init_params(const TextTower& tower, int visual_dim, const PromptConfig& cfg, std::uint64_t seed)
{
    validate_prompt_config(cfg, tower);
    std::mt19937_64 rng(seed);
    const int dt = tower.shape.width;
    PromptBank b;
    b.config = cfg;
    b.normal_tokens = detail::randn(rng, cfg.prompt_tokens, dt, 0.02);
    b.abnormal_tokens = detail::randn(rng, cfg.prompt_tokens, dt, 0.02);
    for (int l = 0; l < cfg.deep_layers; ++l) {
        b.deep_tokens.push_back(detail::randn(rng, cfg.deep_tokens, dt, 0.02));
    }
    b.context_w = visual_dim == dt ? Matrix(Matrix::Identity(dt, dt))
                                   : detail::randn(rng, dt, visual_dim, 1.0 / std::sqrt(static_cast<double>(visual_dim)));
    b.context_b = Matrix::Zero(1, dt);
    b.normal_stem = tower.tokens_for("object");
    b.abnormal_stem = tower.tokens_for("damaged");
    const auto& object = tower.tokens_for("object");
    b.abnormal_stem.insert(b.abnormal_stem.end(), object.begin(), object.end());
    return b;
}

/// Prompt token embeddings with positions applied, padded to the tower's
/// context length.
struct PromptSequence {
    ag::Var embeddings;  // context_length x Dt
    int eos_index = 0;
    int context_index = -1;  // -1 when context conditioning is off
    int stem_count = 0;
};

inline PromptSequence build_prompt_sequence(PromptState state, const Vector& g_i, const BankVars& vars,
                                            const PromptBank& bank, const TextTower& tower)
{
    if (!g_i.allFinite()) {
        throw DataError("global image embedding has non-finite entries");
    }
    const auto& stems = state == PromptState::normal ? bank.normal_stem : bank.abnormal_stem;
    const bool ctx = bank.config.context_conditioning;
    const int length = 1 + bank.config.prompt_tokens + static_cast<int>(stems.size()) + (ctx ? 1 : 0) + 1;
    if (length > tower.context_length) {
        throw ConfigError(detail::concat("prompt needs ", length, " tokens, context length is ", tower.context_length));
    }
    auto embed = [&tower](int id) { return Matrix(tower.token_embedding.row(id)); };

    std::vector<ag::Var> parts;
    parts.push_back(ag::constant(embed(tower.sos_id)));
    parts.push_back(state == PromptState::normal ? vars.normal_tokens : vars.abnormal_tokens);
    Matrix stem_rows(static_cast<Eigen::Index>(stems.size()), tower.shape.width);
    for (std::size_t i = 0; i < stems.size(); ++i) {
        stem_rows.row(static_cast<Eigen::Index>(i)) = tower.token_embedding.row(stems[i]);
    }
    parts.push_back(ag::constant(std::move(stem_rows)));
    PromptSequence seq;
    seq.stem_count = static_cast<int>(stems.size());
    if (ctx) {
        const ag::Var gi = ag::constant(Matrix(g_i.transpose()));
        parts.push_back(ag::add_row(ag::matmul_nt(gi, vars.context_w), vars.context_b));
        seq.context_index = length - 2;
    }
    Matrix tail(tower.context_length - length + 1, tower.shape.width);
    tail.row(0) = tower.token_embedding.row(tower.eos_id);
    for (Eigen::Index r = 1; r < tail.rows(); ++r) {
        tail.row(r) = tower.token_embedding.row(tower.pad_id);
    }
    parts.push_back(ag::constant(std::move(tail)));
    seq.eos_index = length - 1;
    seq.embeddings = ag::add(ag::vcat(parts), ag::constant(tower.positional_embedding.topRows(tower.context_length)));
    return seq;
}

/// Runs the frozen text tower with deep-token replacement and returns the
/// projected EOS feature (1 x D).
inline ag::Var encode_text(const PromptSequence& seq, const BankVars& vars, const TextTower& tower)
{
    ag::Var x = seq.embeddings;
    const int tuned = static_cast<int>(vars.deep_tokens.size());
    for (int l = 1; l <= tower.shape.layers; ++l) {
        if (l >= 2 && l <= tuned + 1) {
            const ag::Var& deep = vars.deep_tokens[static_cast<std::size_t>(l - 2)];
            if (deep.rows() > 0) {
                if (1 + deep.rows() > seq.eos_index) {
                    throw ConfigError("deep tokens would overwrite the EOS slot");
                }
                x = ag::overwrite_rows(x, 1, deep);
            }
        }
        x = block_forward_causal(tower.blocks[static_cast<std::size_t>(l - 1)], tower.shape, x);
    }
    const ag::Var eos = ag::slice_rows(x, seq.eos_index, 1);
    return ag::project(ag::layer_norm(eos, tower.ln_final_g, tower.ln_final_b, tower.shape.ln_eps), tower.projection);
}

struct TextPair {
    Vector g_n;
    Vector g_a;
    std::string conditioned_on;
};

struct TextPairVars {
    ag::Var normal;    // 1 x D
    ag::Var abnormal;  // 1 x D
};

inline TextPairVars encode_pair(const BankVars& vars, const PromptBank& bank, const TextTower& tower, const Vector& g_i)
{
    return {encode_text(build_prompt_sequence(PromptState::normal, g_i, vars, bank, tower), vars, tower),
            encode_text(build_prompt_sequence(PromptState::abnormal, g_i, vars, bank, tower), vars, tower)};
}

inline TextPair text_pair(const PromptBank& bank, const TextTower& tower, const Vector& g_i, std::string image_id = {})
{
    const BankVars vars = bind(bank, false);
    const TextPairVars p = encode_pair(vars, bank, tower, g_i);
    return {p.normal.value().row(0).transpose(), p.abnormal.value().row(0).transpose(), std::move(image_id)};
}

inline TensorArchive bank_to_archive(const PromptBank& bank)
{
    TensorArchive a;
    a.meta = {{"prompt_tokens", bank.config.prompt_tokens},
              {"deep_tokens", bank.config.deep_tokens},
              {"deep_layers", bank.config.deep_layers},
              {"context_conditioning", bank.config.context_conditioning},
              {"normal_stem", bank.normal_stem},
              {"abnormal_stem", bank.abnormal_stem}};
    for (const auto& [name, p] : bank.named_parameters()) {
        a.put(name, *p);
    }
    return a;
}

inline PromptBank bank_from_archive(const TensorArchive& a, const Json& m)
{
    PromptBank b;
    b.config.prompt_tokens = m.at("prompt_tokens").get<int>();
    b.config.deep_tokens = m.at("deep_tokens").get<int>();
    b.config.deep_layers = m.at("deep_layers").get<int>();
    b.config.context_conditioning = m.at("context_conditioning").get<bool>();
    b.normal_stem = m.at("normal_stem").get<std::vector<int>>();
    b.abnormal_stem = m.at("abnormal_stem").get<std::vector<int>>();
    b.normal_tokens = a.get("normal_tokens");
    b.abnormal_tokens = a.get("abnormal_tokens");
    for (int l = 0; l < b.config.deep_layers; ++l) {
        b.deep_tokens.push_back(a.get("deep_tokens." + std::to_string(l + 2)));
    }
    b.context_w = a.get("context_w");
    b.context_b = a.get("context_b");
    if (b.normal_tokens.rows() != b.config.prompt_tokens || b.abnormal_tokens.rows() != b.config.prompt_tokens) {
        throw IntegrityError("prompt token tensors disagree with the recorded prompt_tokens");
    }
    for (const auto& d : b.deep_tokens) {
        if (d.rows() != b.config.deep_tokens) {
            throw IntegrityError("deep token tensors disagree with the recorded deep_tokens");
        }
    }
    return b;
}

}  // namespace zsad
