/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Frozen contrastive vision tower plus the extended self-correlation
// attention (E-Attn) side branch. The branch reads the frozen
// query/key/value projections of the last K layers and never writes back
// into the main forward pass, so the class token is identical with or
// without it.

#include "zsad/archive.hpp"
#include "zsad/core.hpp"
#include "zsad/image_ops.hpp"
#include "zsad/transformer.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace zsad {

struct PatchGeometry {
    int grid_h = 0;
    int grid_w = 0;
    int patch_px = 0;

    int n_patches() const { return grid_h * grid_w; }
    int image_h() const { return grid_h * patch_px; }
    int image_w() const { return grid_w * patch_px; }
    bool operator==(const PatchGeometry&) const = default;

    std::string str() const { return detail::concat(grid_h, "x", grid_w, " patches of ", patch_px, "px"); }
};

/// Per-layer patch-token projections captured from the frozen forward pass.
struct LayerQKV {
    int layer_index = 0;  // 1-based
    int heads = 1;
    Matrix query, key, value;  // N x W each
};

struct VisionFeatures {
    Vector global_token;  // class token in the joint space
    std::vector<LayerQKV> layer_qkv;
    Matrix e_attn_map;  // N x D, joint space; empty when the branch is off
    PatchGeometry geometry;

    const LayerQKV& final_layer() const { return layer_qkv.back(); }
};

/// Which self-correlation terms enter the E-Attn weight matrix.
struct SelfCorrelationSet {
    bool qq = true;
    bool kk = true;
    bool vv = true;

    int count() const { return int(qq) + int(kk) + int(vv); }

    /// Accepts "qq+kk+vv", "vv", "kk,vv", ...
    static SelfCorrelationSet parse(const std::string& text)
    {
        SelfCorrelationSet s{false, false, false};
        std::string tok;
        std::istringstream is(text);
        while (std::getline(is, tok, '+')) {
            std::istringstream inner(tok);
            std::string t;
            while (std::getline(inner, t, ',')) {
                if (t == "qq") {
                    s.qq = true;
                } else if (t == "kk") {
                    s.kk = true;
                } else if (t == "vv") {
                    s.vv = true;
                } else if (!t.empty()) {
                    throw ConfigError("unknown self-correlation term '" + t + "' (expected qq, kk or vv)");
                }
            }
        }
        if (s.count() == 0) {
            throw ConfigError("self-correlation subset must be non-empty");
        }
        return s;
    }

    std::string str() const
    {
        std::string out;
        for (auto [on, name] : {std::pair{qq, "qq"}, std::pair{kk, "kk"}, std::pair{vv, "vv"}}) {
            if (on) {
                out += out.empty() ? name : std::string("+") + name;
            }
        }
        return out;
    }
};

struct AdapterConfig {
    int k_layers = 4;
    SelfCorrelationSet terms;
    bool e_attn_enabled = true;
};

struct VisionTower {
    TowerShape shape;
    int patch_px = 0;
    int image_size = 0;  // native resolution of positional_embedding
    int out_dim = 0;
    Matrix patch_w;  // W x (3 * p * p), flattened as [channel][dy][dx]
    Matrix patch_b;  // optional 1 x W
    Matrix class_embedding;       // 1 x W
    Matrix positional_embedding;  // (1 + g*g) x W at the native grid
    Matrix ln_pre_g, ln_pre_b;    // optional
    std::vector<BlockWeights> blocks;
    Matrix ln_post_g, ln_post_b;
    Matrix projection;  // W x out_dim; empty means identity
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stdev{0.26862954, 0.26130258, 0.27577711};

    int layers() const { return shape.layers; }

    /// Final layer norm then visual projection into the joint space.
    Matrix to_joint(const Matrix& tokens) const
    {
        Matrix n = layer_norm_rows(tokens, ln_post_g.row(0), ln_post_b.row(0), shape.ln_eps);
        return projection.size() > 0 ? Matrix(n * projection) : n;
    }

    PatchGeometry geometry_for(int height, int width) const
    {
        if (height <= 0 || width <= 0 || height % patch_px != 0 || width % patch_px != 0) {
            throw ConfigError(detail::concat("image size ", height, "x", width, " is not divisible by the ", patch_px,
                                             "px patch size"));
        }
        return {height / patch_px, width / patch_px, patch_px};
    }

    /// Positional embedding for an arbitrary grid (bilinear over the native grid).
    Matrix positional_for(const PatchGeometry& g) const
    {
        const int native = static_cast<int>(std::lround(std::sqrt(double(positional_embedding.rows() - 1))));
        if (native * native + 1 != positional_embedding.rows()) {
            throw DataError("positional embedding is not a square grid plus class slot");
        }
        if (native == g.grid_h && native == g.grid_w) {
            return positional_embedding;
        }
        const Eigen::Index w = positional_embedding.cols();
        Matrix out(1 + g.n_patches(), w);
        out.row(0) = positional_embedding.row(0);
        Matrix plane(native, native);
        for (Eigen::Index c = 0; c < w; ++c) {
            for (int i = 0; i < native * native; ++i) {
                plane(i / native, i % native) = positional_embedding(1 + i, c);
            }
            const Matrix r = resize_bilinear(plane, g.grid_h, g.grid_w);
            for (int i = 0; i < g.n_patches(); ++i) {
                out(1 + i, c) = r(i / g.grid_w, i % g.grid_w);
            }
        }
        return out;
    }

    Matrix patch_tokens(const ImageTensor& img, const PatchGeometry& g) const
    {
        const int p = patch_px;
        Matrix patches(g.n_patches(), 3 * p * p);
        for (int gy = 0; gy < g.grid_h; ++gy) {
            for (int gx = 0; gx < g.grid_w; ++gx) {
                const int row = gy * g.grid_w + gx;
                int col = 0;
                for (int c = 0; c < 3; ++c) {
                    for (int dy = 0; dy < p; ++dy) {
                        for (int dx = 0; dx < p; ++dx) {
                            patches(row, col++) = img.at(c, gy * p + dy, gx * p + dx);
                        }
                    }
                }
            }
        }
        Matrix tokens = patches * patch_w.transpose();
        if (patch_b.size() > 0) {
            tokens.rowwise() += patch_b.row(0);
        }
        return tokens;
    }

    /// Runs the unmodified forward pass. `capture_from` is the first 1-based
    /// layer whose patch-token Q/K/V are recorded (layers capture_from..L).
    /// Returns the final token matrix (class token in row 0).
    Matrix forward(const ImageTensor& img, const PatchGeometry& g, int capture_from, std::vector<LayerQKV>* captured) const
    {
        Matrix x(1 + g.n_patches(), shape.width);
        x.row(0) = class_embedding.row(0);
        x.bottomRows(g.n_patches()) = patch_tokens(img, g);
        x += positional_for(g);
        if (ln_pre_g.size() > 0) {
            x = layer_norm_rows(x, ln_pre_g.row(0), ln_pre_b.row(0), shape.ln_eps);
        }
        for (int l = 1; l <= shape.layers; ++l) {
            const bool capture = captured && l >= capture_from;
            QkvProjection qkv;
            x = block_forward(blocks[static_cast<std::size_t>(l - 1)], shape, x, capture ? &qkv : nullptr);
            if (capture) {
                const Eigen::Index n = g.n_patches();
                captured->push_back({l, shape.heads, qkv.query.bottomRows(n), qkv.key.bottomRows(n), qkv.value.bottomRows(n)});
            }
        }
        return x;
    }

    std::uint64_t checksum() const
    {
        Fnv1a h;
        for (const Matrix* m : {&patch_w, &patch_b, &class_embedding, &positional_embedding, &ln_pre_g, &ln_pre_b}) {
            h.update(*m);
        }
        for (const auto& b : blocks) {
            detail::hash_block(h, b);
        }
        for (const Matrix* m : {&ln_post_g, &ln_post_b, &projection}) {
            h.update(*m);
        }
        return h.digest();
    }
};

/// Softmax self-correlation softmax(E E^T / sqrt(D)), D = E.cols().
inline Matrix self_correlation(const Matrix& e, int layer_index = 0)
{
    if (e.rows() < 1 || e.cols() < 1) {
        throw ConfigError("self_correlation needs at least one embedding of width >= 1");
    }
    if (!e.allFinite()) {
        throw DataError(detail::concat("non-finite embedding entries at layer ", layer_index));
    }
    return softmax_rows((e * e.transpose()) / std::sqrt(static_cast<double>(e.cols())));
}

/// Per-head combined weight matrices A(K) + A(Q) + A(V) (restricted to the
/// enabled terms). Each row sums to the number of enabled terms.
inline std::vector<Matrix> e_attn_weights(const LayerQKV& qkv, const SelfCorrelationSet& terms = {})
{
    const Eigen::Index w = qkv.value.cols();
    if (qkv.heads <= 0 || w % qkv.heads != 0) {
        throw ConfigError(detail::concat("width ", w, " is not divisible by ", qkv.heads, " heads"));
    }
    if (qkv.query.rows() != qkv.value.rows() || qkv.key.rows() != qkv.value.rows() || qkv.query.cols() != w ||
        qkv.key.cols() != w) {
        throw ConfigError(detail::concat("layer ", qkv.layer_index, " Q/K/V shapes disagree: ", shape_str(qkv.query),
                                         ", ", shape_str(qkv.key), ", ", shape_str(qkv.value)));
    }
    const Eigen::Index hd = w / qkv.heads;
    std::vector<Matrix> out;
    out.reserve(static_cast<std::size_t>(qkv.heads));
    for (int h = 0; h < qkv.heads; ++h) {
        Matrix sum = Matrix::Zero(qkv.value.rows(), qkv.value.rows());
        if (terms.kk) {
            sum += self_correlation(qkv.key.middleCols(h * hd, hd), qkv.layer_index);
        }
        if (terms.qq) {
            sum += self_correlation(qkv.query.middleCols(h * hd, hd), qkv.layer_index);
        }
        if (terms.vv) {
            sum += self_correlation(qkv.value.middleCols(h * hd, hd), qkv.layer_index);
        }
        out.push_back(std::move(sum));
    }
    return out;
}

/// Aggregates V per head with externally supplied weights and merges the
/// heads through the block's output projection.
inline Matrix aggregate_values(const std::vector<Matrix>& head_weights, const Matrix& values, const BlockWeights& block)
{
    const Eigen::Index heads = static_cast<Eigen::Index>(head_weights.size());
    const Eigen::Index hd = values.cols() / heads;
    Matrix merged(values.rows(), values.cols());
    for (Eigen::Index h = 0; h < heads; ++h) {
        merged.middleCols(h * hd, hd) = head_weights[static_cast<std::size_t>(h)] * values.middleCols(h * hd, hd);
    }
    Matrix out = merged * block.out_w.transpose();
    out.rowwise() += block.out_b.row(0);
    return out;
}

/// E-Attn output of one layer: (A(K) + A(Q) + A(V)) V per head, then the
/// layer's output projection.
inline Matrix e_attn_layer(const LayerQKV& qkv, const BlockWeights& block, const SelfCorrelationSet& terms = {})
{
    if (block.out_w.cols() != qkv.value.cols()) {
        throw ConfigError(detail::concat("output projection expects width ", block.out_w.cols(), ", layer ",
                                         qkv.layer_index, " values have width ", qkv.value.cols()));
    }
    return aggregate_values(e_attn_weights(qkv, terms), qkv.value, block);
}

inline VisionFeatures extract_features(const VisionTower& tower, const ImageTensor& image, const AdapterConfig& cfg)
{
    const int layers = tower.layers();
    if (cfg.k_layers < 1 || cfg.k_layers > layers) {
        throw ConfigError(detail::concat("k_layers must be in [1, ", layers, "], got ", cfg.k_layers));
    }
    const PatchGeometry g = tower.geometry_for(image.height, image.width);
    if (g.n_patches() < 1) {
        throw ConfigError("image yields no patches");
    }
    const int capture_from = cfg.e_attn_enabled ? layers - cfg.k_layers + 1 : layers;

    VisionFeatures f;
    f.geometry = g;
    const Matrix tokens = tower.forward(image, g, capture_from, &f.layer_qkv);
    f.global_token = tower.to_joint(tokens.topRows(1)).row(0).transpose();

    if (cfg.e_attn_enabled) {
        Matrix sum = Matrix::Zero(g.n_patches(), tower.shape.width);
        for (const auto& qkv : f.layer_qkv) {
            sum += e_attn_layer(qkv, tower.blocks[static_cast<std::size_t>(qkv.layer_index - 1)], cfg.terms);
        }
        f.e_attn_map = tower.to_joint(sum);
    }
    return f;
}

/// A frozen vision/text backbone pair.
struct Backbone {
    std::string id;
    VisionTower vision;
    TextTower text;

    std::uint64_t checksum() const
    {
        Fnv1a h;
        const std::uint64_t parts[2] = {vision.checksum(), text.checksum()};
        h.update(parts, sizeof(parts));
        return h.digest();
    }
};

namespace detail {

inline void put_vision(TensorArchive& a, const VisionTower& v, const std::string& p)
{
    a.put(p + "patch_w", v.patch_w);
    if (v.patch_b.size() > 0) {
        a.put(p + "patch_b", v.patch_b);
    }
    a.put(p + "class_embedding", v.class_embedding);
    a.put(p + "positional_embedding", v.positional_embedding);
    if (v.ln_pre_g.size() > 0) {
        a.put(p + "ln_pre_g", v.ln_pre_g);
        a.put(p + "ln_pre_b", v.ln_pre_b);
    }
    for (std::size_t i = 0; i < v.blocks.size(); ++i) {
        put_block(a, p + "blocks." + std::to_string(i) + ".", v.blocks[i]);
    }
    a.put(p + "ln_post_g", v.ln_post_g);
    a.put(p + "ln_post_b", v.ln_post_b);
    if (v.projection.size() > 0) {
        a.put(p + "projection", v.projection);
    }
}

inline Json vision_meta(const VisionTower& v)
{
    return {{"shape", to_json(v.shape)},
            {"patch_px", v.patch_px},
            {"image_size", v.image_size},
            {"out_dim", v.out_dim},
            {"mean", v.mean},
            {"std", v.stdev}};
}

inline VisionTower get_vision(const TensorArchive& a, const Json& meta, const std::string& p)
{
    VisionTower v;
    v.shape = tower_shape_from_json(meta.at("shape"));
    v.patch_px = meta.at("patch_px").get<int>();
    v.image_size = meta.at("image_size").get<int>();
    v.out_dim = meta.value("out_dim", v.shape.width);
    if (meta.contains("mean")) {
        v.mean = meta.at("mean").get<std::array<double, 3>>();
        v.stdev = meta.at("std").get<std::array<double, 3>>();
    }
    v.patch_w = a.get(p + "patch_w");
    v.patch_b = a.get_or_empty(p + "patch_b");
    v.class_embedding = a.get(p + "class_embedding");
    v.positional_embedding = a.get(p + "positional_embedding");
    v.ln_pre_g = a.get_or_empty(p + "ln_pre_g");
    v.ln_pre_b = a.get_or_empty(p + "ln_pre_b");
    for (int i = 0; i < v.shape.layers; ++i) {
        v.blocks.push_back(get_block(a, p + "blocks." + std::to_string(i) + ".", v.shape));
    }
    v.ln_post_g = a.get(p + "ln_post_g");
    v.ln_post_b = a.get(p + "ln_post_b");
    v.projection = a.get_or_empty(p + "projection");
    if (v.patch_w.rows() != v.shape.width || v.patch_w.cols() != 3 * v.patch_px * v.patch_px) {
        throw DataError("patch embedding has shape " + shape_str(v.patch_w) + ", inconsistent with width/patch size");
    }
    if (v.projection.size() > 0 && (v.projection.rows() != v.shape.width || v.projection.cols() != v.out_dim)) {
        throw DataError("visual projection has shape " + shape_str(v.projection));
    }
    return v;
}

}  // namespace detail

inline TensorArchive vision_to_archive(const VisionTower& v, const std::string& id, const std::string& kind)
{
    TensorArchive a;
    a.meta = {{"kind", kind}, {"id", id}, {"visual", detail::vision_meta(v)}};
    detail::put_vision(a, v, "visual.");
    return a;
}

inline VisionTower vision_from_archive(const TensorArchive& a)
{
    return detail::get_vision(a, a.meta.at("visual"), "visual.");
}

inline void save_backbone(const Backbone& b, const std::filesystem::path& path)
{
    TensorArchive a = vision_to_archive(b.vision, b.id, "backbone");
    const TextTower& t = b.text;
    Json vocab = Json::object();
    for (const auto& [word, ids] : t.vocabulary) {
        vocab[word] = ids;
    }
    a.meta["text"] = {{"shape", to_json(t.shape)}, {"context_length", t.context_length}, {"out_dim", t.out_dim},
                      {"sos_id", t.sos_id},        {"eos_id", t.eos_id},                 {"pad_id", t.pad_id},
                      {"vocabulary", vocab}};
    a.put("text.token_embedding", t.token_embedding);
    a.put("text.positional_embedding", t.positional_embedding);
    for (std::size_t i = 0; i < t.blocks.size(); ++i) {
        detail::put_block(a, "text.blocks." + std::to_string(i) + ".", t.blocks[i]);
    }
    a.put("text.ln_final_g", t.ln_final_g);
    a.put("text.ln_final_b", t.ln_final_b);
    a.put("text.projection", t.projection);
    a.save(path);
}

inline Backbone load_backbone(const std::filesystem::path& path)
{
    const TensorArchive a = TensorArchive::load(path);
    if (a.meta.value("kind", std::string()) != "backbone") {
        throw DataError("archive is not a backbone weight file: " + path.string());
    }
    Backbone b;
    b.id = a.meta.at("id").get<std::string>();
    b.vision = vision_from_archive(a);
    const Json& tm = a.meta.at("text");
    TextTower& t = b.text;
    t.shape = tower_shape_from_json(tm.at("shape"));
    t.context_length = tm.at("context_length").get<int>();
    t.out_dim = tm.at("out_dim").get<int>();
    t.sos_id = tm.at("sos_id").get<int>();
    t.eos_id = tm.at("eos_id").get<int>();
    t.pad_id = tm.value("pad_id", 0);
    for (const auto& [word, ids] : tm.at("vocabulary").items()) {
        t.vocabulary[word] = ids.get<std::vector<int>>();
    }
    t.token_embedding = a.get("text.token_embedding");
    t.positional_embedding = a.get("text.positional_embedding");
    for (int i = 0; i < t.shape.layers; ++i) {
        t.blocks.push_back(detail::get_block(a, "text.blocks." + std::to_string(i) + ".", t.shape));
    }
    t.ln_final_g = a.get("text.ln_final_g");
    t.ln_final_b = a.get("text.ln_final_b");
    t.projection = a.get("text.projection");
    if (t.projection.cols() != b.vision.out_dim) {
        throw DataError(detail::concat("text projection width ", t.projection.cols(), " differs from visual joint width ",
                                       b.vision.out_dim));
    }
    return b;
}

/// Architecture of a randomly initialised stand-in backbone.
struct StandinSpec {
    std::string id = "standin-tiny";
    int width = 16;
    int layers = 2;
    int heads = 2;
    int patch_px = 4;
    int image_size = 32;
    int out_dim = 16;
    int text_width = 16;
    int text_layers = 2;
    int text_heads = 2;
    int context_length = 24;
    double init_gain = 2.0;
    double patch_bias = 1.0;  // std of the patch-embedding bias; 0 omits it
    std::uint64_t seed = 0;

    /// Named presets: "tiny" (the smoke-test configuration) and "small".
    static StandinSpec preset(const std::string& name)
    {
        StandinSpec s;
        if (name == "tiny") {
            return s;
        }
        if (name == "small") {
            s.id = "standin-small";
            s.width = 64;
            s.layers = 6;
            s.heads = 4;
            s.patch_px = 14;
            s.image_size = 56;
            s.out_dim = 32;
            s.text_width = 32;
            s.text_layers = 11;
            s.text_heads = 4;
            s.context_length = 32;
            return s;
        }
        throw ConfigError("unknown stand-in preset '" + name + "' (expected tiny or small)");
    }
};

inline VisionTower make_standin_vision(const StandinSpec& s, std::mt19937_64& rng)
{
    using detail::randn;
    VisionTower v;
    v.shape = {s.width, s.layers, s.heads, 4 * s.width, Activation::quick_gelu, 1e-5};
    v.patch_px = s.patch_px;
    v.image_size = s.image_size;
    v.out_dim = s.out_dim;
    const double w = s.width;
    const int grid = s.image_size / s.patch_px;
    v.patch_w = randn(rng, s.width, 3 * s.patch_px * s.patch_px, s.init_gain / std::sqrt(3.0 * s.patch_px * s.patch_px));
    if (s.patch_bias > 0.0) {
        v.patch_b = randn(rng, 1, s.width, s.patch_bias);
    }
    v.class_embedding = randn(rng, 1, s.width, 1.0 / std::sqrt(w));
    v.positional_embedding = randn(rng, 1 + grid * grid, s.width, 0.1 / std::sqrt(w));
    v.ln_pre_g = Matrix::Ones(1, s.width);
    v.ln_pre_b = Matrix::Zero(1, s.width);
    for (int l = 0; l < s.layers; ++l) {
        v.blocks.push_back(detail::random_block(rng, v.shape, s.init_gain));
    }
    v.ln_post_g = Matrix::Ones(1, s.width);
    v.ln_post_b = Matrix::Zero(1, s.width);
    v.projection = randn(rng, s.width, s.out_dim, 1.0 / std::sqrt(w));
    return v;
}

inline Backbone make_standin_backbone(const StandinSpec& s)
{
    using detail::randn;
    if (s.image_size % s.patch_px != 0) {
        throw ConfigError("stand-in image size must be a multiple of the patch size");
    }
    std::mt19937_64 rng(s.seed);
    Backbone b;
    b.id = s.id;
    b.vision = make_standin_vision(s, rng);

    TextTower& t = b.text;
    t.shape = {s.text_width, s.text_layers, s.text_heads, 4 * s.text_width, Activation::quick_gelu, 1e-5};
    t.context_length = s.context_length;
    t.out_dim = s.out_dim;
    t.pad_id = 0;
    t.sos_id = 1;
    t.eos_id = 2;
    t.vocabulary = {{"object", {3}}, {"damaged", {4}}, {"a", {5}}, {"photo", {6}}, {"of", {7}}};
    const double tw = s.text_width;
    t.token_embedding = randn(rng, 8, s.text_width, 0.02 * std::sqrt(tw));
    t.positional_embedding = randn(rng, s.context_length, s.text_width, 0.01 * std::sqrt(tw));
    for (int l = 0; l < s.text_layers; ++l) {
        t.blocks.push_back(detail::random_block(rng, t.shape, s.init_gain));
    }
    t.ln_final_g = Matrix::Ones(1, s.text_width);
    t.ln_final_b = Matrix::Zero(1, s.text_width);
    t.projection = randn(rng, s.text_width, s.out_dim, 1.0 / std::sqrt(tw));
    return b;
}

}  // namespace zsad
