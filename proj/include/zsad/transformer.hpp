/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "zsad/archive.hpp"
#include "zsad/autograd.hpp"
#include "zsad/core.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace zsad {

/// Pre-norm transformer block parameters (CLIP / DINOv2 layout).
struct BlockWeights {
    Matrix ln1_g, ln1_b;
    Matrix in_proj_w;  // 3W x W, rows ordered [query; key; value]
    Matrix in_proj_b;  // 1 x 3W
    Matrix out_w;      // W x W
    Matrix out_b;      // 1 x W
    Matrix ln2_g, ln2_b;
    Matrix fc_w, fc_b;      // hidden x W
    Matrix proj_w, proj_b;  // W x hidden
    Matrix ls1, ls2;        // optional layer-scale (1 x W), empty when unused
};

struct TowerShape {
    int width = 0;
    int layers = 0;
    int heads = 0;
    int mlp_hidden = 0;
    Activation act = Activation::quick_gelu;
    double ln_eps = 1e-5;

    int head_dim() const { return width / heads; }
};

inline Json to_json(const TowerShape& s)
{
    return {{"width", s.width},
            {"layers", s.layers},
            {"heads", s.heads},
            {"mlp_hidden", s.mlp_hidden},
            {"act", s.act == Activation::quick_gelu ? "quick_gelu" : "gelu"},
            {"ln_eps", s.ln_eps}};
}

inline TowerShape tower_shape_from_json(const Json& j)
{
    TowerShape s;
    s.width = j.at("width").get<int>();
    s.layers = j.at("layers").get<int>();
    s.heads = j.at("heads").get<int>();
    s.mlp_hidden = j.value("mlp_hidden", 4 * s.width);
    s.act = j.value("act", std::string("quick_gelu")) == "gelu" ? Activation::gelu : Activation::quick_gelu;
    s.ln_eps = j.value("ln_eps", 1e-5);
    if (s.width <= 0 || s.layers <= 0 || s.heads <= 0 || s.width % s.heads != 0) {
        throw ConfigError("invalid tower shape: width must be a positive multiple of heads");
    }
    return s;
}

namespace detail {

inline Matrix randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double stddev)
{
    std::normal_distribution<double> nd(0.0, stddev);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = nd(rng);
    }
    return m;
}

inline BlockWeights random_block(std::mt19937_64& rng, const TowerShape& s, double gain)
{
    const double w = s.width;
    BlockWeights b;
    b.ln1_g = Matrix::Ones(1, s.width);
    b.ln1_b = Matrix::Zero(1, s.width);
    b.in_proj_w = randn(rng, 3 * s.width, s.width, gain / std::sqrt(w));
    b.in_proj_b = Matrix::Zero(1, 3 * s.width);
    b.out_w = randn(rng, s.width, s.width, gain / std::sqrt(w));
    b.out_b = Matrix::Zero(1, s.width);
    b.ln2_g = Matrix::Ones(1, s.width);
    b.ln2_b = Matrix::Zero(1, s.width);
    b.fc_w = randn(rng, s.mlp_hidden, s.width, gain / std::sqrt(w));
    b.fc_b = Matrix::Zero(1, s.mlp_hidden);
    b.proj_w = randn(rng, s.width, s.mlp_hidden, gain / std::sqrt(static_cast<double>(s.mlp_hidden)));
    b.proj_b = Matrix::Zero(1, s.width);
    return b;
}

inline void put_block(TensorArchive& a, const std::string& p, const BlockWeights& b)
{
    a.put(p + "ln1_g", b.ln1_g);
    a.put(p + "ln1_b", b.ln1_b);
    a.put(p + "in_proj_w", b.in_proj_w);
    a.put(p + "in_proj_b", b.in_proj_b);
    a.put(p + "out_w", b.out_w);
    a.put(p + "out_b", b.out_b);
    a.put(p + "ln2_g", b.ln2_g);
    a.put(p + "ln2_b", b.ln2_b);
    a.put(p + "fc_w", b.fc_w);
    a.put(p + "fc_b", b.fc_b);
    a.put(p + "proj_w", b.proj_w);
    a.put(p + "proj_b", b.proj_b);
    if (b.ls1.size() > 0) {
        a.put(p + "ls1", b.ls1);
        a.put(p + "ls2", b.ls2);
    }
}

inline BlockWeights get_block(const TensorArchive& a, const std::string& p, const TowerShape& s)
{
    BlockWeights b;
    b.ln1_g = a.get(p + "ln1_g");
    b.ln1_b = a.get(p + "ln1_b");
    b.in_proj_w = a.get(p + "in_proj_w");
    b.in_proj_b = a.get(p + "in_proj_b");
    b.out_w = a.get(p + "out_w");
    b.out_b = a.get(p + "out_b");
    b.ln2_g = a.get(p + "ln2_g");
    b.ln2_b = a.get(p + "ln2_b");
    b.fc_w = a.get(p + "fc_w");
    b.fc_b = a.get(p + "fc_b");
    b.proj_w = a.get(p + "proj_w");
    b.proj_b = a.get(p + "proj_b");
    b.ls1 = a.get_or_empty(p + "ls1");
    b.ls2 = a.get_or_empty(p + "ls2");
    if (b.in_proj_w.rows() != 3 * s.width || b.in_proj_w.cols() != s.width) {
        throw DataError("block " + p + " in_proj_w has shape " + shape_str(b.in_proj_w) + ", expected " +
                        std::to_string(3 * s.width) + "x" + std::to_string(s.width));
    }
    return b;
}

inline void hash_block(Fnv1a& h, const BlockWeights& b)
{
    for (const Matrix* m : {&b.ln1_g, &b.ln1_b, &b.in_proj_w, &b.in_proj_b, &b.out_w, &b.out_b, &b.ln2_g,
                            &b.ln2_b, &b.fc_w, &b.fc_b, &b.proj_w, &b.proj_b, &b.ls1, &b.ls2}) {
        h.update(*m);
    }
}

}  // namespace detail

/// Query/key/value projections of one block input, each N x W.
struct QkvProjection {
    Matrix query, key, value;
};

inline QkvProjection project_qkv(const BlockWeights& b, const Matrix& normed)
{
    const Eigen::Index w = normed.cols();
    Matrix qkv = normed * b.in_proj_w.transpose();
    qkv.rowwise() += b.in_proj_b.row(0);
    return {qkv.leftCols(w), qkv.middleCols(w, w), qkv.rightCols(w)};
}

/// Standard multi-head scaled dot-product attention followed by out-proj.
inline Matrix standard_attention(const BlockWeights& b, const QkvProjection& p, int heads)
{
    const Eigen::Index hd = p.query.cols() / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix merged(p.query.rows(), p.query.cols());
    for (int h = 0; h < heads; ++h) {
        const auto q = p.query.middleCols(h * hd, hd);
        const auto k = p.key.middleCols(h * hd, hd);
        const auto v = p.value.middleCols(h * hd, hd);
        Matrix attn = softmax_rows((q * k.transpose()) * sc);
        merged.middleCols(h * hd, hd) = attn * v;
    }
    Matrix out = merged * b.out_w.transpose();
    out.rowwise() += b.out_b.row(0);
    return out;
}

/// One pre-norm block on plain matrices. When `qkv_out` is set, the
/// block's query/key/value projections are copied there.
inline Matrix block_forward(const BlockWeights& b, const TowerShape& s, const Matrix& x, QkvProjection* qkv_out = nullptr)
{
    const Matrix normed = layer_norm_rows(x, b.ln1_g.row(0), b.ln1_b.row(0), s.ln_eps);
    QkvProjection p = project_qkv(b, normed);
    Matrix attn = standard_attention(b, p, s.heads);
    if (b.ls1.size() > 0) {
        attn.array().rowwise() *= b.ls1.row(0).array();
    }
    Matrix h = x + attn;
    Matrix hidden = layer_norm_rows(h, b.ln2_g.row(0), b.ln2_b.row(0), s.ln_eps) * b.fc_w.transpose();
    hidden.rowwise() += b.fc_b.row(0);
    Matrix mlp = activate(s.act, hidden) * b.proj_w.transpose();
    mlp.rowwise() += b.proj_b.row(0);
    if (b.ls2.size() > 0) {
        mlp.array().rowwise() *= b.ls2.row(0).array();
    }
    if (qkv_out) {
        *qkv_out = std::move(p);
    }
    return h + mlp;
}

/// Differentiable causal block used by the text tower.
inline ag::Var block_forward_causal(const BlockWeights& b, const TowerShape& s, const ag::Var& x)
{
    using namespace ag;
    const Var normed = layer_norm(x, b.ln1_g, b.ln1_b, s.ln_eps);
    const Var qkv = linear(normed, b.in_proj_w, b.in_proj_b);
    const Eigen::Index w = s.width;
    const Eigen::Index hd = s.head_dim();
    std::vector<Var> heads;
    heads.reserve(static_cast<std::size_t>(s.heads));
    for (int h = 0; h < s.heads; ++h) {
        const Var q = slice_cols(qkv, h * hd, hd);
        const Var k = slice_cols(qkv, w + h * hd, hd);
        const Var v = slice_cols(qkv, 2 * w + h * hd, hd);
        const Var attn = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd))), true);
        heads.push_back(matmul(attn, v));
    }
    const Var merged = heads.size() == 1 ? heads.front() : hcat(heads);
    const Var h = add(x, linear(merged, b.out_w, b.out_b));
    const Var hidden = activation(linear(layer_norm(h, b.ln2_g, b.ln2_b, s.ln_eps), b.fc_w, b.fc_b), s.act);
    return add(h, linear(hidden, b.proj_w, b.proj_b));
}

/// Frozen text tower of a contrastive backbone.
struct TextTower {
    TowerShape shape;
    int context_length = 0;
    int out_dim = 0;
    Matrix token_embedding;       // vocab x W
    Matrix positional_embedding;  // context x W
    std::vector<BlockWeights> blocks;
    Matrix ln_final_g, ln_final_b;
    Matrix projection;  // W x out_dim
    int sos_id = 0;
    int eos_id = 0;
    int pad_id = 0;
    std::map<std::string, std::vector<int>> vocabulary;  // word -> token ids

    const std::vector<int>& tokens_for(const std::string& word) const
    {
        auto it = vocabulary.find(word);
        if (it == vocabulary.end()) {
            throw ConfigError("text tower vocabulary has no entry for '" + word + "'");
        }
        return it->second;
    }

    std::uint64_t checksum() const
    {
        Fnv1a h;
        h.update(token_embedding);
        h.update(positional_embedding);
        for (const auto& b : blocks) {
            detail::hash_block(h, b);
        }
        h.update(ln_final_g);
        h.update(ln_final_b);
        h.update(projection);
        return h.digest();
    }
};

}  // namespace zsad
