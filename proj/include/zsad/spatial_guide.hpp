/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Externally guided spatial attention (D-Attn). Patch features from a
// self-supervised encoder define masked cosine-similarity weights that are
// applied to the backbone's final-layer values.

#include "zsad/archive.hpp"
#include "zsad/backbone_adapter.hpp"
#include "zsad/core.hpp"

#include <filesystem>
#include <memory>
#include <string>

namespace zsad {

struct SpatialFeatures {
    Matrix patches;  // N x D'
    PatchGeometry geometry;
};

struct GuidedWeights {
    Matrix weights;  // N x N, rows sum to 1, masked pairs exactly 0
    double epsilon = 0.0;
    PatchGeometry geometry;
};

struct SpatialConfig {
    double epsilon = 0.0;
    double temperature = 1.0;
    bool resize_to_backbone = false;
};

/// Cosine-similarity matrix of the rows of `patches`. The diagonal is set
/// to exactly 1.
inline Matrix cosine_similarity(const Matrix& patches)
{
    Matrix normed(patches.rows(), patches.cols());
    for (Eigen::Index i = 0; i < patches.rows(); ++i) {
        const double n = patches.row(i).norm();
        if (!(n > 0.0) || !std::isfinite(n)) {
            throw DataError(detail::concat("spatial feature row ", i, " has zero or non-finite norm"));
        }
        normed.row(i) = patches.row(i) / n;
    }
    Matrix s = normed * normed.transpose();
    s.diagonal().setOnes();
    return s;
}

inline GuidedWeights guided_attention_weights(const SpatialFeatures& spatial, double epsilon, double temperature = 1.0)
{
    if (epsilon > 1.0) {
        throw ConfigError(detail::concat("epsilon ", epsilon, " > 1 would mask every row completely"));
    }
    if (!(temperature > 0.0)) {
        throw ConfigError("D-Attn temperature must be positive");
    }
    if (spatial.patches.rows() != spatial.geometry.n_patches()) {
        throw ConfigError(detail::concat("spatial features have ", spatial.patches.rows(), " rows but geometry ",
                                         spatial.geometry.str()));
    }
    const Matrix s = cosine_similarity(spatial.patches);
    const Eigen::Index n = s.rows();
    Matrix w = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < n; ++j) {
            if (s(i, j) >= epsilon) {
                mx = std::max(mx, s(i, j) / temperature);
            }
        }
        double total = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) {
            if (s(i, j) >= epsilon) {
                w(i, j) = std::exp(s(i, j) / temperature - mx);
                total += w(i, j);
            }
        }
        w.row(i) /= total;
    }
    return {std::move(w), epsilon, spatial.geometry};
}

/// Bilinearly resamples an external patch grid onto the backbone grid.
inline SpatialFeatures align_grid(const SpatialFeatures& in, const PatchGeometry& target)
{
    if (in.geometry.grid_h == target.grid_h && in.geometry.grid_w == target.grid_w) {
        return {in.patches, target};
    }
    const Eigen::Index d = in.patches.cols();
    Matrix out(target.n_patches(), d);
    Matrix plane(in.geometry.grid_h, in.geometry.grid_w);
    for (Eigen::Index c = 0; c < d; ++c) {
        for (int i = 0; i < in.geometry.n_patches(); ++i) {
            plane(i / in.geometry.grid_w, i % in.geometry.grid_w) = in.patches(i, c);
        }
        const Matrix r = resize_bilinear(plane, target.grid_h, target.grid_w);
        for (int i = 0; i < target.n_patches(); ++i) {
            out(i, c) = r(i / target.grid_w, i % target.grid_w);
        }
    }
    return {std::move(out), target};
}

/// H^D-Attn = W V_L merged through the final layer's output projection,
/// then mapped into the joint space.
inline Matrix d_attn_output(const GuidedWeights& weights, const LayerQKV& final_layer, const VisionTower& tower,
                            const PatchGeometry& backbone_geometry)
{
    if (!(weights.geometry.grid_h == backbone_geometry.grid_h && weights.geometry.grid_w == backbone_geometry.grid_w)) {
        throw ConfigError("spatial encoder grid " + weights.geometry.str() + " does not match backbone grid " +
                          backbone_geometry.str());
    }
    if (weights.weights.rows() != final_layer.value.rows()) {
        throw ConfigError(detail::concat("guided weights cover ", weights.weights.rows(), " patches, values have ",
                                         final_layer.value.rows()));
    }
    const std::vector<Matrix> per_head(static_cast<std::size_t>(final_layer.heads), weights.weights);
    const Matrix h = aggregate_values(per_head, final_layer.value, tower.blocks[static_cast<std::size_t>(final_layer.layer_index - 1)]);
    return tower.to_joint(h);
}

/// Source of spatially sensitive patch features. Input is an RGB image in
/// [0, 1] at the backbone resolution.
class SpatialEncoder {
public:
    virtual ~SpatialEncoder() = default;
    virtual std::string id() const = 0;
    virtual SpatialFeatures encode(const ImageTensor& rgb) const = 0;
};

/// Raw pixel patches plus a constant bias dimension. Needs no weights;
/// serves as the stand-in encoder for tests and small-scale experiments.
class PixelPatchEncoder final : public SpatialEncoder {
public:
    explicit PixelPatchEncoder(int patch_px) : patch_px_(patch_px) {}

    std::string id() const override { return "pixel-patch"; }

    SpatialFeatures encode(const ImageTensor& rgb) const override
    {
        if (rgb.height % patch_px_ != 0 || rgb.width % patch_px_ != 0) {
            throw ConfigError("pixel-patch encoder: image not divisible by patch size");
        }
        const PatchGeometry g{rgb.height / patch_px_, rgb.width / patch_px_, patch_px_};
        const int p = patch_px_;
        Matrix f(g.n_patches(), 3 * p * p + 1);
        for (int gy = 0; gy < g.grid_h; ++gy) {
            for (int gx = 0; gx < g.grid_w; ++gx) {
                const int row = gy * g.grid_w + gx;
                int col = 0;
                for (int c = 0; c < rgb.channels; ++c) {
                    for (int dy = 0; dy < p; ++dy) {
                        for (int dx = 0; dx < p; ++dx) {
                            f(row, col++) = rgb.at(c, gy * p + dy, gx * p + dx) - 0.5;
                        }
                    }
                }
                f(row, col) = 0.5;
            }
        }
        return {std::move(f), g};
    }

private:
    int patch_px_;
};

/// Self-supervised ViT (e.g. an exported DINOv2) read from a tensor archive
/// of kind "spatial". Features are the normalised final patch tokens.
class VitSpatialEncoder final : public SpatialEncoder {
public:
    VitSpatialEncoder(VisionTower tower, std::string id) : tower_(std::move(tower)), id_(std::move(id)) {}

    static std::unique_ptr<VitSpatialEncoder> load(const std::filesystem::path& path)
    {
        const TensorArchive a = TensorArchive::load(path);
        if (a.meta.value("kind", std::string()) != "spatial") {
            throw DataError("archive is not a spatial encoder weight file: " + path.string());
        }
        return std::make_unique<VitSpatialEncoder>(vision_from_archive(a), a.meta.at("id").get<std::string>());
    }

    std::string id() const override { return id_; }
    const VisionTower& tower() const { return tower_; }

    SpatialFeatures encode(const ImageTensor& rgb) const override
    {
        ImageTensor x = rgb;
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < x.height; ++y) {
                for (int xx = 0; xx < x.width; ++xx) {
                    x.at(c, y, xx) = (x.at(c, y, xx) - tower_.mean[c]) / tower_.stdev[c];
                }
            }
        }
        const PatchGeometry g = tower_.geometry_for(x.height, x.width);
        const Matrix tokens = tower_.forward(x, g, tower_.layers() + 1, nullptr);
        const Matrix normed = layer_norm_rows(tokens.bottomRows(g.n_patches()), tower_.ln_post_g.row(0),
                                              tower_.ln_post_b.row(0), tower_.shape.ln_eps);
        return {normed, g};
    }

private:
    VisionTower tower_;
    std::string id_;
};

}  // namespace zsad
