/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// End-to-end detector: frozen backbone, E-Attn / D-Attn local branches,
// context-conditioned prompts, local-to-global fusion, and the training
// objective over the prompt parameters.

#include "zsad/autograd.hpp"
#include "zsad/backbone_adapter.hpp"
#include "zsad/core.hpp"
#include "zsad/objectives.hpp"
#include "zsad/prompt_bank.hpp"
#include "zsad/scoring.hpp"
#include "zsad/spatial_guide.hpp"

#include <algorithm>
#include <map>
#include <memory>
#include <vector>

namespace zsad {

enum class GlobalLossInput { global_token, fused_global };

struct ModelConfig {
    AdapterConfig adapter;
    SpatialConfig spatial;
    std::vector<Branch> branches{Branch::e_attn};
    double logit_scale = kDefaultLogitScale;
    double sigma = 4.0;
    bool smooth = true;
    bool fusion = true;
    GlobalLossInput global_loss_input = GlobalLossInput::global_token;
    double focal_gamma = 2.0;
    DiceMode dice_mode = DiceMode::anomaly_channel;
    double lambda = 1.0;

    bool has_branch(Branch b) const { return std::find(branches.begin(), branches.end(), b) != branches.end(); }
};

/// Frozen-tower outputs for one image; everything downstream of these is
/// a function of the prompt parameters only.
struct ImageFeatures {
    Vector global_token;
    std::map<Branch, Matrix> branch_features;  // N x D, joint space
    PatchGeometry geometry;
};

struct LossBreakdown {
    double global = 0.0;
    std::map<Branch, double> local;
    double total = 0.0;
};

class AnomalyModel {
public:
    AnomalyModel(Backbone backbone, std::shared_ptr<const SpatialEncoder> spatial, ModelConfig config)
        : backbone_(std::move(backbone)), spatial_(std::move(spatial)), config_(std::move(config))
    {
        if (config_.branches.empty()) {
            throw ConfigError("at least one local branch must be enabled");
        }
        if (config_.has_branch(Branch::d_attn) && !spatial_) {
            throw ConfigError("the d_attn branch requires a spatial encoder");
        }
        config_.adapter.e_attn_enabled = config_.has_branch(Branch::e_attn);
    }

    const Backbone& backbone() const { return backbone_; }
    const ModelConfig& config() const { return config_; }
    const SpatialEncoder* spatial() const { return spatial_.get(); }

    /// `image` is normalised with the backbone's mean/std.
    ImageFeatures features(const ImageTensor& image) const
    {
        const VisionTower& vt = backbone_.vision;
        VisionFeatures vf = extract_features(vt, image, config_.adapter);
        ImageFeatures out;
        out.global_token = vf.global_token;
        out.geometry = vf.geometry;
        if (config_.has_branch(Branch::e_attn)) {
            out.branch_features[Branch::e_attn] = std::move(vf.e_attn_map);
        }
        if (config_.has_branch(Branch::d_attn)) {
            ImageTensor rgb = image;
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < rgb.height; ++y) {
                    for (int x = 0; x < rgb.width; ++x) {
                        rgb.at(c, y, x) = rgb.at(c, y, x) * vt.stdev[c] + vt.mean[c];
                    }
                }
            }
            SpatialFeatures sf = spatial_->encode(rgb);
            if (config_.spatial.resize_to_backbone) {
                sf = align_grid(sf, vf.geometry);
            }
            const GuidedWeights w = guided_attention_weights(sf, config_.spatial.epsilon, config_.spatial.temperature);
            out.branch_features[Branch::d_attn] = d_attn_output(w, vf.final_layer(), vt, vf.geometry);
        }
        return out;
    }

    TextPair text_pair(const PromptBank& bank, const Vector& g_i, std::string id = {}) const
    {
        return zsad::text_pair(bank, backbone_.text, g_i, std::move(id));
    }

    AnomalyResult infer(const PromptBank& bank, const ImageFeatures& f, int out_h, int out_w, std::string id = {}) const
    {
        const TextPair pair = text_pair(bank, f.global_token, std::move(id));
        AnomalyResult r;
        r.branch_maps.geometry = f.geometry;
        std::vector<Matrix> feats;
        for (const auto& [branch, z] : f.branch_features) {
            r.branch_maps.maps[branch] = patch_score_map(z, pair, f.geometry, config_.logit_scale);
            feats.push_back(z);
        }
        r.fused_global = config_.fusion ? local_to_global_fuse(feats, pair, f.global_token, config_.logit_scale)
                                        : f.global_token;
        r.score = anomaly_likelihood(r.fused_global, pair, config_.logit_scale);
        r.map = render_anomaly_map(r.branch_maps, out_h, out_w, config_.sigma, config_.smooth);
        return r;
    }

    /// Differentiable L_total for one image. `targets.mask` sets the pixel
    /// resolution the two-channel maps are upsampled to. The focal term is
    /// evaluated on log-probabilities.
    ag::Var loss(const BankVars& vars, const PromptBank& bank, const ImageFeatures& f, const PixelTargets& targets,
                 LossBreakdown* breakdown = nullptr) const
    {
        const TextPairVars pair = encode_pair(vars, bank, backbone_.text, f.global_token);
        const int h = static_cast<int>(targets.mask.rows());
        const int w = static_cast<int>(targets.mask.cols());

        std::vector<ag::Var> locals;
        std::vector<ag::Var> weighted;
        for (const auto& [branch, z] : f.branch_features) {
            const ag::Var zv = ag::constant(z);
            const ag::Var log_probs = ag::likelihood_log_rows(zv, pair, config_.logit_scale);
            const ag::Var up = ag::resize_bilinear_log_rows(log_probs, f.geometry.grid_h, f.geometry.grid_w, h, w);
            const ag::Var local = ag::add(ag::focal_log(up, targets.mask, config_.focal_gamma),
                                          ag::dice(ag::exp(up), targets.mask, config_.dice_mode));
            if (breakdown) {
                breakdown->local[branch] = local.scalar();
            }
            locals.push_back(local);
            if (config_.global_loss_input == GlobalLossInput::fused_global) {
                weighted.push_back(ag::weighted_row_mean(ag::exp(ag::slice_cols(log_probs, 1, 1)), zv));
            }
        }

        ag::Var e = ag::constant(Matrix(f.global_token.transpose()));
        if (config_.global_loss_input == GlobalLossInput::fused_global && config_.fusion) {
            ag::Var mean_a = weighted.front();
            for (std::size_t i = 1; i < weighted.size(); ++i) {
                mean_a = ag::add(mean_a, weighted[i]);
            }
            mean_a = ag::scale(mean_a, 1.0 / static_cast<double>(weighted.size()));
            e = ag::scale(ag::add(e, mean_a), 0.5);
        }
        const ag::Var p = ag::slice_cols(ag::likelihood_rows(e, pair, config_.logit_scale), 1, 1);
        const ag::Var global = ag::bce(p, targets.image_label);

        ag::Var local_sum = locals.front();
        for (std::size_t i = 1; i < locals.size(); ++i) {
            local_sum = ag::add(local_sum, locals[i]);
        }
        const ag::Var total = ag::add(global, ag::scale(local_sum, config_.lambda));
        if (breakdown) {
            breakdown->global = global.scalar();
            breakdown->total = total.scalar();
        }
        return total;
    }

private:
    Backbone backbone_;
    std::shared_ptr<const SpatialEncoder> spatial_;
    ModelConfig config_;
};

}  // namespace zsad
