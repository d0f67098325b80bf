/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "zsad/autograd.hpp"
#include "zsad/backbone_adapter.hpp"
#include "zsad/core.hpp"
#include "zsad/image_ops.hpp"
#include "zsad/prompt_bank.hpp"

#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace zsad {

enum class Branch { e_attn, d_attn };

inline std::string to_string(Branch b)
{
    return b == Branch::e_attn ? "e_attn" : "d_attn";
}

inline Branch branch_from_string(const std::string& s)
{
    if (s == "e_attn") {
        return Branch::e_attn;
    }
    if (s == "d_attn") {
        return Branch::d_attn;
    }
    throw ConfigError("unknown branch '" + s + "' (expected e_attn or d_attn)");
}

/// Low-resolution anomaly maps keyed by branch, values in [0, 1].
struct BranchMaps {
    std::map<Branch, Matrix> maps;  // grid_h x grid_w each
    PatchGeometry geometry;
};

struct AnomalyResult {
    double score = 0.0;
    Matrix map;  // out_h x out_w
    BranchMaps branch_maps;
    Vector fused_global;
};

inline constexpr double kDefaultLogitScale = 100.0;

/// Softmax over {scale * cos(e, g_a), scale * cos(e, g_n)} at the abnormal slot.
inline double anomaly_likelihood(const Vector& e, const TextPair& pair, double scale = kDefaultLogitScale)
{
    if (!(scale > 0.0)) {
        throw ConfigError("logit scale must be positive");
    }
    const Vector en = l2_normalized(e, "visual embedding");
    const double ca = en.dot(l2_normalized(pair.g_a, "abnormal text embedding"));
    const double cn = en.dot(l2_normalized(pair.g_n, "normal text embedding"));
    // Two-way softmax at the abnormal slot is a logistic in the logit gap.
    return 1.0 / (1.0 + std::exp(-scale * (ca - cn)));
}

/// Per-patch likelihood reshaped onto the patch grid.
inline Matrix patch_score_map(const Matrix& features, const TextPair& pair, const PatchGeometry& geometry,
                              double scale = kDefaultLogitScale)
{
    if (features.rows() != geometry.n_patches()) {
        throw ConfigError(detail::concat("feature map has ", features.rows(), " rows, geometry ", geometry.str()));
    }
    Matrix out(geometry.grid_h, geometry.grid_w);
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        try {
            out(i / geometry.grid_w, i % geometry.grid_w) = anomaly_likelihood(features.row(i).transpose(), pair, scale);
        } catch (const DataError& e) {
            throw DataError(detail::concat("patch ", i, ": ", e.what()));
        }
    }
    return out;
}

/// Score-weighted patch average of one branch (g^z_a). Uses the plain mean
/// when every score is numerically zero.
inline Vector anomaly_weighted_mean(const Matrix& features, const Vector& scores, double guard = 1e-12)
{
    const double total = scores.sum();
    if (total < guard) {
        std::clog << "warning: all patch anomaly scores vanish; using the unweighted patch mean\n";
        return features.colwise().mean().transpose();
    }
    return (features.transpose() * scores) / total;
}

/// g_i^+ = (g_i + mean over branches of g^z_a) / 2.
inline Vector local_to_global_fuse(const std::vector<Matrix>& branch_features, const TextPair& pair, const Vector& g_i,
                                   double scale = kDefaultLogitScale)
{
    if (branch_features.empty()) {
        throw ConfigError("local_to_global_fuse needs at least one branch");
    }
    Vector mean_a = Vector::Zero(g_i.size());
    for (const auto& z : branch_features) {
        if (z.cols() != g_i.size()) {
            throw ConfigError("branch features and global token have different widths");
        }
        Vector scores(z.rows());
        for (Eigen::Index j = 0; j < z.rows(); ++j) {
            scores(j) = anomaly_likelihood(z.row(j).transpose(), pair, scale);
        }
        mean_a += anomaly_weighted_mean(z, scores);
    }
    mean_a /= static_cast<double>(branch_features.size());
    return 0.5 * (g_i + mean_a);
}

/// Averages branch maps, upsamples bilinearly and (optionally) smooths.
inline Matrix render_anomaly_map(const BranchMaps& branch_maps, int out_h, int out_w, double sigma, bool smooth = true)
{
    if (smooth && !(sigma > 0.0)) {
        throw ConfigError(detail::concat("sigma must be positive, got ", sigma));
    }
    if (branch_maps.maps.empty()) {
        throw ConfigError("no branch maps to render");
    }
    Matrix avg = Matrix::Zero(branch_maps.geometry.grid_h, branch_maps.geometry.grid_w);
    for (const auto& [branch, m] : branch_maps.maps) {
        if (m.rows() != avg.rows() || m.cols() != avg.cols()) {
            throw ConfigError("branch map " + to_string(branch) + " does not match the shared geometry");
        }
        avg += m;
    }
    avg /= static_cast<double>(branch_maps.maps.size());
    Matrix up = resize_bilinear(avg, out_h, out_w);
    if (smooth) {
        up = gaussian_smooth(up, sigma);
    }
    return up.cwiseMax(0.0).cwiseMin(1.0);
}

namespace ag {

/// Two-channel likelihood map [p_n, p_a] (N x 2) for visual rows `e`
/// (N x D, frozen) against the text pair.
inline Var likelihood_rows(const Var& e, const TextPairVars& pair, double scale)
{
    const Var text = l2_normalize_rows(vcat({pair.normal, pair.abnormal}));
    return softmax_rows(ag::scale(matmul_nt(l2_normalize_rows(e), text), scale));
}

/// log of likelihood_rows, computed without forming the probabilities.
inline Var likelihood_log_rows(const Var& e, const TextPairVars& pair, double scale)
{
    const Var text = l2_normalize_rows(vcat({pair.normal, pair.abnormal}));
    return log_softmax_rows(ag::scale(matmul_nt(l2_normalize_rows(e), text), scale));
}

}  // namespace ag

}  // namespace zsad
