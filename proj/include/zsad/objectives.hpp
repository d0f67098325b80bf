/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Training losses with closed-form gradients. Pixel losses take a two-channel
// probability map laid out as (H*W) x 2 rows [p_normal, p_anomaly] in
// row-major pixel order, already upsampled to the mask resolution.

#include "zsad/autograd.hpp"
#include "zsad/core.hpp"

#include <algorithm>
#include <span>
#include <string>

namespace zsad {

inline constexpr double kProbClamp = 1e-7;

enum class DiceMode { anomaly_channel, both_channels };

inline DiceMode dice_mode_from_string(const std::string& s)
{
    if (s == "anomaly") {
        return DiceMode::anomaly_channel;
    }
    if (s == "both") {
        return DiceMode::both_channels;
    }
    throw ConfigError("unknown dice mode '" + s + "' (expected anomaly or both)");
}

struct PixelTargets {
    Matrix mask;  // H x W, entries in {0, 1}
    int image_label = 0;
};

struct LossValue {
    double value = 0.0;
    Matrix grad;  // same shape as the prediction
};

/// Binary cross-entropy with p clamped to [1e-7, 1 - 1e-7].
inline double global_loss(int y, double p)
{
    const double pc = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    return y == 1 ? -std::log(pc) : -std::log(1.0 - pc);
}

/// d global_loss / dp (zero where the clamp is active).
inline double global_loss_grad(int y, double p)
{
    if (p < kProbClamp || p > 1.0 - kProbClamp) {
        return 0.0;
    }
    return y == 1 ? -1.0 / p : 1.0 / (1.0 - p);
}

namespace detail {

inline void check_pixel_inputs(const Matrix& pred, const Matrix& mask, const char* who)
{
    if (pred.cols() != 2) {
        throw ConfigError(std::string(who) + ": prediction must have 2 channels, got " + shape_str(pred));
    }
    if (pred.rows() != mask.size()) {
        throw ConfigError(std::string(who) + ": prediction has " + std::to_string(pred.rows()) +
                          " pixels but the mask is " + shape_str(mask) +
                          "; upsample to mask resolution before the loss");
    }
}

}  // namespace detail

/// Mean over pixels of -(1 - p_t)^gamma log p_t.
inline LossValue focal_loss(const Matrix& pred, const Matrix& mask, double gamma = 2.0)
{
    detail::check_pixel_inputs(pred, mask, "focal_loss");
    if (gamma < 0.0) {
        throw ConfigError("focal gamma must be >= 0");
    }
    const Eigen::Index n = pred.rows();
    LossValue out{0.0, Matrix::Zero(n, 2)};
    for (Eigen::Index i = 0; i < n; ++i) {
        if (std::abs(pred(i, 0) + pred(i, 1) - 1.0) > 1e-4) {
            throw DataError(detail::concat("focal_loss: channels at pixel ", i, " sum to ", pred(i, 0) + pred(i, 1)));
        }
        const int t = mask.data()[i] > 0.5 ? 1 : 0;
        const double p_raw = pred(i, t);
        const double p = std::clamp(p_raw, kProbClamp, 1.0);
        const double q = 1.0 - p;
        const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
        out.value += -mod * std::log(p);
        if (p_raw >= kProbClamp) {
            const double dterm = (gamma == 0.0 || q <= 0.0) ? 0.0 : gamma * std::pow(q, gamma - 1.0) * std::log(p);
            out.grad(i, t) = (dterm - mod / p) / static_cast<double>(n);
        }
    }
    out.value /= static_cast<double>(n);
    return out;
}

/// focal_loss on log-probabilities: -(1 - p_t)^gamma log p_t with
/// p_t = exp(l_t). No clamp is needed, and the gradient with respect to a
/// log-probability stays nonzero however confident a wrong prediction is.
inline LossValue focal_loss_log(const Matrix& log_pred, const Matrix& mask, double gamma = 2.0)
{
    detail::check_pixel_inputs(log_pred, mask, "focal_loss_log");
    if (gamma < 0.0) {
        throw ConfigError("focal gamma must be >= 0");
    }
    const Eigen::Index n = log_pred.rows();
    LossValue out{0.0, Matrix::Zero(n, 2)};
    for (Eigen::Index i = 0; i < n; ++i) {
        const double sum = std::exp(log_pred(i, 0)) + std::exp(log_pred(i, 1));
        if (std::abs(sum - 1.0) > 1e-4) {
            throw DataError(detail::concat("focal_loss_log: channels at pixel ", i, " sum to ", sum));
        }
        const int t = mask.data()[i] > 0.5 ? 1 : 0;
        const double l = log_pred(i, t);
        const double p = std::exp(l);
        const double q = std::max(0.0, 1.0 - p);
        const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
        out.value += -mod * l;
        const double dmod = (gamma == 0.0 || q <= 0.0) ? 0.0 : -gamma * std::pow(q, gamma - 1.0) * p;
        out.grad(i, t) = -(dmod * l + mod) / static_cast<double>(n);
    }
    out.value /= static_cast<double>(n);
    return out;
}

namespace detail {

inline double dice_channel(const Matrix& pred, Eigen::Index ch, const Matrix& target, double smooth, Matrix* grad,
                           double weight)
{
    double inter = 0.0;
    double psum = 0.0;
    double tsum = 0.0;
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        inter += pred(i, ch) * target.data()[i];
        psum += pred(i, ch);
        tsum += target.data()[i];
    }
    const double u = psum + tsum + smooth;
    const double num = 2.0 * inter + smooth;
    if (grad) {
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            (*grad)(i, ch) += weight * -(2.0 * target.data()[i] * u - num) / (u * u);
        }
    }
    return 1.0 - num / u;
}

}  // namespace detail

/// 1 - (2 sum(p m) + s) / (sum p + sum m + s) on the anomaly channel, or the
/// mean of both channels' Dice (normal channel against 1 - mask).
inline LossValue dice_loss(const Matrix& pred, const Matrix& mask, DiceMode mode = DiceMode::anomaly_channel,
                           double smooth = 1.0)
{
    detail::check_pixel_inputs(pred, mask, "dice_loss");
    LossValue out{0.0, Matrix::Zero(pred.rows(), 2)};
    if (mode == DiceMode::anomaly_channel) {
        out.value = detail::dice_channel(pred, 1, mask, smooth, &out.grad, 1.0);
        return out;
    }
    const Matrix inverse = (1.0 - mask.array()).matrix();
    out.value = 0.5 * (detail::dice_channel(pred, 1, mask, smooth, &out.grad, 0.5) +
                       detail::dice_channel(pred, 0, inverse, smooth, &out.grad, 0.5));
    return out;
}

/// L_global + lambda * sum of per-branch local losses.
inline double total_loss(double global, std::span<const double> locals, double lambda)
{
    if (lambda < 0.0) {
        throw ConfigError("lambda must be >= 0");
    }
    double s = 0.0;
    for (double l : locals) {
        s += l;
    }
    return global + lambda * s;
}

namespace ag {

inline Var bce(const Var& p, int y)
{
    Matrix v(1, 1);
    v(0, 0) = global_loss(y, p.scalar());
    return make_op(std::move(v), {p}, [p, y](Node& out) {
        push(p, Matrix::Constant(1, 1, out.grad(0, 0) * global_loss_grad(y, p.scalar())));
    });
}

inline Var focal(const Var& pred, const Matrix& mask, double gamma)
{
    LossValue l = focal_loss(pred.value(), mask, gamma);
    Matrix v = Matrix::Constant(1, 1, l.value);
    return make_op(std::move(v), {pred}, [pred, g = std::move(l.grad)](Node& out) { push(pred, g * out.grad(0, 0)); });
}

inline Var focal_log(const Var& log_pred, const Matrix& mask, double gamma)
{
    LossValue l = focal_loss_log(log_pred.value(), mask, gamma);
    Matrix v = Matrix::Constant(1, 1, l.value);
    return make_op(std::move(v), {log_pred}, [log_pred, g = std::move(l.grad)](Node& out) { push(log_pred, g * out.grad(0, 0)); });
}

inline Var dice(const Var& pred, const Matrix& mask, DiceMode mode)
{
    LossValue l = dice_loss(pred.value(), mask, mode);
    Matrix v = Matrix::Constant(1, 1, l.value);
    return make_op(std::move(v), {pred}, [pred, g = std::move(l.grad)](Node& out) { push(pred, g * out.grad(0, 0)); });
}

}  // namespace ag

}  // namespace zsad
