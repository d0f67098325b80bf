/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "zsad/core.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace zsad {

/// One output coordinate of a 1-D bilinear resize: out = w0 * in[i0] + w1 * in[i1].
struct LinearTap {
    int i0 = 0;
    int i1 = 0;
    double w0 = 1.0;
    double w1 = 0.0;
};

/// Half-pixel-centre sampling (align_corners = false), clamped at the borders.
inline std::vector<LinearTap> linear_taps(int in_size, int out_size)
{
    std::vector<LinearTap> taps(static_cast<std::size_t>(out_size));
    const double ratio = static_cast<double>(in_size) / static_cast<double>(out_size);
    for (int o = 0; o < out_size; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        src = std::max(src, 0.0);
        int i0 = static_cast<int>(std::floor(src));
        i0 = std::min(i0, in_size - 1);
        const int i1 = std::min(i0 + 1, in_size - 1);
        const double frac = src - i0;
        taps[o] = {i0, i1, 1.0 - frac, frac};
    }
    return taps;
}

/// Bilinear resize of a single-channel map.
inline Matrix resize_bilinear(const Matrix& in, int out_h, int out_w)
{
    const auto ty = linear_taps(static_cast<int>(in.rows()), out_h);
    const auto tx = linear_taps(static_cast<int>(in.cols()), out_w);
    Matrix out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        const auto& a = ty[y];
        for (int x = 0; x < out_w; ++x) {
            const auto& b = tx[x];
            out(y, x) = a.w0 * (b.w0 * in(a.i0, b.i0) + b.w1 * in(a.i0, b.i1)) +
                        a.w1 * (b.w0 * in(a.i1, b.i0) + b.w1 * in(a.i1, b.i1));
        }
    }
    return out;
}

/// Index into a reflect-padded signal (d c b a | a b c d | d c b a).
inline int reflect_index(int i, int n)
{
    if (n == 1) {
        return 0;
    }
    const int period = 2 * n;
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - 1 - i;
}

inline std::vector<double> gaussian_kernel(double sigma)
{
    if (!(sigma > 0.0)) {
        throw ConfigError(detail::concat("gaussian sigma must be positive, got ", sigma));
    }
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[i + radius] = v;
        total += v;
    }
    for (double& v : k) {
        v /= total;
    }
    return k;
}

/// Separable Gaussian smoothing with reflect padding, radius ceil(3 sigma).
inline Matrix gaussian_smooth(const Matrix& in, double sigma)
{
    const auto k = gaussian_kernel(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const int h = static_cast<int>(in.rows());
    const int w = static_cast<int>(in.cols());
    Matrix tmp(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = -r; j <= r; ++j) {
                acc += k[j + r] * in(y, reflect_index(x + j, w));
            }
            tmp(y, x) = acc;
        }
    }
    Matrix out(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int j = -r; j <= r; ++j) {
                acc += k[j + r] * tmp(reflect_index(y + j, h), x);
            }
            out(y, x) = acc;
        }
    }
    return out;
}

/// Nearest-neighbour resize; output values are always a subset of input values.
inline Matrix resize_nearest(const Matrix& in, int out_h, int out_w)
{
    Matrix out(out_h, out_w);
    const double ry = static_cast<double>(in.rows()) / out_h;
    const double rx = static_cast<double>(in.cols()) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(static_cast<int>(std::floor(y * ry)), static_cast<int>(in.rows()) - 1);
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(static_cast<int>(std::floor(x * rx)), static_cast<int>(in.cols()) - 1);
            out(y, x) = in(sy, sx);
        }
    }
    return out;
}

}  // namespace zsad
