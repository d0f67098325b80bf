/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace zsad {

inline constexpr std::string_view kCodeVersion = "zsad-1.0.0";

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Error taxonomy. The CLI maps these onto exit codes:
// ConfigError -> 1 (usage), DataError -> 2 (data), anything else -> 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class IntegrityError : public DataError {
public:
    using DataError::DataError;
};

class UndefinedMetric : public Error {
public:
    using Error::Error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args)
{
    std::ostringstream os;
    (os << ... << std::forward<Args>(args));
    return os.str();
}

}  // namespace detail

inline std::string shape_str(const Matrix& m)
{
    return detail::concat(m.rows(), "x", m.cols());
}

inline bool all_finite(const Matrix& m)
{
    return m.allFinite();
}

/// FNV-1a over raw bytes. Used for archive integrity and freeze checksums.
class Fnv1a {
public:
    void update(const void* data, std::size_t n)
    {
        auto p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const Matrix& m)
    {
        const std::int64_t dims[2] = {m.rows(), m.cols()};
        update(dims, sizeof(dims));
        update(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
    }
    std::uint64_t digest() const { return hash_; }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

/// Row-wise numerically stable softmax.
inline Matrix softmax_rows(const Matrix& logits)
{
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        // Scalar exp: the vectorised one maps -inf to a denormal, not 0.
        out.row(i) = (logits.row(i).array() - mx).unaryExpr([](double v) { return std::exp(v); }).matrix();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

inline Matrix layer_norm_rows(const Matrix& x, const RowVector& gamma, const RowVector& beta, double eps = 1e-5)
{
    Matrix out(x.rows(), x.cols());
    const double d = static_cast<double>(x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().sum() / d;
        const double inv = 1.0 / std::sqrt(var + eps);
        out.row(i) = ((x.row(i).array() - mean) * inv).matrix();
    }
    if (gamma.size() > 0) {
        out.array().rowwise() *= gamma.array();
    }
    if (beta.size() > 0) {
        out.rowwise() += beta;
    }
    return out;
}

enum class Activation { quick_gelu, gelu };

inline double activate(Activation act, double x)
{
    if (act == Activation::quick_gelu) {
        return x / (1.0 + std::exp(-1.702 * x));
    }
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

inline double activate_grad(Activation act, double x)
{
    if (act == Activation::quick_gelu) {
        const double s = 1.0 / (1.0 + std::exp(-1.702 * x));
        return s + 1.702 * x * s * (1.0 - s);
    }
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline Matrix activate(Activation act, const Matrix& x)
{
    return x.unaryExpr([act](double v) { return activate(act, v); });
}

inline Vector l2_normalized(const Vector& v, std::string_view what)
{
    const double n = v.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
        throw DataError(detail::concat("zero-norm or non-finite embedding: ", what));
    }
    return v / n;
}

/// Image in planar CHW layout.
struct ImageTensor {
    int channels = 3;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

}  // namespace zsad
