#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library code it is compared against.

#include "zsad/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace zsad::testing {

/// Removes the directory on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "zsad")
    {
        static std::uint64_t counter = 0;
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                (tag + "-" + std::to_string(rd()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline Matrix random_matrix(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0)
{
    std::normal_distribution<double> nd(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = nd(rng);
    }
    return m;
}

/// Scalar softmax of one vector, written out term by term.
inline std::vector<double> scalar_softmax(const std::vector<double>& z)
{
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : z) {
        mx = std::max(mx, v);
    }
    std::vector<double> out(z.size());
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::exp(z[i] - mx);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

/// softmax(E E^T / sqrt(D)) with explicit loops.
inline Matrix dense_self_correlation(const Matrix& e)
{
    const Eigen::Index n = e.rows();
    const double inv = 1.0 / std::sqrt(static_cast<double>(e.cols()));
    Matrix out(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::vector<double> logits(static_cast<std::size_t>(n));
        for (Eigen::Index j = 0; j < n; ++j) {
            double dot = 0.0;
            for (Eigen::Index d = 0; d < e.cols(); ++d) {
                dot += e(i, d) * e(j, d);
            }
            logits[static_cast<std::size_t>(j)] = dot * inv;
        }
        const auto p = scalar_softmax(logits);
        for (Eigen::Index j = 0; j < n; ++j) {
            out(i, j) = p[static_cast<std::size_t>(j)];
        }
    }
    return out;
}

/// Triple-loop E-Attn layer: per head (A(Q)+A(K)+A(V)) V, merge, then
/// out = merged W^T + b.
inline Matrix dense_e_attn(const Matrix& q, const Matrix& k, const Matrix& v, int heads, const Matrix& out_w,
                           const Matrix& out_b)
{
    const Eigen::Index n = v.rows();
    const Eigen::Index w = v.cols();
    const Eigen::Index hd = w / heads;
    Matrix merged = Matrix::Zero(n, w);
    for (int h = 0; h < heads; ++h) {
        const Matrix aq = dense_self_correlation(q.middleCols(h * hd, hd));
        const Matrix ak = dense_self_correlation(k.middleCols(h * hd, hd));
        const Matrix av = dense_self_correlation(v.middleCols(h * hd, hd));
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index d = 0; d < hd; ++d) {
                double acc = 0.0;
                for (Eigen::Index j = 0; j < n; ++j) {
                    acc += (aq(i, j) + ak(i, j) + av(i, j)) * v(j, h * hd + d);
                }
                merged(i, h * hd + d) = acc;
            }
        }
    }
    Matrix out(n, out_w.rows());
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index o = 0; o < out_w.rows(); ++o) {
            double acc = out_b(0, o);
            for (Eigen::Index d = 0; d < w; ++d) {
                acc += merged(i, d) * out_w(o, d);
            }
            out(i, o) = acc;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metric oracles

/// Fraction of (positive, negative) pairs ranked correctly, ties count half.
inline double brute_auroc(const std::vector<double>& s, const std::vector<int>& y)
{
    double good = 0.0;
    double pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[i] == 1 && y[j] == 0) {
                pairs += 1.0;
                good += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
        }
    }
    return good / pairs;
}

/// Distinct scores, descending.
inline std::vector<double> distinct_desc(const std::vector<double>& s)
{
    std::set<double, std::greater<>> u(s.begin(), s.end());
    return {u.begin(), u.end()};
}

struct Confusion {
    double tp = 0, fp = 0, fn = 0;
};

inline Confusion confusion_at(const std::vector<double>& s, const std::vector<int>& y, double t)
{
    Confusion c;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool pred = s[i] >= t;
        if (pred && y[i] == 1) {
            c.tp += 1;
        } else if (pred) {
            c.fp += 1;
        } else if (y[i] == 1) {
            c.fn += 1;
        }
    }
    return c;
}

/// sum over thresholds of (R_k - R_{k-1}) P_k.
inline double brute_ap(const std::vector<double>& s, const std::vector<int>& y)
{
    double ap = 0.0;
    double prev_r = 0.0;
    for (double t : distinct_desc(s)) {
        const Confusion c = confusion_at(s, y, t);
        const double r = c.tp / (c.tp + c.fn);
        ap += (r - prev_r) * (c.tp / (c.tp + c.fp));
        prev_r = r;
    }
    return ap;
}

inline double brute_f1(const std::vector<double>& s, const std::vector<int>& y)
{
    double best = 0.0;
    for (double t : distinct_desc(s)) {
        const Confusion c = confusion_at(s, y, t);
        const double p = c.tp + c.fp > 0 ? c.tp / (c.tp + c.fp) : 0.0;
        const double r = c.tp / (c.tp + c.fn);
        if (p + r > 0) {
            best = std::max(best, 2 * p * r / (p + r));
        }
    }
    return best;
}

/// Region labels by breadth-first flood fill over 8 neighbours.
inline std::vector<int> bfs_regions(const Matrix& mask, int& count)
{
    const int h = static_cast<int>(mask.rows());
    const int w = static_cast<int>(mask.cols());
    std::vector<int> lab(static_cast<std::size_t>(h * w), -1);
    count = 0;
    for (int s = 0; s < h * w; ++s) {
        if (mask(s / w, s % w) < 0.5 || lab[static_cast<std::size_t>(s)] >= 0) {
            continue;
        }
        std::vector<int> queue{s};
        lab[static_cast<std::size_t>(s)] = count;
        for (std::size_t qi = 0; qi < queue.size(); ++qi) {
            const int y = queue[qi] / w;
            const int x = queue[qi] % w;
            for (int ny = y - 1; ny <= y + 1; ++ny) {
                for (int nx = x - 1; nx <= x + 1; ++nx) {
                    if (ny < 0 || nx < 0 || ny >= h || nx >= w || mask(ny, nx) < 0.5) {
                        continue;
                    }
                    auto& l = lab[static_cast<std::size_t>(ny * w + nx)];
                    if (l < 0) {
                        l = count;
                        queue.push_back(ny * w + nx);
                    }
                }
            }
        }
        ++count;
    }
    return lab;
}

/// For every distinct threshold t (plus +inf) evaluates FPR and mean region
/// overlap of {map >= t}, then integrates the trapezoids up to `limit`,
/// interpolating linearly at the limit, and divides by `limit`.
inline double brute_aupro(const std::vector<Matrix>& maps, const std::vector<Matrix>& masks, double limit)
{
    std::vector<double> all;
    for (const auto& m : maps) {
        all.insert(all.end(), m.data(), m.data() + m.size());
    }
    std::vector<double> thresholds{std::numeric_limits<double>::infinity()};
    for (double t : distinct_desc(all)) {
        thresholds.push_back(t);
    }
    std::vector<std::vector<int>> labels;
    std::vector<int> counts;
    for (const auto& m : masks) {
        int c = 0;
        labels.push_back(bfs_regions(m, c));
        counts.push_back(c);
    }
    std::vector<std::pair<double, double>> pts;
    for (double t : thresholds) {
        double fp = 0, neg = 0, pro_sum = 0;
        int regions = 0;
        for (std::size_t k = 0; k < maps.size(); ++k) {
            std::vector<double> hit(static_cast<std::size_t>(counts[k]), 0.0);
            std::vector<double> size(static_cast<std::size_t>(counts[k]), 0.0);
            for (Eigen::Index i = 0; i < maps[k].size(); ++i) {
                const int l = labels[k][static_cast<std::size_t>(i)];
                const bool pred = maps[k].data()[i] >= t;
                if (l < 0) {
                    neg += 1;
                    fp += pred ? 1 : 0;
                } else {
                    size[static_cast<std::size_t>(l)] += 1;
                    hit[static_cast<std::size_t>(l)] += pred ? 1 : 0;
                }
            }
            for (int r = 0; r < counts[k]; ++r) {
                pro_sum += hit[static_cast<std::size_t>(r)] / size[static_cast<std::size_t>(r)];
            }
            regions += counts[k];
        }
        pts.emplace_back(fp / neg, pro_sum / regions);
    }
    double area = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
        const auto [x0, y0] = pts[i - 1];
        auto [x1, y1] = pts[i];
        if (x0 >= limit) {
            break;
        }
        if (x1 > limit) {
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            x1 = limit;
        }
        area += (x1 - x0) * (y0 + y1) / 2;
    }
    return area / limit;
}

// ---------------------------------------------------------------------------
// Finite differences

/// Largest relative error |a - n| / max(|a| + |n|, floor) over entries,
/// where n is the central difference of f at x.
inline double gradient_error(const std::function<double(const Matrix&)>& f, const Matrix& x, const Matrix& analytic,
                             double h = 1e-6, double floor = 1e-6)
{
    double worst = 0.0;
    Matrix xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double orig = xp.data()[i];
        xp.data()[i] = orig + h;
        const double fp = f(xp);
        xp.data()[i] = orig - h;
        const double fm = f(xp);
        xp.data()[i] = orig;
        const double num = (fp - fm) / (2 * h);
        const double a = analytic.data()[i];
        worst = std::max(worst, std::abs(a - num) / std::max(std::abs(a) + std::abs(num), floor));
    }
    return worst;
}

}  // namespace zsad::testing
