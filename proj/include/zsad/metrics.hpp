/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Image- and pixel-level detection metrics. Ties use the midrank convention;
// thresholds are the distinct score values with "positive iff score >= t".
// Pixel metrics pool all pixels of a category.

#include "zsad/core.hpp"

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <vector>

namespace zsad {

using MapF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <class Labels>
std::pair<std::size_t, std::size_t> class_counts(const Labels& labels)
{
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        pos += labels[i] ? 1 : 0;
    }
    return {pos, labels.size() - pos};
}

template <class Scores, class Labels>
void check_binary_inputs(const Scores& scores, const Labels& labels, const char* metric, bool need_negatives)
{
    if (scores.size() != labels.size()) {
        throw ConfigError(std::string(metric) + ": scores and labels differ in length");
    }
    const auto [pos, neg] = class_counts(labels);
    if (pos == 0 || (need_negatives && neg == 0)) {
        throw UndefinedMetric(std::string(metric) + " is undefined for single-class labels");
    }
}

/// Indices sorted by descending score.
template <class Scores>
std::vector<std::size_t> order_desc(const Scores& scores)
{
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

/// Calls fn(tp, fp) after each group of tied scores, descending.
template <class Scores, class Labels, class Fn>
void sweep_thresholds(const Scores& scores, const Labels& labels, Fn&& fn)
{
    const auto idx = order_desc(scores);
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1;
            ++j;
        }
        fn(tp, fp);
        i = j;
    }
}

}  // namespace detail

/// Mann-Whitney statistic with midranks for ties.
template <class Scores, class Labels>
double auroc(const Scores& scores, const Labels& labels)
{
    detail::check_binary_inputs(scores, labels, "AUROC", true);
    const std::size_t n = scores.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double pos_rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        std::size_t pos_in_group = 0;
        while (j < n && scores[idx[j]] == scores[idx[i]]) {
            pos_in_group += labels[idx[j]] ? 1 : 0;
            ++j;
        }
        const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        pos_rank_sum += midrank * static_cast<double>(pos_in_group);
        i = j;
    }
    const auto [pos, neg] = detail::class_counts(labels);
    const double p = static_cast<double>(pos);
    return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

/// Step-sum average precision over descending-score thresholds.
template <class Scores, class Labels>
double average_precision(const Scores& scores, const Labels& labels)
{
    detail::check_binary_inputs(scores, labels, "AP", true);
    const double pos = static_cast<double>(detail::class_counts(labels).first);
    double ap = 0.0;
    double prev_recall = 0.0;
    detail::sweep_thresholds(scores, labels, [&](std::size_t tp, std::size_t fp) {
        const double recall = static_cast<double>(tp) / pos;
        const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    });
    return ap;
}

/// Maximum F1 over thresholds at the distinct score values.
template <class Scores, class Labels>
double f1_max(const Scores& scores, const Labels& labels)
{
    detail::check_binary_inputs(scores, labels, "F1-max", false);
    const double pos = static_cast<double>(detail::class_counts(labels).first);
    double best = 0.0;
    detail::sweep_thresholds(scores, labels, [&](std::size_t tp, std::size_t fp) {
        const double fn = pos - static_cast<double>(tp);
        const double f1 = 2.0 * static_cast<double>(tp) / (2.0 * static_cast<double>(tp) + static_cast<double>(fp) + fn);
        best = std::max(best, f1);
    });
    return best;
}

enum class CurveIntegration { trapezoid, step };

struct AuproOptions {
    double fpr_limit = 0.3;
    CurveIntegration integration = CurveIntegration::trapezoid;
    int connectivity = 8;  // 4 or 8
};

/// Connected components of mask > 0.5. Returns labels (-1 background) and
/// the component count.
template <class Mask>
std::pair<std::vector<int>, int> connected_components(const Mask& mask, int connectivity = 8)
{
    if (connectivity != 4 && connectivity != 8) {
        throw ConfigError("connectivity must be 4 or 8");
    }
    const int h = static_cast<int>(mask.rows());
    const int w = static_cast<int>(mask.cols());
    std::vector<int> label(static_cast<std::size_t>(h) * w, -1);
    int count = 0;
    std::vector<std::pair<int, int>> stack;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (!(mask(y, x) > 0.5) || label[static_cast<std::size_t>(y) * w + x] >= 0) {
                continue;
            }
            stack.push_back({y, x});
            label[static_cast<std::size_t>(y) * w + x] = count;
            while (!stack.empty()) {
                const auto [cy, cx] = stack.back();
                stack.pop_back();
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) {
                            continue;
                        }
                        const int ny = cy + dy;
                        const int nx = cx + dx;
                        if (ny < 0 || nx < 0 || ny >= h || nx >= w) {
                            continue;
                        }
                        auto& l = label[static_cast<std::size_t>(ny) * w + nx];
                        if (l < 0 && mask(ny, nx) > 0.5) {
                            l = count;
                            stack.push_back({ny, nx});
                        }
                    }
                }
            }
            ++count;
        }
    }
    return {std::move(label), count};
}

/// Area under a monotone (fpr, value) curve from 0 to `limit`, normalised by
/// `limit`. Points must be sorted by fpr; the curve is clipped at `limit`.
inline double integrate_curve(const std::vector<std::pair<double, double>>& curve, double limit, CurveIntegration mode)
{
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        auto [x0, y0] = curve[i - 1];
        auto [x1, y1] = curve[i];
        if (x0 >= limit) {
            break;
        }
        if (x1 > limit) {
            const double t = (limit - x0) / (x1 - x0);
            y1 = y0 + t * (y1 - y0);
            x1 = limit;
        }
        area += mode == CurveIntegration::trapezoid ? 0.5 * (y0 + y1) * (x1 - x0) : y0 * (x1 - x0);
    }
    return area / limit;
}

/// Normalised area under the per-region-overlap vs. false-positive-rate curve.
template <class MapT, class MaskT>
double aupro(const std::vector<MapT>& maps, const std::vector<MaskT>& masks, const AuproOptions& opt = {})
{
    if (maps.size() != masks.size()) {
        throw ConfigError("aupro: maps and masks differ in count");
    }
    if (!(opt.fpr_limit > 0.0 && opt.fpr_limit <= 1.0)) {
        throw ConfigError("aupro: fpr_limit must be in (0, 1]");
    }
    struct Pixel {
        float score;
        std::int32_t region;  // -1 for normal pixels
    };
    std::vector<Pixel> pixels;
    std::vector<std::size_t> region_sizes;
    std::size_t normals = 0;
    for (std::size_t k = 0; k < maps.size(); ++k) {
        if (maps[k].rows() != masks[k].rows() || maps[k].cols() != masks[k].cols()) {
            throw ConfigError(detail::concat("aupro: map ", k, " and its mask differ in shape"));
        }
        const auto [labels, count] = connected_components(masks[k], opt.connectivity);
        const std::int32_t base = static_cast<std::int32_t>(region_sizes.size());
        region_sizes.resize(region_sizes.size() + static_cast<std::size_t>(count), 0);
        const int w = static_cast<int>(maps[k].cols());
        for (int y = 0; y < maps[k].rows(); ++y) {
            for (int x = 0; x < w; ++x) {
                const int l = labels[static_cast<std::size_t>(y) * w + x];
                pixels.push_back({static_cast<float>(maps[k](y, x)), l < 0 ? -1 : base + l});
                if (l < 0) {
                    ++normals;
                } else {
                    ++region_sizes[static_cast<std::size_t>(base + l)];
                }
            }
        }
    }
    if (region_sizes.empty()) {
        throw UndefinedMetric("AUPRO is undefined without anomalous pixels");
    }
    if (normals == 0) {
        throw UndefinedMetric("AUPRO is undefined without normal pixels");
    }
    std::stable_sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
    const double n_regions = static_cast<double>(region_sizes.size());
    std::vector<std::pair<double, double>> curve{{0.0, 0.0}};
    double fp = 0.0;
    double pro = 0.0;
    for (std::size_t i = 0; i < pixels.size();) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) {
            if (pixels[j].region < 0) {
                fp += 1.0;
            } else {
                pro += 1.0 / (static_cast<double>(region_sizes[static_cast<std::size_t>(pixels[j].region)]) * n_regions);
            }
            ++j;
        }
        curve.emplace_back(fp / static_cast<double>(normals), pro);
        i = j;
    }
    return integrate_curve(curve, opt.fpr_limit, opt.integration);
}

// ---------------------------------------------------------------------------
// Aggregation

inline const std::vector<std::string>& metric_names()
{
    static const std::vector<std::string> names{"image_auroc", "image_ap",    "image_f1_max",
                                                "pixel_auroc", "pixel_aupro", "pixel_f1_max"};
    return names;
}

struct MetricCell {
    std::optional<double> value;
    std::string note;  // reason when value is absent
};

struct EvalRecord {
    std::string dataset;
    std::string category;
    std::vector<double> image_scores;
    std::vector<int> image_labels;
    std::vector<MapF> maps;   // anomaly maps at evaluation resolution
    std::vector<MapF> masks;  // same shapes, {0, 1}
    bool image_metrics = true;
    bool pixel_metrics = true;
};

struct CategoryMetrics {
    std::string category;
    std::map<std::string, MetricCell> cells;
};

struct DatasetReport {
    std::string dataset;
    std::vector<CategoryMetrics> categories;
    std::map<std::string, MetricCell> mean;
    std::vector<std::string> footnotes;
};

inline CategoryMetrics evaluate_record(const EvalRecord& r, const AuproOptions& aupro_opt = {})
{
    CategoryMetrics out{r.category, {}};
    auto run = [&](const std::string& name, bool enabled, const std::string& why_disabled, auto&& fn) {
        if (!enabled) {
            out.cells[name] = {std::nullopt, why_disabled};
            return;
        }
        try {
            out.cells[name] = {fn(), {}};
        } catch (const UndefinedMetric& e) {
            out.cells[name] = {std::nullopt, e.what()};
        }
    };
    run("image_auroc", r.image_metrics, "image-level metrics disabled", [&] { return auroc(r.image_scores, r.image_labels); });
    run("image_ap", r.image_metrics, "image-level metrics disabled", [&] { return average_precision(r.image_scores, r.image_labels); });
    run("image_f1_max", r.image_metrics, "image-level metrics disabled", [&] { return f1_max(r.image_scores, r.image_labels); });

    std::vector<float> pix_scores;
    std::vector<std::uint8_t> pix_labels;
    if (r.pixel_metrics) {
        for (std::size_t k = 0; k < r.maps.size(); ++k) {
            for (Eigen::Index i = 0; i < r.maps[k].size(); ++i) {
                pix_scores.push_back(r.maps[k].data()[i]);
                pix_labels.push_back(r.masks[k].data()[i] > 0.5f ? 1 : 0);
            }
        }
    }
    const bool pixels = r.pixel_metrics && !r.maps.empty();
    run("pixel_auroc", pixels, "no pixel-level ground truth", [&] { return auroc(pix_scores, pix_labels); });
    run("pixel_aupro", pixels, "no pixel-level ground truth", [&] { return aupro(r.maps, r.masks, aupro_opt); });
    run("pixel_f1_max", pixels, "no pixel-level ground truth", [&] { return f1_max(pix_scores, pix_labels); });
    return out;
}

/// Fills the unweighted category mean. Undefined cells are excluded from
/// the mean and listed in footnotes.
inline void finalize_report(DatasetReport& d)
{
    d.mean.clear();
    d.footnotes.clear();
    for (const auto& m : metric_names()) {
        double sum = 0.0;
        int n = 0;
        std::vector<std::string> excluded;
        for (const auto& c : d.categories) {
            const auto& cell = c.cells.at(m);
            if (cell.value) {
                sum += *cell.value;
                ++n;
            } else {
                excluded.push_back(c.category);
            }
        }
        if (n > 0) {
            d.mean[m] = {sum / n, {}};
        } else {
            d.mean[m] = {std::nullopt, "undefined in every category"};
        }
        if (n > 0 && !excluded.empty()) {
            std::string note = m + ": mean excludes n/a categories";
            for (const auto& e : excluded) {
                note += " " + e;
            }
            d.footnotes.push_back(note);
        }
    }
}

/// Per-category metrics plus the category mean, one report per dataset.
inline std::vector<DatasetReport> aggregate_report(const std::vector<EvalRecord>& records, const AuproOptions& aupro_opt = {})
{
    if (records.empty()) {
        throw ConfigError("aggregate_report needs at least one record");
    }
    std::vector<DatasetReport> reports;
    for (const auto& r : records) {
        auto it = std::find_if(reports.begin(), reports.end(), [&](const DatasetReport& d) { return d.dataset == r.dataset; });
        if (it == reports.end()) {
            reports.push_back({r.dataset, {}, {}, {}});
            it = std::prev(reports.end());
        }
        it->categories.push_back(evaluate_record(r, aupro_opt));
    }
    for (auto& d : reports) {
        finalize_report(d);
    }
    return reports;
}

}  // namespace zsad
