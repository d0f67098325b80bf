/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Dataset manifests, image preprocessing, results and overlay export.
//
// Supported layouts:
//   mvtec: <root>/<category>/{train,test}/<defect>/<image>
//          <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//          "good" is the normal class. A dataset without any ground_truth
//          directory is treated as image-label-only.
//   flat:  <root>/<category>/image/<stem>.<ext>
//          <root>/<category>/mask/<stem>.<ext>   (optional)
//          An image is anomalous when its mask exists and is non-empty.
//
// Manifests are JSON Lines: one header record, then one record per sample.
// Sizes are reported as (height, width).

#include "zsad/archive.hpp"
#include "zsad/core.hpp"
#include "zsad/image_ops.hpp"
#include "zsad/metrics.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace zsad {

namespace fs = std::filesystem;

enum class Layout { mvtec, flat };

inline Layout layout_from_string(const std::string& s)
{
    if (s == "mvtec") {
        return Layout::mvtec;
    }
    if (s == "flat" || s == "flat-with-masks") {
        return Layout::flat;
    }
    throw ConfigError("unknown dataset layout '" + s + "' (expected mvtec or flat)");
}

struct ManifestEntry {
    std::string image_path;
    std::string category;
    std::string split;
    int label = 0;
    std::optional<std::string> mask_path;
    bool flagged = false;

    bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
    std::string dataset_name;
    std::string layout = "mvtec";
    bool has_masks = true;
    bool localization_only = false;
    std::vector<ManifestEntry> entries;
    std::vector<std::string> validation_report;

    std::vector<std::string> categories() const
    {
        std::set<std::string> s;
        for (const auto& e : entries) {
            s.insert(e.category);
        }
        return {s.begin(), s.end()};
    }

    bool operator==(const DatasetManifest&) const = default;
};

namespace detail {

inline bool is_image_file(const fs::path& p)
{
    static const std::set<std::string> exts{".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"};
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return exts.count(e) > 0;
}

inline std::vector<fs::path> sorted_children(const fs::path& dir, bool dirs)
{
    std::vector<fs::path> out;
    if (!fs::is_directory(dir)) {
        return out;
    }
    for (const auto& e : fs::directory_iterator(dir)) {
        if (dirs ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline bool mask_nonempty(const fs::path& p)
{
    const cv::Mat m = cv::imread(p.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) {
        throw DataError("cannot decode mask " + p.string());
    }
    return cv::countNonZero(m) > 0;
}

inline void finalize_manifest(DatasetManifest& m)
{
    bool any_normal = false;
    bool any_anomalous = false;
    for (const auto& e : m.entries) {
        if (e.split == "test") {
            (e.label ? any_anomalous : any_normal) = true;
        }
    }
    m.localization_only = m.has_masks && any_anomalous && !any_normal;
}

}  // namespace detail

inline DatasetManifest scan_dataset(const fs::path& root, Layout layout, std::string name = {})
{
    if (!fs::is_directory(root)) {
        throw DataError("dataset root does not exist: " + root.string());
    }
    DatasetManifest m;
    m.dataset_name = name.empty() ? root.filename().string() : std::move(name);
    if (m.dataset_name.empty()) {
        m.dataset_name = root.parent_path().filename().string();
    }
    m.layout = layout == Layout::mvtec ? "mvtec" : "flat";

    if (layout == Layout::mvtec) {
        bool any_gt = false;
        for (const auto& cat : detail::sorted_children(root, true)) {
            any_gt = any_gt || fs::is_directory(cat / "ground_truth");
        }
        m.has_masks = any_gt;
        for (const auto& cat : detail::sorted_children(root, true)) {
            const std::string category = cat.filename().string();
            for (const std::string split : {"train", "test"}) {
                for (const auto& defect : detail::sorted_children(cat / split, true)) {
                    const std::string kind = defect.filename().string();
                    for (const auto& img : detail::sorted_children(defect, false)) {
                        ManifestEntry e{img.string(), category, split, kind == "good" ? 0 : 1, std::nullopt, false};
                        if (e.label == 1 && m.has_masks) {
                            const fs::path mask = cat / "ground_truth" / kind / (img.stem().string() + "_mask.png");
                            if (fs::exists(mask)) {
                                e.mask_path = mask.string();
                            } else {
                                e.flagged = true;
                                m.validation_report.push_back("missing mask for anomalous image " + img.string());
                            }
                        }
                        m.entries.push_back(std::move(e));
                    }
                }
            }
        }
    } else {
        m.has_masks = true;
        for (const auto& cat : detail::sorted_children(root, true)) {
            const std::string category = cat.filename().string();
            std::map<std::string, fs::path> masks;
            for (const auto& mp : detail::sorted_children(cat / "mask", false)) {
                masks[mp.stem().string()] = mp;
            }
            for (const auto& img : detail::sorted_children(cat / "image", false)) {
                ManifestEntry e{img.string(), category, "test", 0, std::nullopt, false};
                auto it = masks.find(img.stem().string());
                if (it != masks.end()) {
                    e.mask_path = it->second.string();
                    e.label = detail::mask_nonempty(it->second) ? 1 : 0;
                }
                m.entries.push_back(std::move(e));
            }
        }
    }
    if (m.entries.empty()) {
        throw DataError("no images found under " + root.string() + " for layout " + m.layout);
    }
    detail::finalize_manifest(m);
    return m;
}

inline std::string manifest_to_string(const DatasetManifest& m)
{
    std::ostringstream os;
    Json header = {{"record", "manifest"},
                   {"dataset", m.dataset_name},
                   {"layout", m.layout},
                   {"has_masks", m.has_masks},
                   {"localization_only", m.localization_only},
                   {"validation_report", m.validation_report}};
    os << header.dump() << '\n';
    for (const auto& e : m.entries) {
        Json j = {{"record", "sample"},      {"image", e.image_path}, {"category", e.category},
                  {"split", e.split},        {"label", e.label},
                  {"mask", e.mask_path ? Json(*e.mask_path) : Json(nullptr)}, {"flagged", e.flagged}};
        os << j.dump() << '\n';
    }
    return os.str();
}

inline DatasetManifest manifest_from_string(const std::string& text)
{
    std::istringstream is(text);
    std::string line;
    DatasetManifest m;
    bool header = false;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        Json j;
        try {
            j = Json::parse(line);
        } catch (const Json::exception& e) {
            throw DataError(detail::concat("manifest line ", lineno, ": ", e.what()));
        }
        const std::string kind = j.value("record", std::string());
        if (kind == "manifest") {
            m.dataset_name = j.at("dataset").get<std::string>();
            m.layout = j.value("layout", std::string("mvtec"));
            m.has_masks = j.value("has_masks", true);
            m.localization_only = j.value("localization_only", false);
            m.validation_report = j.value("validation_report", std::vector<std::string>{});
            header = true;
        } else if (kind == "sample") {
            ManifestEntry e;
            e.image_path = j.at("image").get<std::string>();
            e.category = j.at("category").get<std::string>();
            e.split = j.at("split").get<std::string>();
            e.label = j.at("label").get<int>();
            if (j.contains("mask") && !j.at("mask").is_null()) {
                e.mask_path = j.at("mask").get<std::string>();
            }
            e.flagged = j.value("flagged", false);
            m.entries.push_back(std::move(e));
        } else {
            throw DataError(detail::concat("manifest line ", lineno, ": unknown record type '", kind, "'"));
        }
    }
    if (!header) {
        throw DataError("manifest has no header record");
    }
    return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path)
{
    std::ofstream f(path, std::ios::trunc);
    if (!f) {
        throw DataError("cannot write manifest " + path.string());
    }
    f << manifest_to_string(m);
}

inline DatasetManifest load_manifest(const fs::path& path, bool check_paths = true)
{
    std::ifstream f(path);
    if (!f) {
        throw DataError("cannot read manifest " + path.string());
    }
    std::stringstream ss;
    ss << f.rdbuf();
    DatasetManifest m = manifest_from_string(ss.str());
    if (check_paths) {
        for (const auto& e : m.entries) {
            if (!fs::exists(e.image_path)) {
                throw DataError("manifest references a missing image: " + e.image_path);
            }
            if (e.mask_path && !fs::exists(*e.mask_path)) {
                throw DataError("manifest references a missing mask: " + *e.mask_path);
            }
        }
    }
    return m;
}

// ---------------------------------------------------------------------------
// Preprocessing

struct PreprocessSpec {
    int size = 518;
    std::array<double, 3> mean{0.48145466, 0.4578275, 0.40821073};
    std::array<double, 3> stdev{0.26862954, 0.26130258, 0.27577711};
};

struct PreprocessedImage {
    ImageTensor tensor;  // normalised, spec.size x spec.size
    int original_h = 0;
    int original_w = 0;
};

inline cv::Mat decode_image(const std::vector<unsigned char>& bytes, const std::string& what)
{
    cv::Mat img = cv::imdecode(bytes, cv::IMREAD_COLOR);
    if (img.empty()) {
        throw DataError("cannot decode image " + what);
    }
    return img;
}

inline std::vector<unsigned char> read_file_bytes(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    if (!f) {
        throw DataError("cannot read " + p.string());
    }
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// BGR 8-bit image -> normalised RGB tensor at spec.size (bilinear).
inline PreprocessedImage preprocess(const cv::Mat& bgr, const PreprocessSpec& spec)
{
    PreprocessedImage out;
    out.original_h = bgr.rows;
    out.original_w = bgr.cols;
    cv::Mat resized;
    if (bgr.rows == spec.size && bgr.cols == spec.size) {
        resized = bgr;
    } else {
        cv::resize(bgr, resized, cv::Size(spec.size, spec.size), 0, 0, cv::INTER_LINEAR);
    }
    ImageTensor& t = out.tensor;
    t.channels = 3;
    t.height = spec.size;
    t.width = spec.size;
    t.data.resize(static_cast<std::size_t>(3) * spec.size * spec.size);
    for (int y = 0; y < spec.size; ++y) {
        const auto* row = resized.ptr<cv::Vec3b>(y);
        for (int x = 0; x < spec.size; ++x) {
            for (int c = 0; c < 3; ++c) {
                const double v = row[x][2 - c] / 255.0;
                t.at(c, y, x) = (v - spec.mean[c]) / spec.stdev[c];
            }
        }
    }
    return out;
}

inline PreprocessedImage preprocess(const std::vector<unsigned char>& bytes, const PreprocessSpec& spec,
                                    const std::string& what = "<memory>")
{
    return preprocess(decode_image(bytes, what), spec);
}

inline PreprocessedImage preprocess_file(const fs::path& path, const PreprocessSpec& spec)
{
    return preprocess(read_file_bytes(path), spec, path.string());
}

/// Mask at (h, w) with nearest-neighbour resampling, canonicalised to {0, 1}.
inline Matrix load_mask(const fs::path& path, int h, int w)
{
    const cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (m.empty()) {
        throw DataError("cannot decode mask " + path.string());
    }
    Matrix raw(m.rows, m.cols);
    for (int y = 0; y < m.rows; ++y) {
        for (int x = 0; x < m.cols; ++x) {
            raw(y, x) = m.at<unsigned char>(y, x) > 127 ? 1.0 : 0.0;
        }
    }
    return (raw.rows() == h && raw.cols() == w) ? raw : resize_nearest(raw, h, w);
}

/// Image size (height, width) without keeping the decoded pixels.
inline std::pair<int, int> image_size(const fs::path& path)
{
    const cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) {
        throw DataError("cannot decode image " + path.string());
    }
    return {img.rows, img.cols};
}

// ---------------------------------------------------------------------------
// Export

inline Json cell_json(const MetricCell& c)
{
    return c.value ? Json(*c.value) : Json(nullptr);
}

/// JSON Lines: a run record, then one record per (dataset, category, metric)
/// in fixed metric order, the dataset mean under category "mean", and
/// footnotes. Undefined values are explicit nulls.
inline std::string results_to_string(const std::vector<DatasetReport>& reports, const Json& run_meta)
{
    std::ostringstream os;
    os << Json({{"record", "run"}, {"meta", run_meta}}).dump() << '\n';
    for (const auto& d : reports) {
        auto emit = [&](const std::string& category, const std::map<std::string, MetricCell>& cells) {
            for (const auto& m : metric_names()) {
                const MetricCell& c = cells.at(m);
                Json j = {{"record", "metric"}, {"dataset", d.dataset}, {"category", category},
                          {"metric", m},        {"value", cell_json(c)}};
                if (!c.note.empty()) {
                    j["note"] = c.note;
                }
                os << j.dump() << '\n';
            }
        };
        for (const auto& c : d.categories) {
            emit(c.category, c.cells);
        }
        emit("mean", d.mean);
        for (const auto& f : d.footnotes) {
            os << Json({{"record", "footnote"}, {"dataset", d.dataset}, {"text", f}}).dump() << '\n';
        }
    }
    return os.str();
}

inline fs::path export_results(const std::vector<DatasetReport>& reports, const fs::path& out_dir, const Json& run_meta)
{
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    const fs::path path = out_dir / "results.jsonl";
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    if (!f) {
        throw DataError("cannot write results to " + path.string());
    }
    f << results_to_string(reports, run_meta);
    if (!f) {
        throw DataError("failed writing " + path.string());
    }
    return path;
}

/// Heat overlay: out = (1 - a) * image + a * jet(map) with a = 0.5 * map,
/// plus the ground-truth contour in green when a mask is given. `map` must
/// match the image size.
inline cv::Mat render_overlay(const cv::Mat& bgr, const Matrix& map, const Matrix* mask = nullptr)
{
    if (map.rows() != bgr.rows || map.cols() != bgr.cols) {
        throw ConfigError("overlay map " + shape_str(map) + " does not match image " + std::to_string(bgr.rows) + "x" +
                          std::to_string(bgr.cols));
    }
    cv::Mat gray(bgr.rows, bgr.cols, CV_8UC1);
    for (int y = 0; y < bgr.rows; ++y) {
        for (int x = 0; x < bgr.cols; ++x) {
            gray.at<unsigned char>(y, x) = cv::saturate_cast<unsigned char>(std::clamp(map(y, x), 0.0, 1.0) * 255.0);
        }
    }
    cv::Mat heat;
    cv::applyColorMap(gray, heat, cv::COLORMAP_JET);
    cv::Mat out = bgr.clone();
    for (int y = 0; y < bgr.rows; ++y) {
        for (int x = 0; x < bgr.cols; ++x) {
            const double a = 0.5 * std::clamp(map(y, x), 0.0, 1.0);
            if (a <= 0.0) {
                continue;
            }
            for (int c = 0; c < 3; ++c) {
                out.at<cv::Vec3b>(y, x)[c] = cv::saturate_cast<unsigned char>((1.0 - a) * bgr.at<cv::Vec3b>(y, x)[c] +
                                                                               a * heat.at<cv::Vec3b>(y, x)[c]);
            }
        }
    }
    if (mask) {
        cv::Mat m(bgr.rows, bgr.cols, CV_8UC1);
        for (int y = 0; y < bgr.rows; ++y) {
            for (int x = 0; x < bgr.cols; ++x) {
                m.at<unsigned char>(y, x) = (*mask)(y, x) > 0.5 ? 255 : 0;
            }
        }
        std::vector<std::vector<cv::Point>> contours;
        cv::findContours(m, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_NONE);
        cv::drawContours(out, contours, -1, cv::Scalar(0, 255, 0), 1);
    }
    return out;
}

inline void export_overlay(const cv::Mat& bgr, const Matrix& map, const Matrix* mask, const fs::path& out_path)
{
    if (out_path.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(out_path.parent_path(), ec);
    }
    const cv::Mat out = render_overlay(bgr, map, mask);
    bool ok = false;
    try {
        ok = cv::imwrite(out_path.string(), out);
    } catch (const cv::Exception& e) {
        throw DataError("cannot write overlay " + out_path.string() + ": " + e.what());
    }
    if (!ok) {
        throw DataError("cannot write overlay " + out_path.string());
    }
}

}  // namespace zsad
