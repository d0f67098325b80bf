/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Synthetic defect datasets: near-uniform squares, with elliptical blobs of
// contrasting intensity inserted into the anomalous ones. Written in the
// mvtec layout so the normal ingestion path is exercised.

#include "zsad/core.hpp"
#include "zsad/data_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

namespace zsad {

struct SyntheticSpec {
    std::string category = "squares";
    int image_size = 32;
    int normal_count = 32;
    int anomalous_count = 32;
    int train_normal_count = 0;  // extra defect-free images under train/good
    double noise = 0.02;
    double base_low = 0.4;  // normal gray level range
    double base_high = 0.6;
    double blob_shift = 0.35;  // |intensity change| inside a blob
    bool bipolar = false;      // true: blobs darker or brighter at random; false: always darker
    double blob_min_radius = 0.125;  // fractions of the image side
    double blob_max_radius = 0.2;
    std::uint64_t seed = 7;
};

struct SyntheticImage {
    cv::Mat bgr;
    cv::Mat mask;  // 8-bit, 0 or 255
};

inline SyntheticImage make_synthetic_image(std::mt19937_64& rng, const SyntheticSpec& spec, bool anomalous)
{
    const int size = spec.image_size;
    std::uniform_real_distribution<double> base(spec.base_low, spec.base_high);
    std::uniform_real_distribution<double> tint(-0.05, 0.05);
    std::normal_distribution<double> grain(0.0, spec.noise);
    const double b = base(rng);
    const double bgr_level[3] = {b + tint(rng), b + tint(rng), b + tint(rng)};

    SyntheticImage out{cv::Mat(size, size, CV_8UC3), cv::Mat::zeros(size, size, CV_8UC1)};
    if (anomalous) {
        const int margin = std::max(3, size / 6);
        std::uniform_int_distribution<int> centre(margin, size - 1 - margin);
        const int r_lo = std::max(1, static_cast<int>(std::lround(spec.blob_min_radius * size)));
        std::uniform_int_distribution<int> radius(r_lo, std::max(r_lo, static_cast<int>(std::lround(spec.blob_max_radius * size))));
        std::uniform_real_distribution<double> angle(0.0, 180.0);
        const cv::Point c(centre(rng), centre(rng));
        const cv::Size axes(radius(rng), radius(rng));
        cv::ellipse(out.mask, c, axes, angle(rng), 0.0, 360.0, cv::Scalar(255), cv::FILLED);
    }
    std::bernoulli_distribution dark(0.5);
    const bool darker = dark(rng) || !spec.bipolar;
    const double shift = anomalous ? (darker ? -spec.blob_shift : spec.blob_shift) : 0.0;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const bool in_blob = out.mask.at<unsigned char>(y, x) > 0;
            for (int ch = 0; ch < 3; ++ch) {
                const double v = bgr_level[ch] + (in_blob ? shift : 0.0) + grain(rng);
                out.bgr.at<cv::Vec3b>(y, x)[ch] = cv::saturate_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0);
            }
        }
    }
    return out;
}

/// Writes <root>/<category>/{train/good, test/good, test/blob,
/// ground_truth/blob} and returns the scanned manifest.
inline DatasetManifest write_synthetic_dataset(const std::filesystem::path& root, const SyntheticSpec& spec)
{
    namespace fs = std::filesystem;
    const fs::path cat = root / spec.category;
    for (const char* d : {"train/good", "test/good", "test/blob", "ground_truth/blob"}) {
        fs::create_directories(cat / d);
    }
    std::mt19937_64 rng(spec.seed);
    char name[32];
    auto write = [](const fs::path& p, const cv::Mat& m) {
        if (!cv::imwrite(p.string(), m)) {
            throw DataError("cannot write " + p.string());
        }
    };
    for (int i = 0; i < spec.train_normal_count; ++i) {
        std::snprintf(name, sizeof(name), "%03d", i);
        write(cat / "train/good" / (std::string(name) + ".png"), make_synthetic_image(rng, spec, false).bgr);
    }
    for (int i = 0; i < spec.normal_count; ++i) {
        std::snprintf(name, sizeof(name), "%03d", i);
        write(cat / "test/good" / (std::string(name) + ".png"), make_synthetic_image(rng, spec, false).bgr);
    }
    for (int i = 0; i < spec.anomalous_count; ++i) {
        std::snprintf(name, sizeof(name), "%03d", i);
        const SyntheticImage img = make_synthetic_image(rng, spec, true);
        write(cat / "test/blob" / (std::string(name) + ".png"), img.bgr);
        write(cat / "ground_truth/blob" / (std::string(name) + "_mask.png"), img.mask);
    }
    return scan_dataset(root, Layout::mvtec, root.filename().string());
}

}  // namespace zsad
