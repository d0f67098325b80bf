/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "zsad/backbone_adapter.hpp"
#include "zsad/config.hpp"
#include "zsad/core.hpp"
#include "zsad/data_io.hpp"
#include "zsad/metrics.hpp"
#include "zsad/model.hpp"
#include "zsad/prompt_bank.hpp"
#include "zsad/spatial_guide.hpp"

#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace zsad {

/// "standin:<preset>" builds a stand-in; anything else is an archive path.
inline Backbone resolve_backbone(const std::string& spec)
{
    if (spec.empty()) {
        throw ConfigError("setting 'backbone' is required (archive path or standin:<tiny|small>)");
    }
    if (spec.rfind("standin:", 0) == 0) {
        return make_standin_backbone(StandinSpec::preset(spec.substr(8)));
    }
    if (!std::filesystem::exists(spec)) {
        throw ConfigError("backbone archive not found: " + spec);
    }
    return load_backbone(spec);
}

inline std::shared_ptr<const SpatialEncoder> resolve_spatial_encoder(const std::string& spec, const VisionTower& tower)
{
    if (spec.empty()) {
        return nullptr;
    }
    if (spec == "pixel") {
        return std::make_shared<PixelPatchEncoder>(tower.patch_px);
    }
    if (!std::filesystem::exists(spec)) {
        throw ConfigError("spatial encoder archive not found: " + spec);
    }
    return VitSpatialEncoder::load(spec);
}

inline AnomalyModel build_model(const Settings& s)
{
    Backbone b = resolve_backbone(s.get("backbone"));
    auto spatial = resolve_spatial_encoder(s.get("spatial_encoder"), b.vision);
    return AnomalyModel(std::move(b), std::move(spatial), model_config(s));
}

/// Checkpoint's E/M/J and backbone must match the current settings.
inline PromptBank load_compatible_bank(const std::filesystem::path& path, const AnomalyModel& model, const Settings& s)
{
    const PromptConfig expected = prompt_config(s);
    return load_checkpoint(path, model.backbone().id, &expected).bank;
}

inline MapF to_mapf(const Matrix& m)
{
    return m.cast<float>();
}

struct Prediction {
    AnomalyResult result;
    int original_h = 0;
    int original_w = 0;
};

/// Map rendered at the image's original resolution.
inline Prediction predict_image(const AnomalyModel& model, const PromptBank& bank, const PreprocessSpec& spec,
                                const std::filesystem::path& image_path)
{
    const PreprocessedImage img = preprocess_file(image_path, spec);
    Prediction p;
    p.original_h = img.original_h;
    p.original_w = img.original_w;
    p.result = model.infer(bank, model.features(img.tensor), img.original_h, img.original_w, image_path.string());
    return p;
}

struct EvalRun {
    std::vector<EvalRecord> records;
    std::vector<std::string> failures;  // per-file errors; the batch continues
};

struct EvalOptions {
    std::string split = "test";
    int workers = 1;
    /// Called once per category, in category order, after its images finish.
    std::function<void(const EvalRecord&)> on_category;
    bool keep_records = true;
    /// Called per image with its prediction; calls are serialised.
    std::function<void(const ManifestEntry&, const Prediction&)> on_image;
};

/// Records ordered by category name, images in manifest order, regardless
/// of worker count.
inline EvalRun evaluate_manifest(const AnomalyModel& model, const PromptBank& bank, const DatasetManifest& manifest,
                                 const PreprocessSpec& spec, const EvalOptions& opt = {})
{
    EvalRun run;
    std::mutex mu;
    for (const auto& category : manifest.categories()) {
        std::vector<const ManifestEntry*> items;
        for (const auto& e : manifest.entries) {
            if (e.category == category && e.split == opt.split) {
                items.push_back(&e);
            }
        }
        if (items.empty()) {
            continue;
        }
        std::vector<std::optional<Prediction>> preds(items.size());
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i = next++; i < items.size(); i = next++) {
                try {
                    Prediction p = predict_image(model, bank, spec, items[i]->image_path);
                    if (opt.on_image) {
                        std::lock_guard<std::mutex> lock(mu);
                        opt.on_image(*items[i], p);
                    }
                    preds[i] = std::move(p);
                } catch (const DataError& e) {
                    std::lock_guard<std::mutex> lock(mu);
                    run.failures.push_back(items[i]->image_path + ": " + e.what());
                }
            }
        };
        const int workers = std::max(1, std::min<int>(opt.workers, static_cast<int>(items.size())));
        if (workers == 1) {
            work();
        } else {
            std::vector<std::thread> pool;
            for (int w = 0; w < workers; ++w) {
                pool.emplace_back(work);
            }
            for (auto& t : pool) {
                t.join();
            }
        }

        EvalRecord rec;
        rec.dataset = manifest.dataset_name;
        rec.category = category;
        rec.image_metrics = !manifest.localization_only;
        rec.pixel_metrics = manifest.has_masks;
        for (std::size_t i = 0; i < items.size(); ++i) {
            if (!preds[i]) {
                continue;
            }
            const ManifestEntry& e = *items[i];
            const Prediction& p = *preds[i];
            rec.image_scores.push_back(p.result.score);
            rec.image_labels.push_back(e.label);
            if (!manifest.has_masks || e.flagged) {
                continue;
            }
            rec.maps.push_back(to_mapf(p.result.map));
            rec.masks.push_back(e.mask_path ? to_mapf(load_mask(*e.mask_path, p.original_h, p.original_w))
                                            : MapF(MapF::Zero(p.original_h, p.original_w)));
        }
        if (opt.on_category) {
            opt.on_category(rec);
        }
        if (opt.keep_records) {
            run.records.push_back(std::move(rec));
        }
    }
    std::sort(run.failures.begin(), run.failures.end());
    return run;
}

}  // namespace zsad
