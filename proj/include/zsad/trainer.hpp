/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include "zsad/archive.hpp"
#include "zsad/autograd.hpp"
#include "zsad/core.hpp"
#include "zsad/data_io.hpp"
#include "zsad/model.hpp"
#include "zsad/prompt_bank.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace zsad {

struct TrainConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.6;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int batch_size = 8;
    int epochs = 5;
    int max_steps = 0;  // 0 = no cap
    std::uint64_t seed = 111;
    std::string split = "test";
    int mask_size = 0;  // training mask resolution; 0 = model input size
};

/// Adam with bias correction, one moment pair per bank tensor.
class Adam {
public:
    explicit Adam(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(PromptBank& bank, const std::vector<Matrix>& grads)
    {
        auto params = bank.named_parameters();
        if (m_.empty()) {
            for (const auto& [name, p] : params) {
                m_.push_back(Matrix::Zero(p->rows(), p->cols()));
                v_.push_back(Matrix::Zero(p->rows(), p->cols()));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const Matrix& g = grads[i];
            if (g.size() == 0) {
                continue;
            }
            m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
            v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
            const Matrix denom = ((v_[i] / bc2).cwiseSqrt().array() + cfg_.adam_eps).matrix();
            *params[i].second -= (cfg_.learning_rate / bc1) * m_[i].cwiseQuotient(denom);
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
    int t_ = 0;
};

struct TrainSample {
    std::string id;
    ImageFeatures features;
    PixelTargets targets;
};

/// Extracts frozen features once per image of the training split. Masks are
/// resized (nearest) to the training mask resolution.
inline std::vector<TrainSample> prepare_training_set(const AnomalyModel& model, const DatasetManifest& manifest,
                                                     const PreprocessSpec& spec, const TrainConfig& cfg)
{
    const int ms = cfg.mask_size > 0 ? cfg.mask_size : spec.size;
    std::vector<TrainSample> out;
    for (const auto& e : manifest.entries) {
        if (e.split != cfg.split) {
            continue;
        }
        if (e.label == 1 && !e.mask_path) {
            throw DataError("anomalous training image has no mask (local loss needs masks): " + e.image_path);
        }
        const PreprocessedImage img = preprocess_file(e.image_path, spec);
        TrainSample s;
        s.id = e.image_path;
        s.features = model.features(img.tensor);
        s.targets.image_label = e.label;
        s.targets.mask = e.mask_path ? load_mask(*e.mask_path, ms, ms) : Matrix(Matrix::Zero(ms, ms));
        if (e.label == 0 && s.targets.mask.sum() > 0.0) {
            throw DataError("normal image has anomalous mask pixels: " + e.image_path);
        }
        out.push_back(std::move(s));
    }
    if (out.empty()) {
        throw DataError("no training samples in split '" + cfg.split + "' of " + manifest.dataset_name);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
    PromptBank bank;
    Json config = Json::object();
    std::string backbone_id;
    std::string code_version;
    int step = 0;
};

inline void save_checkpoint(const PromptBank& bank, const Json& config, const std::string& backbone_id, int step,
                            const std::filesystem::path& path)
{
    TensorArchive a = bank_to_archive(bank);
    Json prompt = a.meta;
    a.meta = {{"kind", "prompt_checkpoint"},
              {"code_version", std::string(kCodeVersion)},
              {"backbone", backbone_id},
              {"step", step},
              {"prompt", prompt},
              {"config", config}};
    a.save(path);
}

/// Loads and validates a checkpoint. Empty `expected_backbone` skips the
/// backbone check; a null `expected` skips the E/M/J check.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_backbone = {},
                                  const PromptConfig* expected = nullptr)
{
    const TensorArchive a = TensorArchive::load(path);
    if (a.meta.value("kind", std::string()) != "prompt_checkpoint") {
        throw DataError("not a prompt checkpoint: " + path.string());
    }
    Checkpoint c;
    c.backbone_id = a.meta.at("backbone").get<std::string>();
    c.code_version = a.meta.value("code_version", std::string());
    c.step = a.meta.value("step", 0);
    c.config = a.meta.value("config", Json::object());
    if (!expected_backbone.empty() && c.backbone_id != expected_backbone) {
        throw ConfigError("checkpoint field 'backbone' is '" + c.backbone_id + "', current backbone is '" +
                          expected_backbone + "'");
    }
    c.bank = bank_from_archive(a, a.meta.at("prompt"));
    if (expected) {
        const PromptConfig& got = c.bank.config;
        auto check = [](const char* field, int have, int want) {
            if (have != want) {
                throw ConfigError(detail::concat("checkpoint field '", field, "' is ", have, ", configuration expects ", want));
            }
        };
        check("prompt_tokens", got.prompt_tokens, expected->prompt_tokens);
        check("deep_tokens", got.deep_tokens, expected->deep_tokens);
        check("deep_layers", got.deep_layers, expected->deep_layers);
        check("context_conditioning", got.context_conditioning, expected->context_conditioning);
    }
    return c;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    PromptBank bank;
    std::filesystem::path final_checkpoint;
    std::filesystem::path best_checkpoint;
    std::vector<double> step_losses;
    int steps = 0;
};

struct StepLog {
    int step = 0;
    int epoch = 0;
    double loss = 0.0;
    double global = 0.0;
    double local = 0.0;
};

/// Optimises the prompt bank. Writes train_log.jsonl plus final and best
/// (lowest mean epoch loss) checkpoints into `out_dir`.
inline TrainResult train(const AnomalyModel& model, PromptBank bank, const std::vector<TrainSample>& samples,
                         const TrainConfig& cfg, const std::filesystem::path& out_dir, const Json& config_echo = Json::object(),
                         const std::function<void(const StepLog&)>& on_step = {})
{
    if (cfg.batch_size < 1 || cfg.epochs < 0 || cfg.learning_rate <= 0.0) {
        throw ConfigError("invalid training configuration (batch_size >= 1, epochs >= 0, learning_rate > 0)");
    }
    std::filesystem::create_directories(out_dir);
    std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);

    TrainResult r;
    r.final_checkpoint = out_dir / "checkpoint_final.zck";
    r.best_checkpoint = out_dir / "checkpoint_best.zck";
    const std::string backbone_id = model.backbone().id;
    save_checkpoint(bank, config_echo, backbone_id, 0, r.best_checkpoint);

    Adam adam(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    double best = std::numeric_limits<double>::infinity();
    bool capped = false;

    for (int epoch = 0; epoch < cfg.epochs && !capped; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const BankVars vars = bind(bank, true);
            ag::Var total;
            StepLog entry{r.steps + 1, epoch, 0.0, 0.0, 0.0};
            for (std::size_t i = start; i < end; ++i) {
                LossBreakdown br;
                const auto& s = samples[order[i]];
                ag::Var l = model.loss(vars, bank, s.features, s.targets, &br);
                total = total ? ag::add(total, l) : l;
                entry.global += br.global;
                for (const auto& [b, v] : br.local) {
                    entry.local += v;
                }
            }
            const double n = static_cast<double>(end - start);
            total = ag::scale(total, 1.0 / n);
            ag::backward(total);

            std::vector<Matrix> grads;
            for (const auto& v : vars.all()) {
                grads.push_back(v.grad().size() ? v.grad() : Matrix(Matrix::Zero(v.rows(), v.cols())));
            }
            adam.step(bank, grads);

            entry.loss = total.scalar();
            entry.global /= n;
            entry.local /= n;
            r.step_losses.push_back(entry.loss);
            ++r.steps;
            epoch_loss += entry.loss * n;
            log << Json({{"step", entry.step}, {"epoch", entry.epoch}, {"loss", entry.loss},
                         {"global", entry.global}, {"local", entry.local}})
                       .dump()
                << '\n';
            if (on_step) {
                on_step(entry);
            }
            if (cfg.max_steps > 0 && r.steps >= cfg.max_steps) {
                capped = true;
                break;
            }
        }
        epoch_loss /= static_cast<double>(samples.size());
        if (epoch_loss < best) {
            best = epoch_loss;
            save_checkpoint(bank, config_echo, backbone_id, r.steps, r.best_checkpoint);
        }
    }
    save_checkpoint(bank, config_echo, backbone_id, r.steps, r.final_checkpoint);
    r.bank = std::move(bank);
    return r;
}

}  // namespace zsad
