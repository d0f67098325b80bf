/*
 * Copyright (C) 2026 zsad contributors
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

// Subcommand driver behind tools/zsad. Settings precedence, lowest first:
// registry defaults, checkpoint echo (eval/predict), --config file, --set
// assignments, dedicated flags.

#include "zsad/backbone_adapter.hpp"
#include "zsad/config.hpp"
#include "zsad/core.hpp"
#include "zsad/data_io.hpp"
#include "zsad/metrics.hpp"
#include "zsad/pipeline.hpp"
#include "zsad/synthetic.hpp"
#include "zsad/trainer.hpp"

#include <CLI11.hpp>

#include <opencv2/imgcodecs.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace zsad::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

struct SettingFlags {
    std::string config_file;
    std::vector<std::string> assignments;
    std::string backbone;
    std::string branches;
    std::string self_correlation;
    std::optional<long long> seed;
    std::optional<int> workers;
    bool no_fusion = false;
    bool no_context = false;
    bool no_smooth = false;
};

inline void add_setting_flags(CLI::App* sub, SettingFlags& f)
{
    sub->add_option("--config", f.config_file, "flat key=value config file");
    sub->add_option("--set", f.assignments, "override one setting, key=value (repeatable)");
    sub->add_option("--backbone", f.backbone, "backbone archive or standin:<tiny|small>");
    sub->add_option("--branches", f.branches, "local branches, e.g. e_attn or e_attn,d_attn");
    sub->add_option("--self-correlation", f.self_correlation, "self-correlation terms, e.g. qq+kk+vv");
    sub->add_option("--seed", f.seed, "random seed");
    sub->add_option("--workers", f.workers, "evaluation worker threads");
    sub->add_flag("--no-fusion", f.no_fusion, "disable local-to-global fusion");
    sub->add_flag("--no-context", f.no_context, "disable context-conditioned prompts");
    sub->add_flag("--no-smooth", f.no_smooth, "skip gaussian smoothing of maps");
}

inline Settings resolve_settings(const SettingFlags& f, const Json* base = nullptr)
{
    Settings s;
    if (base) {
        for (const auto& [k, v] : base->items()) {
            if (Settings::known(k)) {
                s.set(k, v.get<std::string>());
            }
        }
    }
    if (!f.config_file.empty()) {
        s.merge_file(f.config_file);
    }
    for (const auto& a : f.assignments) {
        s.assign(a);
    }
    if (!f.backbone.empty()) {
        s.set("backbone", f.backbone);
    }
    if (!f.branches.empty()) {
        s.set("branches", f.branches);
    }
    if (!f.self_correlation.empty()) {
        s.set("self_correlation", f.self_correlation);
    }
    if (f.seed) {
        s.set("seed", std::to_string(*f.seed));
    }
    if (f.workers) {
        s.set("workers", std::to_string(*f.workers));
    }
    if (f.no_fusion) {
        s.set("fusion", "false");
    }
    if (f.no_context) {
        s.set("context_conditioning", "false");
    }
    if (f.no_smooth) {
        s.set("smooth", "false");
    }
    return s;
}

inline void require_file(const std::string& path, const char* what)
{
    if (path.empty() || !fs::exists(path)) {
        throw ConfigError(std::string(what) + " not found: '" + path + "'");
    }
}

inline void write_json(const fs::path& path, const Json& j)
{
    std::ofstream f(path, std::ios::trunc | std::ios::binary);
    f << j.dump(2) << '\n';
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
}

inline Json run_metadata(const std::string& command, const Settings& s, Json inputs)
{
    return {{"command", command},
            {"code_version", std::string(kCodeVersion)},
            {"seed", s.get("seed")},
            {"inputs", std::move(inputs)},
            {"settings", s.to_json()}};
}

inline std::string format_cell(const MetricCell& c)
{
    if (!c.value) {
        return "n/a";
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", *c.value);
    return buf;
}

inline void print_metrics(std::ostream& out, const std::string& dataset, const CategoryMetrics& c)
{
    out << dataset << '/' << c.category;
    for (const auto& m : metric_names()) {
        out << ' ' << m << '=' << format_cell(c.cells.at(m));
    }
    out << '\n';
}

// ---------------------------------------------------------------------------
// Commands

struct TrainArgs {
    std::string source;
    std::string out;
    std::optional<int> epochs;
    std::optional<int> max_steps;
    int log_every = 10;
};

inline fs::path run_train(const TrainArgs& a, const Settings& s, std::ostream& out)
{
    require_file(a.source, "source manifest");
    const AnomalyModel model = build_model(s);
    const PreprocessSpec prep = preprocess_spec(s, model.backbone().vision);
    const TrainConfig tc = train_config(s);
    const PromptConfig pc = prompt_config(s);
    const DatasetManifest manifest = load_manifest(a.source);

    const std::uint64_t frozen_before = model.backbone().checksum();
    PromptBank bank = init_params(model.backbone().text, model.backbone().vision.out_dim, pc, tc.seed);
    const std::vector<TrainSample> samples = prepare_training_set(model, manifest, prep, tc);
    out << "training on " << samples.size() << " images from " << manifest.dataset_name << '\n';

    const TrainResult r = train(model, std::move(bank), samples, tc, a.out, s.to_json(), [&](const StepLog& l) {
        if (a.log_every > 0 && l.step % a.log_every == 0) {
            out << "step " << l.step << " epoch " << l.epoch << " loss " << l.loss << '\n';
        }
    });
    if (model.backbone().checksum() != frozen_before) {
        throw Error("frozen backbone changed during training");
    }
    write_json(fs::path(a.out) / "run.json",
               run_metadata("train", s, {{"source", a.source}, {"steps", r.steps}}));
    out << "checkpoint: " << r.final_checkpoint.string() << '\n';
    return r.final_checkpoint;
}

struct EvalArgs {
    std::string checkpoint;
    std::vector<std::string> manifests;
    std::string out;
    std::string overlay_dir;
    std::string split = "test";
};

inline std::vector<DatasetReport> run_eval(const EvalArgs& a, const Settings& s, std::ostream& out, std::ostream& err)
{
    const AnomalyModel model = build_model(s);
    const PromptBank bank = load_compatible_bank(a.checkpoint, model, s);
    const PreprocessSpec prep = preprocess_spec(s, model.backbone().vision);
    const AuproOptions aupro_opt = aupro_options(s);

    std::vector<DatasetReport> reports;
    for (const auto& path : a.manifests) {
        require_file(path, "manifest");
        const DatasetManifest manifest = load_manifest(path);
        DatasetReport report{manifest.dataset_name, {}, {}, {}};
        EvalOptions opt;
        opt.split = a.split;
        opt.workers = static_cast<int>(s.get_int("workers"));
        opt.keep_records = false;
        opt.on_category = [&](const EvalRecord& rec) {
            report.categories.push_back(evaluate_record(rec, aupro_opt));
            print_metrics(out, report.dataset, report.categories.back());
        };
        if (!a.overlay_dir.empty()) {
            opt.on_image = [&](const ManifestEntry& e, const Prediction& p) {
                const cv::Mat bgr = cv::imread(e.image_path, cv::IMREAD_COLOR);
                std::optional<Matrix> mask;
                if (e.mask_path) {
                    mask = load_mask(*e.mask_path, p.original_h, p.original_w);
                }
                const fs::path target = fs::path(a.overlay_dir) / manifest.dataset_name / e.category /
                                        (fs::path(e.image_path).parent_path().filename().string() + "_" +
                                         fs::path(e.image_path).stem().string() + ".png");
                export_overlay(bgr, p.result.map, mask ? &*mask : nullptr, target);
            };
        }
        const EvalRun run = evaluate_manifest(model, bank, manifest, prep, opt);
        for (const auto& f : run.failures) {
            err << "error: " << f << '\n';
        }
        if (report.categories.empty()) {
            throw DataError("no evaluable images in split '" + a.split + "' of " + path);
        }
        finalize_report(report);
        print_metrics(out, report.dataset, CategoryMetrics{"mean", report.mean});
        reports.push_back(std::move(report));
    }
    const Json meta = run_metadata("eval", s, {{"checkpoint", a.checkpoint}, {"manifests", a.manifests}});
    const fs::path results = export_results(reports, a.out, meta);
    write_json(fs::path(a.out) / "run.json", meta);
    out << "results: " << results.string() << '\n';
    return reports;
}

struct PredictArgs {
    std::string checkpoint;
    std::string image;
    std::string overlay;
};

inline double run_predict(const PredictArgs& a, const Settings& s, std::ostream& out)
{
    const AnomalyModel model = build_model(s);
    const PromptBank bank = load_compatible_bank(a.checkpoint, model, s);
    const PreprocessSpec prep = preprocess_spec(s, model.backbone().vision);
    const Prediction p = predict_image(model, bank, prep, a.image);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "score: %.6f", p.result.score);
    out << buf << '\n';
    if (!a.overlay.empty()) {
        const cv::Mat bgr = cv::imread(a.image, cv::IMREAD_COLOR);
        export_overlay(bgr, p.result.map, nullptr, a.overlay);
        out << "overlay: " << a.overlay << '\n';
    }
    return p.result.score;
}

struct Variant {
    std::string name;
    std::vector<std::string> assignments;
};

/// "name:key=value;key=value"
inline Variant parse_variant(const std::string& text)
{
    const auto colon = text.find(':');
    Variant v{text.substr(0, colon), {}};
    if (v.name.empty()) {
        throw ConfigError("ablation variant needs a name: '" + text + "'");
    }
    if (colon != std::string::npos) {
        std::istringstream is(text.substr(colon + 1));
        std::string tok;
        while (std::getline(is, tok, ';')) {
            if (!tok.empty()) {
                v.assignments.push_back(tok);
            }
        }
    }
    return v;
}

/// Self-correlation subsets, fusion, context conditioning and branch set.
inline std::vector<Variant> default_variants()
{
    return {{"full", {}},
            {"vv", {"self_correlation=vv"}},
            {"kk+vv", {"self_correlation=kk+vv"}},
            {"no_fusion", {"fusion=false"}},
            {"no_context", {"context_conditioning=false"}}};
}

struct AblateArgs {
    std::string source;
    std::vector<std::string> manifests;
    std::string out;
    std::vector<std::string> variants;
};

inline void run_ablate(const AblateArgs& a, const SettingFlags& flags, std::ostream& out, std::ostream& err)
{
    std::vector<Variant> variants;
    for (const auto& t : a.variants) {
        variants.push_back(parse_variant(t));
    }
    if (variants.empty()) {
        variants = default_variants();
    }
    fs::create_directories(a.out);
    std::ofstream summary(fs::path(a.out) / "ablation.jsonl", std::ios::trunc | std::ios::binary);
    for (const auto& v : variants) {
        Settings s = resolve_settings(flags);
        for (const auto& asg : v.assignments) {
            s.assign(asg);
        }
        const fs::path dir = fs::path(a.out) / v.name;
        out << "== variant " << v.name << '\n';
        const fs::path ckpt = run_train({a.source, dir.string(), std::nullopt, std::nullopt, 0}, s, out);
        const auto reports = run_eval({ckpt.string(), a.manifests, dir.string(), {}, "test"}, s, out, err);
        for (const auto& d : reports) {
            for (const auto& m : metric_names()) {
                summary << Json({{"variant", v.name}, {"overrides", v.assignments}, {"dataset", d.dataset},
                                 {"metric", m}, {"mean", cell_json(d.mean.at(m))}})
                               .dump()
                        << '\n';
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    CLI::App app{"zero-shot anomaly detection: train, evaluate and predict", "zsad"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kCodeVersion));

    SettingFlags flags;
    TrainArgs train_args;
    EvalArgs eval_args;
    PredictArgs predict_args;
    AblateArgs ablate_args;

    CLI::App* train_cmd = app.add_subcommand("train", "optimise the prompt bank on a source manifest");
    add_setting_flags(train_cmd, flags);
    train_cmd->add_option("--source", train_args.source, "training manifest (jsonl)")->required();
    train_cmd->add_option("--out", train_args.out, "output directory")->required();
    train_cmd->add_option("--epochs", train_args.epochs, "passes over the training split");
    train_cmd->add_option("--max-steps", train_args.max_steps, "step cap");
    train_cmd->add_option("--log-every", train_args.log_every, "print the loss every N steps");

    CLI::App* eval_cmd = app.add_subcommand("eval", "score manifests and write results.jsonl");
    add_setting_flags(eval_cmd, flags);
    eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "prompt checkpoint")->required();
    eval_cmd->add_option("--manifest", eval_args.manifests, "target manifest (repeatable)")->required();
    eval_cmd->add_option("--out", eval_args.out, "output directory")->required();
    eval_cmd->add_option("--overlays", eval_args.overlay_dir, "write per-image overlays here");
    eval_cmd->add_option("--split", eval_args.split, "manifest split to evaluate");

    CLI::App* predict_cmd = app.add_subcommand("predict", "score one image");
    add_setting_flags(predict_cmd, flags);
    predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "prompt checkpoint")->required();
    predict_cmd->add_option("--image", predict_args.image, "input image")->required();
    predict_cmd->add_option("--overlay", predict_args.overlay, "overlay output path (png)");

    CLI::App* ablate_cmd = app.add_subcommand("ablate", "train and evaluate a set of configuration variants");
    add_setting_flags(ablate_cmd, flags);
    ablate_cmd->add_option("--source", ablate_args.source, "training manifest")->required();
    ablate_cmd->add_option("--manifest", ablate_args.manifests, "target manifest (repeatable)")->required();
    ablate_cmd->add_option("--out", ablate_args.out, "output directory")->required();
    ablate_cmd->add_option("--variant", ablate_args.variants, "name:key=value;key=value (repeatable)");

    std::string scan_root;
    std::string scan_layout = "mvtec";
    std::string scan_name;
    std::string scan_out;
    CLI::App* scan_cmd = app.add_subcommand("scan", "build a manifest from a dataset directory");
    scan_cmd->add_option("--root", scan_root, "dataset root")->required();
    scan_cmd->add_option("--layout", scan_layout, "mvtec or flat");
    scan_cmd->add_option("--name", scan_name, "dataset name (default: root directory name)");
    scan_cmd->add_option("--out", scan_out, "manifest path")->required();

    SyntheticSpec synth;
    std::string synth_root;
    CLI::App* synth_cmd = app.add_subcommand("synth", "write a synthetic defect dataset and its manifest");
    synth_cmd->add_option("--root", synth_root, "output root")->required();
    synth_cmd->add_option("--category", synth.category, "category name");
    synth_cmd->add_option("--size", synth.image_size, "image side in pixels");
    synth_cmd->add_option("--normal", synth.normal_count, "defect-free test images");
    synth_cmd->add_option("--anomalous", synth.anomalous_count, "defective test images");
    synth_cmd->add_option("--train-normal", synth.train_normal_count, "defect-free train images");
    synth_cmd->add_option("--noise", synth.noise, "pixel noise standard deviation");
    synth_cmd->add_option("--seed", synth.seed, "generator seed");

    std::string preset = "tiny";
    std::uint64_t init_seed = 0;
    std::string init_out;
    CLI::App* init_cmd = app.add_subcommand("init-backbone", "write a randomly initialised stand-in backbone archive");
    init_cmd->add_option("--preset", preset, "tiny or small");
    init_cmd->add_option("--seed", init_seed, "initialisation seed");
    init_cmd->add_option("--out", init_out, "archive path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (train_cmd->parsed()) {
            if (train_args.epochs) {
                flags.assignments.push_back("epochs=" + std::to_string(*train_args.epochs));
            }
            if (train_args.max_steps) {
                flags.assignments.push_back("max_steps=" + std::to_string(*train_args.max_steps));
            }
            run_train(train_args, resolve_settings(flags), out);
        } else if (eval_cmd->parsed() || predict_cmd->parsed()) {
            const std::string& ckpt = eval_cmd->parsed() ? eval_args.checkpoint : predict_args.checkpoint;
            require_file(ckpt, "checkpoint");
            const Checkpoint c = load_checkpoint(ckpt);
            const Settings s = resolve_settings(flags, &c.config);
            if (eval_cmd->parsed()) {
                run_eval(eval_args, s, out, err);
            } else {
                require_file(predict_args.image, "image");
                run_predict(predict_args, s, out);
            }
        } else if (ablate_cmd->parsed()) {
            run_ablate(ablate_args, flags, out, err);
        } else if (scan_cmd->parsed()) {
            const DatasetManifest m = scan_dataset(scan_root, layout_from_string(scan_layout), scan_name);
            save_manifest(m, scan_out);
            for (const auto& line : m.validation_report) {
                err << "warning: " << line << '\n';
            }
            out << "manifest: " << scan_out << " (" << m.entries.size() << " entries, " << m.categories().size()
                << " categories)\n";
        } else if (synth_cmd->parsed()) {
            const DatasetManifest m = write_synthetic_dataset(synth_root, synth);
            const fs::path path = fs::path(synth_root) / "manifest.jsonl";
            save_manifest(m, path);
            out << "manifest: " << path.string() << " (" << m.entries.size() << " entries)\n";
        } else if (init_cmd->parsed()) {
            StandinSpec spec = StandinSpec::preset(preset);
            spec.seed = init_seed;
            save_backbone(make_standin_backbone(spec), init_out);
            out << "backbone: " << init_out << " (" << spec.id << ")\n";
        }
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return kData;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kOk;
}

}  // namespace zsad::cli
