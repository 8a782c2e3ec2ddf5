// SPDX-License-Identifier: Apache-2.0
//
// ctrlfuse: synth | train | fuse | eval | gradcheck | serve
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags or
// invalid configuration values).
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ctrlfuse/checkpoint.hpp"
#include "ctrlfuse/errors.hpp"
#include "ctrlfuse/gradcheck_suite.hpp"
#include "ctrlfuse/image_io.hpp"
#include "ctrlfuse/metrics.hpp"
#include "ctrlfuse/service.hpp"
#include "ctrlfuse/synth.hpp"
#include "ctrlfuse/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace ctrlfuse;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct Options {
    // shared
    std::size_t size = 32;
    std::uint64_t seed = 20240601;
    std::string out;
    std::string ckpt;
    std::string ablation = "none";
    // synth / train
    std::size_t n = 200;
    std::size_t epochs = 30;
    std::size_t batch = 4;
    double lr = 1e-4;
    bool full = false;
    std::string log;
    // fuse
    std::string ir, vis, mask;
    double alpha = 1.0;
    bool save_masks = false;
    // eval
    std::string dir;
    std::string json_out;
    // gradcheck
    std::size_t seeds = 10;
    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
};

fs::path checkpoint_root() {
    const char* env = std::getenv("CTRLFUSE_CKPT_DIR");
    return env && *env ? fs::path(env) : fs::path(".");
}

// An existing path wins; otherwise the value is an id under the checkpoint root.
fs::path resolve_checkpoint(const std::string& value) {
    const fs::path p(value);
    if (fs::exists(p)) return p;
    if (valid_checkpoint_id(value)) {
        const fs::path candidate = checkpoint_root() / (value + ".cfck");
        if (fs::exists(candidate)) return candidate;
    }
    throw Error("checkpoint not found: " + value);
}

std::string scene_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%05zu", i);
    return buf;
}

Tensor class_mask_image(const SynthScene& s, SceneClass c) { return s.mask(c).tensor(); }

int run_synth(const Options& o) {
    if (o.out.empty()) throw ConfigError("synth needs --out");
    const fs::path root(o.out);
    for (const char* sub : {"ir", "vis", "mask_person", "mask_car"}) fs::create_directories(root / sub);
    nlohmann::ordered_json manifest;
    manifest["size"] = o.size;
    manifest["seed"] = o.seed;
    manifest["count"] = o.n;
    manifest["scenes"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < o.n; ++i) {
        const SynthScene s = synth_scene(o.size, o.seed, i);
        const std::string id = scene_id(i) + ".png";
        io::write_png(root / "ir" / id, s.pair.ir);
        io::write_png(root / "vis" / id, s.pair.vis);
        io::write_png(root / "mask_person" / id, class_mask_image(s, SceneClass::person));
        io::write_png(root / "mask_car" / id, class_mask_image(s, SceneClass::car));
        nlohmann::ordered_json objs = nlohmann::ordered_json::array();
        for (const SceneClass c : s.objects()) objs.push_back(to_string(c));
        manifest["scenes"].push_back({{"id", scene_id(i)}, {"objects", objs}});
    }
    std::ofstream(root / "manifest.json") << manifest.dump(2) << '\n';
    std::cout << "wrote " << o.n << " scenes to " << root.string() << '\n';
    return 0;
}

int run_train(const Options& o) {
    if (o.out.empty()) throw ConfigError("train needs --out");
    ModelConfig mcfg = o.full ? ModelConfig::full() : ModelConfig::desk();
    mcfg.backbone.seed = o.seed;
    mcfg.ablation = parse_ablation(o.ablation);
    mcfg.validate();
    TrainConfig tcfg = o.full ? TrainConfig::full() : TrainConfig{};
    tcfg.epochs = o.epochs;
    tcfg.batch = o.batch;
    tcfg.adam.lr = o.lr;
    tcfg.seed = o.seed;
    tcfg.validate();
    if (o.size < 16 || o.size % 4 != 0) throw ConfigError("--size must be a multiple of 4 and >= 16");
    if (o.n == 0) throw ConfigError("--n must be positive");

    const auto data = synth_generate(o.n, o.size, o.seed);
    CtrlFuseModel model(mcfg);
    const fs::path log_path = o.log.empty() ? fs::path(o.out + ".log.jsonl") : fs::path(o.log);
    std::ofstream log(log_path);
    if (!log) throw Error("cannot open log " + log_path.string());
    const TrainResult result = train(model, data, tcfg, [&](const EpochLog& e) {
        log << e.to_json() << '\n';
        log.flush();
        std::fprintf(stderr, "epoch %zu/%zu total %.6f\n", e.epoch, tcfg.epochs, e.mean.total);
    });

    nlohmann::json extra;
    extra["train"] = {{"epochs", tcfg.epochs}, {"batch", tcfg.batch},   {"lr", tcfg.adam.lr},
                      {"scenes", o.n},         {"size", o.size},        {"seed", o.seed},
                      {"rng_state", result.rng_state}};
    save_checkpoint(make_checkpoint(model, extra), o.out);
    std::cout << "checkpoint " << o.out << "\nlog " << log_path.string() << '\n';
    return 0;
}

int run_fuse(const Options& o) {
    if (o.ckpt.empty() || o.ir.empty() || o.vis.empty() || o.out.empty())
        throw ConfigError("fuse needs --ckpt, --ir, --vis and --out");
    if (!(o.alpha >= 0.0) || !std::isfinite(o.alpha)) throw ConfigError("--alpha must be finite and >= 0");
    const auto model = restore_model(load_checkpoint(resolve_checkpoint(o.ckpt)));
    ImagePair pair;
    pair.ir = io::read_png(o.ir, 1);
    pair.vis = io::read_png(o.vis, 3);
    pair.validate();
    std::optional<PromptMask> prompt;
    if (!o.mask.empty()) {
        const Tensor m = io::read_png(o.mask, 1);
        if (m.dim(1) != pair.height() || m.dim(2) != pair.width())
            throw ShapeError("mask size differs from the images");
        prompt = PromptMask::from_values(pair.height(), pair.width(), m.data());
    }
    ad::NoGradGuard no_grad;
    const ForwardResult r = model->forward(pair, prompt, IntensityControl{o.alpha});
    const fs::path out(o.out);
    io::write_png(out, r.i_f);
    if (o.save_masks) {
        const fs::path stem = out.parent_path() / out.stem();
        io::write_png(stem.string() + "_seg.png", r.i_seg);
        if (r.m_ir.defined()) io::write_png(stem.string() + "_m_ir.png", r.m_ir);
        if (r.m_vis.defined()) io::write_png(stem.string() + "_m_vis.png", r.m_vis);
    }
    return 0;
}

// Gray inputs read as RGB have equal channels; keep them exact instead of
// round-tripping through the luminance weights.
Tensor vis_luma(const Tensor& rgb) {
    const auto d = rgb.data();
    const std::size_t plane = rgb.dim(1) * rgb.dim(2);
    const bool gray = std::equal(d.begin(), d.begin() + plane, d.begin() + plane) &&
                      std::equal(d.begin(), d.begin() + plane, d.begin() + 2 * plane);
    return gray ? ad::slice_channels(rgb, 0, 1) : luminance(rgb);
}

int run_eval(const Options& o) {
    if (o.dir.empty()) throw ConfigError("eval needs --dir");
    const fs::path root(o.dir);
    for (const char* sub : {"ir", "vis", "fused"})
        if (!fs::is_directory(root / sub)) throw Error("missing directory " + (root / sub).string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / "fused"))
        if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path().filename());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("no fused images in " + (root / "fused").string());

    std::vector<metrics::NamedReport> reports;
    ad::NoGradGuard no_grad;
    for (const auto& f : files) {
        const Tensor fused = io::read_png(root / "fused" / f, 1);
        const Tensor ir = io::read_png(root / "ir" / f, 1);
        const Tensor vis = vis_luma(io::read_png(root / "vis" / f, 3));
        if (fused.shape() != ir.shape() || fused.shape() != vis.shape())
            throw ShapeError("size mismatch for " + f.string());
        reports.push_back({f.stem().string(), metrics::MetricReport::evaluate(fused, ir, vis)});
    }
    if (o.out.empty()) {
        metrics::write_csv(std::cout, reports);
    } else {
        std::ofstream csv(o.out);
        if (!csv) throw Error("cannot open " + o.out);
        metrics::write_csv(csv, reports);
    }
    if (!o.json_out.empty()) std::ofstream(o.json_out) << metrics::aggregate_json(reports) << '\n';
    return 0;
}

int run_gradcheck(const Options& o) {
    if (o.seeds == 0) throw ConfigError("--seeds must be positive");
    const auto results = run_grad_suite(o.seeds, o.seed);
    bool all = true;
    std::printf("%-32s %-10s %12s %10s  %s\n", "case", "group", "worst", "tol", "result");
    for (const auto& r : results) {
        std::printf("%-32s %-10s %12.3e %10.0e  %s\n", r.name.c_str(), r.group.c_str(), r.worst, r.tolerance,
                    r.passed ? "PASS" : "FAIL");
        all = all && r.passed;
    }
    std::printf("%zu cases, %s\n", results.size(), all ? "all passed" : "FAILURES");
    return all ? 0 : 1;
}

int run_serve(const Options& o) {
    if (o.ckpt.empty()) throw ConfigError("serve needs --ckpt <id> (looked up in CTRLFUSE_CKPT_DIR)");
    if (!valid_checkpoint_id(o.ckpt)) throw ConfigError("invalid checkpoint id '" + o.ckpt + "'");
    FusionService service(o.ckpt, checkpoint_dir_loader(checkpoint_root()));
    std::fprintf(stderr, "serving %s on %s:%d\n", o.ckpt.c_str(), o.host.c_str(), o.port);
    if (!serve(service, o.host, o.port)) throw Error("cannot bind " + o.host + ":" + std::to_string(o.port));
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Controllable infrared-visible image fusion"};
    app.require_subcommand(1);
    Options o;

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset directory");
    synth->add_option("--out", o.out, "Output directory")->required();
    synth->add_option("--n", o.n, "Number of scenes");
    synth->add_option("--size", o.size, "Side length in pixels (>= 16)");
    synth->add_option("--seed", o.seed, "Generator seed");

    auto* tr = app.add_subcommand("train", "Train on synthetic scenes and write a checkpoint");
    tr->add_option("--out", o.out, "Checkpoint path")->required();
    tr->add_option("--log", o.log, "JSON-lines loss log (default <out>.log.jsonl)");
    tr->add_option("--n", o.n, "Number of scenes");
    tr->add_option("--size", o.size, "Scene side length");
    tr->add_option("--seed", o.seed, "Seed for data, init and shuffling");
    tr->add_option("--epochs", o.epochs, "Epochs");
    tr->add_option("--batch", o.batch, "Batch size");
    tr->add_option("--lr", o.lr, "Adam learning rate");
    tr->add_option("--ablation", o.ablation, "none|no_prompt|no_seg|no_vis|no_ir|exchange_sq");
    tr->add_flag("--full", o.full, "Full-size model and 150-epoch default schedule");

    auto* fu = app.add_subcommand("fuse", "Fuse one image pair");
    fu->add_option("--ckpt", o.ckpt, "Checkpoint path or id")->required();
    fu->add_option("--ir", o.ir, "Infrared PNG")->required();
    fu->add_option("--vis", o.vis, "Visible PNG")->required();
    fu->add_option("--mask", o.mask, "Prompt mask PNG (omit for prompt-free fusion)");
    fu->add_option("--alpha", o.alpha, "Prompt intensity (>= 0)");
    fu->add_option("--out", o.out, "Fused PNG")->required();
    fu->add_flag("--save-masks", o.save_masks, "Also write <out>_m_ir/_m_vis/_seg.png");

    auto* ev = app.add_subcommand("eval", "Score fused images against their sources");
    ev->add_option("--dir", o.dir, "Directory with ir/, vis/ and fused/ PNGs")->required();
    ev->add_option("--out", o.out, "CSV path (default stdout)");
    ev->add_option("--json", o.json_out, "Aggregate JSON path");

    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every registered case");
    gc->add_option("--seeds", o.seeds, "Seeds per case");
    gc->add_option("--seed", o.seed, "First seed")->default_val(1);

    auto* sv = app.add_subcommand("serve", "HTTP fusion service");
    sv->add_option("--ckpt", o.ckpt, "Checkpoint id under CTRLFUSE_CKPT_DIR")->required();
    sv->add_option("--host", o.host, "Bind address");
    sv->add_option("--port", o.port, "Port");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*synth) return run_synth(o);
        if (*tr) return run_train(o);
        if (*fu) return run_fuse(o);
        if (*ev) return run_eval(o);
        if (*gc) return run_gradcheck(o);
        if (*sv) return run_serve(o);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitRuntime;
    }
    return kExitUsage;
}
