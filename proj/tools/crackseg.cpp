// crackseg: self-supervised crack segmentation CLI.
//
// Exit codes: 0 success, 2 config error, 3 data/input error, 4 training
// failure (non-finite loss), 5 output/write failure.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "cseg/inference.hpp"
#include "cseg/stats.hpp"
#include "cseg/synthgen.hpp"
#include "cseg/trainer.hpp"

namespace fs = std::filesystem;
using Real = float;  // production precision

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTrain = 4;
constexpr int kExitIo = 5;

struct Overrides {
    std::string config_path;
    std::optional<uint64_t> seed;
    std::optional<std::string> variant;
    std::optional<int> max_epochs;
    std::optional<std::string> data_root;
    std::optional<std::string> out_dir;
    std::optional<int> resize;
    std::optional<int> batch_size;
};

cseg::RunConfig resolve_config(const Overrides& o) {
    cseg::RunConfig rc =
        o.config_path.empty() ? cseg::RunConfig{} : cseg::load_run_config(o.config_path);
    if (o.seed) {
        rc.model.seed = *o.seed;
        rc.train.seed = *o.seed;
    }
    if (o.variant) rc.model.variant = cseg::variant_from_string(*o.variant);
    if (o.max_epochs) rc.train.max_epochs = *o.max_epochs;
    if (o.data_root) rc.dataset.root = *o.data_root;
    if (o.out_dir) rc.out_dir = *o.out_dir;
    if (o.resize) rc.dataset.resize_h = rc.dataset.resize_w = *o.resize;
    if (o.batch_size) rc.train.batch_size = *o.batch_size;
    if (const char* env_out = std::getenv("CRACKSEG_OUT_DIR"); env_out && !o.out_dir)
        rc.out_dir = env_out;
    rc.train.seed = rc.model.seed;
    rc.validate();
    return rc;
}

std::vector<std::string> list_images(const std::string& dir) {
    std::vector<std::string> out;
    CSEG_CHECK(fs::is_directory(dir), "not a directory: ", dir);
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        for (auto& ch : ext) ch = static_cast<char>(std::tolower(ch));
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") out.push_back(e.path().string());
    }
    std::sort(out.begin(), out.end());
    CSEG_CHECK(!out.empty(), "no images found in ", dir);
    return out;
}

cseg::Model<Real> load_model(const std::string& checkpoint) {
    return cseg::ckpt::model_from_checkpoint<Real>(cseg::ckpt::Checkpoint::load(checkpoint));
}

int cmd_train(const Overrides& o, const std::string& resume) {
    cseg::RunConfig rc;
    try {
        rc = resolve_config(o);
    } catch (const cseg::Error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    }
    try {
        auto result = cseg::fit<Real>(rc, resume);
        nlohmann::json summary{
            {"epochs_run", result.epochs_run},
            {"early_stopped", result.early_stopped},
            {"best_val_total", result.best_val},
            {"best_checkpoint", result.best_checkpoint},
            {"last_checkpoint", result.last_checkpoint},
            {"variant", cseg::to_string(rc.model.variant)},
            {"seed", rc.model.seed},
        };
        if (!result.history.empty())
            summary["final_epoch"] = result.history.back().to_json();
        std::ofstream out(fs::path(rc.out_dir) / "summary.json");
        out << summary.dump(2) << "\n";
        std::cout << summary.dump(2) << "\n";
        return kExitOk;
    } catch (const cseg::Error& e) {
        const std::string msg = e.what();
        std::cerr << "error: " << msg << "\n";
        if (msg.find("non-finite loss") != std::string::npos) return kExitTrain;
        return kExitData;
    }
}

int cmd_eval(const std::string& checkpoint, const std::string& data_root,
             const std::string& mask_dir, int resize, int batch, const std::string& out_dir) {
    try {
        auto model = load_model(checkpoint);
        cseg::data::DatasetSpec spec;
        spec.root = data_root;
        spec.mask_dir = mask_dir;
        spec.resize_h = spec.resize_w = resize;
        auto eval = cseg::evaluate_dataset(model, spec, batch);
        fs::create_directories(out_dir);
        cseg::write_metrics_csv((fs::path(out_dir) / "metrics.csv").string(), eval.report);
        nlohmann::json summary = cseg::summary_to_json(
            eval.report, fs::path(data_root).filename().string());
        if (!eval.missing_masks.empty()) {
            nlohmann::json missing = nlohmann::json::array();
            for (const auto& p : eval.missing_masks) missing.push_back(p);
            summary["missing_masks"] = missing;
            for (const auto& p : eval.missing_masks)
                std::cerr << "warning: no mask for " << p << " (excluded)\n";
        }
        std::ofstream out(fs::path(out_dir) / "summary.json");
        out << summary.dump(2) << "\n";
        std::cout << summary.dump(2) << "\n";
        return kExitOk;
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int cmd_infer(const std::string& checkpoint, const std::string& images_dir, int resize,
              int batch, const std::string& out_dir) {
    try {
        auto model = load_model(checkpoint);
        std::vector<std::string> paths = list_images(images_dir);
        std::vector<std::string> usable;
        fs::create_directories(out_dir);
        int skipped = 0;
        for (const auto& p : paths) {
            try {
                cseg::data::load_image(p, resize, resize);
                usable.push_back(p);
            } catch (const cseg::Error& e) {
                std::cerr << "warning: skipping " << p << ": " << e.what() << "\n";
                ++skipped;
            }
        }
        CSEG_CHECK(!usable.empty(), "no readable images in ", images_dir);
        auto masks = cseg::predict_masks(model, usable, resize, resize, batch);
        for (size_t i = 0; i < usable.size(); ++i) {
            const std::string stem = fs::path(usable[i]).stem().string();
            cseg::imgio::write_mask_png((fs::path(out_dir) / (stem + "_mask.png")).string(),
                                        masks[i]);
        }
        std::cout << "wrote " << masks.size() << " masks to " << out_dir << " (" << skipped
                  << " skipped)\n";
        return kExitOk;
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int cmd_export_attention(const std::string& checkpoint, const std::string& images_dir,
                         int resize, double alpha, const std::string& out_dir) {
    try {
        auto model = load_model(checkpoint);
        auto paths = list_images(images_dir);
        auto stats = cseg::export_attention(model, paths, out_dir, resize, resize, alpha);
        for (const auto& w : stats.warnings) std::cerr << "warning: " << w << "\n";
        std::cout << "wrote overlays for " << stats.written_images << " images to "
                  << out_dir << " (" << stats.skipped << " skipped)\n";
        return kExitOk;
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

// Input files: {"scores": {<dataset>: {<metric>: value}}}; eval summaries
// ({"dataset":..., "scores": {...}}) are accepted as single-dataset files.
nlohmann::json load_scores(const std::string& path) {
    std::ifstream f(path);
    CSEG_CHECK(f.good(), "cannot open scores file: ", path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        cseg::fail("parse error in ", path, ": ", e.what());
    }
    CSEG_CHECK(j.contains("scores"), "scores file ", path, " must carry a 'scores' object");
    if (j.contains("dataset"))
        return nlohmann::json{{j.at("dataset").get<std::string>(), j.at("scores")}};
    return j.at("scores");
}

int cmd_compare(const std::string& a_path, const std::string& b_path,
                const std::string& out_path) {
    try {
        const nlohmann::json a = load_scores(a_path);
        const nlohmann::json b = load_scores(b_path);
        std::vector<std::string> keys;
        for (const auto& [k, v] : a.items()) {
            CSEG_CHECK(b.contains(k), "dataset key '", k, "' missing from ", b_path);
            keys.push_back(k);
        }
        for (const auto& [k, v] : b.items())
            CSEG_CHECK(a.contains(k), "dataset key '", k, "' missing from ", a_path);
        CSEG_CHECK(keys.size() >= 2, "compare needs >= 2 matching datasets, got ",
                   keys.size());
        std::sort(keys.begin(), keys.end());

        nlohmann::json report;
        report["n_datasets"] = keys.size();
        for (const std::string metric : {"miou", "dice", "xor", "hd"}) {
            std::vector<double> av, bv;
            for (const auto& k : keys) {
                if (!a.at(k).contains(metric) || !b.at(k).contains(metric)) continue;
                av.push_back(a.at(k).at(metric).get<double>());
                bv.push_back(b.at(k).at(metric).get<double>());
            }
            if (av.size() < 2) continue;
            auto r = cseg::stats::paired_ttest(av, bv);
            report[metric] = {{"mean_diff", r.mean_diff},
                              {"t_statistic", r.t_statistic},
                              {"p_value", r.p_value},
                              {"df", r.df},
                              {"significance", r.significance}};
            std::cout << metric << ": mean diff " << (r.mean_diff >= 0 ? "+" : "")
                      << r.mean_diff << ", t = " << r.t_statistic << ", p = " << r.p_value
                      << " " << r.significance << "\n";
        }
        if (!out_path.empty()) {
            std::ofstream out(out_path);
            out << report.dump(2) << "\n";
        }
        return kExitOk;
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}

int cmd_gen_synthetic(const cseg::synthgen::SynthSpec& spec, const std::string& out_dir) {
    try {
        cseg::synthgen::generate(spec, out_dir);
        std::cout << "wrote " << spec.count << " image/mask pairs to " << out_dir << "\n";
        return kExitOk;
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"crackseg: self-supervised pavement crack segmentation"};
    app.require_subcommand(1);

    // train
    Overrides o;
    std::string resume;
    auto* train = app.add_subcommand("train", "train a model (self-supervised; no masks read)");
    train->add_option("--config", o.config_path, "JSON config file (flat keys)");
    train->add_option("--seed", o.seed, "override model/train seed");
    train->add_option("--variant", o.variant, "override variant: full|v0|v1|v2|v3|baseline-off");
    train->add_option("--max-epochs", o.max_epochs, "override epoch budget");
    train->add_option("--data-root", o.data_root, "override dataset root");
    train->add_option("--out-dir", o.out_dir, "override output directory");
    train->add_option("--resize", o.resize, "override square working resolution");
    train->add_option("--batch-size", o.batch_size, "override batch size");
    train->add_option("--resume", resume, "checkpoint to resume from");

    // eval
    std::string ckpt_path, data_root, mask_dir, out_dir = "eval_out";
    int resize = 256, batch = 8;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint against ground-truth masks");
    eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    eval->add_option("--data-root", data_root, "dataset root (images/ + masks/)")->required();
    eval->add_option("--mask-dir", mask_dir, "mask directory override");
    eval->add_option("--resize", resize, "square working resolution");
    eval->add_option("--batch-size", batch, "inference batch size");
    eval->add_option("--out-dir", out_dir, "report directory");

    // infer
    std::string images_dir, infer_out = "infer_out";
    std::string infer_ckpt;
    int infer_resize = 256, infer_batch = 8;
    auto* infer = app.add_subcommand("infer", "write binary mask PNGs for a directory of images");
    infer->add_option("--checkpoint", infer_ckpt, "model checkpoint")->required();
    infer->add_option("--images", images_dir, "input image directory")->required();
    infer->add_option("--resize", infer_resize, "square working resolution");
    infer->add_option("--batch-size", infer_batch, "inference batch size");
    infer->add_option("--out-dir", infer_out, "output directory");

    // export-attention
    std::string att_ckpt, att_images, att_out = "attention_out";
    int att_resize = 256;
    double att_alpha = 0.5;
    auto* att = app.add_subcommand("export-attention",
                                   "write per-scale attention heatmap overlays + masks");
    att->add_option("--checkpoint", att_ckpt, "model checkpoint")->required();
    att->add_option("--images", att_images, "input image directory")->required();
    att->add_option("--resize", att_resize, "square working resolution");
    att->add_option("--alpha", att_alpha, "overlay blend weight of the heatmap");
    att->add_option("--out-dir", att_out, "output directory");

    // compare
    std::string cmp_a, cmp_b, cmp_out;
    auto* cmp = app.add_subcommand("compare", "paired t-tests between two runs' per-dataset scores");
    cmp->add_option("--a", cmp_a, "scores JSON of run A")->required();
    cmp->add_option("--b", cmp_b, "scores JSON of run B")->required();
    cmp->add_option("--out", cmp_out, "write the report JSON here");

    // gen-synthetic
    cseg::synthgen::SynthSpec sspec;
    std::string synth_out = "synthetic";
    auto* gen = app.add_subcommand("gen-synthetic",
                                   "generate a deterministic synthetic crack corpus");
    gen->add_option("--out-dir", synth_out, "output directory (images/ + masks/)");
    gen->add_option("--count", sspec.count, "number of images");
    gen->add_option("--height", sspec.height, "image height");
    gen->add_option("--width", sspec.width, "image width");
    gen->add_option("--seed", sspec.seed, "corpus seed");
    gen->add_option("--min-strokes", sspec.min_strokes, "min strokes per image");
    gen->add_option("--max-strokes", sspec.max_strokes, "max strokes per image");
    gen->add_option("--min-width", sspec.min_width_px, "min stroke width (px)");
    gen->add_option("--max-width", sspec.max_width_px, "max stroke width (px)");
    gen->add_option("--noise-sigma", sspec.noise_sigma, "background noise sigma");
    gen->add_option("--contrast-gap", sspec.contrast_gap, "stroke darkness gap");

    // print-config
    auto* pc = app.add_subcommand("print-config", "print every config key with its default");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(o, resume);
        if (eval->parsed())
            return cmd_eval(ckpt_path, data_root, mask_dir, resize, batch, out_dir);
        if (infer->parsed())
            return cmd_infer(infer_ckpt, images_dir, infer_resize, infer_batch, infer_out);
        if (att->parsed())
            return cmd_export_attention(att_ckpt, att_images, att_resize, att_alpha, att_out);
        if (cmp->parsed()) return cmd_compare(cmp_a, cmp_b, cmp_out);
        if (gen->parsed()) return cmd_gen_synthetic(sspec, synth_out);
        if (pc->parsed()) {
            std::cout << cseg::describe_run_config(cseg::RunConfig{});
            return kExitOk;
        }
    } catch (const cseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return kExitIo;
    }
    return kExitConfig;
}
