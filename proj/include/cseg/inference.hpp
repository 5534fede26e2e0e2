#pragma once

#include <filesystem>
#include <fstream>

#include "cseg/config.hpp"
#include "cseg/data.hpp"
#include "cseg/metrics.hpp"
#include "cseg/model.hpp"

namespace cseg {

template <class T>
metrics::Mask mask_from_prediction(const PredictionBatch<T>& pred, int item) {
    metrics::Mask m(pred.h, pred.w);
    const long plane = static_cast<long>(pred.h) * pred.w;
    std::copy(pred.mask.begin() + static_cast<long>(item) * plane,
              pred.mask.begin() + static_cast<long>(item + 1) * plane, m.v.begin());
    return m;
}

// Batched eval-mode inference over image paths.
template <class T>
std::vector<metrics::Mask> predict_masks(const Model<T>& model,
                                         const std::vector<std::string>& paths, int h,
                                         int w, int batch_size) {
    std::vector<metrics::Mask> out;
    for (size_t i = 0; i < paths.size(); i += static_cast<size_t>(batch_size)) {
        std::vector<data::FloatImage> imgs;
        for (size_t k = i; k < std::min(paths.size(), i + static_cast<size_t>(batch_size));
             ++k)
            imgs.push_back(data::load_image(paths[k], h, w));
        Tensor<T> input = Tensor<T>::zeros(
            {static_cast<int>(imgs.size()), 3, h, w});
        const long per = static_cast<long>(3) * h * w;
        for (size_t k = 0; k < imgs.size(); ++k)
            for (long j = 0; j < per; ++j)
                input.data()[static_cast<long>(k) * per + j] = static_cast<T>(imgs[k].v[j]);
        Tape<T> tape;
        auto fr = model.forward(tape, input, /*train=*/false);
        for (size_t k = 0; k < imgs.size(); ++k)
            out.push_back(mask_from_prediction(fr.pred, static_cast<int>(k)));
    }
    return out;
}

struct EvalOutput {
    metrics::MetricReport report;
    std::vector<std::string> evaluated;      // image paths with masks
    std::vector<std::string> missing_masks;  // image paths without masks
};

// Evaluates every image in the dataset directory against its ground-truth
// mask at the model's working resolution (masks nearest-resized).
template <class T>
EvalOutput evaluate_dataset(const Model<T>& model, const data::DatasetSpec& spec,
                            int batch_size) {
    data::Split split = data::load_split(spec);
    std::vector<std::string> all = split.train;
    all.insert(all.end(), split.val.begin(), split.val.end());
    std::sort(all.begin(), all.end());
    return evaluate_images(model, spec, all, batch_size);
}

template <class T>
EvalOutput evaluate_images(const Model<T>& model, const data::DatasetSpec& spec,
                           const std::vector<std::string>& paths, int batch_size) {
    EvalOutput out;
    std::vector<metrics::Mask> gts;
    for (const auto& p : paths) {
        auto gt = data::load_mask_for(spec, p, spec.resize_h, spec.resize_w);
        if (!gt) {
            out.missing_masks.push_back(p);
            continue;
        }
        out.evaluated.push_back(p);
        gts.push_back(std::move(*gt));
    }
    CSEG_CHECK(!out.evaluated.empty(), "evaluation: no image has a ground-truth mask under ",
               spec.masks_dir());
    const auto preds =
        predict_masks(model, out.evaluated, spec.resize_h, spec.resize_w, batch_size);
    std::vector<metrics::ImageMetrics> per_image;
    for (size_t i = 0; i < preds.size(); ++i) {
        metrics::ImageMetrics m = metrics::evaluate_pair(preds[i], gts[i]);
        m.name = std::filesystem::path(out.evaluated[i]).filename().string();
        per_image.push_back(std::move(m));
    }
    out.report = metrics::aggregate(std::move(per_image));
    return out;
}

inline constexpr int kReportSchemaVersion = 1;

inline void write_metrics_csv(const std::string& path, const metrics::MetricReport& r) {
    std::ofstream f(path, std::ios::trunc);
    CSEG_CHECK(f.good(), "cannot write CSV: ", path);
    f << "schema_version,image,miou,dice,xor,xor_ratio,xor_ratio_defined,hd_norm,hd_raw,"
         "degenerate\n";
    f.precision(10);
    for (const auto& m : r.per_image) {
        f << kReportSchemaVersion << "," << m.name << "," << m.miou << "," << m.dice << ","
          << m.xor_frac << "," << (m.xor_ratio_defined ? std::to_string(m.xor_ratio) : "")
          << "," << (m.xor_ratio_defined ? 1 : 0) << "," << m.hd_norm << "," << m.hd_raw
          << "," << (m.degenerate ? 1 : 0) << "\n";
    }
}

inline nlohmann::json aggregate_to_json(const metrics::Aggregate& a) {
    return {{"mean", a.mean}, {"std", a.stddev}, {"n", a.n}};
}

inline nlohmann::json summary_to_json(const metrics::MetricReport& r,
                                      const std::string& dataset_name) {
    nlohmann::json j;
    j["schema_version"] = kReportSchemaVersion;
    j["dataset"] = dataset_name;
    j["images"] = r.per_image.size();
    j["degenerate_count"] = r.degenerate_count;
    j["aggregates"] = {{"miou", aggregate_to_json(r.miou)},
                       {"dice", aggregate_to_json(r.dice)},
                       {"xor", aggregate_to_json(r.xor_frac)},
                       {"xor_ratio", aggregate_to_json(r.xor_ratio)},
                       {"hd_norm", aggregate_to_json(r.hd_norm)},
                       {"hd_raw", aggregate_to_json(r.hd_raw)}};
    // compare-ready flat scores
    j["scores"] = {{"miou", r.miou.mean},
                   {"dice", r.dice.mean},
                   {"xor", r.xor_frac.mean},
                   {"hd", r.hd_norm.mean}};
    return j;
}

// ---------------------------------------------------------------------------
// Attention export.
// ---------------------------------------------------------------------------

// Blue-to-red heatmap used for the overlays.
inline void jet_colormap(double v, uint8_t rgb[3]) {
    auto clamp01 = [](double x) { return std::min(1.0, std::max(0.0, x)); };
    rgb[0] = static_cast<uint8_t>(std::lround(255 * clamp01(1.5 - std::abs(4 * v - 3))));
    rgb[1] = static_cast<uint8_t>(std::lround(255 * clamp01(1.5 - std::abs(4 * v - 2))));
    rgb[2] = static_cast<uint8_t>(std::lround(255 * clamp01(1.5 - std::abs(4 * v - 1))));
}

struct ExportStats {
    int written_images = 0;
    int skipped = 0;
    std::vector<std::string> warnings;
};

// For each input image writes the predicted binary mask and one heatmap
// overlay per scale: pixel = alpha*colormap(attention) + (1-alpha)*input.
// Attention summaries are upsampled to the input resolution.
template <class T>
ExportStats export_attention(const Model<T>& model,
                             const std::vector<std::string>& image_paths,
                             const std::string& out_dir, int h, int w,
                             double alpha = 0.5) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    ExportStats stats;
    for (const auto& path : image_paths) {
        data::FloatImage img;
        try {
            img = data::load_image(path, h, w);
        } catch (const Error& e) {
            stats.warnings.push_back(e.what());
            ++stats.skipped;
            continue;
        }
        Tensor<T> input = Tensor<T>::zeros({1, 3, h, w});
        for (size_t i = 0; i < img.v.size(); ++i) input.data()[i] = static_cast<T>(img.v[i]);
        Tape<T> tape;
        auto fr = model.forward(tape, input, /*train=*/false, /*capture_attention=*/true);
        auto summary = attention_summary(fr.attention);

        const std::string stem = fs::path(path).stem().string();
        imgio::write_mask_png((fs::path(out_dir) / (stem + "_mask.png")).string(),
                              mask_from_prediction(fr.pred, 0));

        const struct {
            const char* name;
            const Tensor<T>* map;
        } scales[] = {{"fine", &summary.fine}, {"small", &summary.small},
                      {"large", &summary.large}};
        for (const auto& sc : scales) {
            // upsample the [1,1,sh,sw] summary to the input resolution
            const Shape4 ms = sc.map->shape();
            std::vector<float> attn_small(static_cast<size_t>(ms.h) * ms.w);
            for (size_t i = 0; i < attn_small.size(); ++i)
                attn_small[i] = static_cast<float>(sc.map->data()[i]);
            std::vector<float> attn(static_cast<size_t>(h) * w);
            data::bilinear_resize_plane(attn_small.data(), ms.h, ms.w, attn.data(), h, w);

            imgio::ImageU8 overlay;
            overlay.h = h;
            overlay.w = w;
            overlay.channels = 3;
            overlay.v.resize(static_cast<size_t>(h) * w * 3);
            const long plane = static_cast<long>(h) * w;
            for (long i = 0; i < plane; ++i) {
                uint8_t rgb[3];
                jet_colormap(attn[i], rgb);
                for (int c = 0; c < 3; ++c) {
                    // input back to [0,1] from the (x-0.5)/0.5 normalization
                    const double base = img.v[c * plane + i] * 0.5 + 0.5;
                    const double mixed = alpha * (rgb[c] / 255.0) + (1.0 - alpha) * base;
                    overlay.v[i * 3 + c] =
                        static_cast<uint8_t>(std::lround(std::min(1.0, std::max(0.0, mixed)) * 255));
                }
            }
            imgio::write_png(
                (fs::path(out_dir) / (stem + "_attn_" + sc.name + ".png")).string(), overlay);
        }
        ++stats.written_images;
    }
    CSEG_CHECK(stats.written_images > 0, "attention export: every input failed (",
               stats.skipped, " skipped)");
    return stats;
}

}  // namespace cseg
