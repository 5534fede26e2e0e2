#pragma once

#include <map>
#include <optional>

#include "cseg/image_io.hpp"
#include "cseg/metrics.hpp"

namespace cseg::data {

// Dataset layout: <root>/images/*.png|jpg (+ optional <root>/masks/ with
// matching stems, read only by evaluation).
struct DatasetSpec {
    std::string root;
    std::string image_glob = "*.png;*.jpg;*.jpeg";
    std::string mask_dir;  // empty = <root>/masks when present
    int resize_h = 256, resize_w = 256;
    uint64_t split_seed = 0;

    void validate() const {
        CSEG_CHECK(!root.empty(), "dataset: root directory not set");
        CSEG_CHECK(resize_h >= 16 && resize_w >= 16 && resize_h % 2 == 0 && resize_w % 2 == 0,
                   "dataset: resize target must be even and >= 16, got ", resize_h, "x",
                   resize_w);
    }
    std::string images_dir() const;
    std::string masks_dir() const;
};

struct AugmentationSpec {
    double p_hflip = 0.5;
    double p_vflip = 0.5;
    bool right_angle_rotation = true;  // 0/90/180/270, uniform
    bool free_rotation = false;        // arbitrary angle, reflect padding
    double scale_min = 0.8, scale_max = 1.25;
};

// Planar float CHW image (C=3), normalized to mean 0.5 / std 0.5, i.e.
// values in [-1, 1].
struct FloatImage {
    int c = 3, h = 0, w = 0;
    std::vector<float> v;
};

struct Split {
    std::vector<std::string> train;  // image file paths
    std::vector<std::string> val;
};

// Deterministic 80:20 split: files ranked by fnv1a(filename, seed) with the
// filename as tie-break, first round(0.8 n) of the ranking go to train.
// Stable across runs and filesystem orderings.
Split load_split(const DatasetSpec& spec);

// Decode + bilinear-resize to the spec target + normalize. Grayscale
// images are replicated to 3 channels.
FloatImage load_image(const std::string& path, int target_h, int target_w);

// Ground-truth mask for an image path (matching stem in masks_dir),
// nearest-resized to the target. Returns nullopt when no mask exists.
std::optional<metrics::Mask> load_mask_for(const DatasetSpec& spec,
                                           const std::string& image_path, int target_h,
                                           int target_w);

// Generic bilinear resize of one channel plane (align_corners = false).
void bilinear_resize_plane(const float* src, int sh, int sw, float* dst, int dh, int dw);

FloatImage augment(const FloatImage& img, const AugmentationSpec& aug, Rng& rng);

// Epoch-seeded shuffled batch order; the last partial batch is kept.
std::vector<std::vector<int>> batch_indices(int n, int batch_size, uint64_t seed,
                                            int epoch);

// Decoded-image cache so epochs do not re-read files.
class ImageCache {
public:
    ImageCache(int target_h, int target_w) : h_(target_h), w_(target_w) {}
    const FloatImage& get(const std::string& path);
    void clear() { cache_.clear(); }

private:
    int h_, w_;
    std::map<std::string, FloatImage> cache_;
};

}  // namespace cseg::data
