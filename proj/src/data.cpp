#include "cseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace cseg::data {

namespace fs = std::filesystem;

std::string DatasetSpec::images_dir() const {
    const fs::path sub = fs::path(root) / "images";
    return fs::is_directory(sub) ? sub.string() : root;
}

std::string DatasetSpec::masks_dir() const {
    if (!mask_dir.empty()) return mask_dir;
    return (fs::path(root) / "masks").string();
}

namespace {

std::vector<std::string> glob_patterns(const std::string& glob) {
    std::vector<std::string> out;
    size_t pos = 0;
    while (pos < glob.size()) {
        size_t next = glob.find(';', pos);
        if (next == std::string::npos) next = glob.size();
        std::string pat = glob.substr(pos, next - pos);
        if (!pat.empty()) out.push_back(pat);
        pos = next + 1;
    }
    return out;
}

bool matches_pattern(const std::string& name, const std::string& pattern) {
    // Supports the "*.ext" form (case-insensitive suffix match).
    if (pattern.size() >= 2 && pattern[0] == '*') {
        const std::string suffix = pattern.substr(1);
        if (name.size() < suffix.size()) return false;
        for (size_t i = 0; i < suffix.size(); ++i) {
            const char a = static_cast<char>(std::tolower(name[name.size() - suffix.size() + i]));
            const char b = static_cast<char>(std::tolower(suffix[i]));
            if (a != b) return false;
        }
        return true;
    }
    return name == pattern;
}

}  // namespace

Split load_split(const DatasetSpec& spec) {
    spec.validate();
    const std::string dir = spec.images_dir();
    CSEG_CHECK(fs::is_directory(dir), "dataset: not a directory: ", dir);
    const auto patterns = glob_patterns(spec.image_glob);
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string name = entry.path().filename().string();
        for (const auto& pat : patterns) {
            if (matches_pattern(name, pat)) {
                names.push_back(name);
                break;
            }
        }
    }
    CSEG_CHECK(names.size() >= 5, "dataset: need at least 5 images in ", dir, ", found ",
               names.size());

    std::sort(names.begin(), names.end(), [&](const std::string& a, const std::string& b) {
        const uint64_t ha = fnv1a(a, spec.split_seed), hb = fnv1a(b, spec.split_seed);
        return ha != hb ? ha < hb : a < b;
    });
    const size_t n_train =
        static_cast<size_t>(std::llround(0.8 * static_cast<double>(names.size())));
    Split split;
    for (size_t i = 0; i < names.size(); ++i) {
        const std::string full = (fs::path(dir) / names[i]).string();
        (i < n_train ? split.train : split.val).push_back(full);
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    return split;
}

void bilinear_resize_plane(const float* src, int sh, int sw, float* dst, int dh, int dw) {
    for (int y = 0; y < dh; ++y) {
        const double sy = (y + 0.5) * sh / dh - 0.5;
        int y0 = static_cast<int>(std::floor(sy));
        const double wy = sy - y0;
        int y1 = y0 + 1;
        y0 = std::clamp(y0, 0, sh - 1);
        y1 = std::clamp(y1, 0, sh - 1);
        for (int x = 0; x < dw; ++x) {
            const double sx = (x + 0.5) * sw / dw - 0.5;
            int x0 = static_cast<int>(std::floor(sx));
            const double wx = sx - x0;
            int x1 = x0 + 1;
            x0 = std::clamp(x0, 0, sw - 1);
            x1 = std::clamp(x1, 0, sw - 1);
            const double top = (1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
            const double bot = (1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
            dst[y * dw + x] = static_cast<float>((1 - wy) * top + wy * bot);
        }
    }
}

FloatImage load_image(const std::string& path, int target_h, int target_w) {
    const imgio::ImageU8 raw = imgio::read_image(path);
    // to planar float [0,1]
    std::vector<float> planar(static_cast<size_t>(3) * raw.h * raw.w);
    const long plane = static_cast<long>(raw.h) * raw.w;
    for (int y = 0; y < raw.h; ++y)
        for (int x = 0; x < raw.w; ++x)
            for (int c = 0; c < 3; ++c)
                planar[c * plane + y * static_cast<long>(raw.w) + x] =
                    raw.at(y, x, c) / 255.0f;

    FloatImage out;
    out.h = target_h;
    out.w = target_w;
    out.v.resize(static_cast<size_t>(3) * target_h * target_w);
    const long tplane = static_cast<long>(target_h) * target_w;
    for (int c = 0; c < 3; ++c)
        bilinear_resize_plane(planar.data() + c * plane, raw.h, raw.w,
                              out.v.data() + c * tplane, target_h, target_w);
    // standardize with fixed constants mean 0.5 / std 0.5
    for (auto& v : out.v) v = (v - 0.5f) / 0.5f;
    return out;
}

std::optional<metrics::Mask> load_mask_for(const DatasetSpec& spec,
                                           const std::string& image_path, int target_h,
                                           int target_w) {
    const std::string stem = fs::path(image_path).stem().string();
    const fs::path dir = spec.masks_dir();
    if (!fs::is_directory(dir)) return std::nullopt;
    fs::path found;
    for (const char* ext : {".png", ".jpg", ".jpeg", ".PNG", ".JPG", ".JPEG"}) {
        const fs::path cand = dir / (stem + ext);
        if (fs::exists(cand)) {
            found = cand;
            break;
        }
    }
    if (found.empty()) return std::nullopt;
    metrics::Mask full = imgio::read_mask(found.string());
    if (full.h == target_h && full.w == target_w) return full;
    // nearest-neighbor resize keeps the mask binary
    metrics::Mask out(target_h, target_w);
    for (int y = 0; y < target_h; ++y) {
        const int sy = std::min(full.h - 1, static_cast<int>(y * static_cast<long>(full.h) /
                                                             target_h));
        for (int x = 0; x < target_w; ++x) {
            const int sx = std::min(full.w - 1, static_cast<int>(x * static_cast<long>(full.w) /
                                                                 target_w));
            out.at(y, x) = full.at(sy, sx);
        }
    }
    return out;
}

namespace {

FloatImage resize_to(const FloatImage& img, int h, int w) {
    FloatImage out;
    out.c = img.c;
    out.h = h;
    out.w = w;
    out.v.resize(static_cast<size_t>(img.c) * h * w);
    const long splane = static_cast<long>(img.h) * img.w;
    const long dplane = static_cast<long>(h) * w;
    for (int c = 0; c < img.c; ++c)
        bilinear_resize_plane(img.v.data() + c * splane, img.h, img.w,
                              out.v.data() + c * dplane, h, w);
    return out;
}

// Center crop or edge-replicate pad to (h, w).
FloatImage crop_or_pad(const FloatImage& img, int h, int w) {
    FloatImage out;
    out.c = img.c;
    out.h = h;
    out.w = w;
    out.v.resize(static_cast<size_t>(img.c) * h * w);
    const int oy = (img.h - h) / 2;
    const int ox = (img.w - w) / 2;
    const long splane = static_cast<long>(img.h) * img.w;
    const long dplane = static_cast<long>(h) * w;
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int sy = std::clamp(y + oy, 0, img.h - 1);
                const int sx = std::clamp(x + ox, 0, img.w - 1);
                out.v[c * dplane + static_cast<long>(y) * w + x] =
                    img.v[c * splane + static_cast<long>(sy) * img.w + sx];
            }
    return out;
}

void flip_h(FloatImage& img) {
    const long plane = static_cast<long>(img.h) * img.w;
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w / 2; ++x)
                std::swap(img.v[c * plane + static_cast<long>(y) * img.w + x],
                          img.v[c * plane + static_cast<long>(y) * img.w + (img.w - 1 - x)]);
}

void flip_v(FloatImage& img) {
    const long plane = static_cast<long>(img.h) * img.w;
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h / 2; ++y)
            for (int x = 0; x < img.w; ++x)
                std::swap(img.v[c * plane + static_cast<long>(y) * img.w + x],
                          img.v[c * plane + static_cast<long>(img.h - 1 - y) * img.w + x]);
}

// Quarter-turn clockwise; requires a square image.
FloatImage rot90(const FloatImage& img) {
    FloatImage out;
    out.c = img.c;
    out.h = img.w;
    out.w = img.h;
    out.v.resize(img.v.size());
    const long splane = static_cast<long>(img.h) * img.w;
    const long dplane = static_cast<long>(out.h) * out.w;
    for (int c = 0; c < img.c; ++c)
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x)
                out.v[c * dplane + static_cast<long>(x) * out.w + (img.h - 1 - y)] =
                    img.v[c * splane + static_cast<long>(y) * img.w + x];
    return out;
}

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n - 2;
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}

FloatImage rotate_free(const FloatImage& img, double angle_rad) {
    FloatImage out;
    out.c = img.c;
    out.h = img.h;
    out.w = img.w;
    out.v.resize(img.v.size());
    const double cy = (img.h - 1) / 2.0, cx = (img.w - 1) / 2.0;
    const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
    const long plane = static_cast<long>(img.h) * img.w;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double dy = y - cy, dx = x - cx;
            const double sy = cy + ca * dy - sa * dx;
            const double sx = cx + sa * dy + ca * dx;
            int y0 = static_cast<int>(std::floor(sy));
            int x0 = static_cast<int>(std::floor(sx));
            const double wy = sy - y0, wx = sx - x0;
            const int ys[2] = {reflect_index(y0, img.h), reflect_index(y0 + 1, img.h)};
            const int xs[2] = {reflect_index(x0, img.w), reflect_index(x0 + 1, img.w)};
            for (int c = 0; c < img.c; ++c) {
                const float* p = img.v.data() + c * plane;
                const double top = (1 - wx) * p[ys[0] * static_cast<long>(img.w) + xs[0]] +
                                   wx * p[ys[0] * static_cast<long>(img.w) + xs[1]];
                const double bot = (1 - wx) * p[ys[1] * static_cast<long>(img.w) + xs[0]] +
                                   wx * p[ys[1] * static_cast<long>(img.w) + xs[1]];
                out.v[c * plane + static_cast<long>(y) * img.w + x] =
                    static_cast<float>((1 - wy) * top + wy * bot);
            }
        }
    return out;
}

}  // namespace

FloatImage augment(const FloatImage& img, const AugmentationSpec& aug, Rng& rng) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    FloatImage out = img;

    // scale jitter with crop/pad back to the original dims
    const double s = aug.scale_min + (aug.scale_max - aug.scale_min) * u01(rng);
    if (std::abs(s - 1.0) > 1e-9) {
        const int nh = std::max(8, static_cast<int>(std::lround(img.h * s)));
        const int nw = std::max(8, static_cast<int>(std::lround(img.w * s)));
        out = crop_or_pad(resize_to(out, nh, nw), img.h, img.w);
    }

    if (u01(rng) < aug.p_hflip) flip_h(out);
    if (u01(rng) < aug.p_vflip) flip_v(out);

    if (aug.free_rotation) {
        out = rotate_free(out, u01(rng) * 2.0 * 3.14159265358979323846);
    } else if (aug.right_angle_rotation) {
        // 90/270 need a square target; otherwise restrict to 0/180.
        const bool square = img.h == img.w;
        std::uniform_int_distribution<int> quarter(0, 3);
        int k = quarter(rng);
        if (!square && (k % 2 == 1)) k = (k + 1) % 4;
        for (int i = 0; i < k; ++i) out = rot90(out);
    }
    return out;
}

std::vector<std::vector<int>> batch_indices(int n, int batch_size, uint64_t seed,
                                            int epoch) {
    CSEG_CHECK(batch_size >= 1, "batch_size must be >= 1");
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng rng = make_rng(seed, 0xBA7C0000ULL + static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<int>> batches;
    for (int i = 0; i < n; i += batch_size) {
        batches.emplace_back(order.begin() + i,
                             order.begin() + std::min(n, i + batch_size));
    }
    return batches;
}

const FloatImage& ImageCache::get(const std::string& path) {
    auto it = cache_.find(path);
    if (it != cache_.end()) return it->second;
    return cache_.emplace(path, load_image(path, h_, w_)).first->second;
}

}  // namespace cseg::data
