#include "cseg/synthgen.hpp"

#include <cmath>
#include <filesystem>

namespace cseg::synthgen {

namespace {

struct Background {
    double base, gx, gy;
    int h, w;
    // Smooth background value before texture noise.
    double clean(int y, int x) const {
        return base + gx * (static_cast<double>(x) / w - 0.5) +
               gy * (static_cast<double>(y) / h - 0.5);
    }
};

// Stamps a disk of diameter `width_px` centered at (cy, cx).
void stamp(metrics::Mask& mask, double cy, double cx, int width_px) {
    const double r = width_px / 2.0;
    const int iy0 = static_cast<int>(std::floor(cy - r)), iy1 = static_cast<int>(std::ceil(cy + r));
    const int ix0 = static_cast<int>(std::floor(cx - r)), ix1 = static_cast<int>(std::ceil(cx + r));
    for (int y = std::max(0, iy0); y <= std::min(mask.h - 1, iy1); ++y)
        for (int x = std::max(0, ix0); x <= std::min(mask.w - 1, ix1); ++x) {
            const double dy = y - cy, dx = x - cx;
            if (dy * dy + dx * dx <= r * r + 1e-9) mask.at(y, x) = 1;
        }
}

void draw_segment(metrics::Mask& mask, double y0, double x0, double y1, double x1,
                  int width_px) {
    const double len = std::hypot(y1 - y0, x1 - x0);
    const int steps = std::max(1, static_cast<int>(std::ceil(len * 2)));
    for (int s = 0; s <= steps; ++s) {
        const double t = static_cast<double>(s) / steps;
        stamp(mask, y0 + t * (y1 - y0), x0 + t * (x1 - x0), width_px);
    }
}

// One wandering polyline crossing the image; keeps adding wander segments
// until the requested path length (Chebyshev metric) is covered.
void draw_stroke(metrics::Mask& mask, Rng& rng, int width_px, double min_chebyshev_len) {
    const int h = mask.h, w = mask.w;
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const bool horizontal = u01(rng) < 0.5;  // main progression axis
    const int segments = 6;
    double covered = 0;
    double py, px;
    if (horizontal) {
        px = 0;
        py = (0.1 + 0.8 * u01(rng)) * h;
    } else {
        py = 0;
        px = (0.1 + 0.8 * u01(rng)) * w;
    }
    int seg = 0;
    while (seg < segments || covered < min_chebyshev_len) {
        double ny, nx;
        if (horizontal) {
            nx = std::min<double>(w - 1, px + static_cast<double>(w) / segments);
            // force enough lateral wander to keep the path long
            const double dy = (0.25 + 0.35 * u01(rng)) * h * (u01(rng) < 0.5 ? 1 : -1);
            ny = std::min<double>(h - 1.0, std::max(0.0, py + dy));
        } else {
            ny = std::min<double>(h - 1, py + static_cast<double>(h) / segments);
            const double dx = (0.25 + 0.35 * u01(rng)) * w * (u01(rng) < 0.5 ? 1 : -1);
            nx = std::min<double>(w - 1.0, std::max(0.0, px + dx));
        }
        draw_segment(mask, py, px, ny, nx, width_px);
        covered += std::max(std::abs(ny - py), std::abs(nx - px));
        py = ny;
        px = nx;
        ++seg;
        if (seg > 4 * segments) break;  // safety bound
        if (horizontal && px >= w - 1 && seg >= segments && covered >= min_chebyshev_len)
            break;
        if (!horizontal && py >= h - 1 && seg >= segments && covered >= min_chebyshev_len)
            break;
        // wrap the progression axis if length is still short
        if (horizontal && px >= w - 1) px = 0;
        if (!horizontal && py >= h - 1) py = 0;
    }
}

}  // namespace

SynthImage generate_one(const SynthSpec& spec, int index) {
    spec.validate();
    Rng rng = make_rng(spec.seed, 0x5EED0000ULL + static_cast<uint64_t>(index));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma);

    const int h = spec.height, w = spec.width;
    Background bg{0.55 + 0.2 * u01(rng), 0.16 * (u01(rng) - 0.5), 0.16 * (u01(rng) - 0.5),
                  h, w};

    std::uniform_int_distribution<int> stroke_count(spec.min_strokes, spec.max_strokes);
    std::uniform_int_distribution<int> stroke_width(spec.min_width_px, spec.max_width_px);
    const int n_strokes = stroke_count(rng);

    metrics::Mask mask(h, w);
    const double total_px = static_cast<double>(h) * w;
    // Sparsity guards: a worst-case wide stroke adds ~7% of the pixels, so
    // stop adding strokes above 3% to keep every mask under 10%, and top
    // up thin-stroke images to at least 0.6%.
    const double min_fraction = 0.006, stop_fraction = 0.03;
    for (int s = 0; s < n_strokes; ++s) {
        if (s > 0 && mask.count() > stop_fraction * total_px) break;
        draw_stroke(mask, rng, stroke_width(rng), 1.7 * std::max(h, w));
    }
    // Guarantee a usable minimum of crack pixels (degenerate zero-stroke
    // configs skip this: an empty mask is then intended).
    int guard = 0;
    while (n_strokes > 0 && mask.count() < min_fraction * total_px && guard++ < 8)
        draw_stroke(mask, rng, std::max(2, spec.min_width_px), 1.7 * std::max(h, w));

    std::vector<float> img(static_cast<size_t>(3) * h * w);
    const long plane = static_cast<long>(h) * w;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double clean = bg.clean(y, x);
            double v;
            if (mask.at(y, x)) {
                v = clean - spec.contrast_gap + noise(rng) * 0.25;
            } else {
                v = clean + noise(rng);
            }
            v = std::min(1.0, std::max(0.0, v));
            const long i = static_cast<long>(y) * w + x;
            img[i] = img[plane + i] = img[2 * plane + i] = static_cast<float>(v);
        }

    SynthImage out;
    out.image = imgio::chw_to_u8(img, 3, h, w);
    out.mask = std::move(mask);
    return out;
}

void generate(const SynthSpec& spec, const std::string& out_dir) {
    spec.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    fs::create_directories(fs::path(out_dir) / "masks");
    for (int i = 0; i < spec.count; ++i) {
        SynthImage si = generate_one(spec, i);
        char name[32];
        std::snprintf(name, sizeof(name), "synth_%04d.png", i);
        imgio::write_png((fs::path(out_dir) / "images" / name).string(), si.image);
        imgio::write_mask_png((fs::path(out_dir) / "masks" / name).string(), si.mask);
    }
}

}  // namespace cseg::synthgen
