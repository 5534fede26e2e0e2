#pragma once

#include "cseg/image_io.hpp"
#include "cseg/metrics.hpp"

namespace cseg::synthgen {

// Deterministic generator of crack-like test images: dark curvilinear
// strokes over a lightly textured background, with exact stroke-raster
// masks. Per-image determinism is keyed by (seed, index).
struct SynthSpec {
    int count = 64;
    int height = 256, width = 256;
    int min_strokes = 1, max_strokes = 3;
    int min_width_px = 1, max_width_px = 4;
    double noise_sigma = 0.04;   // background texture noise
    double contrast_gap = 0.45;  // stroke darkness below the local background
    uint64_t seed = 0;

    void validate() const {
        CSEG_CHECK(count >= 0, "synthgen: count must be >= 0");
        CSEG_CHECK(height >= 32 && width >= 32 && height % 2 == 0 && width % 2 == 0,
                   "synthgen: dims must be even and >= 32");
        CSEG_CHECK(0 <= min_strokes && min_strokes <= max_strokes,
                   "synthgen: bad stroke count range");
        CSEG_CHECK(1 <= min_width_px && min_width_px <= max_width_px,
                   "synthgen: bad stroke width range");
        CSEG_CHECK(noise_sigma >= 0 && contrast_gap > 0, "synthgen: bad noise/contrast");
    }
};

struct SynthImage {
    imgio::ImageU8 image;
    metrics::Mask mask;
};

SynthImage generate_one(const SynthSpec& spec, int index);

// Writes <out_dir>/images/synth_NNNN.png and <out_dir>/masks/synth_NNNN.png.
void generate(const SynthSpec& spec, const std::string& out_dir);

}  // namespace cseg::synthgen
