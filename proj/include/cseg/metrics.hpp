#pragma once

#include <string>
#include <vector>

#include "cseg/common.hpp"

namespace cseg::metrics {

// Binary mask, row-major, values 0/1.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {}
    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    long count() const {
        long n = 0;
        for (uint8_t b : v) n += (b != 0);
        return n;
    }
};

// Mean IoU over the two classes (crack and background). Empty-class
// convention: a class absent from both masks scores IoU 1.
double miou(const Mask& pred, const Mask& gt);

// Crack-class Dice; 1.0 when both masks are empty.
double dice(const Mask& pred, const Mask& gt);

// Fraction of disagreeing pixels (XOR count / (H*W)).
double xor_metric(const Mask& pred, const Mask& gt);

// XOR count / |gt|; undefined (returns NaN) when gt is empty.
double xor_ratio(const Mask& pred, const Mask& gt, bool* defined = nullptr);

// Symmetric Hausdorff distance between crack-pixel coordinate sets.
// Conventions: both empty -> 0; exactly one empty -> the image diagonal
// (i.e. 1 after normalization). normalize divides by sqrt(H^2+W^2).
double hausdorff(const Mask& pred, const Mask& gt, bool normalize);

struct ImageMetrics {
    std::string name;
    double miou = 0, dice = 0, xor_frac = 0;
    double xor_ratio = 0;  // NaN when undefined
    bool xor_ratio_defined = true;
    double hd_norm = 0, hd_raw = 0;
    bool degenerate = false;  // an empty-mask convention was applied
};

// All metrics for one prediction/ground-truth pair.
ImageMetrics evaluate_pair(const Mask& pred, const Mask& gt);

struct Aggregate {
    double mean = 0;
    double stddev = 0;  // sample standard deviation (n-1)
    int n = 0;
};

Aggregate mean_std(const std::vector<double>& xs);

struct MetricReport {
    std::vector<ImageMetrics> per_image;
    Aggregate miou, dice, xor_frac, xor_ratio, hd_norm, hd_raw;
    int degenerate_count = 0;
};

// Aggregates per-image metrics; needs >= 2 images. The xor_ratio
// aggregate covers only images where it is defined.
MetricReport aggregate(std::vector<ImageMetrics> per_image);

}  // namespace cseg::metrics
