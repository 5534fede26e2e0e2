#include "cseg/metrics.hpp"

#include <cmath>
#include <limits>

namespace cseg::metrics {

namespace {

void check_dims(const Mask& p, const Mask& g) {
    CSEG_CHECK(p.h == g.h && p.w == g.w, "mask dims mismatch: ", p.h, "x", p.w, " vs ", g.h,
               "x", g.w);
    CSEG_CHECK(p.v.size() == static_cast<size_t>(p.h) * p.w &&
                   g.v.size() == static_cast<size_t>(g.h) * g.w,
               "mask storage size inconsistent with dims");
}

struct Counts {
    long tp = 0, fp = 0, fn = 0, tn = 0;
};

Counts count_pair(const Mask& p, const Mask& g) {
    Counts c;
    for (size_t i = 0; i < p.v.size(); ++i) {
        const bool pi = p.v[i] != 0, gi = g.v[i] != 0;
        if (pi && gi) ++c.tp;
        else if (pi) ++c.fp;
        else if (gi) ++c.fn;
        else ++c.tn;
    }
    return c;
}

std::vector<std::pair<int, int>> coords_of(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x)) out.emplace_back(y, x);
    return out;
}

// max over a of min over b of euclidean distance.
double directed_hausdorff(const std::vector<std::pair<int, int>>& a,
                          const std::vector<std::pair<int, int>>& b) {
    double worst = 0;
    for (const auto& [ay, ax] : a) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [by, bx] : b) {
            const double dy = ay - by, dx = ax - bx;
            const double d2 = dy * dy + dx * dx;
            if (d2 < best) {
                best = d2;
                if (best == 0) break;
            }
        }
        worst = std::max(worst, best);
    }
    return std::sqrt(worst);
}

}  // namespace

double miou(const Mask& pred, const Mask& gt) {
    check_dims(pred, gt);
    const Counts c = count_pair(pred, gt);
    const long crack_union = c.tp + c.fp + c.fn;
    const double iou_crack =
        crack_union == 0 ? 1.0 : static_cast<double>(c.tp) / crack_union;
    const long bg_union = c.tn + c.fp + c.fn;
    const double iou_bg = bg_union == 0 ? 1.0 : static_cast<double>(c.tn) / bg_union;
    return 0.5 * (iou_crack + iou_bg);
}

double dice(const Mask& pred, const Mask& gt) {
    check_dims(pred, gt);
    const Counts c = count_pair(pred, gt);
    const long denom = 2 * c.tp + c.fp + c.fn;  // |P| + |G|
    if (denom == 0) return 1.0;
    return 2.0 * c.tp / denom;
}

double xor_metric(const Mask& pred, const Mask& gt) {
    check_dims(pred, gt);
    const Counts c = count_pair(pred, gt);
    return static_cast<double>(c.fp + c.fn) / (static_cast<double>(pred.h) * pred.w);
}

double xor_ratio(const Mask& pred, const Mask& gt, bool* defined) {
    check_dims(pred, gt);
    const Counts c = count_pair(pred, gt);
    const long g = c.tp + c.fn;
    if (g == 0) {
        if (defined) *defined = false;
        return std::numeric_limits<double>::quiet_NaN();
    }
    if (defined) *defined = true;
    return static_cast<double>(c.fp + c.fn) / g;
}

double hausdorff(const Mask& pred, const Mask& gt, bool normalize) {
    check_dims(pred, gt);
    const auto p = coords_of(pred);
    const auto g = coords_of(gt);
    const double diag = std::sqrt(static_cast<double>(pred.h) * pred.h +
                                  static_cast<double>(pred.w) * pred.w);
    double hd;
    if (p.empty() && g.empty()) {
        hd = 0.0;
    } else if (p.empty() || g.empty()) {
        hd = diag;  // maximal by convention; callers flag this case
    } else {
        hd = std::max(directed_hausdorff(p, g), directed_hausdorff(g, p));
    }
    return normalize ? hd / diag : hd;
}

ImageMetrics evaluate_pair(const Mask& pred, const Mask& gt) {
    check_dims(pred, gt);
    ImageMetrics m;
    m.miou = miou(pred, gt);
    m.dice = dice(pred, gt);
    m.xor_frac = xor_metric(pred, gt);
    m.xor_ratio = xor_ratio(pred, gt, &m.xor_ratio_defined);
    m.hd_raw = hausdorff(pred, gt, false);
    m.hd_norm = hausdorff(pred, gt, true);
    const bool p_empty = pred.count() == 0, g_empty = gt.count() == 0;
    m.degenerate = p_empty || g_empty;
    return m;
}

Aggregate mean_std(const std::vector<double>& xs) {
    CSEG_CHECK(xs.size() >= 2, "aggregate needs >= 2 values, got ", xs.size());
    Aggregate a;
    a.n = static_cast<int>(xs.size());
    double s = 0;
    for (double x : xs) s += x;
    a.mean = s / a.n;
    double ss = 0;
    for (double x : xs) ss += (x - a.mean) * (x - a.mean);
    a.stddev = std::sqrt(ss / (a.n - 1));
    return a;
}

MetricReport aggregate(std::vector<ImageMetrics> per_image) {
    CSEG_CHECK(per_image.size() >= 2, "aggregate needs >= 2 images, got ", per_image.size());
    MetricReport r;
    std::vector<double> miou_v, dice_v, xorf_v, xorr_v, hdn_v, hdr_v;
    for (const auto& m : per_image) {
        miou_v.push_back(m.miou);
        dice_v.push_back(m.dice);
        xorf_v.push_back(m.xor_frac);
        if (m.xor_ratio_defined) xorr_v.push_back(m.xor_ratio);
        hdn_v.push_back(m.hd_norm);
        hdr_v.push_back(m.hd_raw);
        r.degenerate_count += m.degenerate ? 1 : 0;
    }
    r.miou = mean_std(miou_v);
    r.dice = mean_std(dice_v);
    r.xor_frac = mean_std(xorf_v);
    if (xorr_v.size() >= 2) r.xor_ratio = mean_std(xorr_v);
    r.hd_norm = mean_std(hdn_v);
    r.hd_raw = mean_std(hdr_v);
    r.per_image = std::move(per_image);
    return r;
}

}  // namespace cseg::metrics
