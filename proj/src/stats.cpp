#include "cseg/stats.hpp"

#include <cmath>

namespace cseg::stats {

namespace {

// Lentz's continued fraction for the regularized incomplete beta.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-14, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double ibeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log(1.0 - x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
    return 1.0 - front * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

std::string significance_stars(double p) {
    if (p < 0.001) return "***";
    if (p < 0.01) return "**";
    if (p < 0.05) return "*";
    return "ns";
}

double student_t_two_sided_p(double t, int df) {
    CSEG_CHECK(df >= 1, "t-distribution needs df >= 1, got ", df);
    const double x = df / (df + t * t);
    return ibeta(df / 2.0, 0.5, x);
}

PairedTTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
    CSEG_CHECK(a.size() == b.size(), "paired t-test: length mismatch ", a.size(), " vs ",
               b.size());
    const int n = static_cast<int>(a.size());
    CSEG_CHECK(n >= 2, "paired t-test needs n >= 2, got ", n);
    std::vector<double> d(n);
    for (int i = 0; i < n; ++i) d[i] = a[i] - b[i];
    double mean = 0;
    for (double x : d) mean += x;
    mean /= n;
    double ss = 0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double var = ss / (n - 1);
    CSEG_CHECK(var > 0, "paired t-test: differences have zero variance (all equal to ",
               mean, "); t statistic undefined");
    PairedTTestResult r;
    r.mean_diff = mean;
    r.df = n - 1;
    r.t_statistic = mean / std::sqrt(var / n);
    r.p_value = student_t_two_sided_p(r.t_statistic, r.df);
    r.significance = significance_stars(r.p_value);
    return r;
}

}  // namespace cseg::stats
