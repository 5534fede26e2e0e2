#pragma once

#include <string>
#include <vector>

#include "cseg/common.hpp"

namespace cseg::stats {

struct PairedTTestResult {
    double mean_diff = 0;
    double t_statistic = 0;
    double p_value = 1;  // two-sided
    int df = 0;
    std::string significance;  // "***", "**", "*", or "ns"
};

// Significance stars: *** p<0.001, ** p<0.01, * p<0.05, else "ns".
std::string significance_stars(double p);

// Two-sided p-value of the Student-t distribution via the regularized
// incomplete beta function.
double student_t_two_sided_p(double t, int df);

// Paired t-test of a against b (differences d = a - b). Requires equal
// lengths n >= 2 and a nonzero variance of the differences.
PairedTTestResult paired_ttest(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace cseg::stats
