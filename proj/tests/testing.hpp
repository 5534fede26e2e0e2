#pragma once

#include <functional>

#include "cseg/nnops.hpp"

namespace cseg::testing {

// Central-difference gradient checker. `forward` must rebuild the loss
// from the current parameter values on a fresh tape each call. Checks
// n_coords randomly chosen coordinates across the given tensors.
struct FdReport {
    int checked = 0;
    int failed = 0;
    double worst_rel = 0;
    std::string first_failure;
};

inline FdReport fd_check(const std::function<Tensor<double>(Tape<double>&)>& forward,
                         const std::vector<Tensor<double>>& tensors, int n_coords,
                         double eps, double rel_tol, double abs_floor, Rng& rng) {
    // Analytic pass.
    for (const auto& t : tensors) {
        auto& g = const_cast<Tensor<double>&>(t).grad();
        std::fill(g.begin(), g.end(), 0.0);
    }
    Tape<double> tape;
    Tensor<double> loss = forward(tape);
    tape.backward(loss);

    std::vector<std::pair<int, long>> coords;
    long total = 0;
    for (const auto& t : tensors) total += t.numel();
    std::uniform_int_distribution<long> pick(0, total - 1);
    for (int i = 0; i < n_coords; ++i) {
        long flat = pick(rng);
        for (size_t ti = 0; ti < tensors.size(); ++ti) {
            if (flat < tensors[ti].numel()) {
                coords.emplace_back(static_cast<int>(ti), flat);
                break;
            }
            flat -= tensors[ti].numel();
        }
    }

    FdReport rep;
    for (auto [ti, k] : coords) {
        auto& t = const_cast<Tensor<double>&>(tensors[ti]);
        const double analytic = t.grad()[k];
        const double orig = t.data()[k];
        t.data()[k] = orig + eps;
        Tape<double> tp;
        const double lp = forward(tp).item();
        t.data()[k] = orig - eps;
        Tape<double> tm;
        const double lm = forward(tm).item();
        t.data()[k] = orig;
        const double fd = (lp - lm) / (2 * eps);
        const double err = std::abs(analytic - fd);
        const double scale = std::max(std::abs(analytic), std::abs(fd));
        const double rel = scale > 0 ? err / scale : 0.0;
        ++rep.checked;
        if (err > abs_floor && rel > rel_tol) {
            ++rep.failed;
            if (rep.first_failure.empty()) {
                std::ostringstream os;
                os << "tensor " << ti << " ('" << tensors[ti].name() << "') coord " << k
                   << ": analytic " << analytic << " vs fd " << fd << " (rel " << rel << ")";
                rep.first_failure = os.str();
            }
        }
        rep.worst_rel = std::max(rep.worst_rel, rel);
    }
    return rep;
}

inline Tensor<double> random_tensor(Shape4 s, Rng& rng, double scale = 1.0,
                                    bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor<double> t = Tensor<double>::zeros(s, requires_grad);
    for (auto& v : t.data()) v = dist(rng);
    if (requires_grad) t.grad();
    return t;
}

template <class T>
Tensor<T> random_tensor_t(Shape4 s, Rng& rng, double scale = 1.0,
                          bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, scale);
    Tensor<T> t = Tensor<T>::zeros(s, requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    if (requires_grad) t.grad();
    return t;
}

}  // namespace cseg::testing
