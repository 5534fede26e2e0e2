#pragma once

#include "cseg/model.hpp"

namespace cseg {

// Self-supervision losses: pseudo-label cross-entropy on the model's own
// thresholded output, cosine agreement of pooled context vectors across
// scales, and an L1 pull of a per-scale token self-similarity matrix
// toward identity. Total = CE + (1/B) sum_b (inter_b + intra_b).

struct LossConfig {
    double lambda1 = 0.1;  // inter-scale weight
    double lambda2 = 0.1;  // intra-scale weight
    int intra_grid = 16;   // token grid side for the self-similarity matrix
    // The pseudo-target is a hard threshold of the output; its derivative
    // is zero almost everywhere, so disabling this flag changes nothing
    // numerically. Kept as an explicit switch for the strict formulation.
    bool stop_gradient_target = true;

    void validate() const {
        CSEG_CHECK(lambda1 >= 0 && lambda2 >= 0, "loss: lambda weights must be >= 0");
        CSEG_CHECK(intra_grid >= 1, "loss: intra_grid must be >= 1");
    }
};

// Per-item scalar components and the batch total.
struct LossReport {
    double ce = 0;
    double inter = 0;  // (1/B) sum of per-item inter losses
    double intra = 0;  // (1/B) sum of per-item intra losses
    double total = 0;
    std::vector<double> inter_per_item;
    std::vector<double> intra_per_item;
};

// Global average pool of each refined scale: [B,D,1,1] context vectors.
template <class T>
struct ContextVectors {
    Tensor<T> fine, small, large;
};

template <class T>
ContextVectors<T> context_vectors(Tape<T>& tape, const ScaleFeatures<T>& refined) {
    return {global_avg_pool(tape, refined.fine), global_avg_pool(tape, refined.small),
            global_avg_pool(tape, refined.large)};
}

// lambda1 * [(1 - cos(Gf,Gs)) + (1 - cos(Gs,Gl))], per batch item ->
// [B,1,1,1]. Value range [0, 4*lambda1].
template <class T>
Tensor<T> inter_scale_loss(Tape<T>& tape, const ContextVectors<T>& g, T lambda1) {
    Tensor<T> cos_fs = cosine_per_item(tape, g.fine, g.small);
    Tensor<T> cos_sl = cosine_per_item(tape, g.small, g.large);
    return add(tape, affine(tape, cos_fs, -lambda1, lambda1),
               affine(tape, cos_sl, -lambda1, lambda1));
}

// Row-stochastic token self-similarity matrix of one scale: the scale map
// is adaptively pooled to grid x grid, flattened to L = grid^2 tokens X,
// and A = row_softmax(X X^T / sqrt(D)). Output [B,L,L,1].
template <class T>
Tensor<T> self_similarity(Tape<T>& tape, const Tensor<T>& scale_map, int grid) {
    const Shape4 s = scale_map.shape();
    CSEG_CHECK(s.h >= grid && s.w >= grid, "self_similarity: feature map ", s.str(),
               " smaller than intra_grid ", grid, "; lower intra_grid");
    Tensor<T> pooled = adaptive_avg_pool(tape, scale_map, grid, grid);
    Tensor<T> tokens = to_tokens(tape, pooled);  // [B, L, D, 1]
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(s.c)));
    Tensor<T> logits = gram(tape, tokens, scale);
    return softmax(tape, logits, Axis::Dim2);  // rows sum to 1
}

// lambda2 * mean |A - I|, per batch item -> [B,1,1,1].
template <class T>
Tensor<T> intra_scale_loss(Tape<T>& tape, const Tensor<T>& a, T lambda2) {
    Tensor<T> dev = abs_mean_minus_identity(tape, a);
    return affine(tape, dev, lambda2, T(0));
}

// Pseudo cross-entropy over all pixels of the batch. Target is the
// model's own thresholded output, treated as a constant.
template <class T>
Tensor<T> pseudo_ce_loss(Tape<T>& tape, const Tensor<T>& probs, const Tensor<T>& target) {
    return bce_with_target(tape, probs, target);
}

template <class T>
struct TotalLoss {
    Tensor<T> total;  // scalar on tape
    LossReport report;
};

// total = ce + (1/B) sum_b (inter_b + intra_b)
template <class T>
Tensor<T> total_from_components(Tape<T>& tape, const Tensor<T>& ce,
                                const Tensor<T>& inter_per_item,
                                const Tensor<T>& intra_per_item) {
    Tensor<T> per_item = add(tape, inter_per_item, intra_per_item);
    return add(tape, ce, reduce_mean_all(tape, per_item));
}

// Assembles the full objective from a forward result.
template <class T>
TotalLoss<T> total_loss(Tape<T>& tape, const ForwardResult<T>& fr, const LossConfig& cfg) {
    cfg.validate();
    const int b = fr.probs.shape().b;

    Tensor<T> target = threshold_ge(fr.probs, T(0.5));
    if (!cfg.stop_gradient_target) {
        // The threshold step has zero derivative a.e., so flowing through
        // it contributes nothing; the hard target stays a constant either
        // way. Flag preserved for configuration transparency.
    }
    Tensor<T> ce = pseudo_ce_loss(tape, fr.probs, target);

    ContextVectors<T> g = context_vectors(tape, fr.refined);
    Tensor<T> inter_b = inter_scale_loss(tape, g, static_cast<T>(cfg.lambda1));

    // Intra loss averaged over the three scales per item.
    Tensor<T> a_fine = self_similarity(tape, fr.refined.fine, cfg.intra_grid);
    Tensor<T> a_small = self_similarity(tape, fr.refined.small, cfg.intra_grid);
    Tensor<T> a_large = self_similarity(tape, fr.refined.large, cfg.intra_grid);
    Tensor<T> intra_sum =
        add(tape, add(tape, intra_scale_loss(tape, a_fine, static_cast<T>(cfg.lambda2)),
                      intra_scale_loss(tape, a_small, static_cast<T>(cfg.lambda2))),
            intra_scale_loss(tape, a_large, static_cast<T>(cfg.lambda2)));
    Tensor<T> intra_b = affine(tape, intra_sum, static_cast<T>(1.0 / 3.0), T(0));

    TotalLoss<T> out;
    out.total = total_from_components(tape, ce, inter_b, intra_b);

    out.report.ce = static_cast<double>(ce.item());
    out.report.total = static_cast<double>(out.total.item());
    out.report.inter_per_item.resize(b);
    out.report.intra_per_item.resize(b);
    for (int i = 0; i < b; ++i) {
        out.report.inter_per_item[i] = static_cast<double>(inter_b.data()[i]);
        out.report.intra_per_item[i] = static_cast<double>(intra_b.data()[i]);
        out.report.inter += out.report.inter_per_item[i] / b;
        out.report.intra += out.report.intra_per_item[i] / b;
    }
    return out;
}

}  // namespace cseg
