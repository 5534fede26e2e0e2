#pragma once

#include "cseg/sae.hpp"

namespace cseg {

// Directional Attention Transformer. Each block: channel layer norm,
// direction-shaped query/key convolutions ((1,3) horizontal and (3,1)
// vertical by default), point-wise value convolution, element-wise
// attention A_k = softmax((Q_k . K_k) / sqrt(D/heads)) over per-head
// channel groups, context C_k = A_k . V, channel concat of all
// directions reprojected to D, then a depthwise feed-forward stage with
// residuals.

struct DatConfig {
    std::vector<std::pair<int, int>> directions{{1, 3}, {3, 1}};
    int num_blocks = 2;
    int heads = 4;
    bool share_weights_across_scales = false;
    // Adds the block input around the attention stage (standard
    // transformer residual). Off = strict mode: only the feed-forward
    // residual.
    bool attention_residual = true;
    // Ablation: softmax over the spatial extent instead of channel groups.
    bool softmax_spatial = false;
    Activation ffn_act = Activation::Gelu;

    void validate(int embed_dim) const {
        CSEG_CHECK(!directions.empty(), "dat: at least one direction kernel required");
        for (auto [kh, kw] : directions)
            CSEG_CHECK(kh >= 1 && kw >= 1 && kh % 2 == 1 && kw % 2 == 1,
                       "dat: direction kernel (", kh, ",", kw,
                       ") must have odd dims for same-shape padding");
        CSEG_CHECK(num_blocks >= 1, "dat: num_blocks must be >= 1");
        CSEG_CHECK(heads >= 1 && embed_dim % heads == 0, "dat: heads ", heads,
                   " must divide embed_dim ", embed_dim);
    }
};

// Snapshot of the attention tensors of one block (detached values).
template <class T>
struct DirectionalAttention {
    Tensor<T> q, k, a, c;
};

template <class T>
struct ScaleAttentionState {
    std::vector<DirectionalAttention<T>> directions;
    Tensor<T> v;
    // Mean of A_k over directions and channels (all heads): [B,1,h,w].
    Tensor<T> mean_map;
    bool populated = false;
};

template <class T>
struct AttentionState {
    ScaleAttentionState<T> fine, small, large;
    bool populated = false;
};

template <class T>
struct DatBlock {
    LayerNormLayer<T> ln_attn, ln_ffn;
    std::vector<ConvLayer<T>> q_convs, k_convs;
    ConvLayer<T> v_conv, out_conv;
    ConvLayer<T> ffn_expand, ffn_project;
    DepthwiseLayer<T> ffn_dw;

    static DatBlock build(Params<T>& ps, const std::string& prefix, const DatConfig& cfg,
                          int d, Rng& rng) {
        DatBlock blk;
        blk.ln_attn = make_ln(ps, prefix + ".ln_attn", d);
        for (size_t i = 0; i < cfg.directions.size(); ++i) {
            auto [kh, kw] = cfg.directions[i];
            const std::string di = std::to_string(i);
            blk.q_convs.push_back(make_conv(ps, prefix + ".q" + di, d, d, kh, kw, 1,
                                            kh / 2, kw / 2, rng));
            blk.k_convs.push_back(make_conv(ps, prefix + ".k" + di, d, d, kh, kw, 1,
                                            kh / 2, kw / 2, rng));
        }
        blk.v_conv = make_conv(ps, prefix + ".v", d, d, 1, 1, 1, 0, 0, rng);
        const int kd = static_cast<int>(cfg.directions.size()) * d;
        blk.out_conv = make_conv(ps, prefix + ".out", d, kd, 1, 1, 1, 0, 0, rng);
        blk.ln_ffn = make_ln(ps, prefix + ".ln_ffn", d);
        blk.ffn_expand = make_conv(ps, prefix + ".ffn.expand", 2 * d, d, 1, 1, 1, 0, 0, rng);
        blk.ffn_dw = make_depthwise(ps, prefix + ".ffn.dw", 2 * d, rng);
        blk.ffn_project = make_conv(ps, prefix + ".ffn.project", d, 2 * d, 1, 1, 1, 0, 0, rng);
        return blk;
    }

    // x is the spatial form [B,D,h,w]; token<->spatial conversion happens
    // at the module boundary (see dat_block on TokenFeatures below).
    Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, const DatConfig& cfg,
                      ScaleAttentionState<T>* capture) const {
        const Shape4 xs = x.shape();
        const int d = xs.c;
        for (auto [kh, kw] : cfg.directions)
            CSEG_CHECK(kh <= xs.h && kw <= xs.w, "dat: direction kernel (", kh, ",", kw,
                       ") larger than feature map ", xs.str());

        Tensor<T> t = ln_attn(tape, x, Axis::Channel);
        Tensor<T> v = v_conv(tape, t);
        const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d) / cfg.heads));

        std::vector<Tensor<T>> contexts;
        if (capture) {
            capture->directions.clear();
            capture->v = v.detach_copy();
        }
        for (size_t i = 0; i < cfg.directions.size(); ++i) {
            Tensor<T> q = q_convs[i](tape, t);
            Tensor<T> k = k_convs[i](tape, t);
            Tensor<T> sim = affine(tape, mul(tape, q, k), scale, T(0));
            Tensor<T> a = cfg.softmax_spatial ? softmax(tape, sim, Axis::Spatial)
                                              : softmax(tape, sim, Axis::Channel, cfg.heads);
            Tensor<T> c = mul(tape, a, v);
            if (capture) {
                capture->directions.push_back(
                    {q.detach_copy(), k.detach_copy(), a.detach_copy(), c.detach_copy()});
            }
            contexts.push_back(c);
        }

        Tensor<T> attn_out = out_conv(tape, concat_channels(tape, contexts));
        Tensor<T> attn_res = cfg.attention_residual ? add(tape, attn_out, x) : attn_out;

        Tensor<T> f = ln_ffn(tape, attn_res, Axis::Channel);
        f = ffn_expand(tape, f);
        f = ffn_dw(tape, f);
        f = apply_activation(tape, f, cfg.ffn_act);
        f = ffn_project(tape, f);
        Tensor<T> out = add(tape, f, attn_res);

        if (capture) {
            // Across-heads average of each head's peak attention weight.
            // A head's softmax weights sum to 1 at every pixel, so their
            // plain mean is spatially constant; the per-head maximum
            // tracks how sharply the head focuses and varies over space.
            const int ndir = static_cast<int>(capture->directions.size());
            const int heads = cfg.softmax_spatial ? 1 : cfg.heads;
            const int gc = d / heads;
            Tensor<T> mean = Tensor<T>::zeros({xs.b, 1, xs.h, xs.w});
            const long plane = static_cast<long>(xs.h) * xs.w;
            for (const auto& dir : capture->directions) {
                for (int b = 0; b < xs.b; ++b) {
                    T* dst = mean.data().data() + static_cast<long>(b) * plane;
                    for (int hgroup = 0; hgroup < heads; ++hgroup) {
                        for (long p = 0; p < plane; ++p) {
                            T mx = dir.a.data()[idx4(xs, b, hgroup * gc, 0, 0) + p];
                            for (int c = 1; c < gc; ++c)
                                mx = std::max(mx,
                                              dir.a.data()[idx4(xs, b, hgroup * gc + c, 0, 0) + p]);
                            dst[p] += mx;
                        }
                    }
                }
            }
            const T inv = static_cast<T>(1.0 / (static_cast<double>(ndir) * heads));
            for (auto& vmm : mean.data()) vmm *= inv;
            capture->mean_map = mean;
            capture->populated = true;
        }
        return out;
    }
};

// Spec-facing single-block operation on token sequences.
template <class T>
TokenFeatures<T> dat_block(Tape<T>& tape, const TokenFeatures<T>& tokens,
                           const DatBlock<T>& blk, const DatConfig& cfg,
                           ScaleAttentionState<T>* capture = nullptr) {
    Tensor<T> spatial = spatial_from_tokens(tape, tokens);
    Tensor<T> out = blk.forward(tape, spatial, cfg, capture);
    return tokens_from_spatial(tape, out);
}

template <class T>
struct Dat {
    DatConfig cfg;
    std::vector<DatBlock<T>> fine, small, large;

    static Dat build(Params<T>& ps, const DatConfig& cfg, int d, Rng& rng) {
        Dat out;
        out.cfg = cfg;
        for (int i = 0; i < cfg.num_blocks; ++i) {
            const std::string bi = ".block" + std::to_string(i);
            if (cfg.share_weights_across_scales) {
                DatBlock<T> blk = DatBlock<T>::build(ps, "dat.shared" + bi, cfg, d, rng);
                out.fine.push_back(blk);
                out.small.push_back(blk);
                out.large.push_back(blk);
            } else {
                out.fine.push_back(DatBlock<T>::build(ps, "dat.fine" + bi, cfg, d, rng));
                out.small.push_back(DatBlock<T>::build(ps, "dat.small" + bi, cfg, d, rng));
                out.large.push_back(DatBlock<T>::build(ps, "dat.large" + bi, cfg, d, rng));
            }
        }
        return out;
    }

    Tensor<T> refine_scale(Tape<T>& tape, const Tensor<T>& x,
                           const std::vector<DatBlock<T>>& blocks,
                           ScaleAttentionState<T>* capture) const {
        Tensor<T> cur = x;
        for (size_t i = 0; i < blocks.size(); ++i) {
            const bool last = (i + 1 == blocks.size());
            cur = blocks[i].forward(tape, cur, cfg, last ? capture : nullptr);
        }
        return cur;
    }

    // Refines each scale independently; shapes are preserved. When
    // capturing, the final block of each scale records its attention.
    ScaleFeatures<T> refine(Tape<T>& tape, const ScaleFeatures<T>& f,
                            AttentionState<T>* state = nullptr) const {
        ScaleFeatures<T> out;
        out.fine = refine_scale(tape, f.fine, fine, state ? &state->fine : nullptr);
        out.small = refine_scale(tape, f.small, small, state ? &state->small : nullptr);
        out.large = refine_scale(tape, f.large, large, state ? &state->large : nullptr);
        if (state) state->populated = true;
        return out;
    }

    // Single-scale path for the no-multi-scale ablation (uses the
    // small-scale block stack).
    Tensor<T> refine_single(Tape<T>& tape, const Tensor<T>& x,
                            AttentionState<T>* state = nullptr) const {
        Tensor<T> out = refine_scale(tape, x, small, state ? &state->small : nullptr);
        if (state) {
            state->fine = state->small;
            state->large = state->small;
            state->populated = true;
        }
        return out;
    }
};

// Per-scale [B,1,h,w] map rescaled to [0,1] per image. A constant map
// (degenerate min-max) maps to all zeros.
template <class T>
Tensor<T> normalized_attention_map(const ScaleAttentionState<T>& s) {
    CSEG_CHECK(s.populated, "attention_summary: forward pass has not populated the state");
    const Shape4 ms = s.mean_map.shape();
    Tensor<T> out = Tensor<T>::zeros(ms);
    const long plane = static_cast<long>(ms.h) * ms.w;
    for (int b = 0; b < ms.b; ++b) {
        const T* src = s.mean_map.data().data() + static_cast<long>(b) * plane;
        T* dst = out.data().data() + static_cast<long>(b) * plane;
        T lo = src[0], hi = src[0];
        for (long i = 1; i < plane; ++i) {
            lo = std::min(lo, src[i]);
            hi = std::max(hi, src[i]);
        }
        if (hi > lo) {
            const T inv = T(1) / (hi - lo);
            for (long i = 0; i < plane; ++i) dst[i] = (src[i] - lo) * inv;
        }
        // else: all zeros (documented degenerate-normalization convention)
    }
    return out;
}

template <class T>
struct AttentionSummary {
    Tensor<T> fine, small, large;  // each [B,1,h,w] in [0,1]
};

template <class T>
AttentionSummary<T> attention_summary(const AttentionState<T>& state) {
    CSEG_CHECK(state.populated, "attention_summary: forward pass has not populated the state");
    return {normalized_attention_map(state.fine), normalized_attention_map(state.small),
            normalized_attention_map(state.large)};
}

}  // namespace cseg
