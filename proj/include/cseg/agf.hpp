#pragma once

#include <array>

#include "cseg/sae.hpp"

namespace cseg {

// Attention-Guided Fusion: upsample + 1x1-project the large scale,
// concatenate [large_proj; small; fine] along channels, compute a
// 3-channel sigmoid attention map, weight each D-channel slab by its
// attention slice and sum. The attention conv is zero-initialized so an
// untrained model fuses with neutral 0.5 weights.

template <class T>
struct FusionState {
    Tensor<T> large_proj;  // [B,D,H,W]
    Tensor<T> concat;      // [B,3D,H,W]
    Tensor<T> attn;        // [B,3,H,W], sigmoid outputs
    Tensor<T> fused;       // [B,D,H,W]
    bool populated = false;
};

template <class T>
struct Agf {
    ConvLayer<T> proj;       // 1x1, D -> D, applied to the upsampled large scale
    ConvLayer<T> attn_conv;  // 1x1, 3D -> 3, zero-initialized

    static Agf build(Params<T>& ps, int d, Rng& rng) {
        Agf a;
        a.proj = make_conv(ps, "agf.proj", d, d, 1, 1, 1, 0, 0, rng);
        a.attn_conv = make_conv(ps, "agf.attn", 3, 3 * d, 1, 1, 1, 0, 0, rng,
                                /*zero_init=*/true);
        return a;
    }

    std::pair<Tensor<T>, FusionState<T>> fuse(Tape<T>& tape,
                                              const ScaleFeatures<T>& refined) const {
        refined.check_consistent();
        const int d = refined.fine.shape().c;

        FusionState<T> st;
        // The ablation that replicates a single scale hands in a large map
        // already at full resolution; only the halved form is upsampled.
        Tensor<T> large_full = refined.large_is_halved()
                                   ? bilinear_upsample2x(tape, refined.large)
                                   : refined.large;
        st.large_proj = proj(tape, large_full);

        st.concat = concat_channels(tape, {st.large_proj, refined.small, refined.fine});
        st.attn = sigmoid(tape, attn_conv(tape, st.concat));

        Tensor<T> slab_l = slice_channels(tape, st.concat, 0, d);
        Tensor<T> slab_s = slice_channels(tape, st.concat, d, 2 * d);
        Tensor<T> slab_f = slice_channels(tape, st.concat, 2 * d, 3 * d);
        Tensor<T> w_l = mul_channel(tape, slab_l, slice_channels(tape, st.attn, 0, 1));
        Tensor<T> w_s = mul_channel(tape, slab_s, slice_channels(tape, st.attn, 1, 2));
        Tensor<T> w_f = mul_channel(tape, slab_f, slice_channels(tape, st.attn, 2, 3));
        st.fused = add(tape, add(tape, w_l, w_s), w_f);
        st.populated = true;
        return {st.fused, st};
    }
};

// Batch+spatial mean of each attention channel, order (large, small, fine).
template <class T>
std::array<double, 3> fusion_weight_summary(const FusionState<T>& st) {
    CSEG_CHECK(st.populated, "fusion_weight_summary: state not populated by a forward pass");
    const Shape4 s = st.attn.shape();
    std::array<double, 3> out{0, 0, 0};
    const long plane = static_cast<long>(s.h) * s.w;
    for (int b = 0; b < s.b; ++b)
        for (int c = 0; c < 3; ++c) {
            const T* src = st.attn.data().data() + idx4(s, b, c, 0, 0);
            double acc = 0;
            for (long i = 0; i < plane; ++i) acc += src[i];
            out[c] += acc;
        }
    for (auto& v : out) v /= static_cast<double>(s.b) * plane;
    return out;
}

}  // namespace cseg
