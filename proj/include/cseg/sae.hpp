#pragma once

#include "cseg/layers.hpp"

namespace cseg {

// Scale Adaptive Embedder: three parallel convolutional projections of the
// input image. Fine is a 1x1 stride-1 conv, small a 3x3 stride-1 pad-1
// conv, large a 3x3 stride-2 pad-1 conv that halves the spatial dims.
// Each branch is conv -> activation -> batch norm, in that order.

struct SaeConfig {
    int embed_dim = 64;
    int in_channels = 3;

    void validate(int heads) const {
        CSEG_CHECK(embed_dim >= 8, "embed_dim must be >= 8, got ", embed_dim);
        CSEG_CHECK(in_channels >= 1, "in_channels must be >= 1");
        CSEG_CHECK(heads >= 1 && embed_dim % heads == 0, "embed_dim ", embed_dim,
                   " must be divisible by head count ", heads);
    }
};

template <class T>
struct ScaleFeatures {
    Tensor<T> fine, small, large;

    void check_consistent() const {
        const Shape4 f = fine.shape(), s = small.shape(), l = large.shape();
        CSEG_CHECK(f == s, "scale features: fine ", f.str(), " != small ", s.str());
        CSEG_CHECK(l.b == f.b && l.c == f.c, "scale features: large ", l.str(),
                   " batch/channels inconsistent with fine ", f.str());
        CSEG_CHECK((l.h == f.h / 2 && l.w == f.w / 2) || (l.h == f.h && l.w == f.w),
                   "scale features: large ", l.str(), " is neither half nor equal to fine ",
                   f.str());
    }
    bool large_is_halved() const { return large.shape().h == fine.shape().h / 2; }
};

// Token view of one scale: [B, H*W, D, 1] plus the grid it came from.
template <class T>
struct TokenFeatures {
    Tensor<T> tokens;
    int grid_h = 0, grid_w = 0;
};

template <class T>
TokenFeatures<T> tokens_from_spatial(Tape<T>& tape, const Tensor<T>& x) {
    return {to_tokens(tape, x), x.shape().h, x.shape().w};
}

template <class T>
Tensor<T> spatial_from_tokens(Tape<T>& tape, const TokenFeatures<T>& t) {
    return to_spatial(tape, t.tokens, t.grid_h, t.grid_w);
}

template <class T>
struct Sae {
    SaeConfig cfg;
    Activation act = Activation::Gelu;
    ConvLayer<T> conv_fine, conv_small, conv_large;
    BatchNormLayer<T> bn_fine, bn_small, bn_large;

    static Sae build(Params<T>& ps, const SaeConfig& cfg, Activation act, Rng& rng) {
        Sae s;
        s.cfg = cfg;
        s.act = act;
        const int d = cfg.embed_dim, c = cfg.in_channels;
        s.conv_fine = make_conv(ps, "sae.fine.conv", d, c, 1, 1, 1, 0, 0, rng);
        s.bn_fine = make_bn(ps, "sae.fine.bn", d);
        s.conv_small = make_conv(ps, "sae.small.conv", d, c, 3, 3, 1, 1, 1, rng);
        s.bn_small = make_bn(ps, "sae.small.bn", d);
        s.conv_large = make_conv(ps, "sae.large.conv", d, c, 3, 3, 2, 1, 1, rng);
        s.bn_large = make_bn(ps, "sae.large.bn", d);
        return s;
    }

    Tensor<T> embed_branch(Tape<T>& tape, const Tensor<T>& image, const ConvLayer<T>& conv,
                           const BatchNormLayer<T>& bn, bool train) const {
        return bn(tape, apply_activation(tape, conv(tape, image), act), train);
    }

    ScaleFeatures<T> embed(Tape<T>& tape, const Tensor<T>& image, bool train) const {
        const Shape4 s = image.shape();
        CSEG_CHECK(s.h % 2 == 0 && s.w % 2 == 0, "sae: input ", s.str(),
                   " must have even height/width; resize the image to even dims");
        CSEG_CHECK(s.c == cfg.in_channels, "sae: input has ", s.c, " channels, config wants ",
                   cfg.in_channels);
        ScaleFeatures<T> out;
        out.fine = embed_branch(tape, image, conv_fine, bn_fine, train);
        out.small = embed_branch(tape, image, conv_small, bn_small, train);
        out.large = embed_branch(tape, image, conv_large, bn_large, train);
        out.check_consistent();
        return out;
    }

    // The small branch alone; used by the single-scale ablation wirings.
    Tensor<T> embed_single(Tape<T>& tape, const Tensor<T>& image, bool train) const {
        const Shape4 s = image.shape();
        CSEG_CHECK(s.h % 2 == 0 && s.w % 2 == 0, "sae: input ", s.str(),
                   " must have even height/width; resize the image to even dims");
        return embed_branch(tape, image, conv_small, bn_small, train);
    }
};

}  // namespace cseg
