#pragma once

#include "cseg/agf.hpp"
#include "cseg/dat.hpp"

namespace cseg {

// Ablation variants: which modules take part in the forward pass.
//   full         : SAE -> DAT -> AGF -> decoder
//   v0           : SAE -> unweighted sum fusion -> decoder
//   v1           : SAE -> DAT -> unweighted sum fusion -> decoder
//   v2           : SAE -> AGF -> decoder
//   v3           : single-scale embed -> DAT -> AGF (scale replicated)
//   baseline-off : single-scale embed -> decoder (every module off)
enum class Variant { Full, V0, V1, V2, V3, BaselineOff };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::Full: return "full";
        case Variant::V0: return "v0";
        case Variant::V1: return "v1";
        case Variant::V2: return "v2";
        case Variant::V3: return "v3";
        case Variant::BaselineOff: return "baseline-off";
    }
    return "?";
}

inline Variant variant_from_string(const std::string& s) {
    if (s == "full") return Variant::Full;
    if (s == "v0") return Variant::V0;
    if (s == "v1") return Variant::V1;
    if (s == "v2") return Variant::V2;
    if (s == "v3") return Variant::V3;
    if (s == "baseline-off") return Variant::BaselineOff;
    fail("unknown variant '", s, "' (expected full|v0|v1|v2|v3|baseline-off)");
}

struct ModelConfig {
    SaeConfig sae;
    DatConfig dat;
    Variant variant = Variant::Full;
    Activation activation = Activation::Gelu;  // SAE branch nonlinearity
    uint64_t seed = 0;

    void validate() const {
        sae.validate(dat.heads);
        dat.validate(sae.embed_dim);
    }

    bool uses_sae_multiscale() const {
        return variant == Variant::Full || variant == Variant::V0 ||
               variant == Variant::V1 || variant == Variant::V2;
    }
    bool uses_dat() const {
        return variant == Variant::Full || variant == Variant::V1 || variant == Variant::V3;
    }
    bool uses_agf() const {
        return variant == Variant::Full || variant == Variant::V2 || variant == Variant::V3;
    }
};

// Thresholded predictions. probs in [0,1]; mask and pseudo_target use the
// same >= 0.5 rule.
template <class T>
struct PredictionBatch {
    int b = 0, h = 0, w = 0;
    std::vector<T> probs;            // O, length b*h*w
    std::vector<uint8_t> mask;          // S-hat
    std::vector<uint8_t> pseudo_target;  // T
};

// Per-forward module execution counters; lets tests assert that disabled
// modules never run.
struct ModelStats {
    long sae_forwards = 0;
    long dat_block_forwards = 0;
    long agf_forwards = 0;
    long sum_fusion_forwards = 0;
    void reset() { *this = ModelStats{}; }
};

template <class T>
struct ForwardResult {
    Tensor<T> probs;  // [B,1,H,W], connected to the tape for loss building
    PredictionBatch<T> pred;
    ScaleFeatures<T> refined;
    FusionState<T> fusion;
    AttentionState<T> attention;
};

template <class T>
struct Model {
    ModelConfig cfg;
    Params<T> params;
    Sae<T> sae;
    Dat<T> dat;
    Agf<T> agf;
    ConvLayer<T> sum_proj;  // 1x1 D->D for the unweighted sum-fusion bypass
    ConvLayer<T> decoder;   // 1x1 D->1
    mutable ModelStats stats;

    static Model build(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng = make_rng(cfg.seed, /*stream=*/0xC0DE);
        const int d = cfg.sae.embed_dim;
        m.sae = Sae<T>::build(m.params, cfg.sae, cfg.activation, rng);
        m.dat = Dat<T>::build(m.params, cfg.dat, d, rng);
        m.agf = Agf<T>::build(m.params, d, rng);
        m.sum_proj = make_conv(m.params, "fusion.sum_proj", d, d, 1, 1, 1, 0, 0, rng);
        m.decoder = make_conv(m.params, "decoder", 1, d, 1, 1, 1, 0, 0, rng);
        return m;
    }

    // Unweighted fusion bypass for variants without AGF: fine + small +
    // projected(upsampled large).
    Tensor<T> sum_fusion(Tape<T>& tape, const ScaleFeatures<T>& f) const {
        ++stats.sum_fusion_forwards;
        Tensor<T> large_full =
            f.large_is_halved() ? bilinear_upsample2x(tape, f.large) : f.large;
        Tensor<T> lp = sum_proj(tape, large_full);
        return add(tape, add(tape, f.fine, f.small), lp);
    }

    ForwardResult<T> forward(Tape<T>& tape, const Tensor<T>& image, bool train,
                             bool capture_attention = false) const {
        const Shape4 s = image.shape();
        CSEG_CHECK(s.h % 2 == 0 && s.w % 2 == 0 && s.h >= 16 && s.w >= 16,
                   "model: input ", s.str(), " must have even height/width >= 16");
        ForwardResult<T> r;
        AttentionState<T>* cap = capture_attention ? &r.attention : nullptr;

        Tensor<T> fused;
        switch (cfg.variant) {
            case Variant::Full: {
                ++stats.sae_forwards;
                auto f = sae.embed(tape, image, train);
                r.refined = dat.refine(tape, f, cap);
                stats.dat_block_forwards += 3L * cfg.dat.num_blocks;
                ++stats.agf_forwards;
                std::tie(fused, r.fusion) = agf.fuse(tape, r.refined);
                break;
            }
            case Variant::V0: {
                ++stats.sae_forwards;
                auto f = sae.embed(tape, image, train);
                r.refined = f;
                fused = sum_fusion(tape, f);
                break;
            }
            case Variant::V1: {
                ++stats.sae_forwards;
                auto f = sae.embed(tape, image, train);
                r.refined = dat.refine(tape, f, cap);
                stats.dat_block_forwards += 3L * cfg.dat.num_blocks;
                fused = sum_fusion(tape, r.refined);
                break;
            }
            case Variant::V2: {
                ++stats.sae_forwards;
                auto f = sae.embed(tape, image, train);
                r.refined = f;
                ++stats.agf_forwards;
                std::tie(fused, r.fusion) = agf.fuse(tape, f);
                break;
            }
            case Variant::V3: {
                ++stats.sae_forwards;
                Tensor<T> e = sae.embed_single(tape, image, train);
                Tensor<T> refined = dat.refine_single(tape, e, cap);
                stats.dat_block_forwards += cfg.dat.num_blocks;
                r.refined = {refined, refined, refined};
                ++stats.agf_forwards;
                std::tie(fused, r.fusion) = agf.fuse(tape, r.refined);
                break;
            }
            case Variant::BaselineOff: {
                ++stats.sae_forwards;
                Tensor<T> e = sae.embed_single(tape, image, train);
                r.refined = {e, e, e};
                fused = e;
                break;
            }
        }

        r.probs = sigmoid(tape, decoder(tape, fused));
        r.pred = make_predictions(r.probs);
        return r;
    }

    static PredictionBatch<T> make_predictions(const Tensor<T>& probs) {
        const Shape4 ps = probs.shape();
        PredictionBatch<T> out;
        out.b = ps.b;
        out.h = ps.h;
        out.w = ps.w;
        out.probs = probs.data();
        out.mask.resize(out.probs.size());
        out.pseudo_target.resize(out.probs.size());
        for (size_t i = 0; i < out.probs.size(); ++i) {
            const uint8_t bit = out.probs[i] >= T(0.5) ? 1 : 0;
            out.mask[i] = bit;
            out.pseudo_target[i] = bit;
        }
        return out;
    }
};

}  // namespace cseg
