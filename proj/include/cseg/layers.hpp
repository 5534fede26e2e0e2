#pragma once

#include "cseg/nnops.hpp"

namespace cseg {

enum class Activation { Gelu, Relu };

inline const char* to_string(Activation a) {
    return a == Activation::Gelu ? "gelu" : "relu";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "gelu") return Activation::Gelu;
    if (s == "relu") return Activation::Relu;
    fail("unknown activation '", s, "' (expected gelu|relu)");
}

template <class T>
Tensor<T> apply_activation(Tape<T>& tape, const Tensor<T>& x, Activation a) {
    return a == Activation::Gelu ? gelu(tape, x) : relu(tape, x);
}

template <class T>
struct ConvLayer {
    Tensor<T> w, b;
    int stride = 1, ph = 0, pw = 0;

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
        return conv2d(tape, x, w, b, stride, ph, pw);
    }
};

template <class T>
ConvLayer<T> make_conv(Params<T>& ps, const std::string& name, int co, int ci, int kh,
                       int kw, int stride, int ph, int pw, Rng& rng,
                       bool zero_init = false) {
    ConvLayer<T> l;
    l.w = ps.add(name + ".weight", Tensor<T>::zeros({co, ci, kh, kw}));
    l.b = ps.add(name + ".bias", Tensor<T>::zeros({1, co, 1, 1}));
    l.stride = stride;
    l.ph = ph;
    l.pw = pw;
    if (!zero_init) kaiming_uniform_(l.w, static_cast<long>(ci) * kh * kw, rng);
    return l;
}

template <class T>
struct BatchNormLayer {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, bool train) const {
        auto rm = running_mean;
        auto rv = running_var;
        return batch_norm(tape, x, gamma, beta, rm, rv, train);
    }
};

template <class T>
BatchNormLayer<T> make_bn(Params<T>& ps, const std::string& name, int c) {
    BatchNormLayer<T> l;
    l.gamma = ps.add(name + ".gamma", Tensor<T>::full({1, c, 1, 1}, T(1)));
    l.beta = ps.add(name + ".beta", Tensor<T>::zeros({1, c, 1, 1}));
    l.running_mean = ps.add_buffer(name + ".running_mean", Tensor<T>::zeros({1, c, 1, 1}));
    l.running_var = ps.add_buffer(name + ".running_var", Tensor<T>::full({1, c, 1, 1}, T(1)));
    return l;
}

template <class T>
struct LayerNormLayer {
    Tensor<T> gamma, beta;

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x, Axis axis) const {
        return layer_norm(tape, x, gamma, beta, axis);
    }
};

template <class T>
LayerNormLayer<T> make_ln(Params<T>& ps, const std::string& name, int d) {
    LayerNormLayer<T> l;
    l.gamma = ps.add(name + ".gamma", Tensor<T>::full({1, d, 1, 1}, T(1)));
    l.beta = ps.add(name + ".beta", Tensor<T>::zeros({1, d, 1, 1}));
    return l;
}

template <class T>
struct DepthwiseLayer {
    Tensor<T> w, b;

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& x) const {
        return depthwise_conv2d(tape, x, w, b);
    }
};

template <class T>
DepthwiseLayer<T> make_depthwise(Params<T>& ps, const std::string& name, int c, Rng& rng) {
    DepthwiseLayer<T> l;
    l.w = ps.add(name + ".weight", Tensor<T>::zeros({c, 1, 3, 3}));
    l.b = ps.add(name + ".bias", Tensor<T>::zeros({1, c, 1, 1}));
    kaiming_uniform_(l.w, 9, rng);
    return l;
}

}  // namespace cseg
