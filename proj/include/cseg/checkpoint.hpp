#pragma once

#include <json.hpp>

#include "cseg/model.hpp"

namespace cseg::ckpt {

// Self-describing binary container:
//   bytes 0..7   magic "CSEGCKP1"
//   bytes 8..15  little-endian u64 header length N
//   N bytes      JSON header {format_version, meta, tensors:[{name, dtype,
//                shape, offset, bytes}]}
//   payload      raw little-endian scalars, row-major
struct RawTensor {
    std::string dtype;  // "f32" | "f64"
    std::array<int, 4> shape{1, 1, 1, 1};
    std::vector<char> bytes;
};

struct Checkpoint {
    nlohmann::json meta;
    std::vector<std::pair<std::string, RawTensor>> tensors;

    void add(const std::string& name, RawTensor t) { tensors.emplace_back(name, std::move(t)); }
    const RawTensor* find(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return &t;
        return nullptr;
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// ---------------------------------------------------------------------------
// Typed bridges.
// ---------------------------------------------------------------------------

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

template <class T>
RawTensor to_raw(const Tensor<T>& t) {
    RawTensor r;
    r.dtype = dtype_name<T>();
    const Shape4 s = t.shape();
    r.shape = {s.b, s.c, s.h, s.w};
    r.bytes.resize(t.data().size() * sizeof(T));
    std::memcpy(r.bytes.data(), t.data().data(), r.bytes.size());
    return r;
}

template <class T>
RawTensor vec_to_raw(const std::vector<T>& v) {
    RawTensor r;
    r.dtype = dtype_name<T>();
    r.shape = {1, static_cast<int>(v.size()), 1, 1};
    r.bytes.resize(v.size() * sizeof(T));
    std::memcpy(r.bytes.data(), v.data(), r.bytes.size());
    return r;
}

// Converting load: same-dtype loads are bit-exact; cross-precision loads
// convert value-wise.
template <class T>
std::vector<T> raw_to_vec(const RawTensor& r, const std::string& name) {
    std::vector<T> out;
    if (r.dtype == dtype_name<T>()) {
        out.resize(r.bytes.size() / sizeof(T));
        std::memcpy(out.data(), r.bytes.data(), r.bytes.size());
    } else if (r.dtype == "f32") {
        std::vector<float> tmp(r.bytes.size() / sizeof(float));
        std::memcpy(tmp.data(), r.bytes.data(), r.bytes.size());
        out.assign(tmp.begin(), tmp.end());
    } else if (r.dtype == "f64") {
        std::vector<double> tmp(r.bytes.size() / sizeof(double));
        std::memcpy(tmp.data(), r.bytes.data(), r.bytes.size());
        out.assign(tmp.begin(), tmp.end());
    } else {
        fail("checkpoint tensor '", name, "': unknown dtype '", r.dtype, "'");
    }
    return out;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Serializes model parameters + buffers with the config in the header.
template <class T>
Checkpoint checkpoint_from_model(const Model<T>& model) {
    Checkpoint c;
    c.meta["model_config"] = model_config_to_json(model.cfg);
    for (const auto& t : model.params.all()) c.add(t.name(), to_raw(t));
    return c;
}

// Rebuilds a model from a checkpoint. Validation is all-or-nothing: every
// expected tensor must be present with the right element count before any
// state is touched.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
    CSEG_CHECK(c.meta.contains("model_config"), "checkpoint: missing model_config");
    ModelConfig cfg = model_config_from_json(c.meta.at("model_config"));
    Model<T> model = Model<T>::build(cfg);
    std::vector<std::pair<Tensor<T>, std::vector<T>>> staged;
    for (const auto& t : model.params.all()) {
        const RawTensor* r = c.find(t.name());
        CSEG_CHECK(r != nullptr, "checkpoint: missing tensor '", t.name(), "'");
        std::vector<T> vals = raw_to_vec<T>(*r, t.name());
        CSEG_CHECK(static_cast<long>(vals.size()) == t.numel(), "checkpoint tensor '",
                   t.name(), "': ", vals.size(), " values for shape ", t.shape().str());
        staged.emplace_back(t, std::move(vals));
    }
    for (auto& [t, vals] : staged) t.data() = std::move(vals);
    return model;
}

}  // namespace cseg::ckpt
