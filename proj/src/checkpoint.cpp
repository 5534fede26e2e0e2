#include "cseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace cseg::ckpt {

namespace {
constexpr char kMagic[8] = {'C', 'S', 'E', 'G', 'C', 'K', 'P', '1'};
constexpr int kFormatVersion = 1;
}  // namespace

void Checkpoint::save(const std::string& path) const {
    nlohmann::json header;
    header["format_version"] = kFormatVersion;
    header["meta"] = meta;
    nlohmann::json tens = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        tens.push_back({{"name", name},
                        {"dtype", t.dtype},
                        {"shape", t.shape},
                        {"offset", offset},
                        {"bytes", t.bytes.size()}});
        offset += t.bytes.size();
    }
    header["tensors"] = tens;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    CSEG_CHECK(f.good(), "cannot write checkpoint: ", path);
    f.write(kMagic, 8);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : tensors)
        f.write(t.bytes.data(), static_cast<std::streamsize>(t.bytes.size()));
    f.flush();
    CSEG_CHECK(f.good(), "write failed for checkpoint: ", path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    CSEG_CHECK(f.good(), "cannot open checkpoint: ", path);
    char magic[8];
    f.read(magic, 8);
    CSEG_CHECK(f.gcount() == 8 && std::memcmp(magic, kMagic, 8) == 0,
               "not a checkpoint file (bad magic): ", path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    CSEG_CHECK(f.gcount() == 8, "truncated checkpoint header length: ", path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    CSEG_CHECK(static_cast<uint64_t>(f.gcount()) == hlen, "truncated checkpoint header: ",
               path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
        fail("corrupt checkpoint header JSON in ", path, ": ", e.what());
    }
    CSEG_CHECK(header.value("format_version", -1) == kFormatVersion,
               "checkpoint format version mismatch in ", path, " (expected ",
               kFormatVersion, ", got ", header.value("format_version", -1), ")");

    Checkpoint c;
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& jt : header.at("tensors")) {
        RawTensor t;
        t.dtype = jt.at("dtype").get<std::string>();
        const auto sh = jt.at("shape");
        CSEG_CHECK(sh.size() == 4, "checkpoint tensor shape must have 4 dims");
        for (int i = 0; i < 4; ++i) t.shape[static_cast<size_t>(i)] = sh[static_cast<size_t>(i)].get<int>();
        const uint64_t nbytes = jt.at("bytes").get<uint64_t>();
        t.bytes.resize(nbytes);
        f.read(t.bytes.data(), static_cast<std::streamsize>(nbytes));
        CSEG_CHECK(static_cast<uint64_t>(f.gcount()) == nbytes,
                   "truncated checkpoint payload for tensor '",
                   jt.at("name").get<std::string>(), "' in ", path);
        c.add(jt.at("name").get<std::string>(), std::move(t));
    }
    return c;
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["embed_dim"] = cfg.sae.embed_dim;
    j["in_channels"] = cfg.sae.in_channels;
    j["variant"] = to_string(cfg.variant);
    j["activation"] = to_string(cfg.activation);
    j["seed"] = cfg.seed;
    nlohmann::json dirs = nlohmann::json::array();
    for (auto [kh, kw] : cfg.dat.directions) dirs.push_back({kh, kw});
    j["dat"] = {{"directions", dirs},
                {"num_blocks", cfg.dat.num_blocks},
                {"heads", cfg.dat.heads},
                {"share_weights_across_scales", cfg.dat.share_weights_across_scales},
                {"attention_residual", cfg.dat.attention_residual},
                {"softmax_spatial", cfg.dat.softmax_spatial},
                {"ffn_activation", to_string(cfg.dat.ffn_act)}};
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.sae.embed_dim = j.at("embed_dim").get<int>();
    cfg.sae.in_channels = j.at("in_channels").get<int>();
    cfg.variant = variant_from_string(j.at("variant").get<std::string>());
    cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    cfg.seed = j.at("seed").get<uint64_t>();
    const auto& d = j.at("dat");
    cfg.dat.directions.clear();
    for (const auto& dd : d.at("directions"))
        cfg.dat.directions.emplace_back(dd[0].get<int>(), dd[1].get<int>());
    cfg.dat.num_blocks = d.at("num_blocks").get<int>();
    cfg.dat.heads = d.at("heads").get<int>();
    cfg.dat.share_weights_across_scales = d.at("share_weights_across_scales").get<bool>();
    cfg.dat.attention_residual = d.at("attention_residual").get<bool>();
    cfg.dat.softmax_spatial = d.at("softmax_spatial").get<bool>();
    cfg.dat.ffn_act = activation_from_string(d.at("ffn_activation").get<std::string>());
    cfg.validate();
    return cfg;
}

}  // namespace cseg::ckpt
