#include "cseg/config.hpp"

#include <fstream>
#include <sstream>

namespace cseg {

namespace {

std::string directions_to_string(const std::vector<std::pair<int, int>>& dirs) {
    std::ostringstream os;
    for (size_t i = 0; i < dirs.size(); ++i) {
        if (i) os << ",";
        os << dirs[i].first << "x" << dirs[i].second;
    }
    return os.str();
}

std::vector<std::pair<int, int>> directions_from_string(const std::string& s) {
    std::vector<std::pair<int, int>> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        const size_t x = item.find('x');
        CSEG_CHECK(x != std::string::npos, "bad direction '", item, "' (expected KxK, e.g. 1x3)");
        out.emplace_back(std::stoi(item.substr(0, x)), std::stoi(item.substr(x + 1)));
    }
    CSEG_CHECK(!out.empty(), "model.dat.directions must name at least one kernel");
    return out;
}

struct KeyDoc {
    const char* key;
    const char* doc;
};

constexpr KeyDoc kKeyDocs[] = {
    {"model.embed_dim", "embedding dimension D of every scale"},
    {"model.in_channels", "input image channels"},
    {"model.variant", "full|v0|v1|v2|v3|baseline-off module wiring"},
    {"model.seed", "parameter init / training seed"},
    {"model.activation", "gelu|relu nonlinearity of the embedder branches"},
    {"model.dat.blocks", "transformer blocks per scale"},
    {"model.dat.heads", "attention head count (channel groups)"},
    {"model.dat.directions", "directional kernels, e.g. 1x3,3x1"},
    {"model.dat.share_weights", "share block weights across the three scales"},
    {"model.dat.attention_residual", "input residual around the attention stage"},
    {"model.dat.softmax_axis", "channel|spatial attention normalization axis"},
    {"model.dat.ffn_activation", "gelu|relu inside the depthwise feed-forward"},
    {"loss.lambda1", "inter-scale consistency weight"},
    {"loss.lambda2", "intra-scale consistency weight"},
    {"loss.intra_grid", "token grid side for the self-similarity matrix"},
    {"loss.stop_gradient_target", "treat the thresholded pseudo-target as constant"},
    {"train.lr", "initial learning rate"},
    {"train.weight_decay", "decoupled weight decay"},
    {"train.beta1", "first-moment decay"},
    {"train.beta2", "second-moment decay"},
    {"train.eps", "optimizer epsilon"},
    {"train.batch_size", "images per step"},
    {"train.max_epochs", "epoch budget"},
    {"train.plateau_factor", "lr multiplier on plateau"},
    {"train.plateau_patience", "non-improving epochs before an lr cut"},
    {"train.early_stop_patience", "non-improving epochs before stopping"},
    {"train.grad_clip_norm", "global gradient-norm clip; 0 disables"},
    {"train.val_mask_metrics", "also report mask-based metrics on the val split"},
    {"train.augment", "apply training-time augmentation"},
    {"data.root", "dataset root (images/ subdir or flat image directory)"},
    {"data.image_glob", "semicolon-separated image patterns"},
    {"data.mask_dir", "mask directory; empty = <root>/masks"},
    {"data.resize_h", "training/eval height (even)"},
    {"data.resize_w", "training/eval width (even)"},
    {"data.split_seed", "seed of the deterministic 80:20 split"},
    {"aug.p_hflip", "horizontal flip probability"},
    {"aug.p_vflip", "vertical flip probability"},
    {"aug.right_angle_rotation", "uniform 0/90/180/270 rotation"},
    {"aug.free_rotation", "arbitrary-angle rotation with reflect padding"},
    {"aug.scale_min", "lower scale-jitter bound"},
    {"aug.scale_max", "upper scale-jitter bound"},
    {"out.dir", "output directory for checkpoints/logs/reports"},
};

}  // namespace

nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["model.embed_dim"] = c.model.sae.embed_dim;
    j["model.in_channels"] = c.model.sae.in_channels;
    j["model.variant"] = to_string(c.model.variant);
    j["model.seed"] = c.model.seed;
    j["model.activation"] = to_string(c.model.activation);
    j["model.dat.blocks"] = c.model.dat.num_blocks;
    j["model.dat.heads"] = c.model.dat.heads;
    j["model.dat.directions"] = directions_to_string(c.model.dat.directions);
    j["model.dat.share_weights"] = c.model.dat.share_weights_across_scales;
    j["model.dat.attention_residual"] = c.model.dat.attention_residual;
    j["model.dat.softmax_axis"] = c.model.dat.softmax_spatial ? "spatial" : "channel";
    j["model.dat.ffn_activation"] = to_string(c.model.dat.ffn_act);
    j["loss.lambda1"] = c.loss.lambda1;
    j["loss.lambda2"] = c.loss.lambda2;
    j["loss.intra_grid"] = c.loss.intra_grid;
    j["loss.stop_gradient_target"] = c.loss.stop_gradient_target;
    j["train.lr"] = c.train.lr0;
    j["train.weight_decay"] = c.train.weight_decay;
    j["train.beta1"] = c.train.beta1;
    j["train.beta2"] = c.train.beta2;
    j["train.eps"] = c.train.eps;
    j["train.batch_size"] = c.train.batch_size;
    j["train.max_epochs"] = c.train.max_epochs;
    j["train.plateau_factor"] = c.train.plateau_factor;
    j["train.plateau_patience"] = c.train.plateau_patience;
    j["train.early_stop_patience"] = c.train.early_stop_patience;
    j["train.grad_clip_norm"] = c.train.grad_clip_norm;
    j["train.val_mask_metrics"] = c.train.val_mask_metrics;
    j["train.augment"] = c.train.augment;
    j["data.root"] = c.dataset.root;
    j["data.image_glob"] = c.dataset.image_glob;
    j["data.mask_dir"] = c.dataset.mask_dir;
    j["data.resize_h"] = c.dataset.resize_h;
    j["data.resize_w"] = c.dataset.resize_w;
    j["data.split_seed"] = c.dataset.split_seed;
    j["aug.p_hflip"] = c.aug.p_hflip;
    j["aug.p_vflip"] = c.aug.p_vflip;
    j["aug.right_angle_rotation"] = c.aug.right_angle_rotation;
    j["aug.free_rotation"] = c.aug.free_rotation;
    j["aug.scale_min"] = c.aug.scale_min;
    j["aug.scale_max"] = c.aug.scale_max;
    j["out.dir"] = c.out_dir;
    return j;
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    CSEG_CHECK(j.is_object(), "config must be a JSON object of flat keys");
    RunConfig c;
    const nlohmann::json known = run_config_to_json(c);
    for (const auto& [key, value] : j.items()) {
        CSEG_CHECK(known.contains(key), "unknown config key '", key,
                   "' (see print-config for the key list)");
        (void)value;
    }
    auto geti = [&](const char* k, int d) { return j.value(k, d); };
    auto getd = [&](const char* k, double d) { return j.value(k, d); };
    auto getb = [&](const char* k, bool d) { return j.value(k, d); };
    auto gets = [&](const char* k, const std::string& d) { return j.value(k, d); };
    auto getu = [&](const char* k, uint64_t d) { return j.value(k, d); };

    c.model.sae.embed_dim = geti("model.embed_dim", c.model.sae.embed_dim);
    c.model.sae.in_channels = geti("model.in_channels", c.model.sae.in_channels);
    c.model.variant = variant_from_string(gets("model.variant", to_string(c.model.variant)));
    c.model.seed = getu("model.seed", c.model.seed);
    c.model.activation =
        activation_from_string(gets("model.activation", to_string(c.model.activation)));
    c.model.dat.num_blocks = geti("model.dat.blocks", c.model.dat.num_blocks);
    c.model.dat.heads = geti("model.dat.heads", c.model.dat.heads);
    c.model.dat.directions = directions_from_string(
        gets("model.dat.directions", directions_to_string(c.model.dat.directions)));
    c.model.dat.share_weights_across_scales =
        getb("model.dat.share_weights", c.model.dat.share_weights_across_scales);
    c.model.dat.attention_residual =
        getb("model.dat.attention_residual", c.model.dat.attention_residual);
    const std::string axis = gets("model.dat.softmax_axis", "channel");
    CSEG_CHECK(axis == "channel" || axis == "spatial",
               "model.dat.softmax_axis must be channel|spatial, got '", axis, "'");
    c.model.dat.softmax_spatial = axis == "spatial";
    c.model.dat.ffn_act =
        activation_from_string(gets("model.dat.ffn_activation", to_string(c.model.dat.ffn_act)));
    c.loss.lambda1 = getd("loss.lambda1", c.loss.lambda1);
    c.loss.lambda2 = getd("loss.lambda2", c.loss.lambda2);
    c.loss.intra_grid = geti("loss.intra_grid", c.loss.intra_grid);
    c.loss.stop_gradient_target = getb("loss.stop_gradient_target", c.loss.stop_gradient_target);
    c.train.lr0 = getd("train.lr", c.train.lr0);
    c.train.weight_decay = getd("train.weight_decay", c.train.weight_decay);
    c.train.beta1 = getd("train.beta1", c.train.beta1);
    c.train.beta2 = getd("train.beta2", c.train.beta2);
    c.train.eps = getd("train.eps", c.train.eps);
    c.train.batch_size = geti("train.batch_size", c.train.batch_size);
    c.train.max_epochs = geti("train.max_epochs", c.train.max_epochs);
    c.train.plateau_factor = getd("train.plateau_factor", c.train.plateau_factor);
    c.train.plateau_patience = geti("train.plateau_patience", c.train.plateau_patience);
    c.train.early_stop_patience = geti("train.early_stop_patience", c.train.early_stop_patience);
    c.train.grad_clip_norm = getd("train.grad_clip_norm", c.train.grad_clip_norm);
    c.train.val_mask_metrics = getb("train.val_mask_metrics", c.train.val_mask_metrics);
    c.train.augment = getb("train.augment", c.train.augment);
    c.train.seed = c.model.seed;
    c.dataset.root = gets("data.root", c.dataset.root);
    c.dataset.image_glob = gets("data.image_glob", c.dataset.image_glob);
    c.dataset.mask_dir = gets("data.mask_dir", c.dataset.mask_dir);
    c.dataset.resize_h = geti("data.resize_h", c.dataset.resize_h);
    c.dataset.resize_w = geti("data.resize_w", c.dataset.resize_w);
    c.dataset.split_seed = getu("data.split_seed", c.dataset.split_seed);
    c.aug.p_hflip = getd("aug.p_hflip", c.aug.p_hflip);
    c.aug.p_vflip = getd("aug.p_vflip", c.aug.p_vflip);
    c.aug.right_angle_rotation = getb("aug.right_angle_rotation", c.aug.right_angle_rotation);
    c.aug.free_rotation = getb("aug.free_rotation", c.aug.free_rotation);
    c.aug.scale_min = getd("aug.scale_min", c.aug.scale_min);
    c.aug.scale_max = getd("aug.scale_max", c.aug.scale_max);
    c.out_dir = gets("out.dir", c.out_dir);
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    CSEG_CHECK(f.good(), "cannot open config file: ", path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        fail("config parse error in ", path, ": ", e.what());
    }
    return run_config_from_json(j);
}

std::string describe_run_config(const RunConfig& defaults) {
    const nlohmann::json j = run_config_to_json(defaults);
    std::ostringstream os;
    for (const auto& kd : kKeyDocs) {
        os << kd.key << " = " << j.at(kd.key).dump() << "\n    " << kd.doc << "\n";
    }
    return os.str();
}

}  // namespace cseg
