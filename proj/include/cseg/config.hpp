#pragma once

#include <json.hpp>

#include "cseg/data.hpp"
#include "cseg/losses.hpp"
#include "cseg/model.hpp"

namespace cseg {

struct TrainConfig {
    double lr0 = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int batch_size = 8;
    int max_epochs = 500;
    double plateau_factor = 0.5;
    int plateau_patience = 5;
    int early_stop_patience = 100;
    double grad_clip_norm = 0.0;  // 0 = off; 5.0 is the suggested debug value
    bool val_mask_metrics = false;
    bool augment = true;
    uint64_t seed = 0;

    void validate() const {
        CSEG_CHECK(lr0 > 0 && weight_decay >= 0 && eps > 0, "train: bad lr/decay/eps");
        CSEG_CHECK(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, "train: bad betas");
        CSEG_CHECK(batch_size >= 1 && max_epochs >= 1, "train: bad batch/epochs");
        CSEG_CHECK(plateau_factor > 0 && plateau_factor < 1, "train: bad plateau factor");
        CSEG_CHECK(plateau_patience >= 1 && early_stop_patience >= 1, "train: bad patience");
        CSEG_CHECK(grad_clip_norm >= 0, "train: bad grad clip");
    }
};

// Flat-key run configuration: one JSON object file, dotted key namespace,
// unknown keys rejected. The CLI prints every key and default via
// print-config.
struct RunConfig {
    ModelConfig model;
    LossConfig loss;
    TrainConfig train;
    data::DatasetSpec dataset;
    data::AugmentationSpec aug;
    std::string out_dir = "runs/run";

    void validate() const {
        model.validate();
        loss.validate();
        train.validate();
    }
};

// Parses the flat {"key": value} JSON object; throws cseg::Error listing
// any unknown key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// All keys with their current values, in documented order.
nlohmann::json run_config_to_json(const RunConfig& cfg);

// One "key = value  # doc" line per key.
std::string describe_run_config(const RunConfig& defaults);

}  // namespace cseg
