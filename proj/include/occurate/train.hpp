#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occurate/checkpoint.hpp"
#include "occurate/dataset.hpp"
#include "occurate/losses.hpp"
#include "occurate/model.hpp"
#include "occurate/rng.hpp"

namespace occurate::train {

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double learning_rate = 1e-4;
    double weight_decay = 1e-2;
    std::string optimizer;  // "adam" | "adamw"; empty picks by arch (adamw for rtran)
    uint64_t seed = 0;
    bool mask_training = true;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct LabelMask {
    std::vector<uint8_t> unknown;  // 1 = masked out as unknown
    int n_unknown = 0;
};

// Unknown count u ~ uniform over [ceil(0.25 n), n]; unknown indices are a
// uniform u-subset.
LabelMask sample_label_mask(int n, Rng& rng);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_mse = 0.0;
};

struct TrainResult {
    model::ModelConfig model_config;
    ckpt::ParamMap<float> best_params;
    std::vector<EpochRecord> history;
    int best_epoch = -1;
    double best_val_mse = 0.0;
};

/**
 * Full training loop: seeded shuffle per epoch, fresh label mask per batch
 * (R-Tran with mask_training), masked CE against the availability mask,
 * adaptive-moment updates, best-validation checkpoint selection by masked
 * MSE. Bitwise deterministic for a fixed seed and thread count.
 */
TrainResult train(const data::Dataset& ds, model::ModelConfig mcfg, const TrainConfig& tcfg);

// Writes checkpoint.bin (best-val parameters + embedded config/catalog/norm
// stats) and history.json into out_dir.
void save_training_outputs(const std::string& out_dir, const TrainResult& result,
                           const TrainConfig& tcfg, const data::Dataset& ds);

// Batched inference helpers (no gradients kept).
Tensor<float> rtran_predict(const ckpt::ParamMap<float>& params, const model::ModelConfig& cfg,
                            const Tensor<float>& patches, const Tensor<int64_t>& state_rows);
Tensor<float> baseline_predict(const ckpt::ParamMap<float>& params, const model::ModelConfig& cfg,
                               const Tensor<float>& patches);

struct PredictResult {
    std::vector<double> rates;
    std::vector<uint8_t> echoed;  // 1 where the value echoes a known input
};

/**
 * Checklist completion: known species keep their given values (flagged as
 * echoed); every other species gets the R-Tran prediction conditioned on the
 * quantized known states.
 */
PredictResult predict(const ckpt::Checkpoint& checkpoint, const geo::InputPatch& patch,
                      const std::map<std::string, model::KnownInfo>& known);

struct FeedbackPropResult {
    std::vector<double> predictions;  // all n species, from the final forward
    double initial_partial_loss = 0.0;
    double final_partial_loss = 0.0;
};

/**
 * Gradient-based inference for the baseline model: repeats `iters` times
 * {forward, CE loss restricted to the known set, gradient step on the
 * normalized input patch}, then reports the final forward. Model parameters
 * are never modified. iters = 0 reproduces plain baseline inference bitwise.
 */
FeedbackPropResult feedback_prop(const ckpt::ParamMap<float>& params,
                                 const model::ModelConfig& cfg, const Tensor<float>& patch,
                                 const std::map<int, double>& known_rates, int iters = 25,
                                 double rate = 0.05);

} // namespace occurate::train
