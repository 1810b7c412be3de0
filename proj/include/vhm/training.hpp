#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vhm/model.hpp"
#include "vhm/tensor.hpp"
#include "vhm/textio.hpp"

namespace vhm {

constexpr int kPatchSize = 15;
constexpr int kPatchCenter = kPatchSize / 2;

struct TrainConfig {
    int batch_size = 64;
    double learning_rate = 1e-5;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    long iterations = 500000;
    long epoch_sample = 64000;
    double val_fraction = 0.2;
    long val_interval = 500;
    uint64_t seed = 0;

    void validate() const;
};

KeyValues train_config_to_kv(const TrainConfig& cfg);
TrainConfig train_config_from_kv(const KeyValues& kv);

// One training sample: an input patch and the two height targets at its
// center pixel. The same location yields one sample per selected scene.
struct PatchSample {
    Tensor<float> x; // [1, in_ch, 15, 15]
    float y_mean = 0.0f;
    float y_max = 0.0f;
    long location_id = 0;
    int year = 0;
};

// Per-channel normalization, computed on the training split only.
struct NormStats {
    std::vector<float> mean;
    std::vector<float> stddev;
};

NormStats compute_norm_stats(const std::vector<PatchSample>& train_patches);
void apply_norm(Tensor<float>& x, const NormStats& stats);
KeyValues norm_stats_to_kv(const NormStats& stats);
NormStats norm_stats_from_kv(const KeyValues& kv, int channels);

// Batch-mean absolute error over the two output channels plus the weight
// decay penalty; gradients are the center-pixel subgradients of the MAE term.
struct LossValue {
    double loss = 0.0; // mae + weight_decay * squared parameter norm
    double mae = 0.0;
    double mbe = 0.0;
};

LossValue mae_loss(const std::vector<std::array<double, 2>>& pred,
                   const std::vector<std::array<double, 2>>& target, double weight_decay,
                   double squared_param_norm);

struct TrainLogRow {
    long iteration = 0;
    std::string split; // "train" or "val"
    double loss = 0.0, mae = 0.0, mbe = 0.0;
};

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows);

struct FitResult {
    std::vector<TrainLogRow> log;
    double baseline_val_mae = 0.0; // constant train-mean predictor on the validation split
    double initial_val_mae = 0.0;
    double best_val_mae = 0.0;
    long best_val_iteration = 0;
    NormStats norm;
    long train_count = 0, val_count = 0;
    std::vector<long> val_locations;
};

// Splits by location (80:20 by default), normalizes with training-split
// statistics, optimizes with Adam, and leaves the best-validation parameters
// in the model.
FitResult fit(Model<float>& model, std::vector<PatchSample> patches, const TrainConfig& cfg);

// Center-pixel MAE/MBE of the model on a patch set (eval mode).
LossValue evaluate_patches(const Model<float>& model, const std::vector<PatchSample>& patches,
                           int batch_size = 256);

} // namespace vhm
