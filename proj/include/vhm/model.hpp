#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vhm/tensor.hpp"
#include "vhm/textio.hpp"

namespace vhm {

// Channel widths of the full-scale network; width_mult shrinks every width
// (and the group count) by the same rational factor for desk-scale runs.
struct ModelConfig {
    int in_channels = 5; // 4 spectral bands, optionally + elevation
    int groups = 32;
    int width_per_group = 4;
    std::array<int, 4> n_blocks{2, 3, 5, 3};
    std::array<int, 4> stage_out_channels{256, 512, 1024, 2048};
    int entry_channels = 64;
    int pixel_hidden = 128;
    int pixel_out = 256;
    int head_hidden = 512;
    int out_channels = 2; // mean and max height
    int width_mult_num = 1;
    int width_mult_den = 1;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    int scaled(int channels) const;
    int scaled_groups() const;
    int bottleneck_channels(int stage) const;
    int total_block_count() const { return n_blocks[0] + n_blocks[1] + n_blocks[2] + n_blocks[3]; }
    // one 3x3 convolution per block
    int receptive_radius() const { return total_block_count(); }
    void validate() const;
};

KeyValues model_config_to_kv(const ModelConfig& cfg);
ModelConfig model_config_from_kv(const KeyValues& kv);

// One executed op of the layer graph; value slots index the activations and
// slot 0 is the network input.
struct ModelStep {
    enum class Kind { conv, bn, relu, add, concat } kind = Kind::conv;
    int in_a = 0, in_b = -1;
    int out = 0;
    int kernel = 1, groups = 1;
    bool zero_pad = false;
    int weight = -1, bias = -1;
    int scale = -1, shift = -1, rmean = -1, rvar = -1;
};

// Fully convolutional regressor: 1x1 entry block, four stages of bottleneck
// blocks with grouped 3x3 convolutions and residual shortcuts, a parallel
// two-layer 1x1 pixel feature extractor on the raw input, channel
// concatenation, and a two-layer 1x1 regression head with two outputs.
template <typename T>
class Model {
public:
    static Model build(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // Inference path: eval-mode batch norm, intermediate buffers released as
    // soon as their last consumer ran. Output is [n, 2, h, w].
    Tensor<T> forward(const Tensor<T>& input) const;

    // Training/verification path: records every op on the tape (the tape's
    // bn mode decides batch vs running statistics). Returns the output node.
    int forward_tape(Tape<T>& tape, Tensor<T> input) const;

    template <typename U>
    Model<U> cast() const {
        Model<U> out;
        out.cfg_ = cfg_;
        out.params_ = params_.template cast<U>();
        out.steps_ = steps_;
        out.slot_count_ = slot_count_;
        return out;
    }

    Model() = default;

private:
    template <typename U>
    friend class Model;

    class Builder;

    ModelConfig cfg_;
    ParamStore<T> params_;
    std::vector<ModelStep> steps_;
    int slot_count_ = 1;
};

// Checkpoint pair: <base>.vhmw holds the parameters, <base>.meta holds the
// configuration plus caller-supplied entries (e.g. normalization statistics).
void save_model(const Model<float>& model, const KeyValues& extra, const std::string& base_path);
Model<float> load_model(const std::string& base_path, KeyValues* extra_out = nullptr);

} // namespace vhm
