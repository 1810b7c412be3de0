#include "vhm/model.hpp"

#include <cmath>
#include <filesystem>

#include "vhm/errors.hpp"
#include "vhm/rng.hpp"

namespace vhm {

int ModelConfig::scaled(int channels) const {
    const long q = static_cast<long>(channels) * width_mult_num;
    if (q % width_mult_den != 0 || q / width_mult_den < 1)
        throw std::invalid_argument("width multiplier does not divide channel count " +
                                    std::to_string(channels));
    return static_cast<int>(q / width_mult_den);
}

int ModelConfig::scaled_groups() const {
    const long q = static_cast<long>(groups) * width_mult_num;
    if (q < width_mult_den) return 1; // never scale below a single group
    if (q % width_mult_den != 0)
        throw std::invalid_argument("width multiplier does not divide group count");
    return static_cast<int>(q / width_mult_den);
}

int ModelConfig::bottleneck_channels(int stage) const {
    return scaled(groups * width_per_group * (1 << stage));
}

void ModelConfig::validate() const {
    if (in_channels < 1) throw std::invalid_argument("in_channels must be positive");
    if (out_channels != 2) throw std::invalid_argument("model emits mean and max channels");
    if (width_mult_num < 1 || width_mult_den < 1)
        throw std::invalid_argument("width multiplier must be positive");
    if (groups < 1 || width_per_group < 1)
        throw std::invalid_argument("groups and width_per_group must be positive");
    for (int i = 0; i < 4; ++i) {
        if (n_blocks[i] < 1) throw std::invalid_argument("each stage needs at least one block");
        if (i > 0 && stage_out_channels[i] != 2 * stage_out_channels[i - 1])
            throw std::invalid_argument("stage widths must double");
    }
    const int g = scaled_groups();
    for (int i = 0; i < 4; ++i) {
        if (bottleneck_channels(i) % g != 0)
            throw std::invalid_argument("bottleneck width not divisible by groups");
        scaled(stage_out_channels[i]);
    }
    scaled(entry_channels);
    scaled(pixel_hidden);
    scaled(pixel_out);
    scaled(head_hidden);
    if (bn_momentum <= 0.0 || bn_momentum >= 1.0) throw std::invalid_argument("bad bn momentum");
    if (bn_eps <= 0.0) throw std::invalid_argument("bad bn epsilon");
}

KeyValues model_config_to_kv(const ModelConfig& cfg) {
    KeyValues kv;
    kv["in_channels"] = std::to_string(cfg.in_channels);
    kv["groups"] = std::to_string(cfg.groups);
    kv["width_per_group"] = std::to_string(cfg.width_per_group);
    for (int i = 0; i < 4; ++i) {
        kv["n_blocks_" + std::to_string(i)] = std::to_string(cfg.n_blocks[i]);
        kv["stage_out_" + std::to_string(i)] = std::to_string(cfg.stage_out_channels[i]);
    }
    kv["entry_channels"] = std::to_string(cfg.entry_channels);
    kv["pixel_hidden"] = std::to_string(cfg.pixel_hidden);
    kv["pixel_out"] = std::to_string(cfg.pixel_out);
    kv["head_hidden"] = std::to_string(cfg.head_hidden);
    kv["out_channels"] = std::to_string(cfg.out_channels);
    kv["width_mult_num"] = std::to_string(cfg.width_mult_num);
    kv["width_mult_den"] = std::to_string(cfg.width_mult_den);
    kv["bn_momentum"] = fmt_g6(cfg.bn_momentum);
    kv["bn_eps"] = fmt_g6(cfg.bn_eps);
    return kv;
}

ModelConfig model_config_from_kv(const KeyValues& kv) {
    ModelConfig cfg;
    cfg.in_channels = static_cast<int>(kv_long(kv, "in_channels", cfg.in_channels));
    cfg.groups = static_cast<int>(kv_long(kv, "groups", cfg.groups));
    cfg.width_per_group = static_cast<int>(kv_long(kv, "width_per_group", cfg.width_per_group));
    for (int i = 0; i < 4; ++i) {
        cfg.n_blocks[i] =
            static_cast<int>(kv_long(kv, "n_blocks_" + std::to_string(i), cfg.n_blocks[i]));
        cfg.stage_out_channels[i] = static_cast<int>(
            kv_long(kv, "stage_out_" + std::to_string(i), cfg.stage_out_channels[i]));
    }
    cfg.entry_channels = static_cast<int>(kv_long(kv, "entry_channels", cfg.entry_channels));
    cfg.pixel_hidden = static_cast<int>(kv_long(kv, "pixel_hidden", cfg.pixel_hidden));
    cfg.pixel_out = static_cast<int>(kv_long(kv, "pixel_out", cfg.pixel_out));
    cfg.head_hidden = static_cast<int>(kv_long(kv, "head_hidden", cfg.head_hidden));
    cfg.out_channels = static_cast<int>(kv_long(kv, "out_channels", cfg.out_channels));
    cfg.width_mult_num = static_cast<int>(kv_long(kv, "width_mult_num", cfg.width_mult_num));
    cfg.width_mult_den = static_cast<int>(kv_long(kv, "width_mult_den", cfg.width_mult_den));
    cfg.bn_momentum = kv_double(kv, "bn_momentum", cfg.bn_momentum);
    cfg.bn_eps = kv_double(kv, "bn_eps", cfg.bn_eps);
    return cfg;
}

// ---------------------------------------------------------------------------

template <typename T>
class Model<T>::Builder {
public:
    Builder(Model<T>* model, Rng* rng) : m_(model), rng_(rng) {}

    int conv(int in_slot, const std::string& name, int c_in, int c_out, int kernel, int groups,
             bool with_bias) {
        const int fan_in = (c_in / groups) * kernel * kernel;
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        const int w = m_->params_.add(name + ".weight", {c_out, c_in / groups, kernel, kernel});
        auto& wp = m_->params_.param(w);
        for (auto& v : wp.value) v = static_cast<T>(rng_->uniform(-bound, bound));
        int b = -1;
        if (with_bias) b = m_->params_.add(name + ".bias", {c_out});

        ModelStep s;
        s.kind = ModelStep::Kind::conv;
        s.in_a = in_slot;
        s.kernel = kernel;
        s.groups = groups;
        s.zero_pad = kernel == 3;
        s.weight = w;
        s.bias = b;
        return push(s);
    }

    int bn(int in_slot, const std::string& name, int channels) {
        ModelStep s;
        s.kind = ModelStep::Kind::bn;
        s.in_a = in_slot;
        s.scale = m_->params_.add(name + ".scale", {channels});
        s.shift = m_->params_.add(name + ".shift", {channels});
        s.rmean = m_->params_.add(name + ".running_mean", {channels}, /*trainable=*/false);
        s.rvar = m_->params_.add(name + ".running_var", {channels}, /*trainable=*/false);
        auto& scale = m_->params_.param(s.scale);
        std::fill(scale.value.begin(), scale.value.end(), T(1));
        auto& rvar = m_->params_.param(s.rvar);
        std::fill(rvar.value.begin(), rvar.value.end(), T(1));
        return push(s);
    }

    int relu(int in_slot) {
        ModelStep s;
        s.kind = ModelStep::Kind::relu;
        s.in_a = in_slot;
        return push(s);
    }

    int add(int a, int b) {
        ModelStep s;
        s.kind = ModelStep::Kind::add;
        s.in_a = a;
        s.in_b = b;
        return push(s);
    }

    int concat(int a, int b) {
        ModelStep s;
        s.kind = ModelStep::Kind::concat;
        s.in_a = a;
        s.in_b = b;
        return push(s);
    }

    int resnext_block(int in_slot, const std::string& name, int c_in, int c_out, int width,
                      int groups) {
        int h = conv(in_slot, name + ".conv1", c_in, width, 1, 1, false);
        h = bn(h, name + ".bn1", width);
        h = relu(h);
        h = conv(h, name + ".conv2", width, width, 3, groups, false);
        h = bn(h, name + ".bn2", width);
        h = relu(h);
        h = conv(h, name + ".conv3", width, c_out, 1, 1, false);
        h = bn(h, name + ".bn3", c_out);

        int shortcut = in_slot;
        if (c_in != c_out) {
            shortcut = conv(in_slot, name + ".shortcut.conv", c_in, c_out, 1, 1, false);
            shortcut = bn(shortcut, name + ".shortcut.bn", c_out);
        }
        h = add(h, shortcut);
        return relu(h);
    }

private:
    int push(ModelStep s) {
        s.out = m_->slot_count_++;
        m_->steps_.push_back(s);
        return s.out;
    }

    Model<T>* m_;
    Rng* rng_;
};

template <typename T>
Model<T> Model<T>::build(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model<T> m;
    m.cfg_ = cfg;
    Rng rng(seed);
    Builder b(&m, &rng);

    const int groups = cfg.scaled_groups();
    const int input = 0;

    int h = b.conv(input, "entry.conv", cfg.in_channels, cfg.scaled(cfg.entry_channels), 1, 1, false);
    h = b.bn(h, "entry.bn", cfg.scaled(cfg.entry_channels));
    h = b.relu(h);

    int c_in = cfg.scaled(cfg.entry_channels);
    for (int stage = 0; stage < 4; ++stage) {
        const int c_out = cfg.scaled(cfg.stage_out_channels[stage]);
        const int width = cfg.bottleneck_channels(stage);
        for (int block = 0; block < cfg.n_blocks[stage]; ++block) {
            const std::string name =
                "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
            h = b.resnext_block(h, name, c_in, c_out, width, groups);
            c_in = c_out;
        }
    }

    int px = b.conv(input, "pixel.conv1", cfg.in_channels, cfg.scaled(cfg.pixel_hidden), 1, 1, true);
    px = b.relu(px);
    px = b.conv(px, "pixel.conv2", cfg.scaled(cfg.pixel_hidden), cfg.scaled(cfg.pixel_out), 1, 1, true);

    int cat = b.concat(h, px);
    const int cat_ch = cfg.scaled(cfg.stage_out_channels[3]) + cfg.scaled(cfg.pixel_out);
    int out = b.conv(cat, "head.conv1", cat_ch, cfg.scaled(cfg.head_hidden), 1, 1, true);
    out = b.relu(out);
    out = b.conv(out, "head.conv2", cfg.scaled(cfg.head_hidden), cfg.out_channels, 1, 1, true);
    (void)out;
    return m;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& input) const {
    if (input.c != cfg_.in_channels) throw std::invalid_argument("wrong input channel count");
    if (input.h < 1 || input.w < 1) throw std::invalid_argument("empty input");

    // release intermediates after their last consumer
    std::vector<int> last_use(slot_count_, 0);
    for (size_t i = 0; i < steps_.size(); ++i) {
        last_use[steps_[i].in_a] = static_cast<int>(i);
        if (steps_[i].in_b >= 0) last_use[steps_[i].in_b] = static_cast<int>(i);
    }

    std::vector<Tensor<T>> slots(slot_count_);
    slots[0] = input;
    auto& store = const_cast<ParamStore<T>&>(params_); // eval mode mutates nothing

    for (size_t i = 0; i < steps_.size(); ++i) {
        const ModelStep& s = steps_[i];
        switch (s.kind) {
            case ModelStep::Kind::conv: {
                ConvSpec spec;
                spec.c_in = slots[s.in_a].c;
                spec.c_out = store.param(s.weight).shape[0];
                spec.kernel = s.kernel;
                spec.groups = s.groups;
                spec.zero_pad = s.zero_pad;
                spec.has_bias = s.bias >= 0;
                slots[s.out] = conv2d_forward(
                    slots[s.in_a], store.param(s.weight).value.data(),
                    s.bias >= 0 ? store.param(s.bias).value.data() : nullptr, spec);
                break;
            }
            case ModelStep::Kind::bn:
                slots[s.out] = batchnorm_forward<T>(
                    slots[s.in_a], store.param(s.scale).value.data(),
                    store.param(s.shift).value.data(), store.param(s.rmean).value.data(),
                    store.param(s.rvar).value.data(), /*training=*/false,
                    static_cast<T>(cfg_.bn_momentum), static_cast<T>(cfg_.bn_eps), nullptr);
                break;
            case ModelStep::Kind::relu:
                slots[s.out] = relu_forward(slots[s.in_a]);
                break;
            case ModelStep::Kind::add:
                slots[s.out] = add_forward(slots[s.in_a], slots[s.in_b]);
                break;
            case ModelStep::Kind::concat:
                slots[s.out] = concat_channels(slots[s.in_a], slots[s.in_b]);
                break;
        }
        if (last_use[s.in_a] == static_cast<int>(i) && s.in_a != 0)
            slots[s.in_a] = Tensor<T>();
        if (s.in_b >= 0 && last_use[s.in_b] == static_cast<int>(i) && s.in_b != 0)
            slots[s.in_b] = Tensor<T>();
    }
    return std::move(slots[slot_count_ - 1]);
}

template <typename T>
int Model<T>::forward_tape(Tape<T>& tape, Tensor<T> input) const {
    if (input.c != cfg_.in_channels) throw std::invalid_argument("wrong input channel count");

    std::vector<int> node_of(slot_count_, -1);
    node_of[0] = tape.input(std::move(input));
    for (const ModelStep& s : steps_) {
        switch (s.kind) {
            case ModelStep::Kind::conv:
                node_of[s.out] =
                    tape.conv2d(node_of[s.in_a], s.weight, s.bias, s.kernel, s.groups, s.zero_pad);
                break;
            case ModelStep::Kind::bn:
                node_of[s.out] = tape.batchnorm(node_of[s.in_a], s.scale, s.shift, s.rmean, s.rvar,
                                                static_cast<T>(cfg_.bn_momentum),
                                                static_cast<T>(cfg_.bn_eps));
                break;
            case ModelStep::Kind::relu:
                node_of[s.out] = tape.relu(node_of[s.in_a]);
                break;
            case ModelStep::Kind::add:
                node_of[s.out] = tape.add(node_of[s.in_a], node_of[s.in_b]);
                break;
            case ModelStep::Kind::concat:
                node_of[s.out] = tape.concat(node_of[s.in_a], node_of[s.in_b]);
                break;
        }
    }
    return node_of[slot_count_ - 1];
}

void save_model(const Model<float>& model, const KeyValues& extra, const std::string& base_path) {
    write_checkpoint(model.params(), base_path + ".vhmw");
    KeyValues kv = model_config_to_kv(model.config());
    for (const auto& [k, v] : extra) kv[k] = v;
    write_key_values(base_path + ".meta", kv);
}

Model<float> load_model(const std::string& base_path, KeyValues* extra_out) {
    const KeyValues kv = read_key_values(base_path + ".meta");
    const ModelConfig cfg = model_config_from_kv(kv);
    Model<float> model = Model<float>::build(cfg, /*seed=*/0);
    read_checkpoint(model.params(), base_path + ".vhmw");
    if (extra_out != nullptr) *extra_out = kv;
    return model;
}

template class Model<float>;
template class Model<double>;

} // namespace vhm
