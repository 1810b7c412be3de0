#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "vhm/model.hpp"
#include "vhm/rng.hpp"

using namespace vhm;

namespace {

ModelConfig tiny_config(int den, std::array<int, 4> blocks = {1, 1, 1, 1}) {
    ModelConfig cfg;
    cfg.width_mult_den = den;
    cfg.n_blocks = blocks;
    return cfg;
}

Tensor<float> random_input(Rng& rng, int n, int c, int h, int w) {
    Tensor<float> t(n, c, h, w);
    for (auto& v : t.v) v = static_cast<float>(rng.normal());
    return t;
}

} // namespace

TEST_CASE("full-scale configuration wiring") {
    ModelConfig cfg; // paper-scale defaults
    cfg.validate();
    CHECK(cfg.scaled(cfg.stage_out_channels[3]) + cfg.scaled(cfg.pixel_out) == 2304);
    CHECK(cfg.bottleneck_channels(0) == 128);
    CHECK(cfg.bottleneck_channels(3) == 1024);
    CHECK(cfg.receptive_radius() == 13);
}

TEST_CASE("width multiplier scales stages and groups") {
    ModelConfig cfg = tiny_config(8, {2, 3, 5, 3});
    CHECK(cfg.scaled(cfg.stage_out_channels[0]) == 32);
    CHECK(cfg.scaled(cfg.stage_out_channels[1]) == 64);
    CHECK(cfg.scaled(cfg.stage_out_channels[2]) == 128);
    CHECK(cfg.scaled(cfg.stage_out_channels[3]) == 256);
    CHECK(cfg.scaled_groups() == 4);
    CHECK(cfg.bottleneck_channels(0) == 16);

    ModelConfig too_fine = tiny_config(7);
    CHECK_THROWS_AS(too_fine.validate(), std::invalid_argument);

    ModelConfig below_group = tiny_config(64);
    CHECK(below_group.scaled_groups() == 1); // groups floor at one
    below_group.validate();
}

TEST_CASE("same seed builds identical parameters") {
    const ModelConfig cfg = tiny_config(32);
    const Model<float> a = Model<float>::build(cfg, 41);
    const Model<float> b = Model<float>::build(cfg, 41);
    const Model<float> c = Model<float>::build(cfg, 42);
    REQUIRE(a.params().count() == b.params().count());
    bool all_equal = true, any_diff_seed = false;
    for (size_t i = 0; i < a.params().count(); ++i) {
        const auto& pa = a.params().param(static_cast<int>(i));
        all_equal = all_equal && pa.value == b.params().param(static_cast<int>(i)).value;
        any_diff_seed =
            any_diff_seed || pa.value != c.params().param(static_cast<int>(i)).value;
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
}

TEST_CASE("forward preserves spatial dimensions") {
    const Model<float> model = Model<float>::build(tiny_config(64), 7);
    Rng rng(1);
    for (auto [h, w] : {std::pair{15, 15}, {1, 1}, {20, 13}}) {
        const Tensor<float> out = model.forward(random_input(rng, 2, 5, h, w));
        CHECK(out.n == 2);
        CHECK(out.c == 2);
        CHECK(out.h == h);
        CHECK(out.w == w);
    }
    CHECK_THROWS_AS(model.forward(random_input(rng, 1, 3, 5, 5)), std::invalid_argument);
}

TEST_CASE("eval forward is deterministic") {
    const Model<float> model = Model<float>::build(tiny_config(32), 3);
    Rng rng(2);
    const Tensor<float> x = random_input(rng, 1, 5, 9, 9);
    const Tensor<float> a = model.forward(x);
    const Tensor<float> b = model.forward(x);
    CHECK(a.v == b.v);
}

TEST_CASE("tape and no-grad paths agree in eval mode") {
    Model<float> model = Model<float>::build(tiny_config(32), 11);
    Rng rng(4);
    const Tensor<float> x = random_input(rng, 2, 5, 8, 8);
    const Tensor<float> direct = model.forward(x);
    Tape<float> tape(&model.params(), false);
    const int out = model.forward_tape(tape, x);
    CHECK(direct.v == tape.value(out).v);
}

TEST_CASE("zero input maps to zero with freshly built normalization") {
    // biases and batch-norm shifts initialize to zero, running stats to (0,1)
    const Model<float> model = Model<float>::build(tiny_config(32), 5);
    Tensor<float> x(1, 5, 6, 6);
    const Tensor<float> out = model.forward(x);
    for (float v : out.v) CHECK(v == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("projection shortcuts exist exactly where widths change") {
    const Model<float> model = Model<float>::build(tiny_config(16, {2, 3, 5, 3}), 1);
    CHECK(model.params().index_of("stage1.block0.shortcut.conv.weight") >= 0);
    CHECK(model.params().index_of("stage1.block1.shortcut.conv.weight") < 0);
    CHECK(model.params().index_of("stage3.block4.shortcut.conv.weight") < 0);
    CHECK(model.params().index_of("stage4.block0.shortcut.conv.weight") >= 0);
}

TEST_CASE("parameter count matches the closed-form sum") {
    // layer-by-layer sum over the full-scale graph
    auto conv_params = [](long ci, long co, long k, long groups, bool bias) {
        return co * (ci / groups) * k * k + (bias ? co : 0);
    };
    auto bn_params = [](long c) { return 2L * c; }; // trainable scale + shift

    const long in_ch = 5;
    long want = conv_params(in_ch, 64, 1, 1, false) + bn_params(64); // entry
    long prev = 64;
    const long outs[4] = {256, 512, 1024, 2048};
    const long widths[4] = {128, 256, 512, 1024};
    const long blocks[4] = {2, 3, 5, 3};
    for (int s = 0; s < 4; ++s) {
        for (int b = 0; b < blocks[s]; ++b) {
            want += conv_params(prev, widths[s], 1, 1, false) + bn_params(widths[s]);
            want += conv_params(widths[s], widths[s], 3, 32, false) + bn_params(widths[s]);
            want += conv_params(widths[s], outs[s], 1, 1, false) + bn_params(outs[s]);
            if (prev != outs[s])
                want += conv_params(prev, outs[s], 1, 1, false) + bn_params(outs[s]);
            prev = outs[s];
        }
    }
    want += conv_params(in_ch, 128, 1, 1, true);   // pixel extractor
    want += conv_params(128, 256, 1, 1, true);
    want += conv_params(2048 + 256, 512, 1, 1, true); // head
    want += conv_params(512, 2, 1, 1, true);

    CHECK(want == 22705602); // regression guard for the full-scale graph

    const Model<float> model = Model<float>::build(ModelConfig{}, 0);
    CHECK(static_cast<long>(model.params().trainable_value_count()) == want);
}

TEST_CASE("predictions only depend on the receptive field") {
    const ModelConfig cfg = tiny_config(32, {2, 3, 5, 3}); // 13 3x3 layers
    const Model<float> model = Model<float>::build(cfg, 9);
    Rng rng(13);
    const int size = 31; // RF of the center pixel is the 27x27 interior
    Tensor<float> a = random_input(rng, 1, 5, size, size);
    Tensor<float> b = a;
    const int r = cfg.receptive_radius();
    const int c = size / 2;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            if (std::abs(y - c) <= r && std::abs(x - c) <= r) continue;
            for (int ch = 0; ch < 5; ++ch)
                b.at(0, ch, y, x) = static_cast<float>(rng.normal());
        }

    const Tensor<float> fa = model.forward(a);
    const Tensor<float> fb = model.forward(b);
    CHECK(fa.at(0, 0, c, c) == doctest::Approx(fb.at(0, 0, c, c)).epsilon(1e-6));
    CHECK(fa.at(0, 1, c, c) == doctest::Approx(fb.at(0, 1, c, c)).epsilon(1e-6));
    // and a pixel whose field sticks out does change
    CHECK(fa.at(0, 0, 2, 2) != fb.at(0, 0, 2, 2));
}

TEST_CASE("translation equivariance away from borders") {
    const ModelConfig cfg = tiny_config(32, {1, 1, 1, 1});
    const Model<float> model = Model<float>::build(cfg, 21);
    Rng rng(6);
    const int size = 24, shift = 3;
    const Tensor<float> a = random_input(rng, 1, 5, size, size);
    Tensor<float> b(1, 5, size, size);
    for (int ch = 0; ch < 5; ++ch)
        for (int y = 0; y + shift < size; ++y)
            for (int x = 0; x + shift < size; ++x)
                b.at(0, ch, y, x) = a.at(0, ch, y + shift, x + shift);

    const Tensor<float> fa = model.forward(a);
    const Tensor<float> fb = model.forward(b);
    const int r = cfg.receptive_radius();
    for (int y = r; y + shift + r < size; ++y)
        for (int x = r; x + shift + r < size; ++x)
            CHECK(fb.at(0, 0, y, x) ==
                  doctest::Approx(fa.at(0, 0, y + shift, x + shift)).epsilon(1e-5));
}

TEST_CASE("model checkpoint with metadata round trips") {
    Model<float> model = Model<float>::build(tiny_config(64), 77);
    KeyValues extra;
    extra["norm_mean_0"] = "1.25";
    const std::string base = (std::filesystem::temp_directory_path() / "model_rt").string();
    save_model(model, extra, base);

    KeyValues loaded_extra;
    const Model<float> loaded = load_model(base, &loaded_extra);
    CHECK(loaded.config().width_mult_den == 64);
    CHECK(loaded_extra.at("norm_mean_0") == "1.25");
    for (size_t i = 0; i < model.params().count(); ++i)
        CHECK(loaded.params().param(static_cast<int>(i)).value ==
              model.params().param(static_cast<int>(i)).value);

    std::filesystem::remove(base + ".vhmw");
    std::filesystem::remove(base + ".meta");
}

TEST_CASE("config serialization round trips") {
    ModelConfig cfg = tiny_config(16, {1, 2, 1, 1});
    cfg.in_channels = 4;
    cfg.bn_momentum = 0.2;
    const ModelConfig back = model_config_from_kv(model_config_to_kv(cfg));
    CHECK(back.in_channels == 4);
    CHECK(back.width_mult_den == 16);
    CHECK(back.n_blocks == std::array<int, 4>{1, 2, 1, 1});
    CHECK(back.bn_momentum == doctest::Approx(0.2));
}
