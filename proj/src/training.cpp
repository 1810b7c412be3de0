#include "vhm/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "vhm/rng.hpp"

namespace vhm {

void TrainConfig::validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
    if (learning_rate <= 0.0 || beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0 ||
        adam_eps <= 0.0)
        throw std::invalid_argument("invalid optimizer rates");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
    if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
    if (epoch_sample < 1) throw std::invalid_argument("epoch_sample must be positive");
    if (val_fraction <= 0.0 || val_fraction >= 1.0)
        throw std::invalid_argument("val_fraction must lie in (0, 1)");
    if (val_interval < 1) throw std::invalid_argument("val_interval must be positive");
}

KeyValues train_config_to_kv(const TrainConfig& cfg) {
    KeyValues kv;
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["learning_rate"] = fmt_g6(cfg.learning_rate);
    kv["weight_decay"] = fmt_g6(cfg.weight_decay);
    kv["beta1"] = fmt_g6(cfg.beta1);
    kv["beta2"] = fmt_g6(cfg.beta2);
    kv["adam_eps"] = fmt_g6(cfg.adam_eps);
    kv["iterations"] = std::to_string(cfg.iterations);
    kv["epoch_sample"] = std::to_string(cfg.epoch_sample);
    kv["val_fraction"] = fmt_g6(cfg.val_fraction);
    kv["val_interval"] = std::to_string(cfg.val_interval);
    kv["seed"] = std::to_string(cfg.seed);
    return kv;
}

TrainConfig train_config_from_kv(const KeyValues& kv) {
    TrainConfig cfg;
    cfg.batch_size = static_cast<int>(kv_long(kv, "batch_size", cfg.batch_size));
    cfg.learning_rate = kv_double(kv, "learning_rate", cfg.learning_rate);
    cfg.weight_decay = kv_double(kv, "weight_decay", cfg.weight_decay);
    cfg.beta1 = kv_double(kv, "beta1", cfg.beta1);
    cfg.beta2 = kv_double(kv, "beta2", cfg.beta2);
    cfg.adam_eps = kv_double(kv, "adam_eps", cfg.adam_eps);
    cfg.iterations = kv_long(kv, "iterations", cfg.iterations);
    cfg.epoch_sample = kv_long(kv, "epoch_sample", cfg.epoch_sample);
    cfg.val_fraction = kv_double(kv, "val_fraction", cfg.val_fraction);
    cfg.val_interval = kv_long(kv, "val_interval", cfg.val_interval);
    cfg.seed = static_cast<uint64_t>(kv_long(kv, "seed", 0));
    return cfg;
}

NormStats compute_norm_stats(const std::vector<PatchSample>& train_patches) {
    if (train_patches.empty()) throw std::invalid_argument("empty training set");
    const int channels = train_patches[0].x.c;
    const int px = train_patches[0].x.pixels();

    NormStats stats;
    stats.mean.resize(channels);
    stats.stddev.resize(channels);
    for (int c = 0; c < channels; ++c) {
        double sum = 0.0;
        size_t n = 0;
        for (const auto& p : train_patches) {
            const float* s = p.x.plane(0, c);
            for (int i = 0; i < px; ++i) sum += s[i];
            n += px;
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (const auto& p : train_patches) {
            const float* s = p.x.plane(0, c);
            for (int i = 0; i < px; ++i) {
                const double d = s[i] - mean;
                sq += d * d;
            }
        }
        const double var = sq / static_cast<double>(n);
        if (var <= 0.0)
            throw std::invalid_argument("zero-variance channel " + std::to_string(c));
        stats.mean[c] = static_cast<float>(mean);
        stats.stddev[c] = static_cast<float>(std::sqrt(var));
    }
    return stats;
}

void apply_norm(Tensor<float>& x, const NormStats& stats) {
    if (static_cast<size_t>(x.c) != stats.mean.size())
        throw std::invalid_argument("normalization channel mismatch");
    const int px = x.pixels();
    for (int ni = 0; ni < x.n; ++ni) {
        for (int c = 0; c < x.c; ++c) {
            float* s = x.plane(ni, c);
            const float m = stats.mean[c];
            const float inv = 1.0f / stats.stddev[c];
            for (int i = 0; i < px; ++i) s[i] = (s[i] - m) * inv;
        }
    }
}

KeyValues norm_stats_to_kv(const NormStats& stats) {
    KeyValues kv;
    for (size_t c = 0; c < stats.mean.size(); ++c) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.9g", stats.mean[c]);
        kv["norm_mean_" + std::to_string(c)] = buf;
        std::snprintf(buf, sizeof(buf), "%.9g", stats.stddev[c]);
        kv["norm_std_" + std::to_string(c)] = buf;
    }
    return kv;
}

NormStats norm_stats_from_kv(const KeyValues& kv, int channels) {
    NormStats stats;
    for (int c = 0; c < channels; ++c) {
        stats.mean.push_back(static_cast<float>(kv_double(kv, "norm_mean_" + std::to_string(c), 0.0)));
        stats.stddev.push_back(static_cast<float>(kv_double(kv, "norm_std_" + std::to_string(c), 1.0)));
    }
    return stats;
}

LossValue mae_loss(const std::vector<std::array<double, 2>>& pred,
                   const std::vector<std::array<double, 2>>& target, double weight_decay,
                   double squared_param_norm) {
    if (pred.size() != target.size() || pred.empty())
        throw std::invalid_argument("prediction/target size mismatch");
    LossValue out;
    for (size_t i = 0; i < pred.size(); ++i) {
        for (int c = 0; c < 2; ++c) {
            const double d = pred[i][c] - target[i][c];
            out.mae += std::abs(d);
            out.mbe += d;
        }
    }
    const double denom = static_cast<double>(pred.size()) * 2.0;
    out.mae /= denom;
    out.mbe /= denom;
    out.loss = out.mae + weight_decay * squared_param_norm;
    return out;
}

void write_train_log(const std::string& path, const std::vector<TrainLogRow>& rows) {
    std::ostringstream ss;
    ss << "iteration,split,loss,mae,mbe\n";
    for (const auto& r : rows)
        ss << r.iteration << "," << r.split << "," << fmt_g6(r.loss) << "," << fmt_g6(r.mae) << ","
           << fmt_g6(r.mbe) << "\n";
    write_text_file(path, ss.str());
}

namespace {

// Assembles [count, c, 15, 15] from normalized patches.
Tensor<float> make_batch(const std::vector<PatchSample>& patches, const std::vector<size_t>& idx,
                         size_t begin, size_t count) {
    const auto& first = patches[idx[begin]].x;
    Tensor<float> batch(static_cast<int>(count), first.c, first.h, first.w);
    for (size_t i = 0; i < count; ++i) {
        const auto& p = patches[idx[begin + i]].x;
        std::copy(p.v.begin(), p.v.end(), batch.v.begin() + i * p.size());
    }
    return batch;
}

LossValue center_metrics(const Tensor<float>& out, const std::vector<PatchSample>& patches,
                         const std::vector<size_t>& idx, size_t begin) {
    LossValue lv;
    for (int i = 0; i < out.n; ++i) {
        const auto& p = patches[idx[begin + i]];
        const double dm = out.at(i, 0, kPatchCenter, kPatchCenter) - p.y_mean;
        const double dx = out.at(i, 1, kPatchCenter, kPatchCenter) - p.y_max;
        lv.mae += std::abs(dm) + std::abs(dx);
        lv.mbe += dm + dx;
    }
    lv.mae /= out.n * 2.0;
    lv.mbe /= out.n * 2.0;
    return lv;
}

} // namespace

LossValue evaluate_patches(const Model<float>& model, const std::vector<PatchSample>& patches,
                           int batch_size) {
    if (patches.empty()) throw std::invalid_argument("empty patch set");
    std::vector<size_t> idx(patches.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    double mae = 0.0, mbe = 0.0;
    size_t done = 0;
    while (done < patches.size()) {
        const size_t count = std::min(static_cast<size_t>(batch_size), patches.size() - done);
        const Tensor<float> batch = make_batch(patches, idx, done, count);
        const Tensor<float> out = model.forward(batch);
        const LossValue lv = center_metrics(out, patches, idx, done);
        mae += lv.mae * static_cast<double>(count);
        mbe += lv.mbe * static_cast<double>(count);
        done += count;
    }
    LossValue lv;
    lv.mae = mae / static_cast<double>(patches.size());
    lv.mbe = mbe / static_cast<double>(patches.size());
    lv.loss = lv.mae;
    return lv;
}

FitResult fit(Model<float>& model, std::vector<PatchSample> patches, const TrainConfig& cfg) {
    cfg.validate();
    if (patches.empty()) throw std::invalid_argument("no training patches");

    // split by location so overlapping patches cannot leak across splits
    std::vector<long> locations;
    {
        std::set<long> uniq;
        for (const auto& p : patches) uniq.insert(p.location_id);
        locations.assign(uniq.begin(), uniq.end());
    }
    Rng rng(cfg.seed);
    rng.shuffle(locations);
    const size_t n_val_loc = std::max<size_t>(
        1, static_cast<size_t>(std::llround(cfg.val_fraction * static_cast<double>(locations.size()))));
    if (n_val_loc >= locations.size()) throw std::invalid_argument("validation split swallows all locations");
    std::set<long> val_locations(locations.begin(), locations.begin() + n_val_loc);

    FitResult result;
    result.val_locations.assign(val_locations.begin(), val_locations.end());

    std::vector<PatchSample> train, val;
    for (auto& p : patches) {
        (val_locations.count(p.location_id) ? val : train).push_back(std::move(p));
    }
    patches.clear();
    if (train.empty() || val.empty()) throw std::invalid_argument("empty split");

    result.norm = compute_norm_stats(train);
    for (auto& p : train) apply_norm(p.x, result.norm);
    for (auto& p : val) apply_norm(p.x, result.norm);
    result.train_count = static_cast<long>(train.size());
    result.val_count = static_cast<long>(val.size());

    // constant-predictor reference on the same split
    {
        double m_mean = 0.0, m_max = 0.0;
        for (const auto& p : train) {
            m_mean += p.y_mean;
            m_max += p.y_max;
        }
        m_mean /= static_cast<double>(train.size());
        m_max /= static_cast<double>(train.size());
        double mae = 0.0;
        for (const auto& p : val)
            mae += std::abs(m_mean - p.y_mean) + std::abs(m_max - p.y_max);
        result.baseline_val_mae = mae / (2.0 * static_cast<double>(val.size()));
    }

    if (cfg.iterations == 0) {
        result.best_val_mae = result.initial_val_mae = evaluate_patches(model, val).mae;
        return result;
    }

    auto run_val = [&](long iteration) {
        const LossValue lv = evaluate_patches(model, val);
        result.log.push_back({iteration, "val", lv.mae, lv.mae, lv.mbe});
        return lv.mae;
    };

    result.initial_val_mae = run_val(0);
    double best_mae = result.initial_val_mae;
    long best_iter = 0;
    std::vector<std::vector<float>> best_values;
    for (const auto& p : model.params().all()) best_values.push_back(p.value);

    AdamConfig adam_cfg{cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps};
    AdamState<float> adam(model.params());

    // epoch deck: epoch_sample uniformly drawn training indices, reshuffled
    // whenever the deck runs out
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::vector<size_t> deck;
    size_t deck_pos = 0, order_pos = order.size();
    auto refill_deck = [&]() {
        deck.clear();
        for (long k = 0; k < cfg.epoch_sample; ++k) {
            if (order_pos == order.size()) {
                rng.shuffle(order);
                order_pos = 0;
            }
            deck.push_back(order[order_pos++]);
        }
        deck_pos = 0;
    };

    const float wd2 = static_cast<float>(2.0 * cfg.weight_decay);
    for (long iter = 1; iter <= cfg.iterations; ++iter) {
        std::vector<size_t> batch_idx;
        batch_idx.reserve(cfg.batch_size);
        while (batch_idx.size() < static_cast<size_t>(cfg.batch_size)) {
            if (deck_pos == deck.size()) refill_deck();
            batch_idx.push_back(deck[deck_pos++]);
        }

        Tensor<float> batch = make_batch(train, batch_idx, 0, batch_idx.size());
        Tape<float> tape(&model.params(), /*bn_training=*/true);
        const int out_id = model.forward_tape(tape, std::move(batch));
        const Tensor<float>& out = tape.value(out_id);

        // center-pixel MAE with its subgradient as the backward seed
        Tensor<float> seed(out.n, out.c, out.h, out.w);
        LossValue lv = center_metrics(out, train, batch_idx, 0);
        const float unit = 1.0f / (out.n * 2.0f);
        for (int i = 0; i < out.n; ++i) {
            const auto& p = train[batch_idx[i]];
            const float dm = out.at(i, 0, kPatchCenter, kPatchCenter) - p.y_mean;
            const float dx = out.at(i, 1, kPatchCenter, kPatchCenter) - p.y_max;
            seed.at(i, 0, kPatchCenter, kPatchCenter) = dm > 0 ? unit : (dm < 0 ? -unit : 0.0f);
            seed.at(i, 1, kPatchCenter, kPatchCenter) = dx > 0 ? unit : (dx < 0 ? -unit : 0.0f);
        }

        model.params().zero_grad();
        tape.backward(out_id, seed);
        if (cfg.weight_decay > 0.0) {
            for (auto& p : model.params().all()) {
                if (!p.trainable) continue;
                for (size_t k = 0; k < p.size(); ++k) p.grad[k] += wd2 * p.value[k];
            }
        }
        adam.step(model.params(), adam_cfg);

        lv.loss = lv.mae + cfg.weight_decay * model.params().squared_l2_trainable();
        result.log.push_back({iter, "train", lv.loss, lv.mae, lv.mbe});

        if (iter % cfg.val_interval == 0 || iter == cfg.iterations) {
            const double val_mae = run_val(iter);
            if (val_mae < best_mae) {
                best_mae = val_mae;
                best_iter = iter;
                for (size_t i = 0; i < best_values.size(); ++i)
                    best_values[i] = model.params().all()[i].value;
            }
        }
    }

    for (size_t i = 0; i < best_values.size(); ++i)
        model.params().all()[i].value = std::move(best_values[i]);
    result.best_val_mae = best_mae;
    result.best_val_iteration = best_iter;
    return result;
}

} // namespace vhm
