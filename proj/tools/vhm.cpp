// Command-line front end: dataset synthesis, resampling, training, tiled
// prediction, annual compositing, evaluation, strata tables, change analysis,
// and the gradient checker.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "vhm/change.hpp"
#include "vhm/errors.hpp"
#include "vhm/evaluation.hpp"
#include "vhm/gradcheck.hpp"
#include "vhm/model.hpp"
#include "vhm/pipeline.hpp"
#include "vhm/raster.hpp"
#include "vhm/synth.hpp"
#include "vhm/textio.hpp"
#include "vhm/training.hpp"

namespace fs = std::filesystem;
using namespace vhm;

namespace {

struct Rational {
    int num = 1, den = 1;
};

Rational parse_rational(const std::string& text) {
    Rational r;
    const auto slash = text.find('/');
    if (slash == std::string::npos) {
        r.num = std::stoi(text);
    } else {
        r.num = std::stoi(text.substr(0, slash));
        r.den = std::stoi(text.substr(slash + 1));
    }
    if (r.num < 1 || r.den < 1) throw std::invalid_argument("width multiplier must be positive");
    return r;
}

std::array<int, 4> parse_blocks(const std::string& text) {
    std::array<int, 4> blocks{};
    if (std::sscanf(text.c_str(), "%d,%d,%d,%d", &blocks[0], &blocks[1], &blocks[2], &blocks[3]) !=
        4)
        throw std::invalid_argument("blocks must be four comma-separated counts");
    return blocks;
}

void ensure_out_dir(const std::string& out) {
    if (out.empty()) throw std::invalid_argument("--out is required");
    fs::create_directories(out);
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------

int cmd_synth(const std::string& config_path, uint64_t seed, bool seed_set,
              const std::string& out) {
    ensure_out_dir(out);
    SynthConfig cfg;
    if (!config_path.empty()) cfg = synth_config_from_kv(read_key_values(config_path));
    if (seed_set) cfg.seed = seed;
    const SynthResult r = synth_generate(cfg, out);

    // ready-to-run training configuration next to the dataset
    KeyValues train;
    train["manifest"] = r.paths.manifest;
    train["dtm"] = r.paths.dtm_10m;
    train["target_mean_" + std::to_string(r.year1)] = r.paths.target_mean_y1;
    train["target_max_" + std::to_string(r.year1)] = r.paths.target_max_y1;
    train["target_mean_" + std::to_string(r.year2)] = r.paths.target_mean_y2;
    train["target_max_" + std::to_string(r.year2)] = r.paths.target_max_y2;
    train["width_mult"] = "1/64";
    train["blocks"] = "1,1,1,1";
    train["iterations"] = "2000";
    train["learning_rate"] = "0.001";
    train["val_interval"] = "250";
    write_key_values(join_path(out, "train_config.txt"), train);

    std::cout << "dataset written to " << out << " (" << r.clearings.size() << " clearings, years "
              << r.year1 << "/" << r.year2 << ")\n";
    return 0;
}

int cmd_resample(const std::string& input, int factor, const std::string& mode,
                 const std::string& like, const std::string& out) {
    ensure_out_dir(out);
    const Raster src = read_raster(input);
    Raster result;
    if (mode == "mean" || mode == "max") {
        if (factor < 1) throw std::invalid_argument("--factor must be positive");
        result = pool_resample(src, factor, mode == "mean" ? PoolMode::mean : PoolMode::max);
    } else if (mode == "bilinear") {
        if (like.empty()) throw std::invalid_argument("bilinear mode needs --like");
        result = bilinear_resample(src, read_raster(like).grid());
    } else {
        throw std::invalid_argument("mode must be mean, max, or bilinear");
    }
    const std::string path = join_path(out, "resampled.rstr");
    write_raster(result, path);
    std::cout << path << "\n";
    return 0;
}

struct LoadedScenes {
    std::vector<Scene> scenes;
    std::set<int> years;
};

LoadedScenes load_all_scenes(const std::string& manifest_path) {
    LoadedScenes out;
    const std::string dir = fs::path(manifest_path).parent_path().string();
    for (const auto& entry : read_manifest(manifest_path)) {
        out.scenes.push_back(load_scene(entry, dir));
        out.years.insert(out.scenes.back().date.year);
    }
    return out;
}

int cmd_train(const std::string& config_path, const std::string& out, uint64_t seed, bool seed_set,
              bool with_dtm, const std::string& width_mult, const std::string& blocks,
              long iterations) {
    ensure_out_dir(out);
    if (config_path.empty()) throw std::invalid_argument("--config is required");
    const KeyValues kv = read_key_values(config_path);

    TrainConfig tc = train_config_from_kv(kv);
    if (seed_set) tc.seed = seed;
    if (iterations >= 0) tc.iterations = iterations;

    ModelConfig mc;
    mc.in_channels = with_dtm ? 5 : 4;
    const Rational wm = parse_rational(!width_mult.empty() ? width_mult
                                                           : kv_string(kv, "width_mult", "1/64"));
    mc.width_mult_num = wm.num;
    mc.width_mult_den = wm.den;
    mc.n_blocks = parse_blocks(!blocks.empty() ? blocks : kv_string(kv, "blocks", "1,1,1,1"));
    mc.validate();

    const LoadedScenes data = load_all_scenes(kv_string(kv, "manifest", ""));
    Raster dtm;
    if (with_dtm) dtm = read_raster(kv_string(kv, "dtm", ""));

    std::vector<PatchSample> patches;
    for (int year : data.years) {
        const std::string mean_key = "target_mean_" + std::to_string(year);
        const std::string max_key = "target_max_" + std::to_string(year);
        if (!kv.count(mean_key)) continue; // no reference data for this year
        const Raster tmean = read_raster(kv.at(mean_key));
        const Raster tmax = read_raster(kv.at(max_key));

        const auto ranked = select_scenes(data.scenes, year);
        const auto chosen = select_training_scenes(data.scenes, ranked, tmean, tmax,
                                                   with_dtm ? &dtm : nullptr);
        for (size_t idx : chosen) {
            auto scene_patches =
                extract_patches(data.scenes[idx], tmean, tmax, with_dtm ? &dtm : nullptr, nullptr);
            std::move(scene_patches.begin(), scene_patches.end(), std::back_inserter(patches));
        }
    }
    if (patches.empty()) throw std::invalid_argument("no usable training patches");
    std::cout << "training on " << patches.size() << " patches\n";

    Model<float> model = Model<float>::build(mc, tc.seed);
    const FitResult result = fit(model, std::move(patches), tc);

    KeyValues extra = norm_stats_to_kv(result.norm);
    extra["with_dtm"] = with_dtm ? "1" : "0";
    save_model(model, extra, join_path(out, "model"));
    write_train_log(join_path(out, "train_log.csv"), result.log);

    KeyValues summary;
    summary["baseline_val_mae"] = fmt_g6(result.baseline_val_mae);
    summary["initial_val_mae"] = fmt_g6(result.initial_val_mae);
    summary["best_val_mae"] = fmt_g6(result.best_val_mae);
    summary["best_val_iteration"] = std::to_string(result.best_val_iteration);
    summary["train_count"] = std::to_string(result.train_count);
    summary["val_count"] = std::to_string(result.val_count);
    write_key_values(join_path(out, "fit_summary.txt"), summary);

    std::cout << "baseline val mae " << fmt_g6(result.baseline_val_mae) << ", best val mae "
              << fmt_g6(result.best_val_mae) << " at iteration " << result.best_val_iteration
              << "\n";
    return 0;
}

int cmd_predict(const std::string& model_base, const std::string& manifest,
                const std::string& dtm_path, int year, const std::string& out) {
    ensure_out_dir(out);
    KeyValues meta;
    const Model<float> model = load_model(model_base, &meta);
    const NormStats norm = norm_stats_from_kv(meta, model.config().in_channels);
    const bool with_dtm = model.config().in_channels == 5;

    Raster dtm;
    if (with_dtm) {
        if (dtm_path.empty()) throw std::invalid_argument("model needs --dtm");
        dtm = read_raster(dtm_path);
    }

    const LoadedScenes data = load_all_scenes(manifest);
    const auto selected = select_scenes(data.scenes, year);
    if (selected.empty()) throw std::invalid_argument("no scenes for the requested year");

    std::ostringstream list;
    list << "mean_path,max_path\n";
    int index = 0;
    for (size_t idx : selected) {
        const Scene& scene = data.scenes[idx];
        PredictionPair pred = predict_scene(model, scene, with_dtm ? &dtm : nullptr, norm);
        pred = mask_invalid(pred, scene);

        char name[64];
        std::snprintf(name, sizeof(name), "scene_%04d_%02d_%s", year, index,
                      format_date(scene.date).c_str());
        const std::string mean_path = join_path(out, std::string(name) + "_mean.rstr");
        const std::string max_path = join_path(out, std::string(name) + "_max.rstr");
        write_raster(pred.mean, mean_path);
        write_raster(pred.max, max_path);
        list << mean_path << "," << max_path << "\n";
        ++index;
    }
    write_text_file(join_path(out, "predictions_" + std::to_string(year) + ".csv"), list.str());
    std::cout << "predicted " << index << " scenes for " << year << "\n";
    return 0;
}

int cmd_composite(const std::string& inputs, int year, const std::string& out) {
    ensure_out_dir(out);
    const std::string list_path =
        join_path(inputs, "predictions_" + std::to_string(year) + ".csv");
    std::istringstream list(read_text_file(list_path));
    std::string line;
    std::getline(list, line); // header
    std::vector<PredictionPair> predictions;
    while (std::getline(list, line)) {
        if (line.empty()) continue;
        const auto cols = split_csv_line(line);
        if (cols.size() != 2) throw IoError("bad prediction list row: " + line);
        predictions.push_back({read_raster(cols[0]), read_raster(cols[1])});
    }

    const AnnualMap map = annual_composite(predictions, year);
    write_raster(map.mean_height, join_path(out, "mean_" + std::to_string(year) + ".rstr"));
    write_raster(map.max_height, join_path(out, "max_" + std::to_string(year) + ".rstr"));
    write_raster(map.valid_count, join_path(out, "count_" + std::to_string(year) + ".rstr"));
    std::cout << "composited " << predictions.size() << " scenes for " << year << "\n";
    return 0;
}

int cmd_eval(const std::string& pred_path, const std::string& ref_path,
             const std::string& mask_path, double cap, const std::string& out) {
    ensure_out_dir(out);
    const Raster pred = read_raster(pred_path);
    const Raster ref = read_raster(ref_path);
    const Raster forest = read_raster(mask_path);
    const Raster mask = build_eval_mask(ref, forest, static_cast<float>(cap));

    const MetricReport overall = compute_metrics(pred, ref, mask);
    std::ostringstream csv;
    csv << metrics_csv_header() << "\n" << metrics_csv_row("overall", "all", overall) << "\n";
    write_text_file(join_path(out, "metrics.csv"), csv.str());
    write_residual_bins_csv(join_path(out, "residual_bins.csv"),
                            residual_bins(pred, ref, mask));
    write_density_scatter_csv(join_path(out, "density_scatter.csv"),
                              density_scatter(pred, ref, mask));
    std::cout << metrics_csv_row("overall", "all", overall) << "\n";
    return 0;
}

int cmd_strata(const std::string& pred_path, const std::string& ref_path,
               const std::string& mask_path, const std::string& dtm_path,
               const std::string& mix_path, const std::string& density_path, double cap,
               const std::string& out) {
    ensure_out_dir(out);
    const Raster pred = read_raster(pred_path);
    const Raster ref = read_raster(ref_path);
    const Raster forest = read_raster(mask_path);
    const Raster mask = build_eval_mask(ref, forest, static_cast<float>(cap));
    const Raster dtm = read_raster(dtm_path);
    const Raster mix = read_raster(mix_path);
    const Raster density = read_raster(density_path);

    const TerrainDerivatives terrain = slope_aspect(dtm);
    const StrataSources sources{{StratumSource::elevation, &dtm},
                                {StratumSource::slope, &terrain.slope},
                                {StratumSource::aspect, &terrain.aspect},
                                {StratumSource::mix_rate, &mix},
                                {StratumSource::tree_cover_density, &density}};
    const auto rows = stratified_metrics(pred, ref, mask, sources, default_strata());
    write_strata_csv(join_path(out, "strata.csv"), rows);

    write_raster(terrain.slope, join_path(out, "slope.rstr"));
    write_raster(terrain.aspect, join_path(out, "aspect.rstr"));
    std::cout << "wrote " << rows.size() << " strata rows\n";
    return 0;
}

int cmd_change(const std::string& diff1m_path, const std::string& diff10m_path,
               const std::string& forest_path, const std::string& ref_mask_path, double threshold,
               double min_area, const std::string& out) {
    ensure_out_dir(out);
    const Raster diff1 = read_raster(diff1m_path);
    const Raster diff10 = read_raster(diff10m_path);

    auto objects = change_objects(diff1, threshold, min_area);
    for (auto& obj : objects)
        obj.mean_s2_diff = object_mean_s2diff(obj, diff1.grid(), diff10);
    write_objects_csv(join_path(out, "objects.csv"), objects);

    Raster forest;
    if (!forest_path.empty()) {
        forest = read_raster(forest_path);
    } else {
        forest = Raster(diff10.grid(), 1);
        forest.fill(1.0f);
    }
    const BucketStatsResult stats = bucket_stats(objects, diff1.grid(), diff10, forest);
    write_boxstats_csv(join_path(out, "boxstats.csv"), stats);

    if (!ref_mask_path.empty()) {
        const Raster ref_mask = read_raster(ref_mask_path);
        const F1Result f1 =
            change_mask_f1(diff10, threshold, ref_mask, forest_path.empty() ? nullptr : &forest);
        write_f1_csv(join_path(out, "f1.csv"), f1);
        std::cout << "f1 " << fmt_g6(f1.f1) << " precision " << fmt_g6(f1.precision) << " recall "
                  << fmt_g6(f1.recall) << "\n";
    }
    std::cout << objects.size() << " change objects\n";
    return 0;
}

int cmd_gradcheck(uint64_t seed, double eps, const std::string& width_mult, int samples) {
    ModelConfig cfg;
    const Rational wm = parse_rational(width_mult.empty() ? "1/8" : width_mult);
    cfg.width_mult_num = wm.num;
    cfg.width_mult_den = wm.den;
    cfg.n_blocks = {1, 1, 1, 1};
    cfg.validate();

    GradCheckConfig gc;
    gc.epsilon = eps;
    gc.samples_per_kind = samples;
    const GradCheckResult r = grad_check(cfg, seed, gc);
    std::printf("max relative error %.3e over %ld parameters\n", r.max_rel_error, r.checked);
    return r.max_rel_error < 1e-4 ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"vegetation height mapping toolkit"};
    app.require_subcommand(1);

    std::string config, out, input, like, mode = "mean", model_base, manifest, dtm_path;
    std::string pred_path, ref_path, mask_path, mix_path, density_path;
    std::string diff1m, diff10m, forest_path, ref_mask_path;
    std::string width_mult, blocks;
    uint64_t seed = 0;
    double eps = 1e-4, cap = 50.0, threshold = -10.0, min_area = 25.0;
    int factor = 0, year = 0, samples = 250;
    long iterations = -1;
    bool with_dtm = true;

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    synth->add_option("--config", config);
    auto* synth_seed = synth->add_option("--seed", seed);
    synth->add_option("--out", out)->required();

    auto* resample = app.add_subcommand("resample", "pooled or bilinear resampling");
    resample->add_option("--input", input)->required();
    resample->add_option("--factor", factor);
    resample->add_option("--mode", mode);
    resample->add_option("--like", like);
    resample->add_option("--out", out)->required();

    auto* train = app.add_subcommand("train", "fit the height regressor");
    train->add_option("--config", config)->required();
    train->add_option("--out", out)->required();
    auto* train_seed = train->add_option("--seed", seed);
    train->add_option("--with-dtm", with_dtm);
    train->add_option("--width-mult", width_mult);
    train->add_option("--blocks", blocks);
    train->add_option("--iterations", iterations);

    auto* predict = app.add_subcommand("predict", "tiled per-scene inference");
    predict->add_option("--model", model_base)->required();
    predict->add_option("--manifest", manifest)->required();
    predict->add_option("--dtm", dtm_path);
    predict->add_option("--year", year)->required();
    predict->add_option("--out", out)->required();

    auto* composite = app.add_subcommand("composite", "annual median composite");
    composite->add_option("--inputs", input)->required();
    composite->add_option("--year", year)->required();
    composite->add_option("--out", out)->required();

    auto* eval = app.add_subcommand("eval", "metrics against a reference map");
    eval->add_option("--pred", pred_path)->required();
    eval->add_option("--ref", ref_path)->required();
    eval->add_option("--mask", mask_path)->required();
    eval->add_option("--cap", cap);
    eval->add_option("--out", out)->required();

    auto* strata = app.add_subcommand("strata", "stratified evaluation tables");
    strata->add_option("--pred", pred_path)->required();
    strata->add_option("--ref", ref_path)->required();
    strata->add_option("--mask", mask_path)->required();
    strata->add_option("--dtm", dtm_path)->required();
    strata->add_option("--mix", mix_path)->required();
    strata->add_option("--density", density_path)->required();
    strata->add_option("--cap", cap);
    strata->add_option("--out", out)->required();

    auto* change = app.add_subcommand("change", "biannual change objects and scores");
    change->add_option("--diff1m", diff1m)->required();
    change->add_option("--diff10m", diff10m)->required();
    change->add_option("--forest", forest_path);
    change->add_option("--ref-mask", ref_mask_path);
    change->add_option("--threshold", threshold);
    change->add_option("--min-area", min_area);
    change->add_option("--out", out)->required();

    auto* gradcheck = app.add_subcommand("gradcheck", "gradients vs finite differences");
    gradcheck->add_option("--seed", seed);
    gradcheck->add_option("--eps", eps);
    gradcheck->add_option("--width-mult", width_mult);
    gradcheck->add_option("--samples", samples);

    try {
        app.parse(argc, argv);
        if (synth->parsed())
            return cmd_synth(config, seed, synth_seed->count() > 0, out);
        if (resample->parsed()) return cmd_resample(input, factor, mode, like, out);
        if (train->parsed())
            return cmd_train(config, out, seed, train_seed->count() > 0, with_dtm, width_mult,
                             blocks, iterations);
        if (predict->parsed()) return cmd_predict(model_base, manifest, dtm_path, year, out);
        if (composite->parsed()) return cmd_composite(input, year, out);
        if (eval->parsed()) return cmd_eval(pred_path, ref_path, mask_path, cap, out);
        if (strata->parsed())
            return cmd_strata(pred_path, ref_path, mask_path, dtm_path, mix_path, density_path,
                              cap, out);
        if (change->parsed())
            return cmd_change(diff1m, diff10m, forest_path, ref_mask_path, threshold, min_area,
                              out);
        if (gradcheck->parsed()) return cmd_gradcheck(seed, eps, width_mult, samples);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        std::cerr << e.what() << "\n" << app.help() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid request: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
