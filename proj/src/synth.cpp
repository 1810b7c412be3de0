#include "vhm/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "vhm/pipeline.hpp"
#include "vhm/rng.hpp"

namespace vhm {

void SynthConfig::validate() const {
    if (extent < 100 || extent % 10 != 0)
        throw std::invalid_argument("extent must be a multiple of 10 and at least 100");
    if (forest_fraction <= 0.0 || forest_fraction >= 1.0)
        throw std::invalid_argument("forest_fraction must lie in (0, 1)");
    if (max_height <= 5.0 || max_height > 45.0)
        throw std::invalid_argument("max_height must lie in (5, 45]");
    if (band_noise_std < 0.0) throw std::invalid_argument("band noise must be non-negative");
    if (relief_amplitude < 100.0 || relief_amplitude > 2200.0)
        throw std::invalid_argument("relief amplitude must lie in [100, 2200]");
    if (scenes_per_year < 1) throw std::invalid_argument("need at least one scene per year");
    if (clearing_count < 0) throw std::invalid_argument("negative clearing count");
    if (clearing_count > 0) {
        if (clearing_area_min < 25.0 || clearing_area_max < clearing_area_min)
            throw std::invalid_argument("bad clearing area range");
        if (drop_min < 10.0 || drop_max < drop_min || drop_max > 40.0)
            throw std::invalid_argument("drop range must lie within [10, 40]");
        if (drop_max + 2.0 > max_height)
            throw std::invalid_argument("drops taller than the canopy");
    }
    if (base_scale < 20.0 || cloud_scale < 20.0)
        throw std::invalid_argument("field scales must be at least 20 m");
}

KeyValues synth_config_to_kv(const SynthConfig& c) {
    KeyValues kv;
    kv["seed"] = std::to_string(c.seed);
    kv["extent"] = std::to_string(c.extent);
    kv["forest_fraction"] = fmt_g6(c.forest_fraction);
    kv["base_scale"] = fmt_g6(c.base_scale);
    kv["max_height"] = fmt_g6(c.max_height);
    kv["band_noise_std"] = fmt_g6(c.band_noise_std);
    kv["elevation_confound"] = fmt_g6(c.elevation_confound);
    kv["relief_amplitude"] = fmt_g6(c.relief_amplitude);
    kv["cloud_scale"] = fmt_g6(c.cloud_scale);
    kv["scenes_per_year"] = std::to_string(c.scenes_per_year);
    kv["out_of_season_scenes"] = std::to_string(c.out_of_season_scenes);
    kv["clearing_count"] = std::to_string(c.clearing_count);
    kv["clearing_area_min"] = fmt_g6(c.clearing_area_min);
    kv["clearing_area_max"] = fmt_g6(c.clearing_area_max);
    kv["drop_min"] = fmt_g6(c.drop_min);
    kv["drop_max"] = fmt_g6(c.drop_max);
    kv["grid_aligned_clearings"] = c.grid_aligned_clearings ? "1" : "0";
    kv["year1"] = std::to_string(c.year1);
    return kv;
}

SynthConfig synth_config_from_kv(const KeyValues& kv) {
    SynthConfig c;
    c.seed = static_cast<uint64_t>(kv_long(kv, "seed", 0));
    c.extent = static_cast<int>(kv_long(kv, "extent", c.extent));
    c.forest_fraction = kv_double(kv, "forest_fraction", c.forest_fraction);
    c.base_scale = kv_double(kv, "base_scale", c.base_scale);
    c.max_height = kv_double(kv, "max_height", c.max_height);
    c.band_noise_std = kv_double(kv, "band_noise_std", c.band_noise_std);
    c.elevation_confound = kv_double(kv, "elevation_confound", c.elevation_confound);
    c.relief_amplitude = kv_double(kv, "relief_amplitude", c.relief_amplitude);
    c.cloud_scale = kv_double(kv, "cloud_scale", c.cloud_scale);
    c.scenes_per_year = static_cast<int>(kv_long(kv, "scenes_per_year", c.scenes_per_year));
    c.out_of_season_scenes =
        static_cast<int>(kv_long(kv, "out_of_season_scenes", c.out_of_season_scenes));
    c.clearing_count = static_cast<int>(kv_long(kv, "clearing_count", c.clearing_count));
    c.clearing_area_min = kv_double(kv, "clearing_area_min", c.clearing_area_min);
    c.clearing_area_max = kv_double(kv, "clearing_area_max", c.clearing_area_max);
    c.drop_min = kv_double(kv, "drop_min", c.drop_min);
    c.drop_max = kv_double(kv, "drop_max", c.drop_max);
    c.grid_aligned_clearings = kv_long(kv, "grid_aligned_clearings", 1) != 0;
    c.year1 = static_cast<int>(kv_long(kv, "year1", c.year1));
    return c;
}

std::vector<float> smooth_field(int width, int height, double scale_px, Rng& rng, int octaves) {
    std::vector<float> out(static_cast<size_t>(width) * height, 0.0f);
    double amplitude = 1.0;
    double scale = std::max(2.0, scale_px);
    double total = 0.0;
    for (int oct = 0; oct < octaves; ++oct) {
        const int nx = static_cast<int>(width / scale) + 3;
        const int ny = static_cast<int>(height / scale) + 3;
        std::vector<float> lattice(static_cast<size_t>(nx) * ny);
        for (auto& v : lattice) v = static_cast<float>(rng.uniform());

        auto lat = [&](int ix, int iy) { return lattice[static_cast<size_t>(iy) * nx + ix]; };
        for (int y = 0; y < height; ++y) {
            const double fy = y / scale;
            const int iy = static_cast<int>(fy);
            double ty = fy - iy;
            ty = ty * ty * (3.0 - 2.0 * ty);
            for (int x = 0; x < width; ++x) {
                const double fx = x / scale;
                const int ix = static_cast<int>(fx);
                double tx = fx - ix;
                tx = tx * tx * (3.0 - 2.0 * tx);
                const double v00 = lat(ix, iy), v10 = lat(ix + 1, iy);
                const double v01 = lat(ix, iy + 1), v11 = lat(ix + 1, iy + 1);
                const double v = (v00 * (1 - tx) + v10 * tx) * (1 - ty) +
                                 (v01 * (1 - tx) + v11 * tx) * ty;
                out[static_cast<size_t>(y) * width + x] += static_cast<float>(amplitude * v);
            }
        }
        total += amplitude;
        amplitude *= 0.5;
        scale = std::max(2.0, scale / 2.5);
    }
    // normalize to [0, 1]
    float lo = out[0], hi = out[0];
    for (float v : out) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float span = hi - lo > 0 ? hi - lo : 1.0f;
    for (auto& v : out) v = (v - lo) / span;
    (void)total;
    return out;
}

std::array<double, 4> synth_band_response(double h) {
    // red/green/blue darken with canopy height, near-infrared brightens;
    // saturation constants make canopies beyond ~35 m nearly indistinguishable
    return {
        0.42 - 0.33 * (1.0 - std::exp(-h / 18.0)),
        0.45 - 0.27 * (1.0 - std::exp(-h / 22.0)),
        0.38 - 0.30 * (1.0 - std::exp(-h / 16.0)),
        0.30 + 0.45 * (1.0 - std::exp(-h / 20.0)),
    };
}

namespace {

float quantile_of(std::vector<float> values, double q) {
    const size_t idx = static_cast<size_t>(q * (values.size() - 1));
    std::nth_element(values.begin(), values.begin() + idx, values.end());
    return values[idx];
}

struct DateStamp {
    int month, day;
};

// leaf-on acquisition calendar: evenly spread May 20 .. September 20
DateStamp season_date(int index, int count) {
    const int days_total = 123; // May 20 + 123 days = September 20
    const int offset = count > 1 ? index * days_total / (count - 1) : 0;
    static const int month_days[] = {31, 30, 31, 31, 30}; // May..Sep
    int day = 20 + offset;
    int month = 5;
    for (int m = 0; day > month_days[m]; ++m) {
        day -= month_days[m];
        month += 1;
    }
    return {month, day};
}

} // namespace

SynthResult synth_generate(const SynthConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "scenes");

    Rng rng(cfg.seed);
    const int e1 = cfg.extent;        // 1 m grid
    const int e10 = cfg.extent / 10;  // 10 m grid
    const double north = static_cast<double>(e1);

    auto raster_1m = [&] { return Raster(e1, e1, 1, 1.0, 0.0, north); };
    auto raster_10m = [&] { return Raster(e10, e10, 1, 10.0, 0.0, north); };

    // terrain: broad smooth relief plus one steep hill for the upper slope range
    Raster dtm1 = raster_1m();
    {
        const std::vector<float> base = smooth_field(e1, e1, cfg.base_scale * 2.2, rng, 2);
        const double hx = rng.uniform(0.3, 0.7) * e1;
        const double hy = rng.uniform(0.3, 0.7) * e1;
        const double sigma = 0.16 * e1;
        for (int y = 0; y < e1; ++y)
            for (int x = 0; x < e1; ++x) {
                const double d2 = ((x - hx) * (x - hx) + (y - hy) * (y - hy)) / (sigma * sigma);
                const double hill = std::exp(-0.5 * d2);
                const double f = 0.52 * base[static_cast<size_t>(y) * e1 + x] + 0.48 * hill;
                dtm1.at(x, y) = static_cast<float>(240.0 + cfg.relief_amplitude * f);
            }
    }

    // vegetation: forest cover, smooth canopy height, tree line thinning
    const std::vector<float> forest_field = smooth_field(e1, e1, cfg.base_scale * 1.4, rng, 2);
    const float forest_cut = quantile_of(forest_field, 1.0 - cfg.forest_fraction);
    const std::vector<float> height_field = smooth_field(e1, e1, cfg.base_scale, rng, 2);
    const std::vector<float> grass_field = smooth_field(e1, e1, cfg.base_scale * 0.5, rng, 1);

    std::vector<uint8_t> forest1(static_cast<size_t>(e1) * e1, 0);
    Raster vhm1 = raster_1m();
    for (int y = 0; y < e1; ++y) {
        for (int x = 0; x < e1; ++x) {
            const size_t i = static_cast<size_t>(y) * e1 + x;
            const double e01 = (dtm1.at(x, y) - 240.0) / cfg.relief_amplitude;
            const double treeline = std::clamp(1.15 - 0.55 * e01, 0.35, 1.0);
            double h;
            if (forest_field[i] >= forest_cut) {
                forest1[i] = 1;
                const double f = height_field[i];
                h = (4.0 + (cfg.max_height - 4.0) * std::pow(f, 1.2)) * treeline;
            } else {
                h = 1.5 * grass_field[i] * treeline;
            }
            vhm1.at(x, y) = static_cast<float>(std::max(0.0, h));
        }
    }

    // biannual scenario: rectangular clearings with a fixed height drop
    SynthResult result;
    result.year1 = cfg.year1;
    result.year2 = cfg.year1 + 1;
    Raster vhm2 = vhm1;
    std::vector<uint8_t> cleared(static_cast<size_t>(e1) * e1, 0);
    {
        const int margin = 12;
        auto fits = [&](const Clearing& c) {
            if (c.x0 < margin || c.y0 < margin || c.x0 + c.width > e1 - margin ||
                c.y0 + c.height > e1 - margin)
                return false;
            for (const auto& placed : result.clearings) {
                const int gap = 4; // keep components disjoint under 8-connectivity
                if (c.x0 < placed.x0 + placed.width + gap && placed.x0 < c.x0 + c.width + gap &&
                    c.y0 < placed.y0 + placed.height + gap && placed.y0 < c.y0 + c.height + gap)
                    return false;
            }
            for (int y = c.y0; y < c.y0 + c.height; ++y)
                for (int x = c.x0; x < c.x0 + c.width; ++x) {
                    if (!forest1[static_cast<size_t>(y) * e1 + x]) return false;
                    if (vhm1.at(x, y) < c.drop + 2.0) return false;
                }
            return true;
        };

        for (int k = 0; k < cfg.clearing_count; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < 2000 && !placed; ++attempt) {
                Clearing c;
                c.drop = rng.uniform(cfg.drop_min, cfg.drop_max);
                if (cfg.grid_aligned_clearings) {
                    const int umax = std::max(1, static_cast<int>(std::sqrt(cfg.clearing_area_max / 100.0)));
                    const int u = rng.uniform_int(1, umax);
                    const int vmin = std::max(
                        1, static_cast<int>(std::ceil(cfg.clearing_area_min / (100.0 * u))));
                    const int vmax =
                        std::max(vmin, static_cast<int>(cfg.clearing_area_max / (100.0 * u)));
                    const int v = rng.uniform_int(vmin, vmax);
                    c.width = 10 * u;
                    c.height = 10 * v;
                    const int slots_x = (e1 - c.width) / 10 - 2;
                    const int slots_y = (e1 - c.height) / 10 - 2;
                    if (slots_x < 2 || slots_y < 2) continue; // cannot fit this shape
                    c.x0 = 10 * rng.uniform_int(2, slots_x);
                    c.y0 = 10 * rng.uniform_int(2, slots_y);
                } else {
                    const double area = rng.uniform(cfg.clearing_area_min, cfg.clearing_area_max);
                    const double aspect = rng.uniform(0.6, 1.7);
                    c.width = std::max(3, static_cast<int>(std::lround(std::sqrt(area * aspect))));
                    c.height = std::max(3, static_cast<int>(std::lround(area / c.width)));
                    if (c.width > e1 - 2 * margin || c.height > e1 - 2 * margin) continue;
                    c.x0 = rng.uniform_int(margin, e1 - margin - c.width);
                    c.y0 = rng.uniform_int(margin, e1 - margin - c.height);
                }
                if (!fits(c)) continue;
                for (int y = c.y0; y < c.y0 + c.height; ++y)
                    for (int x = c.x0; x < c.x0 + c.width; ++x) {
                        vhm2.at(x, y) = static_cast<float>(vhm1.at(x, y) - c.drop);
                        cleared[static_cast<size_t>(y) * e1 + x] = 1;
                    }
                result.clearings.push_back(c);
                placed = true;
            }
            if (!placed)
                throw std::invalid_argument("extent too small for requested clearings");
        }
    }

    // 10 m products
    const Raster dtm10 = pool_resample(dtm1, 10, PoolMode::mean);
    const Raster mean1 = pool_resample(vhm1, 10, PoolMode::mean);
    const Raster max1 = pool_resample(vhm1, 10, PoolMode::max);
    const Raster mean2 = pool_resample(vhm2, 10, PoolMode::mean);
    const Raster max2 = pool_resample(vhm2, 10, PoolMode::max);

    Raster forest10 = raster_10m();
    Raster change_ref = raster_10m();
    for (int cy = 0; cy < e10; ++cy)
        for (int cx = 0; cx < e10; ++cx) {
            int forest_cells = 0, cleared_cells = 0;
            for (int dy = 0; dy < 10; ++dy)
                for (int dx = 0; dx < 10; ++dx) {
                    const size_t i = static_cast<size_t>(cy * 10 + dy) * e1 + cx * 10 + dx;
                    forest_cells += forest1[i];
                    cleared_cells += cleared[i];
                }
            forest10.at(cx, cy) = forest_cells >= 50 ? 1.0f : 0.0f;
            change_ref.at(cx, cy) = cleared_cells >= 50 ? 1.0f : 0.0f;
        }

    // forest properties on the 10 m grid through bilinear resampling
    Raster mix1m = raster_1m();
    Raster density1m = raster_1m();
    {
        const std::vector<float> mix_field = smooth_field(e1, e1, cfg.base_scale * 1.8, rng, 2);
        const std::vector<float> density_field = smooth_field(e1, e1, cfg.base_scale * 1.2, rng, 2);
        for (size_t i = 0; i < mix_field.size(); ++i) {
            mix1m.data()[i] = std::clamp(mix_field[i] * 110.0f - 5.0f, 0.0f, 100.0f);
            density1m.data()[i] = std::clamp(25.0f + 85.0f * density_field[i], 0.0f, 100.0f);
        }
    }
    const Raster mix10 = bilinear_resample(mix1m, forest10.grid());
    const Raster density10 = bilinear_resample(density1m, forest10.grid());

    // land cover from elevation: a waterline and a snow line
    Raster landcover = raster_10m();
    {
        std::vector<float> elev(dtm10.data());
        const float water_cut = quantile_of(elev, 0.03);
        const float snow_cut = quantile_of(elev, 0.985);
        for (int y = 0; y < e10; ++y)
            for (int x = 0; x < e10; ++x) {
                float code = static_cast<float>(kLandOther);
                if (dtm10.at(x, y) <= water_cut) code = static_cast<float>(kLandWater);
                else if (dtm10.at(x, y) >= snow_cut) code = static_cast<float>(kLandSnow);
                landcover.at(x, y) = code;
            }
    }

    // scenes: bands as saturating functions of height, an elevation-driven
    // brightness offset, cloud brightening, and additive noise
    std::vector<ManifestEntry> manifest;
    const std::array<double, 4> confound_w = {1.0, 0.8, 1.2, -0.9};
    auto make_scenes = [&](int year, const Raster& mean_h) {
        const int total = cfg.scenes_per_year + cfg.out_of_season_scenes;
        for (int s = 0; s < total; ++s) {
            const bool in_season = s < cfg.scenes_per_year;
            DateStamp stamp{};
            if (in_season) {
                stamp = season_date(s, cfg.scenes_per_year);
            } else {
                stamp = (s - cfg.scenes_per_year) % 2 == 0 ? DateStamp{3, 10} : DateStamp{11, 15};
            }

            Raster cloud = raster_10m();
            {
                const double level = rng.uniform(0.15, 0.9);
                const std::vector<float> f = smooth_field(e10, e10, cfg.cloud_scale / 10.0, rng, 2);
                for (size_t i = 0; i < f.size(); ++i)
                    cloud.data()[i] =
                        static_cast<float>(std::clamp(120.0 * level * f[i] * f[i], 0.0, 100.0));
            }

            Raster bands(e10, e10, 4, 10.0, 0.0, north);
            for (int y = 0; y < e10; ++y)
                for (int x = 0; x < e10; ++x) {
                    const double h = mean_h.at(x, y);
                    const double e01 = (dtm10.at(x, y) - 240.0) / cfg.relief_amplitude - 0.5;
                    const auto base = synth_band_response(h);
                    const double brighten = 0.25 * cloud.at(x, y) / 100.0;
                    for (int b = 0; b < 4; ++b) {
                        const double v = base[b] + cfg.elevation_confound * confound_w[b] * e01 +
                                         brighten + rng.normal(0.0, cfg.band_noise_std);
                        bands.at(x, y, b) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
                }

            char date[16];
            std::snprintf(date, sizeof(date), "%04d-%02d-%02d", year, stamp.month, stamp.day);
            char base_name[64];
            std::snprintf(base_name, sizeof(base_name), "scenes/%04d_s%02d", year, s);
            const std::string bands_path = std::string(base_name) + "_bands.rstr";
            const std::string cloud_path = std::string(base_name) + "_cloud.rstr";
            const std::string land_path = std::string(base_name) + "_landcover.rstr";
            write_raster(bands, (fs::path(out_dir) / bands_path).string());
            write_raster(cloud, (fs::path(out_dir) / cloud_path).string());
            write_raster(landcover, (fs::path(out_dir) / land_path).string());
            manifest.push_back({"T1", date, bands_path, cloud_path, land_path});
        }
    };
    make_scenes(result.year1, mean1);
    make_scenes(result.year2, mean2);

    // difference products
    const Raster diff1 = raster_diff(vhm2, vhm1);
    const Raster diff10 = raster_diff(mean2, mean1);

    auto path_of = [&](const std::string& name) { return (fs::path(out_dir) / name).string(); };
    SynthPaths& p = result.paths;
    p.dtm_1m = path_of("dtm_1m.rstr");
    p.dtm_10m = path_of("dtm_10m.rstr");
    p.vhm1_1m = path_of("vhm_y1_1m.rstr");
    p.vhm2_1m = path_of("vhm_y2_1m.rstr");
    p.target_mean_y1 = path_of("target_mean_y1.rstr");
    p.target_max_y1 = path_of("target_max_y1.rstr");
    p.target_mean_y2 = path_of("target_mean_y2.rstr");
    p.target_max_y2 = path_of("target_max_y2.rstr");
    p.forest_mask = path_of("forest_mask.rstr");
    p.mix_rate = path_of("mix_rate.rstr");
    p.tree_cover_density = path_of("tree_cover_density.rstr");
    p.change_ref_mask = path_of("change_ref_mask.rstr");
    p.diff_1m = path_of("diff_1m.rstr");
    p.diff_10m = path_of("diff_10m.rstr");
    p.manifest = path_of("manifest.csv");
    p.clearings = path_of("clearings.csv");

    write_raster(dtm1, p.dtm_1m);
    write_raster(dtm10, p.dtm_10m);
    write_raster(vhm1, p.vhm1_1m);
    write_raster(vhm2, p.vhm2_1m);
    write_raster(mean1, p.target_mean_y1);
    write_raster(max1, p.target_max_y1);
    write_raster(mean2, p.target_mean_y2);
    write_raster(max2, p.target_max_y2);
    write_raster(forest10, p.forest_mask);
    write_raster(mix10, p.mix_rate);
    write_raster(density10, p.tree_cover_density);
    write_raster(change_ref, p.change_ref_mask);
    write_raster(diff1, p.diff_1m);
    write_raster(diff10, p.diff_10m);
    write_manifest(p.manifest, manifest);

    std::ostringstream cl;
    cl << "x0,y0,width,height,drop,area_m2\n";
    for (const auto& c : result.clearings)
        cl << c.x0 << "," << c.y0 << "," << c.width << "," << c.height << "," << fmt_g6(c.drop)
           << "," << fmt_g6(c.area_m2()) << "\n";
    write_text_file(p.clearings, cl.str());

    return result;
}

} // namespace vhm
