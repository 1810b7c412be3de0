#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "vhm/raster.hpp"
#include "vhm/textio.hpp"

namespace vhm {

// Deterministic synthetic world: a smooth terrain model, a vegetation height
// field with a biannual clearing scenario, and per-scene band stacks whose
// channels are fixed saturating functions of height plus an elevation-driven
// brightness term, cloud fields, land cover, and evaluation-side products.
struct SynthConfig {
    uint64_t seed = 0;
    int extent = 1000;              // 1 m pixels per side, multiple of 10
    double forest_fraction = 0.6;
    double base_scale = 220.0;      // correlation length of the height field, meters
    double max_height = 42.0;       // tallest canopy, meters
    double band_noise_std = 0.02;   // additive per-band noise, reflectance units
    double elevation_confound = 0.12; // reflectance offset across the relief
    double relief_amplitude = 1400.0; // meters above the 240 m base elevation
    double cloud_scale = 260.0;     // cloud field correlation length, meters
    int scenes_per_year = 6;        // leaf-on scenes per year
    int out_of_season_scenes = 2;   // winter/spring scenes that must be filtered out
    int clearing_count = 10;
    double clearing_area_min = 300.0;  // m^2
    double clearing_area_max = 5000.0; // m^2
    double drop_min = 12.0; // meters of height loss inside a clearing
    double drop_max = 30.0;
    bool grid_aligned_clearings = true; // align clearings to the 10 m lattice
    int year1 = 2019;

    void validate() const;
};

KeyValues synth_config_to_kv(const SynthConfig& cfg);
SynthConfig synth_config_from_kv(const KeyValues& kv);

struct Clearing {
    int x0 = 0, y0 = 0;       // 1 m cells
    int width = 0, height = 0;
    double drop = 0.0;
    double area_m2() const { return static_cast<double>(width) * height; }
};

struct SynthPaths {
    std::string dtm_1m, dtm_10m;
    std::string vhm1_1m, vhm2_1m;
    std::string target_mean_y1, target_max_y1, target_mean_y2, target_max_y2;
    std::string forest_mask, mix_rate, tree_cover_density;
    std::string change_ref_mask;
    std::string diff_1m, diff_10m;
    std::string manifest;
    std::string clearings;
};

struct SynthResult {
    SynthPaths paths;
    std::vector<Clearing> clearings;
    int year1 = 0, year2 = 0;
};

SynthResult synth_generate(const SynthConfig& cfg, const std::string& out_dir);

// Noise-free reflectance of the four bands at a given canopy height; each
// band is monotone in height and saturates toward the tallest canopies.
std::array<double, 4> synth_band_response(double height_m);

// Smooth value noise in [0, 1] with the given correlation length in pixels.
std::vector<float> smooth_field(int width, int height, double scale_px, class Rng& rng,
                                int octaves = 2);

} // namespace vhm
