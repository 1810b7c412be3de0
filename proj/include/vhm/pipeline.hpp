#pragma once

#include <string>
#include <vector>

#include "vhm/model.hpp"
#include "vhm/raster.hpp"
#include "vhm/training.hpp"

namespace vhm {

// landcover class codes
constexpr int kLandOther = 0;
constexpr int kLandWater = 1;
constexpr int kLandSnow = 2;

constexpr float kCloudLimitPercent = 10.0f; // strictly-greater values are masked
constexpr int kTileSize = 512;
constexpr int kTileOverlap = 16;

struct Date {
    int year = 0, month = 0, day = 0;
    auto operator<=>(const Date&) const = default;
};

Date parse_date(const std::string& iso); // YYYY-MM-DD
std::string format_date(const Date& d);
bool in_leaf_on_season(const Date& d); // May 1 to September 30, inclusive

struct Scene {
    std::string tile_id;
    Date date;
    Raster bands;      // 4 bands: red, green, blue, near-infrared
    Raster cloud_prob; // percent, 0-100
    Raster landcover;  // class codes
};

// Season filter plus cloudiness ranking: scenes of the given year within the
// leaf-on season, ordered by mean cloud probability (ties: earlier date),
// truncated to max_count. Returns indices into the input vector.
std::vector<size_t> select_scenes(const std::vector<Scene>& scenes, int year, int max_count = 10);

// Training refinement: of the pre-selected scenes, keep the ones with the
// most valid patches (ties: earlier date).
std::vector<size_t> select_training_scenes(const std::vector<Scene>& scenes,
                                           const std::vector<size_t>& candidates,
                                           const Raster& target_mean, const Raster& target_max,
                                           const Raster* dtm, int keep = 2);

int count_valid_patches(const Scene& scene, const Raster& target_mean, const Raster& target_max,
                        const Raster* dtm);

// One sample per center pixel with a valid target and center cloud
// probability under the limit; patches crossing the border are skipped.
// Normalization is applied when stats are provided.
std::vector<PatchSample> extract_patches(const Scene& scene, const Raster& target_mean,
                                         const Raster& target_max, const Raster* dtm,
                                         const NormStats* norm);

struct PredictionPair {
    Raster mean;
    Raster max;
};

// Window placement along one axis: window origins plus the pixel range each
// window owns in the recomposed image. Ownership boundaries sit at the
// midpoints of window overlaps; borders belong to the outermost windows.
struct TileAxis {
    std::vector<int> origin;
    std::vector<int> own_lo, own_hi;
    int window = 0;
};

TileAxis tile_axis_layout(int extent, int tile = kTileSize, int overlap = kTileOverlap);

// Tiled inference: 512x512 windows with 16 pixels overlap, each window owning
// its interior up to the overlap midpoint (image borders are owned by the
// outermost window). Negative heights are clamped to zero on export; pixels
// with any invalid input are nodata.
PredictionPair predict_scene(const Model<float>& model, const Scene& scene, const Raster* dtm,
                             const NormStats& norm);

// nodata where cloud probability exceeds the limit or the surface is water
// or snow; surviving values are untouched.
PredictionPair mask_invalid(const PredictionPair& pred, const Scene& scene);

struct AnnualMap {
    Raster mean_height;
    Raster max_height;
    Raster valid_count;
    int year = 0;
};

// Per-pixel median over the valid predictions (mean of the two central order
// statistics for even counts).
AnnualMap annual_composite(const std::vector<PredictionPair>& predictions, int year);

struct ManifestEntry {
    std::string tile_id;
    std::string date;
    std::string bands_path;
    std::string cloud_path;
    std::string landcover_path;
};

// CSV with header tile_id,date,bands_path,cloud_path,landcover_path;
// relative paths resolve against the manifest directory.
std::vector<ManifestEntry> read_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
Scene load_scene(const ManifestEntry& entry, const std::string& base_dir);

} // namespace vhm
