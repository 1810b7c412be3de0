#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vhm/raster.hpp"

namespace vhm {

// Connected region of 1-meter cells whose biannual height difference falls
// below the change threshold.
struct ChangeObject {
    int id = 0;
    long pixel_count = 0;
    double area_m2 = 0.0;
    double mean_s2_diff = 0.0; // filled by object_mean_s2diff
    int min_x = 0, min_y = 0, max_x = 0, max_y = 0;
    std::vector<std::pair<int, int>> cells;
};

// Components of cells with diff < threshold (8-connectivity by default),
// dropping components below the minimum area. Ids follow the row-major order
// of each component's first cell.
std::vector<ChangeObject> change_objects(const Raster& diff_1m, double threshold = -10.0,
                                         double min_area_m2 = 25.0, bool eight_connected = true);

// Mean of the coarse-difference values over the cells intersecting the
// object, weighted by the intersected fine-cell count; nodata coarse cells
// drop out of the weighting. The coarse grid must be an exact integer
// aggregation of the fine grid.
double object_mean_s2diff(const ChangeObject& object, const GridSpec& grid_1m,
                          const Raster& s2_diff_10m);

struct BoxplotStats {
    long n = 0;
    double median = 0.0, q1 = 0.0, q3 = 0.0;
    double whisker_low = 0.0, whisker_high = 0.0; // most extreme data within 1.5 IQR
    long outlier_count = 0;
};

BoxplotStats boxplot_stats(std::vector<double> values);

struct AreaBucket {
    double lo = 0.0;
    double hi = 0.0; // exclusive; infinity for the last bucket
};

std::vector<AreaBucket> default_area_buckets(); // 25-250, 250-1000, 1000-5000, 5000+

struct BucketRow {
    AreaBucket bucket;
    BoxplotStats stats;
};

struct BucketStatsResult {
    std::vector<BucketRow> buckets;
    BoxplotStats unchanged_forest; // coarse forest pixels not touched by any object
};

BucketStatsResult bucket_stats(const std::vector<ChangeObject>& objects, const GridSpec& grid_1m,
                               const Raster& s2_diff_10m, const Raster& forest_mask_10m,
                               const std::vector<AreaBucket>& buckets = default_area_buckets());

struct F1Result {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    long tp = 0, fp = 0, fn = 0;
    bool precision_defined = true; // false when nothing was predicted
};

// Pixel scores of the thresholded difference mask against a {0,1} reference,
// optionally restricted to forest. Throws when the reference is empty.
F1Result change_mask_f1(const Raster& s2_diff_10m, double threshold, const Raster& reference_mask,
                        const Raster* forest_mask = nullptr);

void write_objects_csv(const std::string& path, const std::vector<ChangeObject>& objects);
void write_boxstats_csv(const std::string& path, const BucketStatsResult& result);
void write_f1_csv(const std::string& path, const F1Result& r);

} // namespace vhm
