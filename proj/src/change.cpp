#include "vhm/change.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "vhm/textio.hpp"

namespace vhm {

std::vector<ChangeObject> change_objects(const Raster& diff_1m, double threshold,
                                         double min_area_m2, bool eight_connected) {
    if (diff_1m.bands() != 1) throw std::invalid_argument("difference raster must be single-band");
    if (diff_1m.pixel_size() != 1.0)
        throw std::invalid_argument("change objects are defined on the 1 m grid");

    const int w = diff_1m.width(), h = diff_1m.height();
    const double cell_area = diff_1m.pixel_size() * diff_1m.pixel_size();
    auto below = [&](int x, int y) {
        return diff_1m.valid_at(x, y) && diff_1m.at(x, y) < threshold;
    };

    std::vector<uint8_t> visited(static_cast<size_t>(w) * h, 0);
    std::vector<ChangeObject> out;
    std::vector<std::pair<int, int>> stack;

    const int dx8[] = {-1, 0, 1, -1, 1, -1, 0, 1};
    const int dy8[] = {-1, -1, -1, 0, 0, 1, 1, 1};
    const int dx4[] = {0, -1, 1, 0};
    const int dy4[] = {-1, 0, 0, 1};
    const int* dx = eight_connected ? dx8 : dx4;
    const int* dy = eight_connected ? dy8 : dy4;
    const int neighbors = eight_connected ? 8 : 4;

    int next_id = 0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const size_t i = static_cast<size_t>(y) * w + x;
            if (visited[i] || !below(x, y)) continue;

            ChangeObject obj;
            obj.min_x = obj.max_x = x;
            obj.min_y = obj.max_y = y;
            stack.clear();
            stack.emplace_back(x, y);
            visited[i] = 1;
            while (!stack.empty()) {
                const auto [cx, cy] = stack.back();
                stack.pop_back();
                obj.cells.emplace_back(cx, cy);
                obj.min_x = std::min(obj.min_x, cx);
                obj.max_x = std::max(obj.max_x, cx);
                obj.min_y = std::min(obj.min_y, cy);
                obj.max_y = std::max(obj.max_y, cy);
                for (int k = 0; k < neighbors; ++k) {
                    const int nx = cx + dx[k], ny = cy + dy[k];
                    if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                    const size_t ni = static_cast<size_t>(ny) * w + nx;
                    if (visited[ni] || !below(nx, ny)) continue;
                    visited[ni] = 1;
                    stack.emplace_back(nx, ny);
                }
            }
            obj.pixel_count = static_cast<long>(obj.cells.size());
            obj.area_m2 = static_cast<double>(obj.pixel_count) * cell_area;
            if (obj.area_m2 < min_area_m2) continue;
            obj.id = next_id++;
            std::sort(obj.cells.begin(), obj.cells.end(),
                      [](const auto& a, const auto& b) {
                          return a.second != b.second ? a.second < b.second : a.first < b.first;
                      });
            out.push_back(std::move(obj));
        }
    }
    return out;
}

namespace {

int coarse_factor(const GridSpec& fine, const Raster& coarse) {
    if (fine.origin_x != coarse.origin_x() || fine.origin_y != coarse.origin_y())
        throw std::invalid_argument("coarse grid origin does not match the fine grid");
    const double ratio = coarse.pixel_size() / fine.pixel_size;
    const int factor = static_cast<int>(std::lround(ratio));
    if (factor < 1 || std::abs(ratio - factor) > 1e-9)
        throw std::invalid_argument("coarse grid is not an integer aggregation of the fine grid");
    return factor;
}

} // namespace

double object_mean_s2diff(const ChangeObject& object, const GridSpec& grid_1m,
                          const Raster& s2_diff_10m) {
    const int factor = coarse_factor(grid_1m, s2_diff_10m);

    std::map<std::pair<int, int>, long> weights; // coarse cell -> fine cells inside
    for (const auto& [x, y] : object.cells) {
        const int cx = x / factor, cy = y / factor;
        if (cx >= s2_diff_10m.width() || cy >= s2_diff_10m.height())
            throw std::invalid_argument("object outside the coarse raster");
        ++weights[{cx, cy}];
    }

    double sum = 0.0;
    long total = 0;
    for (const auto& [cell, weight] : weights) {
        if (!s2_diff_10m.valid_at(cell.first, cell.second)) continue;
        sum += static_cast<double>(s2_diff_10m.at(cell.first, cell.second)) * weight;
        total += weight;
    }
    if (total == 0) return std::numeric_limits<double>::quiet_NaN();
    return sum / static_cast<double>(total);
}

BoxplotStats boxplot_stats(std::vector<double> values) {
    BoxplotStats bs;
    bs.n = static_cast<long>(values.size());
    if (values.empty()) return bs;
    std::sort(values.begin(), values.end());

    auto median_of = [](const double* v, size_t n) {
        return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    const size_t n = values.size();
    bs.median = median_of(values.data(), n);
    // Tukey hinges: halves share the median element when n is odd
    const size_t half = (n + 1) / 2;
    bs.q1 = median_of(values.data(), half);
    bs.q3 = median_of(values.data() + (n - half), half);

    const double iqr = bs.q3 - bs.q1;
    const double lo_fence = bs.q1 - 1.5 * iqr;
    const double hi_fence = bs.q3 + 1.5 * iqr;
    bs.whisker_low = bs.median;
    bs.whisker_high = bs.median;
    for (double v : values) {
        if (v >= lo_fence) {
            bs.whisker_low = v; // first value inside the fence
            break;
        }
    }
    for (size_t i = n; i-- > 0;) {
        if (values[i] <= hi_fence) {
            bs.whisker_high = values[i];
            break;
        }
    }
    for (double v : values)
        if (v < lo_fence || v > hi_fence) ++bs.outlier_count;
    return bs;
}

std::vector<AreaBucket> default_area_buckets() {
    return {{25.0, 250.0},
            {250.0, 1000.0},
            {1000.0, 5000.0},
            {5000.0, std::numeric_limits<double>::infinity()}};
}

BucketStatsResult bucket_stats(const std::vector<ChangeObject>& objects, const GridSpec& grid_1m,
                               const Raster& s2_diff_10m, const Raster& forest_mask_10m,
                               const std::vector<AreaBucket>& buckets) {
    if (!(s2_diff_10m.grid() == forest_mask_10m.grid()))
        throw std::invalid_argument("difference and forest rasters must align");
    const int factor = coarse_factor(grid_1m, s2_diff_10m);

    BucketStatsResult result;
    for (const auto& bucket : buckets) {
        std::vector<double> means;
        for (const auto& obj : objects) {
            if (obj.area_m2 < bucket.lo || obj.area_m2 >= bucket.hi) continue;
            if (!std::isnan(obj.mean_s2_diff)) means.push_back(obj.mean_s2_diff);
        }
        result.buckets.push_back({bucket, boxplot_stats(std::move(means))});
    }

    std::vector<uint8_t> covered(s2_diff_10m.cell_count(), 0);
    for (const auto& obj : objects)
        for (const auto& [x, y] : obj.cells) {
            const int cx = x / factor, cy = y / factor;
            if (cx < s2_diff_10m.width() && cy < s2_diff_10m.height())
                covered[static_cast<size_t>(cy) * s2_diff_10m.width() + cx] = 1;
        }

    std::vector<double> unchanged;
    for (int y = 0; y < s2_diff_10m.height(); ++y)
        for (int x = 0; x < s2_diff_10m.width(); ++x) {
            if (covered[static_cast<size_t>(y) * s2_diff_10m.width() + x]) continue;
            if (!forest_mask_10m.valid_at(x, y) || forest_mask_10m.at(x, y) == 0.0f) continue;
            if (!s2_diff_10m.valid_at(x, y)) continue;
            unchanged.push_back(s2_diff_10m.at(x, y));
        }
    result.unchanged_forest = boxplot_stats(std::move(unchanged));
    return result;
}

F1Result change_mask_f1(const Raster& s2_diff_10m, double threshold, const Raster& reference_mask,
                        const Raster* forest_mask) {
    if (!(s2_diff_10m.grid() == reference_mask.grid()))
        throw std::invalid_argument("difference and reference rasters must align");
    if (forest_mask != nullptr && !(s2_diff_10m.grid() == forest_mask->grid()))
        throw std::invalid_argument("difference and forest rasters must align");

    F1Result r;
    long ref_total = 0;
    for (int y = 0; y < s2_diff_10m.height(); ++y) {
        for (int x = 0; x < s2_diff_10m.width(); ++x) {
            if (!reference_mask.valid_at(x, y)) continue;
            if (forest_mask != nullptr &&
                (!forest_mask->valid_at(x, y) || forest_mask->at(x, y) == 0.0f))
                continue;
            const bool truth = reference_mask.at(x, y) != 0.0f;
            const bool predicted = s2_diff_10m.valid_at(x, y) && s2_diff_10m.at(x, y) < threshold;
            ref_total += truth ? 1 : 0;
            if (predicted && truth) ++r.tp;
            else if (predicted) ++r.fp;
            else if (truth) ++r.fn;
        }
    }
    if (ref_total == 0) throw std::invalid_argument("empty reference mask: recall undefined");

    r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
    if (r.tp + r.fp == 0) {
        r.precision_defined = false;
        r.precision = 0.0;
        r.f1 = 0.0;
    } else {
        r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
        r.f1 = r.precision + r.recall > 0.0
                   ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                   : 0.0;
    }
    return r;
}

void write_objects_csv(const std::string& path, const std::vector<ChangeObject>& objects) {
    std::ostringstream ss;
    ss << "id,area_m2,pixel_count,mean_s2_diff,bbox_min_x,bbox_min_y,bbox_max_x,bbox_max_y\n";
    for (const auto& o : objects)
        ss << o.id << "," << fmt_g6(o.area_m2) << "," << o.pixel_count << ","
           << fmt_g6(o.mean_s2_diff) << "," << o.min_x << "," << o.min_y << "," << o.max_x << ","
           << o.max_y << "\n";
    write_text_file(path, ss.str());
}

void write_boxstats_csv(const std::string& path, const BucketStatsResult& result) {
    std::ostringstream ss;
    ss << "bucket,area_lo,area_hi,n,median,q1,q3,whisker_low,whisker_high,outliers\n";
    auto row = [&](const std::string& name, double lo, double hi, const BoxplotStats& b) {
        ss << name << "," << fmt_g6(lo) << "," << fmt_g6(hi) << "," << b.n << ",";
        if (b.n > 0)
            ss << fmt_g6(b.median) << "," << fmt_g6(b.q1) << "," << fmt_g6(b.q3) << ","
               << fmt_g6(b.whisker_low) << "," << fmt_g6(b.whisker_high) << "," << b.outlier_count;
        else
            ss << ",,,,," << 0;
        ss << "\n";
    };
    for (const auto& b : result.buckets) {
        std::ostringstream name;
        name << fmt_g6(b.bucket.lo) << "-" << (std::isinf(b.bucket.hi) ? "inf" : fmt_g6(b.bucket.hi));
        row(name.str(), b.bucket.lo, b.bucket.hi, b.stats);
    }
    row("unchanged_forest", 0.0, 0.0, result.unchanged_forest);
    write_text_file(path, ss.str());
}

void write_f1_csv(const std::string& path, const F1Result& r) {
    std::ostringstream ss;
    ss << "precision,recall,f1,tp,fp,fn,precision_defined\n";
    ss << fmt_g6(r.precision) << "," << fmt_g6(r.recall) << "," << fmt_g6(r.f1) << "," << r.tp
       << "," << r.fp << "," << r.fn << "," << (r.precision_defined ? 1 : 0) << "\n";
    write_text_file(path, ss.str());
}

} // namespace vhm
