#include "vhm/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "vhm/errors.hpp"

namespace vhm {

Date parse_date(const std::string& iso) {
    Date d;
    if (std::sscanf(iso.c_str(), "%d-%d-%d", &d.year, &d.month, &d.day) != 3 || d.month < 1 ||
        d.month > 12 || d.day < 1 || d.day > 31)
        throw std::invalid_argument("bad date: " + iso);
    return d;
}

std::string format_date(const Date& d) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", d.year, d.month, d.day);
    return buf;
}

bool in_leaf_on_season(const Date& d) { return d.month >= 5 && d.month <= 9; }

namespace {

void require_aligned(const Raster& a, const Raster& b, const char* what) {
    if (!(a.grid() == b.grid())) throw std::invalid_argument(std::string("misaligned rasters: ") + what);
}

double mean_cloud(const Raster& cloud) {
    double sum = 0.0;
    size_t n = 0;
    const float* p = cloud.band_data(0);
    for (size_t i = 0; i < cloud.cell_count(); ++i) {
        if (p[i] == cloud.nodata()) continue;
        sum += p[i];
        ++n;
    }
    return n == 0 ? std::numeric_limits<double>::infinity() : sum / static_cast<double>(n);
}

// center eligibility + full-window input validity
bool patch_valid_at(const Scene& scene, const Raster& target_mean, const Raster& target_max,
                    const Raster* dtm, int cx, int cy) {
    if (!target_mean.valid_at(cx, cy) || !target_max.valid_at(cx, cy)) return false;
    if (!scene.cloud_prob.valid_at(cx, cy)) return false;
    if (!(scene.cloud_prob.at(cx, cy) < kCloudLimitPercent)) return false;
    for (int y = cy - kPatchCenter; y <= cy + kPatchCenter; ++y) {
        for (int x = cx - kPatchCenter; x <= cx + kPatchCenter; ++x) {
            for (int b = 0; b < scene.bands.bands(); ++b)
                if (!scene.bands.valid_at(x, y, b)) return false;
            if (dtm != nullptr && !dtm->valid_at(x, y)) return false;
        }
    }
    return true;
}

} // namespace

std::vector<size_t> select_scenes(const std::vector<Scene>& scenes, int year, int max_count) {
    struct Entry {
        size_t index;
        double cloud;
        Date date;
    };
    std::vector<Entry> season;
    for (size_t i = 0; i < scenes.size(); ++i) {
        const Scene& s = scenes[i];
        if (s.date.year != year || !in_leaf_on_season(s.date)) continue;
        season.push_back({i, mean_cloud(s.cloud_prob), s.date});
    }
    if (season.empty()) {
        std::cerr << "warning: no scenes in the leaf-on season of " << year << "\n";
        return {};
    }
    std::sort(season.begin(), season.end(), [](const Entry& a, const Entry& b) {
        if (a.cloud != b.cloud) return a.cloud < b.cloud;
        if (a.date != b.date) return a.date < b.date;
        return a.index < b.index;
    });
    if (static_cast<int>(season.size()) > max_count) season.resize(max_count);
    std::vector<size_t> out;
    for (const auto& e : season) out.push_back(e.index);
    return out;
}

int count_valid_patches(const Scene& scene, const Raster& target_mean, const Raster& target_max,
                        const Raster* dtm) {
    int count = 0;
    const int w = scene.bands.width(), h = scene.bands.height();
    for (int cy = kPatchCenter; cy < h - kPatchCenter; ++cy)
        for (int cx = kPatchCenter; cx < w - kPatchCenter; ++cx)
            if (patch_valid_at(scene, target_mean, target_max, dtm, cx, cy)) ++count;
    return count;
}

std::vector<size_t> select_training_scenes(const std::vector<Scene>& scenes,
                                           const std::vector<size_t>& candidates,
                                           const Raster& target_mean, const Raster& target_max,
                                           const Raster* dtm, int keep) {
    struct Entry {
        size_t index;
        int valid;
        Date date;
    };
    std::vector<Entry> ranked;
    for (size_t idx : candidates)
        ranked.push_back(
            {idx, count_valid_patches(scenes[idx], target_mean, target_max, dtm), scenes[idx].date});
    std::sort(ranked.begin(), ranked.end(), [](const Entry& a, const Entry& b) {
        if (a.valid != b.valid) return a.valid > b.valid;
        if (a.date != b.date) return a.date < b.date; // tie: earlier acquisition
        return a.index < b.index;
    });
    if (static_cast<int>(ranked.size()) > keep) ranked.resize(keep);
    std::vector<size_t> out;
    for (const auto& e : ranked) out.push_back(e.index);
    return out;
}

std::vector<PatchSample> extract_patches(const Scene& scene, const Raster& target_mean,
                                         const Raster& target_max, const Raster* dtm,
                                         const NormStats* norm) {
    require_aligned(scene.bands, scene.cloud_prob, "bands/cloud");
    require_aligned(scene.bands, target_mean, "bands/target");
    require_aligned(scene.bands, target_max, "bands/target");
    if (dtm != nullptr) require_aligned(scene.bands, *dtm, "bands/dtm");

    const int in_ch = scene.bands.bands() + (dtm != nullptr ? 1 : 0);
    const int w = scene.bands.width(), h = scene.bands.height();

    std::vector<PatchSample> out;
    for (int cy = kPatchCenter; cy < h - kPatchCenter; ++cy) {
        for (int cx = kPatchCenter; cx < w - kPatchCenter; ++cx) {
            if (!patch_valid_at(scene, target_mean, target_max, dtm, cx, cy)) continue;
            PatchSample p;
            p.x = Tensor<float>(1, in_ch, kPatchSize, kPatchSize);
            for (int y = 0; y < kPatchSize; ++y) {
                for (int x = 0; x < kPatchSize; ++x) {
                    const int sx = cx - kPatchCenter + x;
                    const int sy = cy - kPatchCenter + y;
                    for (int b = 0; b < scene.bands.bands(); ++b)
                        p.x.at(0, b, y, x) = scene.bands.at(sx, sy, b);
                    if (dtm != nullptr)
                        p.x.at(0, scene.bands.bands(), y, x) = dtm->at(sx, sy);
                }
            }
            p.y_mean = target_mean.at(cx, cy);
            p.y_max = target_max.at(cx, cy);
            p.location_id = static_cast<long>(cy) * w + cx;
            p.year = scene.date.year;
            if (norm != nullptr) apply_norm(p.x, *norm);
            out.push_back(std::move(p));
        }
    }
    return out;
}

TileAxis tile_axis_layout(int extent, int tile, int overlap) {
    if (extent < 1 || tile < 1 || overlap < 0 || overlap >= tile)
        throw std::invalid_argument("bad tile layout request");
    TileAxis t;
    if (extent <= tile) {
        t.origin = {0};
        t.own_lo = {0};
        t.own_hi = {extent};
        t.window = extent;
        return t;
    }
    t.window = tile;
    const int step = tile - overlap;
    for (int p = 0;; p += step) {
        if (p + tile >= extent) {
            t.origin.push_back(extent - tile);
            break;
        }
        t.origin.push_back(p);
    }
    t.own_lo.resize(t.origin.size());
    t.own_hi.resize(t.origin.size());
    for (size_t i = 0; i < t.origin.size(); ++i) {
        t.own_lo[i] = i == 0 ? 0 : (t.origin[i] + t.origin[i - 1] + tile) / 2;
        t.own_hi[i] = i + 1 == t.origin.size() ? extent
                                               : (t.origin[i + 1] + t.origin[i] + tile) / 2;
    }
    return t;
}

PredictionPair predict_scene(const Model<float>& model, const Scene& scene, const Raster* dtm,
                             const NormStats& norm) {
    require_aligned(scene.bands, scene.cloud_prob, "bands/cloud");
    if (dtm != nullptr) require_aligned(scene.bands, *dtm, "bands/dtm");
    const int in_ch = scene.bands.bands() + (dtm != nullptr ? 1 : 0);
    if (model.config().in_channels != in_ch)
        throw std::invalid_argument("model expects " + std::to_string(model.config().in_channels) +
                                    " input channels, scene provides " + std::to_string(in_ch));

    const int w = scene.bands.width(), h = scene.bands.height();
    PredictionPair out{Raster(scene.bands.grid(), 1), Raster(scene.bands.grid(), 1)};

    const TileAxis tx = tile_axis_layout(w);
    const TileAxis ty = tile_axis_layout(h);
    for (size_t j = 0; j < ty.origin.size(); ++j) {
        for (size_t i = 0; i < tx.origin.size(); ++i) {
            const int x0 = tx.origin[i], y0 = ty.origin[j];
            const int tw = tx.window, th = ty.window;

            Tensor<float> input(1, in_ch, th, tw);
            std::vector<uint8_t> invalid(static_cast<size_t>(th) * tw, 0);
            for (int y = 0; y < th; ++y) {
                for (int x = 0; x < tw; ++x) {
                    bool bad = false;
                    for (int b = 0; b < scene.bands.bands(); ++b) {
                        const float v = scene.bands.at(x0 + x, y0 + y, b);
                        if (v == scene.bands.nodata()) {
                            bad = true;
                            input.at(0, b, y, x) = 0.0f;
                        } else {
                            input.at(0, b, y, x) = v;
                        }
                    }
                    if (dtm != nullptr) {
                        const float v = dtm->at(x0 + x, y0 + y);
                        if (v == dtm->nodata()) {
                            bad = true;
                            input.at(0, in_ch - 1, y, x) = 0.0f;
                        } else {
                            input.at(0, in_ch - 1, y, x) = v;
                        }
                    }
                    if (bad) invalid[static_cast<size_t>(y) * tw + x] = 1;
                }
            }
            apply_norm(input, norm);
            for (int c = 0; c < in_ch; ++c) // invalid inputs contribute zeros
                for (int y = 0; y < th; ++y)
                    for (int x = 0; x < tw; ++x)
                        if (invalid[static_cast<size_t>(y) * tw + x]) input.at(0, c, y, x) = 0.0f;

            const Tensor<float> pred = model.forward(input);

            for (int y = ty.own_lo[j]; y < ty.own_hi[j]; ++y) {
                for (int x = tx.own_lo[i]; x < tx.own_hi[i]; ++x) {
                    const int lx = x - x0, ly = y - y0;
                    if (invalid[static_cast<size_t>(ly) * tw + lx]) continue; // stays nodata
                    out.mean.at(x, y) = std::max(0.0f, pred.at(0, 0, ly, lx));
                    out.max.at(x, y) = std::max(0.0f, pred.at(0, 1, ly, lx));
                }
            }
        }
    }
    return out;
}

PredictionPair mask_invalid(const PredictionPair& pred, const Scene& scene) {
    require_aligned(pred.mean, scene.cloud_prob, "prediction/cloud");
    require_aligned(pred.mean, scene.landcover, "prediction/landcover");

    PredictionPair out = pred;
    for (int y = 0; y < pred.mean.height(); ++y) {
        for (int x = 0; x < pred.mean.width(); ++x) {
            bool drop = false;
            if (!scene.cloud_prob.valid_at(x, y) || scene.cloud_prob.at(x, y) > kCloudLimitPercent)
                drop = true;
            if (scene.landcover.valid_at(x, y)) {
                const int code = static_cast<int>(scene.landcover.at(x, y));
                if (code == kLandWater || code == kLandSnow) drop = true;
            }
            if (drop) {
                out.mean.at(x, y) = out.mean.nodata();
                out.max.at(x, y) = out.max.nodata();
            }
        }
    }
    return out;
}

AnnualMap annual_composite(const std::vector<PredictionPair>& predictions, int year) {
    if (predictions.empty()) throw std::invalid_argument("no predictions to composite");
    for (const auto& p : predictions) {
        require_aligned(p.mean, predictions[0].mean, "composite inputs");
        require_aligned(p.max, predictions[0].mean, "composite inputs");
    }

    const GridSpec grid = predictions[0].mean.grid();
    AnnualMap map{Raster(grid, 1), Raster(grid, 1), Raster(grid, 1), year};

    std::vector<float> vals;
    vals.reserve(predictions.size());
    auto median_of = [&vals]() {
        std::sort(vals.begin(), vals.end());
        const size_t n = vals.size();
        return n % 2 == 1 ? vals[n / 2] : 0.5f * (vals[n / 2 - 1] + vals[n / 2]);
    };

    for (int y = 0; y < grid.height; ++y) {
        for (int x = 0; x < grid.width; ++x) {
            vals.clear();
            for (const auto& p : predictions)
                if (p.mean.valid_at(x, y)) vals.push_back(p.mean.at(x, y));
            map.valid_count.at(x, y) = static_cast<float>(vals.size());
            if (!vals.empty()) map.mean_height.at(x, y) = median_of();

            vals.clear();
            for (const auto& p : predictions)
                if (p.max.valid_at(x, y)) vals.push_back(p.max.at(x, y));
            if (!vals.empty()) map.max_height.at(x, y) = median_of();
        }
    }
    return map;
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<ManifestEntry> out;
    std::string line;
    bool header = true;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto cols = split_csv_line(line);
        if (header) {
            if (cols.size() != 5 || cols[0] != "tile_id")
                throw IoError("bad manifest header: " + path);
            header = false;
            continue;
        }
        if (cols.size() != 5) throw IoError("bad manifest row: " + line);
        out.push_back({cols[0], cols[1], cols[2], cols[3], cols[4]});
    }
    return out;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
    std::ostringstream ss;
    ss << "tile_id,date,bands_path,cloud_path,landcover_path\n";
    for (const auto& e : entries)
        ss << e.tile_id << "," << e.date << "," << e.bands_path << "," << e.cloud_path << ","
           << e.landcover_path << "\n";
    write_text_file(path, ss.str());
}

Scene load_scene(const ManifestEntry& entry, const std::string& base_dir) {
    auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() ? p : (std::filesystem::path(base_dir) / path).string();
    };
    Scene s;
    s.tile_id = entry.tile_id;
    s.date = parse_date(entry.date);
    s.bands = read_raster(resolve(entry.bands_path));
    s.cloud_prob = read_raster(resolve(entry.cloud_path));
    s.landcover = read_raster(resolve(entry.landcover_path));
    if (s.bands.bands() != 4) throw IoError("expected 4 spectral bands: " + entry.bands_path);
    return s;
}

} // namespace vhm
