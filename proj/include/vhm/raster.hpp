#pragma once

#include <cassert>
#include <cstdint>
#include <string>
#include <vector>

namespace vhm {

constexpr float kDefaultNodata = -9999.0f;

struct GridSpec {
    int width = 0;
    int height = 0;
    double pixel_size = 1.0;     // meters per pixel, square cells
    double origin_x = 0.0;       // top-left corner
    double origin_y = 0.0;       // y decreases southward
    bool operator==(const GridSpec&) const = default;
};

// Georeferenced multi-band grid, band-sequential row-major float32 payload.
// Values are finite or equal to the nodata sentinel.
class Raster {
public:
    Raster() = default;
    Raster(int width, int height, int bands, double pixel_size,
           double origin_x = 0.0, double origin_y = 0.0, float nodata = kDefaultNodata);
    Raster(const GridSpec& grid, int bands, float nodata = kDefaultNodata);

    int width() const { return grid_.width; }
    int height() const { return grid_.height; }
    int bands() const { return bands_; }
    double pixel_size() const { return grid_.pixel_size; }
    double origin_x() const { return grid_.origin_x; }
    double origin_y() const { return grid_.origin_y; }
    float nodata() const { return nodata_; }
    const GridSpec& grid() const { return grid_; }
    bool aligned_with(const Raster& other) const { return grid_ == other.grid_; }

    size_t cell_count() const { return static_cast<size_t>(grid_.width) * grid_.height; }

    float at(int x, int y, int band = 0) const { return data_[index(x, y, band)]; }
    float& at(int x, int y, int band = 0) { return data_[index(x, y, band)]; }
    bool valid_at(int x, int y, int band = 0) const { return data_[index(x, y, band)] != nodata_; }
    void fill(float value);

    const float* band_data(int band) const { return data_.data() + static_cast<size_t>(band) * cell_count(); }
    float* band_data(int band) { return data_.data() + static_cast<size_t>(band) * cell_count(); }
    const std::vector<float>& data() const { return data_; }
    std::vector<float>& data() { return data_; }

    // map coordinates of the cell center
    double center_x(int x) const { return grid_.origin_x + (x + 0.5) * grid_.pixel_size; }
    double center_y(int y) const { return grid_.origin_y - (y + 0.5) * grid_.pixel_size; }

    bool in_bounds(int x, int y) const {
        return x >= 0 && y >= 0 && x < grid_.width && y < grid_.height;
    }

private:
    size_t index(int x, int y, int band) const {
        assert(in_bounds(x, y) && band >= 0 && band < bands_);
        return (static_cast<size_t>(band) * grid_.height + y) * grid_.width + x;
    }

    GridSpec grid_;
    int bands_ = 0;
    float nodata_ = kDefaultNodata;
    std::vector<float> data_;
};

enum class PoolMode { mean, max };

// Block-pooled downsampling; window statistics use valid cells only, output
// is nodata only when the whole window is invalid. Trailing rows/columns that
// do not fill a window are dropped (with a warning on stderr).
Raster pool_resample(const Raster& src, int factor, PoolMode mode);

// Bilinear sampling at target cell centers. Neighbors that carry zero weight
// (query exactly on a source row/column) are not required to exist or be
// valid; any used neighbor that is nodata or outside the source makes the
// output cell nodata.
Raster bilinear_resample(const Raster& src, const GridSpec& target);

struct TerrainDerivatives {
    Raster slope;   // degrees
    Raster aspect;  // degrees, 0 = north, clockwise; nodata where flat
};

// Horn eight-neighbor gradients. Border cells and cells with any missing
// neighbor are nodata in both outputs.
TerrainDerivatives slope_aspect(const Raster& dtm);

// Per-cell a - b on aligned single-band grids; nodata propagates.
Raster raster_diff(const Raster& a, const Raster& b);

Raster read_raster(const std::string& path);
void write_raster(const Raster& raster, const std::string& path);

} // namespace vhm
