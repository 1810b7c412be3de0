#include "vhm/raster.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>

#include "vhm/errors.hpp"

namespace vhm {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kRadToDeg = 180.0 / kPi;

void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace

Raster::Raster(int width, int height, int bands, double pixel_size,
               double origin_x, double origin_y, float nodata)
    : grid_{width, height, pixel_size, origin_x, origin_y}, bands_(bands), nodata_(nodata) {
    require(width >= 1 && height >= 1, "raster dimensions must be positive");
    require(bands >= 1, "raster needs at least one band");
    require(pixel_size > 0.0, "pixel size must be positive");
    data_.assign(static_cast<size_t>(width) * height * bands, nodata);
}

Raster::Raster(const GridSpec& grid, int bands, float nodata)
    : Raster(grid.width, grid.height, bands, grid.pixel_size, grid.origin_x, grid.origin_y, nodata) {}

void Raster::fill(float value) { std::fill(data_.begin(), data_.end(), value); }

Raster pool_resample(const Raster& src, int factor, PoolMode mode) {
    require(factor >= 1, "pool factor must be positive");
    require(src.bands() == 1, "pool_resample expects a single-band raster");

    const int out_w = src.width() / factor;
    const int out_h = src.height() / factor;
    require(out_w >= 1 && out_h >= 1, "pool factor larger than raster");
    if (out_w * factor != src.width() || out_h * factor != src.height()) {
        std::cerr << "warning: pool_resample drops " << (src.width() - out_w * factor)
                  << "x" << (src.height() - out_h * factor) << " trailing cells\n";
    }

    Raster out(out_w, out_h, 1, src.pixel_size() * factor, src.origin_x(), src.origin_y(), src.nodata());
    for (int oy = 0; oy < out_h; ++oy) {
        for (int ox = 0; ox < out_w; ++ox) {
            double sum = 0.0;
            float best = -std::numeric_limits<float>::infinity();
            int valid = 0;
            for (int dy = 0; dy < factor; ++dy) {
                const int sy = oy * factor + dy;
                for (int dx = 0; dx < factor; ++dx) {
                    const int sx = ox * factor + dx;
                    if (!src.valid_at(sx, sy)) continue;
                    const float v = src.at(sx, sy);
                    sum += v;
                    best = std::max(best, v);
                    ++valid;
                }
            }
            if (valid == 0) continue; // stays nodata
            out.at(ox, oy) = (mode == PoolMode::mean)
                                 ? static_cast<float>(sum / valid)
                                 : best;
        }
    }
    return out;
}

Raster bilinear_resample(const Raster& src, const GridSpec& target) {
    require(src.bands() == 1, "bilinear_resample expects a single-band raster");
    require(target.width >= 1 && target.height >= 1 && target.pixel_size > 0.0,
            "degenerate target grid");

    Raster out(target, 1, src.nodata());
    const double ps = src.pixel_size();
    for (int ty = 0; ty < target.height; ++ty) {
        const double cy = target.origin_y - (ty + 0.5) * target.pixel_size;
        const double fy = (src.origin_y() - cy) / ps - 0.5;
        for (int tx = 0; tx < target.width; ++tx) {
            const double cx = target.origin_x + (tx + 0.5) * target.pixel_size;
            const double fx = (cx - src.origin_x()) / ps - 0.5;

            const int x0 = static_cast<int>(std::floor(fx));
            const int y0 = static_cast<int>(std::floor(fy));
            const double wx = fx - x0;
            const double wy = fy - y0;

            double value = 0.0;
            bool ok = true;
            for (int dy = 0; dy < 2 && ok; ++dy) {
                const double wyv = dy == 0 ? 1.0 - wy : wy;
                if (wyv == 0.0) continue;
                for (int dx = 0; dx < 2; ++dx) {
                    const double wgt = wyv * (dx == 0 ? 1.0 - wx : wx);
                    if (wgt == 0.0) continue;
                    const int sx = x0 + dx;
                    const int sy = y0 + dy;
                    if (!src.in_bounds(sx, sy) || !src.valid_at(sx, sy)) {
                        ok = false;
                        break;
                    }
                    value += wgt * src.at(sx, sy);
                }
            }
            if (ok) out.at(tx, ty) = static_cast<float>(value);
        }
    }
    return out;
}

TerrainDerivatives slope_aspect(const Raster& dtm) {
    require(dtm.bands() == 1, "slope_aspect expects a single-band raster");
    require(dtm.width() >= 3 && dtm.height() >= 3, "raster smaller than 3x3");

    TerrainDerivatives td{
        Raster(dtm.grid(), 1, dtm.nodata()),
        Raster(dtm.grid(), 1, dtm.nodata()),
    };
    const double ps = dtm.pixel_size();

    for (int y = 1; y + 1 < dtm.height(); ++y) {
        for (int x = 1; x + 1 < dtm.width(); ++x) {
            double z[3][3];
            bool ok = true;
            for (int dy = -1; dy <= 1 && ok; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (!dtm.valid_at(x + dx, y + dy)) {
                        ok = false;
                        break;
                    }
                    z[dy + 1][dx + 1] = dtm.at(x + dx, y + dy);
                }
            if (!ok) continue;

            // Horn weights; rows run north (y-1) to south (y+1)
            const double dzdx = ((z[0][2] + 2.0 * z[1][2] + z[2][2]) -
                                 (z[0][0] + 2.0 * z[1][0] + z[2][0])) / (8.0 * ps);
            const double dzdy_north = ((z[0][0] + 2.0 * z[0][1] + z[0][2]) -
                                       (z[2][0] + 2.0 * z[2][1] + z[2][2])) / (8.0 * ps);

            const double grad = std::sqrt(dzdx * dzdx + dzdy_north * dzdy_north);
            td.slope.at(x, y) = static_cast<float>(std::atan(grad) * kRadToDeg);
            if (grad > 0.0) {
                // azimuth of steepest descent, clockwise from north
                double az = std::atan2(-dzdx, -dzdy_north) * kRadToDeg;
                if (az < 0.0) az += 360.0;
                if (az >= 360.0) az -= 360.0;
                td.aspect.at(x, y) = static_cast<float>(az);
            }
        }
    }
    return td;
}

Raster raster_diff(const Raster& a, const Raster& b) {
    require(a.bands() == 1 && b.bands() == 1, "raster_diff expects single-band rasters");
    require(a.grid() == b.grid(), "raster_diff requires aligned grids");

    Raster out(a.grid(), 1, a.nodata());
    const size_t n = a.cell_count();
    const float* pa = a.band_data(0);
    const float* pb = b.band_data(0);
    float* po = out.band_data(0);
    for (size_t i = 0; i < n; ++i) {
        if (pa[i] != a.nodata() && pb[i] != b.nodata()) po[i] = pa[i] - pb[i];
    }
    return out;
}

namespace {

// RSTR container: fixed 52-byte little-endian header + float32 payload.
constexpr char kMagic[4] = {'R', 'S', 'T', 'R'};
constexpr uint16_t kVersion = 1;
constexpr uint8_t kDtypeF32 = 0;

void put_u16(std::string& s, uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_f32(std::string& s, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(s, bits);
}
void put_f64(std::string& s, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const char* p, size_t n) : p_(p), n_(n) {}
    void bytes(void* dst, size_t k) {
        if (pos_ + k > n_) throw IoError("truncated raster file");
        std::memcpy(dst, p_ + pos_, k);
        pos_ += k;
    }
    uint16_t u16() {
        uint8_t b[2];
        bytes(b, 2);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
    uint32_t u32() {
        uint8_t b[4];
        bytes(b, 4);
        return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
    }
    float f32() {
        uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        uint64_t bits = 0;
        uint8_t b[8];
        bytes(b, 8);
        for (int i = 7; i >= 0; --i) bits = (bits << 8) | b[i];
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    size_t remaining() const { return n_ - pos_; }

private:
    const char* p_;
    size_t n_;
    size_t pos_ = 0;
};

} // namespace

void write_raster(const Raster& r, const std::string& path) {
    std::string buf;
    buf.reserve(52 + r.data().size() * 4);
    buf.append(kMagic, 4);
    put_u16(buf, kVersion);
    buf.push_back(static_cast<char>(kDtypeF32));
    buf.push_back(0); // reserved
    put_u32(buf, static_cast<uint32_t>(r.width()));
    put_u32(buf, static_cast<uint32_t>(r.height()));
    put_u16(buf, static_cast<uint16_t>(r.bands()));
    put_u16(buf, 0); // pad
    put_f64(buf, r.pixel_size());
    put_f64(buf, r.origin_x());
    put_f64(buf, r.origin_y());
    put_f32(buf, r.nodata());
    put_f32(buf, 0.0f); // pad
    for (float v : r.data()) put_f32(buf, v);

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

Raster read_raster(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    ByteReader rd(buf.data(), buf.size());
    char magic[4];
    rd.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad magic in " + path);
    const uint16_t version = rd.u16();
    if (version != kVersion) throw IoError("unsupported version in " + path);
    uint8_t dtype, reserved;
    rd.bytes(&dtype, 1);
    rd.bytes(&reserved, 1);
    if (dtype != kDtypeF32) throw IoError("unsupported dtype in " + path);
    const uint32_t width = rd.u32();
    const uint32_t height = rd.u32();
    const uint16_t bands = rd.u16();
    rd.u16(); // pad
    const double pixel_size = rd.f64();
    const double origin_x = rd.f64();
    const double origin_y = rd.f64();
    const float nodata = rd.f32();
    rd.f32(); // pad

    if (width == 0 || height == 0 || bands == 0 || pixel_size <= 0.0)
        throw IoError("invalid header in " + path);

    Raster r(static_cast<int>(width), static_cast<int>(height), bands, pixel_size,
             origin_x, origin_y, nodata);
    const size_t count = r.data().size();
    if (rd.remaining() != count * 4) throw IoError("truncated raster file: " + path);
    for (size_t i = 0; i < count; ++i) r.data()[i] = rd.f32();
    return r;
}

} // namespace vhm
