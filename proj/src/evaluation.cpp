#include "vhm/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "vhm/textio.hpp"

namespace vhm {

namespace {

void require_aligned(const Raster& a, const Raster& b, const char* what) {
    if (!(a.grid() == b.grid()))
        throw std::invalid_argument(std::string("misaligned rasters: ") + what);
}

bool selected(const Raster& pred, const Raster& ref, const Raster& mask, int x, int y) {
    return mask.valid_at(x, y) && mask.at(x, y) != 0.0f && pred.valid_at(x, y) &&
           ref.valid_at(x, y);
}

struct FitAccum {
    long n = 0;
    double sum_p = 0.0, sum_r = 0.0, sum_pp = 0.0, sum_rr = 0.0, sum_pr = 0.0;
    double sum_d = 0.0, sum_ad = 0.0, sum_dd = 0.0;

    void add(double p, double r) {
        ++n;
        sum_p += p;
        sum_r += r;
        sum_pp += p * p;
        sum_rr += r * r;
        sum_pr += p * r;
        const double d = p - r;
        sum_d += d;
        sum_ad += std::abs(d);
        sum_dd += d * d;
    }

    MetricReport report() const {
        MetricReport m;
        m.n = n;
        const double dn = static_cast<double>(n);
        m.mbe = sum_d / dn;
        m.mae = sum_ad / dn;
        m.rmse = std::sqrt(sum_dd / dn);
        m.mean_vh = sum_p / dn;
        m.maer = m.mean_vh > 0.0 ? m.mae / m.mean_vh : std::numeric_limits<double>::quiet_NaN();

        const double var_p = sum_pp / dn - (sum_p / dn) * (sum_p / dn);
        const double var_r = sum_rr / dn - (sum_r / dn) * (sum_r / dn);
        const double cov = sum_pr / dn - (sum_p / dn) * (sum_r / dn);
        if (var_p > 0.0) {
            m.fit_slope = cov / var_p;
            m.fit_intercept = sum_r / dn - m.fit_slope * (sum_p / dn);
            m.r2 = var_r > 0.0 ? (cov * cov) / (var_p * var_r) : 0.0;
        } else {
            m.fit_slope = 0.0;
            m.fit_intercept = sum_r / dn;
            m.r2 = 0.0;
        }
        return m;
    }
};

} // namespace

MetricReport compute_metrics(const Raster& pred, const Raster& ref, const Raster& mask) {
    require_aligned(pred, ref, "pred/ref");
    require_aligned(pred, mask, "pred/mask");

    FitAccum acc;
    for (int y = 0; y < pred.height(); ++y)
        for (int x = 0; x < pred.width(); ++x)
            if (selected(pred, ref, mask, x, y)) acc.add(pred.at(x, y), ref.at(x, y));
    if (acc.n == 0) throw std::invalid_argument("empty stratum");
    return acc.report();
}

Raster build_eval_mask(const Raster& ref, const Raster& forest_mask, float outlier_cap) {
    require_aligned(ref, forest_mask, "ref/forest");
    Raster out(ref.grid(), 1);
    for (int y = 0; y < ref.height(); ++y) {
        for (int x = 0; x < ref.width(); ++x) {
            const bool keep = forest_mask.valid_at(x, y) && forest_mask.at(x, y) != 0.0f &&
                              ref.valid_at(x, y) && ref.at(x, y) <= outlier_cap;
            out.at(x, y) = keep ? 1.0f : 0.0f;
        }
    }
    return out;
}

std::vector<ResidualBin> residual_bins(const Raster& pred, const Raster& ref, const Raster& mask,
                                       double bin_width) {
    require_aligned(pred, ref, "pred/ref");
    require_aligned(pred, mask, "pred/mask");
    if (bin_width <= 0.0) throw std::invalid_argument("bin width must be positive");

    struct Accum {
        long count = 0;
        double sum = 0.0, sum_abs = 0.0;
    };
    std::vector<Accum> acc;
    for (int y = 0; y < pred.height(); ++y) {
        for (int x = 0; x < pred.width(); ++x) {
            if (!selected(pred, ref, mask, x, y)) continue;
            const double r = ref.at(x, y);
            if (r < 0.0) continue;
            const size_t bin = static_cast<size_t>(r / bin_width);
            if (bin >= acc.size()) acc.resize(bin + 1);
            const double d = pred.at(x, y) - r;
            ++acc[bin].count;
            acc[bin].sum += d;
            acc[bin].sum_abs += std::abs(d);
        }
    }

    std::vector<ResidualBin> out;
    for (size_t b = 0; b < acc.size(); ++b) {
        ResidualBin rb;
        rb.lo = static_cast<double>(b) * bin_width;
        rb.hi = rb.lo + bin_width;
        rb.count = acc[b].count;
        if (rb.count > 0) {
            rb.mean_residual = acc[b].sum / rb.count;
            rb.mean_abs_residual = acc[b].sum_abs / rb.count;
        }
        out.push_back(rb);
    }
    return out;
}

DensityScatter density_scatter(const Raster& pred, const Raster& ref, const Raster& mask,
                               double cell) {
    require_aligned(pred, ref, "pred/ref");
    require_aligned(pred, mask, "pred/mask");
    if (cell <= 0.0) throw std::invalid_argument("cell size must be positive");

    DensityScatter ds;
    ds.cell = cell;
    std::map<std::pair<int, int>, long> hist;
    FitAccum acc;
    for (int y = 0; y < pred.height(); ++y) {
        for (int x = 0; x < pred.width(); ++x) {
            if (!selected(pred, ref, mask, x, y)) continue;
            const double p = pred.at(x, y), r = ref.at(x, y);
            acc.add(p, r);
            const int rb = static_cast<int>(std::floor(r / cell));
            const int pb = static_cast<int>(std::floor(p / cell));
            ++hist[{rb, pb}];
        }
    }
    ds.n = acc.n;
    if (acc.n > 0) {
        const MetricReport m = acc.report();
        ds.fit_slope = m.fit_slope;
        ds.fit_intercept = m.fit_intercept;
    }
    for (const auto& [key, count] : hist) ds.cells.push_back({key.first, key.second, count});
    return ds;
}

std::string stratum_source_name(StratumSource s) {
    switch (s) {
        case StratumSource::elevation: return "elevation";
        case StratumSource::slope: return "slope";
        case StratumSource::aspect: return "aspect";
        case StratumSource::mix_rate: return "mix_rate";
        case StratumSource::tree_cover_density: return "tree_cover_density";
    }
    return "?";
}

std::vector<StratumDef> default_strata() {
    std::vector<StratumDef> defs;
    auto bin = [&](const std::string& family, StratumSource src, const std::string& name,
                   double lo, double hi, bool incl, std::optional<double> guard) {
        defs.push_back({family, name, src, lo, hi, incl, guard});
    };

    bin("elevation", StratumSource::elevation, "240-599", 240, 600, false, {});
    bin("elevation", StratumSource::elevation, "600-899", 600, 900, false, {});
    bin("elevation", StratumSource::elevation, "900-1199", 900, 1200, false, {});
    bin("elevation", StratumSource::elevation, "1200-2500", 1200, 2500, true, {});

    bin("slope", StratumSource::slope, "0-9.9", 0, 10, false, {});
    bin("slope", StratumSource::slope, "10-19.9", 10, 20, false, {});
    bin("slope", StratumSource::slope, "20-29.9", 20, 30, false, {});
    bin("slope", StratumSource::slope, "30-39.9", 30, 40, false, {});
    bin("slope", StratumSource::slope, "40-49.9", 40, 50, false, {});
    bin("slope", StratumSource::slope, "50+", 50, 90, true, {});

    const double steep = 30.0;
    bin("aspect", StratumSource::aspect, "0-44.9", 0, 45, false, steep);
    bin("aspect", StratumSource::aspect, "45-89.9", 45, 90, false, steep);
    bin("aspect", StratumSource::aspect, "90-134.9", 90, 135, false, steep);
    bin("aspect", StratumSource::aspect, "135-179.9", 135, 180, false, steep);
    bin("aspect", StratumSource::aspect, "180-214.9", 180, 215, false, steep);
    bin("aspect", StratumSource::aspect, "215-269.9", 215, 270, false, steep);
    bin("aspect", StratumSource::aspect, "270-314.9", 270, 315, false, steep);
    bin("aspect", StratumSource::aspect, "315-360", 315, 360, true, steep);

    bin("mix_rate", StratumSource::mix_rate, "0-24.9", 0, 25, false, {});
    bin("mix_rate", StratumSource::mix_rate, "25-74.9", 25, 75, false, {});
    bin("mix_rate", StratumSource::mix_rate, "75-100", 75, 100, true, {});

    bin("tree_cover_density", StratumSource::tree_cover_density, "0-79.9", 0, 80, false, {});
    bin("tree_cover_density", StratumSource::tree_cover_density, "80-100", 80, 100, true, {});
    return defs;
}

std::vector<StratumRow> stratified_metrics(const Raster& pred, const Raster& ref,
                                           const Raster& mask, const StrataSources& sources,
                                           const std::vector<StratumDef>& defs) {
    require_aligned(pred, ref, "pred/ref");
    require_aligned(pred, mask, "pred/mask");
    for (const auto& [src, raster] : sources) require_aligned(pred, *raster, "pred/stratum source");

    // reject overlapping bins inside a family
    std::map<std::string, std::vector<const StratumDef*>> families;
    for (const auto& d : defs) {
        if (d.lower >= d.upper) throw std::invalid_argument("empty stratum interval " + d.name);
        families[d.family].push_back(&d);
    }
    for (auto& [family, list] : families) {
        std::sort(list.begin(), list.end(),
                  [](const StratumDef* a, const StratumDef* b) { return a->lower < b->lower; });
        for (size_t i = 1; i < list.size(); ++i) {
            const bool overlap = list[i]->lower < list[i - 1]->upper ||
                                 (list[i - 1]->upper_inclusive && list[i]->lower == list[i - 1]->upper);
            if (overlap)
                throw std::invalid_argument("overlapping strata in family " + family);
        }
    }

    const Raster* slope = nullptr;
    if (auto it = sources.find(StratumSource::slope); it != sources.end()) slope = it->second;

    std::vector<StratumRow> rows;
    for (const auto& d : defs) {
        auto it = sources.find(d.source);
        if (it == sources.end())
            throw std::invalid_argument("missing stratum source raster: " + stratum_source_name(d.source));
        const Raster& src = *it->second;
        if (d.min_slope_guard && slope == nullptr)
            throw std::invalid_argument("stratum guard needs a slope raster");

        FitAccum acc;
        for (int y = 0; y < pred.height(); ++y) {
            for (int x = 0; x < pred.width(); ++x) {
                if (!selected(pred, ref, mask, x, y)) continue;
                if (!src.valid_at(x, y)) continue;
                const double v = src.at(x, y);
                const bool inside =
                    v >= d.lower && (v < d.upper || (d.upper_inclusive && v == d.upper));
                if (!inside) continue;
                if (d.min_slope_guard) {
                    if (!slope->valid_at(x, y) || slope->at(x, y) < *d.min_slope_guard) continue;
                }
                acc.add(pred.at(x, y), ref.at(x, y));
            }
        }
        StratumRow row;
        row.def = d;
        row.n = acc.n;
        if (acc.n > 0) row.report = acc.report();
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string metrics_csv_header() { return "family,stratum,n,r2,mean_vh,mbe,mae,rmse,maer"; }

std::string metrics_csv_row(const std::string& family, const std::string& stratum,
                            const MetricReport& r) {
    std::ostringstream ss;
    ss << family << "," << stratum << "," << r.n << "," << fmt_g6(r.r2) << "," << fmt_g6(r.mean_vh)
       << "," << fmt_g6(r.mbe) << "," << fmt_g6(r.mae) << "," << fmt_g6(r.rmse) << ","
       << fmt_g6(r.maer);
    return ss.str();
}

std::string metrics_csv_empty_row(const std::string& family, const std::string& stratum) {
    return family + "," + stratum + ",0,,,,,,";
}

void write_strata_csv(const std::string& path, const std::vector<StratumRow>& rows) {
    std::ostringstream ss;
    ss << metrics_csv_header() << "\n";
    for (const auto& row : rows) {
        if (row.n == 0)
            ss << metrics_csv_empty_row(row.def.family, row.def.name) << "\n";
        else
            ss << metrics_csv_row(row.def.family, row.def.name, row.report) << "\n";
    }
    write_text_file(path, ss.str());
}

void write_residual_bins_csv(const std::string& path, const std::vector<ResidualBin>& bins) {
    std::ostringstream ss;
    ss << "bin_lo,bin_hi,count,mean_residual,mean_abs_residual\n";
    for (const auto& b : bins) {
        ss << fmt_g6(b.lo) << "," << fmt_g6(b.hi) << "," << b.count << ",";
        if (b.count > 0)
            ss << fmt_g6(b.mean_residual) << "," << fmt_g6(b.mean_abs_residual);
        else
            ss << ","; // blank means for empty bins
        ss << "\n";
    }
    write_text_file(path, ss.str());
}

void write_density_scatter_csv(const std::string& path, const DensityScatter& ds) {
    std::ostringstream ss;
    ss << "# fit: reference regressed on prediction; slope=" << fmt_g6(ds.fit_slope)
       << " intercept=" << fmt_g6(ds.fit_intercept) << " n=" << ds.n << " cell=" << fmt_g6(ds.cell)
       << "\n";
    ss << "ref_bin,pred_bin,count\n";
    for (const auto& c : ds.cells)
        ss << c.ref_bin << "," << c.pred_bin << "," << c.count << "\n";
    write_text_file(path, ss.str());
}

} // namespace vhm
