#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vhm/raster.hpp"

namespace vhm {

struct MetricReport {
    long n = 0;
    double mbe = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    double maer = 0.0;    // mae / mean_vh (NaN when mean_vh <= 0)
    double r2 = 0.0;      // squared Pearson correlation of the linear fit
    double fit_slope = 0.0, fit_intercept = 0.0; // reference regressed on prediction
    double mean_vh = 0.0; // mean predicted height
};

// Metrics over cells where mask is nonzero and both rasters are valid.
// Throws on an empty selection.
MetricReport compute_metrics(const Raster& pred, const Raster& ref, const Raster& mask);

// forest AND valid reference AND reference <= cap
Raster build_eval_mask(const Raster& ref, const Raster& forest_mask, float outlier_cap = 50.0f);

struct ResidualBin {
    double lo = 0.0, hi = 0.0; // reference-height interval [lo, hi)
    long count = 0;
    double mean_residual = 0.0;
    double mean_abs_residual = 0.0;
};

// Residual = prediction - reference, binned by reference height. Rows run
// from [0, w) up to the highest occupied bin; empty bins stay in the table.
std::vector<ResidualBin> residual_bins(const Raster& pred, const Raster& ref, const Raster& mask,
                                       double bin_width = 5.0);

struct DensityScatter {
    double cell = 1.0;
    long n = 0;
    double fit_slope = 0.0, fit_intercept = 0.0;
    struct Cell {
        int ref_bin = 0, pred_bin = 0;
        long count = 0;
    };
    std::vector<Cell> cells; // sorted by (ref_bin, pred_bin), zero cells omitted
};

DensityScatter density_scatter(const Raster& pred, const Raster& ref, const Raster& mask,
                               double cell = 1.0);

enum class StratumSource { elevation, slope, aspect, mix_rate, tree_cover_density };

std::string stratum_source_name(StratumSource s);

struct StratumDef {
    std::string family;
    std::string name;
    StratumSource source = StratumSource::elevation;
    double lower = 0.0;
    double upper = 0.0;
    bool upper_inclusive = false;            // terminal bins close their upper edge
    std::optional<double> min_slope_guard;   // aspect rows apply only on steep terrain
};

// Elevation, slope, aspect (slope >= 30 degrees), broadleaf share, and tree
// cover density families with their published bin edges.
std::vector<StratumDef> default_strata();

struct StratumRow {
    StratumDef def;
    long n = 0;
    MetricReport report; // undefined when n == 0
};

using StrataSources = std::map<StratumSource, const Raster*>;

// One row per stratum definition; families must be internally disjoint.
std::vector<StratumRow> stratified_metrics(const Raster& pred, const Raster& ref,
                                           const Raster& mask, const StrataSources& sources,
                                           const std::vector<StratumDef>& defs);

// CSV emission (header family,stratum,n,r2,mean_vh,mbe,mae,rmse,maer)
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& family, const std::string& stratum,
                            const MetricReport& r);
std::string metrics_csv_empty_row(const std::string& family, const std::string& stratum);
void write_strata_csv(const std::string& path, const std::vector<StratumRow>& rows);
void write_residual_bins_csv(const std::string& path, const std::vector<ResidualBin>& bins);
void write_density_scatter_csv(const std::string& path, const DensityScatter& ds);

} // namespace vhm
