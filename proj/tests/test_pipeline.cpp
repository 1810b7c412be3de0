#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>

#include "vhm/pipeline.hpp"
#include "vhm/rng.hpp"

using namespace vhm;

namespace {

Scene make_scene(int size, const std::string& date, float cloud = 0.0f, float band_value = 0.3f) {
    Scene s;
    s.tile_id = "T1";
    s.date = parse_date(date);
    s.bands = Raster(size, size, 4, 10.0, 0.0, size * 10.0);
    for (auto& v : s.bands.data()) v = band_value;
    s.cloud_prob = Raster(size, size, 1, 10.0, 0.0, size * 10.0);
    s.cloud_prob.fill(cloud);
    s.landcover = Raster(size, size, 1, 10.0, 0.0, size * 10.0);
    s.landcover.fill(static_cast<float>(kLandOther));
    return s;
}

Raster constant_target(int size, float value) {
    Raster r(size, size, 1, 10.0, 0.0, size * 10.0);
    r.fill(value);
    return r;
}

} // namespace

TEST_CASE("date parsing and the leaf-on season") {
    const Date d = parse_date("2019-06-05");
    CHECK(d.year == 2019);
    CHECK(d.month == 6);
    CHECK(d.day == 5);
    CHECK(format_date(d) == "2019-06-05");
    CHECK_THROWS_AS(parse_date("junk"), std::invalid_argument);
    CHECK_THROWS_AS(parse_date("2019-13-01"), std::invalid_argument);

    CHECK(!in_leaf_on_season(parse_date("2019-01-15")));
    CHECK(!in_leaf_on_season(parse_date("2019-03-20")));
    CHECK(in_leaf_on_season(parse_date("2019-05-01")));
    CHECK(in_leaf_on_season(parse_date("2019-06-10")));
    CHECK(in_leaf_on_season(parse_date("2019-07-30")));
    CHECK(in_leaf_on_season(parse_date("2019-09-30")));
    CHECK(!in_leaf_on_season(parse_date("2019-10-01")));
}

TEST_CASE("scene selection ranks by cloudiness within the season") {
    std::vector<Scene> scenes;
    scenes.push_back(make_scene(4, "2019-01-10", 0.0f));
    scenes.push_back(make_scene(4, "2019-03-01", 1.0f));
    for (int i = 0; i < 12; ++i) {
        char date[16];
        std::snprintf(date, sizeof(date), "2019-06-%02d", i + 1);
        scenes.push_back(make_scene(4, date, static_cast<float>(12 - i)));
    }
    scenes.push_back(make_scene(4, "2020-06-01", 0.0f)); // other year

    const auto picked = select_scenes(scenes, 2019);
    REQUIRE(picked.size() == 10);
    // the cloudiest two in-season scenes (cloud 12 and 11) fall away
    for (size_t i = 0; i + 1 < picked.size(); ++i) {
        const Scene& a = scenes[picked[i]];
        const Scene& b = scenes[picked[i + 1]];
        CHECK(a.cloud_prob.at(0, 0) <= b.cloud_prob.at(0, 0));
        CHECK(in_leaf_on_season(a.date));
        CHECK(a.date.year == 2019);
    }
    CHECK(select_scenes(scenes, 1999).empty());
}

TEST_CASE("training selection counts valid patches and breaks ties by date") {
    const int size = 17; // 3x3 eligible centers
    std::vector<Scene> scenes;
    scenes.push_back(make_scene(size, "2019-07-01", 0.0f));   // all centers valid
    scenes.push_back(make_scene(size, "2019-06-01", 100.0f)); // fully cloudy
    scenes.push_back(make_scene(size, "2019-08-01", 0.0f));   // ties with the first
    const Raster tmean = constant_target(size, 12.0f);
    const Raster tmax = constant_target(size, 20.0f);

    CHECK(count_valid_patches(scenes[0], tmean, tmax, nullptr) == 9);
    CHECK(count_valid_patches(scenes[1], tmean, tmax, nullptr) == 0);

    const auto picked =
        select_training_scenes(scenes, {0, 1, 2}, tmean, tmax, nullptr, 2);
    REQUIRE(picked.size() == 2);
    CHECK(picked[0] == 0); // tie on count resolves to the earlier July scene
    CHECK(picked[1] == 2);
}

TEST_CASE("patch extraction") {
    SUBCASE("fully cloudy scene yields nothing") {
        const Scene s = make_scene(20, "2019-07-01", 100.0f);
        const Raster t = constant_target(20, 10.0f);
        CHECK(extract_patches(s, t, t, nullptr, nullptr).empty());
    }

    SUBCASE("cloud limit is strict") {
        const Scene s = make_scene(15, "2019-07-01", 10.0f); // exactly the limit
        const Raster t = constant_target(15, 10.0f);
        CHECK(extract_patches(s, t, t, nullptr, nullptr).empty());
    }

    SUBCASE("a 15x15 scene with one valid center yields one patch") {
        const Scene s = make_scene(15, "2019-07-01", 0.0f);
        Raster t = constant_target(15, 10.0f);
        const auto patches = extract_patches(s, t, t, nullptr, nullptr);
        REQUIRE(patches.size() == 1);
        CHECK(patches[0].x.c == 4);
        CHECK(patches[0].location_id == 7 * 15 + 7);
        CHECK(patches[0].y_mean == 10.0f);
        CHECK(patches[0].year == 2019);
    }

    SUBCASE("a 17x17 scene yields a 3x3 block of patches") {
        const Scene s = make_scene(17, "2019-07-01", 0.0f);
        const Raster t = constant_target(17, 10.0f);
        CHECK(extract_patches(s, t, t, nullptr, nullptr).size() == 9);
    }

    SUBCASE("the elevation channel joins when provided") {
        const Scene s = make_scene(15, "2019-07-01", 0.0f);
        const Raster t = constant_target(15, 10.0f);
        const Raster dtm = constant_target(15, 622.0f);
        const auto patches = extract_patches(s, t, t, &dtm, nullptr);
        REQUIRE(patches.size() == 1);
        CHECK(patches[0].x.c == 5);
        CHECK(patches[0].x.at(0, 4, 0, 0) == 622.0f);
    }

    SUBCASE("invalid center target disqualifies the patch") {
        const Scene s = make_scene(15, "2019-07-01", 0.0f);
        Raster t = constant_target(15, 10.0f);
        t.at(7, 7) = t.nodata();
        CHECK(extract_patches(s, t, t, nullptr, nullptr).empty());
    }

    SUBCASE("misaligned rasters are rejected") {
        const Scene s = make_scene(15, "2019-07-01", 0.0f);
        const Raster t = constant_target(16, 10.0f);
        CHECK_THROWS_AS(extract_patches(s, t, t, nullptr, nullptr), std::invalid_argument);
    }
}

TEST_CASE("tile layout covers every pixel exactly once") {
    SUBCASE("small scene is a single window") {
        const TileAxis t = tile_axis_layout(300);
        CHECK(t.origin == std::vector<int>{0});
        CHECK(t.window == 300);
        CHECK(t.own_hi[0] == 300);
    }

    SUBCASE("1008 wide splits at column 504") {
        const TileAxis t = tile_axis_layout(1008);
        CHECK(t.origin == std::vector<int>{0, 496});
        CHECK(t.own_lo == std::vector<int>{0, 504});
        CHECK(t.own_hi == std::vector<int>{504, 1008});
    }

    SUBCASE("irregular extents remain a partition inside their windows") {
        for (int extent : {513, 900, 1200, 2000, 4999}) {
            const TileAxis t = tile_axis_layout(extent);
            int expect = 0;
            for (size_t i = 0; i < t.origin.size(); ++i) {
                CHECK(t.own_lo[i] == expect);
                CHECK(t.own_lo[i] >= t.origin[i]);
                CHECK(t.own_hi[i] <= t.origin[i] + t.window);
                expect = t.own_hi[i];
            }
            CHECK(expect == extent);
        }
    }
}

TEST_CASE("predict_scene on a small scene") {
    ModelConfig cfg;
    cfg.width_mult_den = 64;
    cfg.n_blocks = {1, 1, 1, 1};
    cfg.in_channels = 4;
    const Model<float> model = Model<float>::build(cfg, 12);
    NormStats norm{{0.3f, 0.3f, 0.3f, 0.3f}, {0.1f, 0.1f, 0.1f, 0.1f}};

    Scene s = make_scene(40, "2019-07-01");
    SUBCASE("constant input gives a constant field away from borders") {
        const PredictionPair p = predict_scene(model, s, nullptr, norm);
        CHECK(p.mean.width() == 40);
        const float center = p.mean.at(20, 20);
        for (int y = 5; y < 35; ++y)
            for (int x = 5; x < 35; ++x)
                CHECK(p.mean.at(x, y) == doctest::Approx(center).epsilon(1e-5));
    }

    SUBCASE("outputs are clamped to zero and never negative") {
        const PredictionPair p = predict_scene(model, s, nullptr, norm);
        for (int y = 0; y < 40; ++y)
            for (int x = 0; x < 40; ++x) {
                CHECK(p.mean.at(x, y) >= 0.0f);
                CHECK(p.max.at(x, y) >= 0.0f);
            }
    }

    SUBCASE("invalid inputs cut holes into the prediction") {
        s.bands.at(9, 9, 2) = s.bands.nodata();
        const PredictionPair p = predict_scene(model, s, nullptr, norm);
        CHECK(!p.mean.valid_at(9, 9));
        CHECK(p.mean.valid_at(10, 10));
    }

    SUBCASE("channel count mismatch is rejected") {
        const Raster dtm = constant_target(40, 500.0f);
        CHECK_THROWS_AS(predict_scene(model, s, &dtm, norm), std::invalid_argument);
    }
}

TEST_CASE("mask_invalid") {
    Scene s = make_scene(4, "2019-07-01");
    s.cloud_prob.at(1, 0) = 10.0f;  // exactly at the limit: kept
    s.cloud_prob.at(2, 0) = 10.1f;  // above: dropped
    s.landcover.at(3, 0) = static_cast<float>(kLandWater);
    s.landcover.at(0, 1) = static_cast<float>(kLandSnow);

    PredictionPair pred{Raster(s.bands.grid(), 1), Raster(s.bands.grid(), 1)};
    pred.mean.fill(17.33f);
    pred.max.fill(24.75f);
    const PredictionPair out = mask_invalid(pred, s);

    CHECK(out.mean.at(1, 0) == 17.33f); // bit-exact survivor
    CHECK(!out.mean.valid_at(2, 0));
    CHECK(!out.mean.valid_at(3, 0));
    CHECK(!out.max.valid_at(0, 1));
    CHECK(out.mean.at(0, 0) == 17.33f);
}

TEST_CASE("annual_composite medians") {
    const GridSpec grid{1, 1, 10.0, 0.0, 10.0};
    auto pair_with = [&](float v) {
        PredictionPair p{Raster(grid, 1), Raster(grid, 1)};
        p.mean.at(0, 0) = v;
        p.max.at(0, 0) = v + 1.0f;
        return p;
    };

    SUBCASE("odd count picks the middle element") {
        const AnnualMap map =
            annual_composite({pair_with(3), pair_with(5), pair_with(100)}, 2019);
        CHECK(map.mean_height.at(0, 0) == 5.0f);
        CHECK(map.valid_count.at(0, 0) == 3.0f);
        CHECK(map.year == 2019);
    }

    SUBCASE("even count averages the central pair") {
        const AnnualMap map = annual_composite({pair_with(4), pair_with(8)}, 2019);
        CHECK(map.mean_height.at(0, 0) == 6.0f);
    }

    SUBCASE("all nodata stays nodata with count zero") {
        PredictionPair p{Raster(grid, 1), Raster(grid, 1)};
        const AnnualMap map = annual_composite({p, p}, 2019);
        CHECK(!map.mean_height.valid_at(0, 0));
        CHECK(map.valid_count.at(0, 0) == 0.0f);
    }

    SUBCASE("permutation invariance, bit exact") {
        std::vector<PredictionPair> a;
        Rng rng(8);
        for (int i = 0; i < 5; ++i)
            a.push_back(pair_with(static_cast<float>(rng.uniform(0.0, 30.0))));
        std::vector<PredictionPair> b{a[3], a[0], a[4], a[2], a[1]};
        const AnnualMap ma = annual_composite(a, 2019);
        const AnnualMap mb = annual_composite(b, 2019);
        CHECK(ma.mean_height.data() == mb.mean_height.data());
        CHECK(ma.max_height.data() == mb.max_height.data());
    }

    SUBCASE("empty input is rejected") {
        CHECK_THROWS_AS(annual_composite({}, 2019), std::invalid_argument);
    }
}

TEST_CASE("manifest round trip and scene loading") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "manifest_test";
    fs::create_directories(dir);

    const Scene s = make_scene(16, "2019-06-15", 2.0f, 0.4f);
    write_raster(s.bands, (dir / "b.rstr").string());
    write_raster(s.cloud_prob, (dir / "c.rstr").string());
    write_raster(s.landcover, (dir / "l.rstr").string());

    std::vector<ManifestEntry> entries{{"T1", "2019-06-15", "b.rstr", "c.rstr", "l.rstr"}};
    const std::string manifest = (dir / "manifest.csv").string();
    write_manifest(manifest, entries);

    const auto back = read_manifest(manifest);
    REQUIRE(back.size() == 1);
    CHECK(back[0].tile_id == "T1");
    const Scene loaded = load_scene(back[0], dir.string());
    CHECK(loaded.date == parse_date("2019-06-15"));
    CHECK(loaded.bands.bands() == 4);
    CHECK(loaded.bands.at(3, 3, 1) == 0.4f);

    fs::remove_all(dir);
}
