#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "vhm/change.hpp"
#include "vhm/rng.hpp"

using namespace vhm;

namespace {

Raster diff_raster(int w, int h) { return Raster(w, h, 1, 1.0, 0.0, static_cast<double>(h)); }

void paint(Raster& r, int x0, int y0, int w, int h, float value) {
    for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) r.at(x, y) = value;
}

// independent flood fill used as the component oracle
std::vector<std::set<std::pair<int, int>>> component_oracle(const Raster& d, double threshold,
                                                            bool eight) {
    const int w = d.width(), h = d.height();
    std::vector<uint8_t> seen(static_cast<size_t>(w) * h, 0);
    std::vector<std::set<std::pair<int, int>>> comps;
    for (int sy = 0; sy < h; ++sy)
        for (int sx = 0; sx < w; ++sx) {
            if (seen[sy * w + sx] || !d.valid_at(sx, sy) || d.at(sx, sy) >= threshold) continue;
            std::set<std::pair<int, int>> comp;
            std::vector<std::pair<int, int>> queue{{sx, sy}};
            seen[sy * w + sx] = 1;
            while (!queue.empty()) {
                auto [x, y] = queue.back();
                queue.pop_back();
                comp.insert({x, y});
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dx == 0 && dy == 0) continue;
                        if (!eight && dx != 0 && dy != 0) continue;
                        const int nx = x + dx, ny = y + dy;
                        if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
                        if (seen[ny * w + nx] || !d.valid_at(nx, ny) ||
                            d.at(nx, ny) >= threshold)
                            continue;
                        seen[ny * w + nx] = 1;
                        queue.push_back({nx, ny});
                    }
            }
            comps.push_back(std::move(comp));
        }
    return comps;
}

} // namespace

TEST_CASE("no change means no objects") {
    Raster d = diff_raster(20, 20);
    d.fill(-3.0f);
    CHECK(change_objects(d).empty());
}

TEST_CASE("a 5x5 block sits exactly at the minimum area") {
    Raster d = diff_raster(20, 20);
    d.fill(0.0f);
    paint(d, 4, 4, 5, 5, -15.0f);
    const auto objects = change_objects(d);
    REQUIRE(objects.size() == 1);
    CHECK(objects[0].pixel_count == 25);
    CHECK(objects[0].area_m2 == doctest::Approx(25.0));
    CHECK(objects[0].min_x == 4);
    CHECK(objects[0].max_x == 8);

    // one cell smaller falls below the minimum
    Raster d2 = diff_raster(20, 20);
    d2.fill(0.0f);
    paint(d2, 4, 4, 5, 5, -15.0f);
    d2.at(4, 4) = 0.0f;
    CHECK(change_objects(d2).empty());
}

TEST_CASE("threshold is strict") {
    Raster d = diff_raster(10, 10);
    d.fill(0.0f);
    paint(d, 0, 0, 6, 6, -10.0f); // exactly -10 is not 'greater than 10 m decrease'
    CHECK(change_objects(d).empty());
    paint(d, 0, 0, 6, 6, -10.001f);
    CHECK(change_objects(d).size() == 1);
}

TEST_CASE("diagonal blocks merge under 8-connectivity and split under 4") {
    Raster d = diff_raster(20, 20);
    d.fill(0.0f);
    // two 4x3 blocks of -12 touching at one diagonal corner
    paint(d, 2, 2, 4, 3, -12.0f);
    paint(d, 6, 5, 4, 3, -12.0f);

    // merged: 24 cells, still under the 25 minimum, dropped
    CHECK(change_objects(d, -10.0, 25.0, true).empty());
    // split: two 12-cell components, both dropped
    CHECK(change_objects(d, -10.0, 25.0, false).empty());
    // with the minimum lowered the connectivity choice becomes visible
    CHECK(change_objects(d, -10.0, 20.0, true).size() == 1);
    CHECK(change_objects(d, -10.0, 10.0, false).size() == 2);
}

TEST_CASE("wrong pixel size is rejected") {
    Raster d(10, 10, 1, 10.0);
    CHECK_THROWS_AS(change_objects(d), std::invalid_argument);
}

TEST_CASE("components match the flood-fill oracle on 200 random rasters") {
    Rng rng(404);
    for (int trial = 0; trial < 200; ++trial) {
        const bool eight = trial % 2 == 0;
        const int w = rng.uniform_int(4, 14), h = rng.uniform_int(4, 14);
        Raster d = diff_raster(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double u = rng.uniform();
                if (u < 0.1) continue; // nodata
                d.at(x, y) = static_cast<float>(u < 0.55 ? rng.uniform(-30.0, -10.5)
                                                         : rng.uniform(-9.0, 5.0));
            }

        const auto got = change_objects(d, -10.0, 1.0, eight); // keep all components
        const auto want = component_oracle(d, -10.0, eight);
        REQUIRE(got.size() == want.size());

        std::set<std::pair<int, int>> covered;
        for (size_t i = 0; i < got.size(); ++i) {
            const std::set<std::pair<int, int>> cells(got[i].cells.begin(), got[i].cells.end());
            CHECK(cells == want[i]); // ids follow row-major first-cell order on both sides
            for (const auto& c : cells) {
                CHECK(!covered.count(c)); // objects partition the super-threshold set
                covered.insert(c);
                CHECK(d.at(c.first, c.second) < -10.0f);
            }
        }
    }
}

TEST_CASE("object ids follow row-major first-cell order") {
    Raster d = diff_raster(40, 40);
    d.fill(0.0f);
    paint(d, 30, 2, 6, 6, -20.0f); // first by rows
    paint(d, 2, 10, 6, 6, -20.0f);
    paint(d, 20, 20, 6, 6, -20.0f);
    const auto objects = change_objects(d);
    REQUIRE(objects.size() == 3);
    CHECK(objects[0].min_y == 2);
    CHECK(objects[1].min_y == 10);
    CHECK(objects[2].min_y == 20);
    CHECK(objects[0].id == 0);
    CHECK(objects[2].id == 2);
}

TEST_CASE("object mean of the coarse difference") {
    const GridSpec fine{100, 100, 1.0, 0.0, 100.0};
    Raster coarse(10, 10, 1, 10.0, 0.0, 100.0);
    coarse.fill(0.0f);

    SUBCASE("wholly inside one coarse cell") {
        coarse.at(3, 2) = -9.0f;
        ChangeObject obj;
        for (int y = 25; y < 30; ++y)
            for (int x = 33; x < 38; ++x) obj.cells.push_back({x, y});
        CHECK(object_mean_s2diff(obj, fine, coarse) == doctest::Approx(-9.0));
    }

    SUBCASE("weighted across two cells") {
        coarse.at(0, 0) = -10.0f;
        coarse.at(1, 0) = -2.0f;
        ChangeObject obj;
        int added = 0;
        for (int y = 0; y < 10 && added < 75; ++y)
            for (int x = 0; x < 10 && added < 75; ++x, ++added) obj.cells.push_back({x, y});
        for (int y = 0; y < 5; ++y)
            for (int x = 10; x < 15; ++x) obj.cells.push_back({x, y});
        CHECK(object_mean_s2diff(obj, fine, coarse) == doctest::Approx(-8.0));
    }

    SUBCASE("nodata cells drop out of the weighting") {
        coarse.at(0, 0) = -10.0f;
        coarse.at(1, 0) = coarse.nodata();
        ChangeObject obj;
        for (int x = 5; x < 15; ++x) obj.cells.push_back({x, 0});
        CHECK(object_mean_s2diff(obj, fine, coarse) == doctest::Approx(-10.0));
    }

    SUBCASE("misaligned origins are rejected") {
        Raster shifted(10, 10, 1, 10.0, 5.0, 100.0);
        ChangeObject obj;
        obj.cells.push_back({0, 0});
        CHECK_THROWS_AS(object_mean_s2diff(obj, fine, shifted), std::invalid_argument);
    }
}

TEST_CASE("boxplot statistics use Tukey hinges") {
    const BoxplotStats b = boxplot_stats({-12.0, -10.0, -8.0});
    CHECK(b.n == 3);
    CHECK(b.median == doctest::Approx(-10.0));
    CHECK(b.q1 == doctest::Approx(-11.0));
    CHECK(b.q3 == doctest::Approx(-9.0));
    CHECK(b.whisker_low == doctest::Approx(-12.0));
    CHECK(b.whisker_high == doctest::Approx(-8.0));
    CHECK(b.outlier_count == 0);

    const BoxplotStats ev = boxplot_stats({1.0, 2.0, 3.0, 4.0});
    CHECK(ev.median == doctest::Approx(2.5));
    CHECK(ev.q1 == doctest::Approx(1.5));
    CHECK(ev.q3 == doctest::Approx(3.5));

    const BoxplotStats out = boxplot_stats({0.0, 0.1, 0.0, -0.1, 0.05, 9.0});
    CHECK(out.outlier_count == 1);
    CHECK(out.whisker_high < 9.0);

    const BoxplotStats zero = boxplot_stats(std::vector<double>(20, 0.0));
    CHECK(zero.median == 0.0);
    CHECK(zero.q3 - zero.q1 == 0.0);

    CHECK(boxplot_stats({}).n == 0);
}

TEST_CASE("bucket statistics partition objects by area") {
    const GridSpec fine{200, 200, 1.0, 0.0, 200.0};
    Raster coarse(20, 20, 1, 10.0, 0.0, 200.0);
    coarse.fill(0.0f);
    Raster forest(20, 20, 1, 10.0, 0.0, 200.0);
    forest.fill(1.0f);

    std::vector<ChangeObject> objects;
    auto add_obj = [&](int x0, int y0, int w, int h, double mean) {
        ChangeObject o;
        for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) o.cells.push_back({x, y});
        o.pixel_count = static_cast<long>(o.cells.size());
        o.area_m2 = static_cast<double>(o.pixel_count);
        o.mean_s2_diff = mean;
        objects.push_back(std::move(o));
    };
    add_obj(0, 0, 10, 10, -12.0);   // 100 m^2 -> bucket [25,250)
    add_obj(40, 40, 10, 10, -10.0); // 100 m^2
    add_obj(80, 80, 10, 10, -8.0);  // 100 m^2

    const BucketStatsResult r = bucket_stats(objects, fine, coarse, forest);
    REQUIRE(r.buckets.size() == 4);
    CHECK(r.buckets[0].stats.n == 3);
    CHECK(r.buckets[0].stats.median == doctest::Approx(-10.0));
    CHECK(r.buckets[0].stats.q1 == doctest::Approx(-11.0));
    CHECK(r.buckets[0].stats.q3 == doctest::Approx(-9.0));
    CHECK(r.buckets[1].stats.n == 0);
    CHECK(r.buckets[2].stats.n == 0);
    CHECK(r.buckets[3].stats.n == 0);

    // unchanged forest excludes covered cells, zero difference map -> zero stats
    CHECK(r.unchanged_forest.n == 400 - 3);
    CHECK(r.unchanged_forest.median == doctest::Approx(0.0));
    CHECK(r.unchanged_forest.q3 - r.unchanged_forest.q1 == doctest::Approx(0.0));
}

TEST_CASE("change mask scores") {
    Raster diff(4, 1, 1, 10.0, 0.0, 10.0);
    Raster ref(4, 1, 1, 10.0, 0.0, 10.0);

    SUBCASE("perfect agreement") {
        for (int x = 0; x < 4; ++x) {
            diff.at(x, 0) = x < 2 ? -15.0f : 0.0f;
            ref.at(x, 0) = x < 2 ? 1.0f : 0.0f;
        }
        const F1Result r = change_mask_f1(diff, -10.0, ref);
        CHECK(r.f1 == doctest::Approx(1.0));
        CHECK(r.precision == doctest::Approx(1.0));
        CHECK(r.recall == doctest::Approx(1.0));
    }

    SUBCASE("partial recall") {
        Raster d6(6, 1, 1, 10.0, 0.0, 10.0), r6(6, 1, 1, 10.0, 0.0, 10.0);
        for (int x = 0; x < 6; ++x) {
            d6.at(x, 0) = x < 2 ? -15.0f : 0.0f; // predicts 2 cells
            r6.at(x, 0) = x < 4 ? 1.0f : 0.0f;   // reference has 4
        }
        const F1Result r = change_mask_f1(d6, -10.0, r6);
        CHECK(r.precision == doctest::Approx(1.0));
        CHECK(r.recall == doctest::Approx(0.5));
        CHECK(r.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-3));
    }

    SUBCASE("nothing predicted is flagged") {
        diff.fill(0.0f);
        ref.fill(1.0f);
        const F1Result r = change_mask_f1(diff, -10.0, ref);
        CHECK(!r.precision_defined);
        CHECK(r.precision == 0.0);
        CHECK(r.f1 == 0.0);
    }

    SUBCASE("empty reference is an error") {
        diff.fill(-15.0f);
        ref.fill(0.0f);
        CHECK_THROWS_AS(change_mask_f1(diff, -10.0, ref), std::invalid_argument);
    }

    SUBCASE("forest mask restricts the domain") {
        Raster forest(4, 1, 1, 10.0, 0.0, 10.0);
        for (int x = 0; x < 4; ++x) {
            diff.at(x, 0) = -15.0f;
            ref.at(x, 0) = x == 0 ? 1.0f : 0.0f;
            forest.at(x, 0) = x == 0 ? 1.0f : 0.0f;
        }
        // outside forest the three false positives disappear
        const F1Result r = change_mask_f1(diff, -10.0, ref, &forest);
        CHECK(r.fp == 0);
        CHECK(r.f1 == doctest::Approx(1.0));
    }
}

TEST_CASE("adding a correct pixel never hurts both scores") {
    Raster diff(6, 1, 1, 10.0, 0.0, 10.0), ref(6, 1, 1, 10.0, 0.0, 10.0);
    for (int x = 0; x < 6; ++x) {
        diff.at(x, 0) = x < 2 ? -15.0f : 0.0f;
        ref.at(x, 0) = x < 4 ? 1.0f : 0.0f;
    }
    const F1Result before = change_mask_f1(diff, -10.0, ref);
    diff.at(2, 0) = -15.0f; // a correct addition
    const F1Result after = change_mask_f1(diff, -10.0, ref);
    CHECK((after.precision >= before.precision || after.recall >= before.recall));
    CHECK(after.f1 >= before.f1);
}
