#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "emkd/error.hpp"
#include "emkd/metrics.hpp"
#include "emkd/oracle.hpp"
#include "emkd/rng.hpp"

using namespace emkd;
using metrics::CaseVolume;
using metrics::VoeVariant;

namespace {

CaseVolume volume_from(const std::vector<std::uint8_t>& voxels, int slices, int h, int w) {
    CaseVolume v("case", slices, h, w);
    v.voxels = voxels;
    return v;
}

CaseVolume random_volume(Rng& rng, int slices, int h, int w, double fill) {
    CaseVolume v("case", slices, h, w);
    for (auto& x : v.voxels) {
        x = rng.next_double() < fill ? 1 : 0;
    }
    return v;
}

}  // namespace

TEST_CASE("dice identities") {
    Rng rng(7);
    const CaseVolume g = random_volume(rng, 2, 4, 4, 0.4);
    REQUIRE(metrics::dice(g, g) == 1.0);

    CaseVolume a("a", 1, 2, 2), b("b", 1, 2, 2);
    a.voxels = {1, 0, 0, 0};
    b.voxels = {0, 1, 0, 0};
    REQUIRE(metrics::dice(a, b) == 0.0);

    // |P|=4, |G|=4, |P^G|=2
    CaseVolume p = volume_from({1, 1, 1, 1, 0, 0, 0, 0}, 1, 2, 4);
    CaseVolume q = volume_from({1, 1, 0, 0, 1, 1, 0, 0}, 1, 2, 4);
    REQUIRE(metrics::dice(p, q) == 0.5);
    REQUIRE(metrics::voe(p, q, VoeVariant::as_printed) == 0.75);
    REQUIRE(metrics::voe(p, q, VoeVariant::union_form) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("voe as printed is 0.5 at perfect overlap; union variant is 0") {
    CaseVolume g = volume_from({1, 1, 0, 1}, 1, 2, 2);
    REQUIRE(metrics::voe(g, g, VoeVariant::as_printed) == 0.5);
    REQUIRE(metrics::voe(g, g, VoeVariant::union_form) == 0.0);
}

TEST_CASE("rvd values and undefined case") {
    CaseVolume p = volume_from({1, 1, 1, 0}, 1, 2, 2);
    CaseVolume g = volume_from({1, 1, 1, 1}, 1, 2, 2);
    REQUIRE(metrics::rvd(p, g) == -0.25);
    REQUIRE(metrics::rvd(g, g) == 0.0);

    CaseVolume p8 = volume_from({1, 1, 1, 1, 1, 1, 1, 1}, 2, 2, 2);
    CaseVolume g4 = volume_from({1, 1, 1, 1, 0, 0, 0, 0}, 2, 2, 2);
    REQUIRE(metrics::rvd(p8, g4) == 1.0);

    CaseVolume empty("e", 1, 2, 2);
    REQUIRE_THROWS_AS(metrics::rvd(p, empty), MetricError);
}

TEST_CASE("rvd sign follows the volume ordering") {
    Rng rng(17);
    for (int it = 0; it < 50; ++it) {
        const CaseVolume a = random_volume(rng, 1, 4, 4, 0.7);
        const CaseVolume b = random_volume(rng, 1, 4, 4, 0.3);
        double pa = 0, pb = 0;
        for (auto v : a.voxels) pa += v;
        for (auto v : b.voxels) pb += v;
        if (pb == 0) {
            continue;
        }
        if (pa > pb) {
            REQUIRE(metrics::rvd(a, b) > 0.0);
        }
    }
}

TEST_CASE("both-empty conventions") {
    CaseVolume e1("e1", 1, 2, 2), e2("e2", 1, 2, 2);
    REQUIRE(metrics::dice(e1, e2) == 1.0);
    REQUIRE(metrics::voe(e1, e2, VoeVariant::as_printed) == 0.5);
    REQUIRE(metrics::voe(e1, e2, VoeVariant::union_form) == 0.0);
}

TEST_CASE("shape mismatch is rejected") {
    CaseVolume a("a", 1, 2, 2), b("b", 1, 2, 3);
    REQUIRE_THROWS_AS(metrics::dice(a, b), ShapeError);
    REQUIRE_THROWS_AS(metrics::voe(a, b), ShapeError);
    REQUIRE_THROWS_AS(metrics::rvd(a, b), ShapeError);
}

TEST_CASE("voe(union) = 1 - dice/(2 - dice) on random volumes") {
    Rng rng(27);
    for (int it = 0; it < 200; ++it) {
        const CaseVolume p = random_volume(rng, 2, 3, 3, rng.uniform(0.1, 0.9));
        const CaseVolume g = random_volume(rng, 2, 3, 3, rng.uniform(0.1, 0.9));
        const double d = metrics::dice(p, g);
        const double u = metrics::voe(p, g, VoeVariant::union_form);
        REQUIRE(std::abs(u - (1.0 - d / (2.0 - d))) <= 1e-12);
    }
}

TEST_CASE("metrics agree with the reference oracle on random volumes") {
    Rng rng(37);
    for (int it = 0; it < 1000; ++it) {
        const int slices = rng.uniform_int(1, 3);
        const CaseVolume p = random_volume(rng, slices, 3, 4, rng.uniform(0.0, 1.0));
        const CaseVolume g = random_volume(rng, slices, 3, 4, rng.uniform(0.0, 1.0));
        const auto ref = oracle::ref_metrics(p.voxels, g.voxels);
        REQUIRE(std::abs(metrics::dice(p, g) - ref.dice) <= 1e-12);
        REQUIRE(std::abs(metrics::voe(p, g, VoeVariant::as_printed) - ref.voe_printed) <= 1e-12);
        REQUIRE(std::abs(metrics::voe(p, g, VoeVariant::union_form) - ref.voe_union) <= 1e-12);
        if (ref.rvd_defined) {
            REQUIRE(std::abs(metrics::rvd(p, g) - ref.rvd) <= 1e-12);
        } else {
            REQUIRE_THROWS_AS(metrics::rvd(p, g), MetricError);
        }
    }
}

TEST_CASE("aggregate_range reproduces the endpoints") {
    const auto single = metrics::aggregate_range({0.5});
    REQUIRE(single.center == 0.5);
    REQUIRE(single.half_width == 0.0);

    const auto two = metrics::aggregate_range({0.1, 0.3});
    REQUIRE(two.center == doctest::Approx(0.2).epsilon(1e-15));
    REQUIRE(two.half_width == doctest::Approx(0.1).epsilon(1e-15));

    Rng rng(47);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> scores;
        const int count = rng.uniform_int(1, 9);
        for (int i = 0; i < count; ++i) {
            scores.push_back(rng.uniform(-2.0, 2.0));
        }
        const auto r = metrics::aggregate_range(scores);
        const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
        REQUIRE(r.center + r.half_width == *mx);
        REQUIRE(r.center - r.half_width == *mn);

        std::vector<double> shuffled = scores;
        shuffle(shuffled, rng);
        const auto r2 = metrics::aggregate_range(shuffled);
        REQUIRE(r2.center == r.center);
        REQUIRE(r2.half_width == r.half_width);
    }

    REQUIRE_THROWS_AS(metrics::aggregate_range({}), ValueError);
}

TEST_CASE("metrics csv carries one row per case/class plus summaries") {
    std::vector<metrics::MetricRow> rows;
    for (int c = 0; c < 3; ++c) {
        metrics::MetricRow r;
        r.case_id = "case_" + std::to_string(c);
        r.class_id = 1;
        r.dice = 0.5 + 0.1 * c;
        r.voe = 0.2;
        r.rvd = 0.0;
        rows.push_back(r);
    }
    rows[2].rvd_defined = false;
    const std::string csv = metrics::format_metrics_csv(rows);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "case_id,class,dice,voe,voe_variant,rvd");
    int data_rows = 0, summary_rows = 0;
    while (std::getline(in, line)) {
        if (line.rfind("ALL(", 0) == 0) {
            ++summary_rows;
        } else {
            ++data_rows;
        }
    }
    REQUIRE(data_rows == 3);
    REQUIRE(summary_rows == 1);
    REQUIRE(csv.find("nan") != std::string::npos);  // the undefined rvd cell
}
