#include "emkd/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "emkd/error.hpp"

namespace emkd::metrics {

namespace {

struct Counts {
    double p = 0.0, g = 0.0, inter = 0.0, uni = 0.0;
};

Counts count(const CaseVolume& p, const CaseVolume& g) {
    if (p.slices != g.slices || p.h != g.h || p.w != g.w) {
        throw ShapeError("metric volumes have different extents");
    }
    Counts c;
    for (std::size_t i = 0; i < p.voxels.size(); ++i) {
        const bool a = p.voxels[i] != 0;
        const bool b = g.voxels[i] != 0;
        c.p += a;
        c.g += b;
        c.inter += a && b;
        c.uni += a || b;
    }
    return c;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_range(const MetricRange& r) { return fmt(r.center) + "±" + fmt(r.half_width); }

}  // namespace

double dice(const CaseVolume& p, const CaseVolume& g) {
    const Counts c = count(p, g);
    if (c.p + c.g == 0.0) {
        return 1.0;
    }
    return 2.0 * c.inter / (c.p + c.g);
}

double voe(const CaseVolume& p, const CaseVolume& g, VoeVariant variant) {
    const Counts c = count(p, g);
    if (variant == VoeVariant::as_printed) {
        if (c.p + c.g == 0.0) {
            return 0.5;
        }
        return 1.0 - c.inter / (c.p + c.g);
    }
    if (c.uni == 0.0) {
        return 0.0;
    }
    return 1.0 - c.inter / c.uni;
}

double rvd(const CaseVolume& p, const CaseVolume& g) {
    const Counts c = count(p, g);
    if (c.g == 0.0) {
        throw MetricError("rvd undefined: reference volume is empty for case " + g.case_id);
    }
    return (c.p - c.g) / c.g;
}

MetricRange aggregate_range(const std::vector<double>& scores) {
    if (scores.empty()) {
        throw ValueError("aggregate_range: empty score list");
    }
    const auto [mn, mx] = std::minmax_element(scores.begin(), scores.end());
    return MetricRange{(*mx + *mn) / 2.0, (*mx - *mn) / 2.0};
}

const char* voe_variant_name(VoeVariant v) {
    return v == VoeVariant::as_printed ? "as_printed" : "union";
}

std::string format_metrics_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream out;
    out << "case_id,class,dice,voe,voe_variant,rvd\n";
    for (const auto& r : rows) {
        out << r.case_id << ',' << r.class_id << ',' << fmt(r.dice) << ',' << fmt(r.voe) << ','
            << voe_variant_name(r.voe_variant) << ',' << (r.rvd_defined ? fmt(r.rvd) : "nan") << '\n';
    }
    // Per-class summary rows.
    std::map<int, std::vector<const MetricRow*>> by_class;
    for (const auto& r : rows) {
        by_class[r.class_id].push_back(&r);
    }
    for (const auto& [class_id, class_rows] : by_class) {
        std::vector<double> dices, voes, rvds;
        for (const MetricRow* r : class_rows) {
            dices.push_back(r->dice);
            voes.push_back(r->voe);
            if (r->rvd_defined) {
                rvds.push_back(r->rvd);
            }
        }
        out << "ALL(a±b)," << class_id << ',' << fmt_range(aggregate_range(dices)) << ','
            << fmt_range(aggregate_range(voes)) << ',' << voe_variant_name(class_rows.front()->voe_variant) << ','
            << (rvds.empty() ? "nan" : fmt_range(aggregate_range(rvds))) << '\n';
    }
    return out.str();
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw DataError("cannot open metrics csv for writing: " + path);
    }
    out << format_metrics_csv(rows);
}

}  // namespace emkd::metrics
