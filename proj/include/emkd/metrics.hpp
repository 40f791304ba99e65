#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace emkd::metrics {

/// Ordered stack of binary masks for one class of one patient case; the unit
/// over which the volumetric metrics are evaluated.
struct CaseVolume {
    std::string case_id;
    int slices = 0;
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> voxels;  // nonzero = inside

    CaseVolume() = default;
    CaseVolume(std::string id, int slices_, int h_, int w_)
        : case_id(std::move(id)), slices(slices_), h(h_), w(w_),
          voxels(static_cast<std::size_t>(slices_) * h_ * w_, 0) {}
};

enum class VoeVariant {
    as_printed,  // 1 - |P n G| / (|P| + |G|); 0.5 at perfect overlap
    union_form,  // 1 - |P n G| / |P u G|; the conventional definition
};

// Both-empty conventions: dice = 1, voe(as_printed) = 0.5, voe(union) = 0.
double dice(const CaseVolume& p, const CaseVolume& g);
double voe(const CaseVolume& p, const CaseVolume& g, VoeVariant variant = VoeVariant::as_printed);
/// Signed relative volume difference (|P| - |G|) / |G|; throws MetricError
/// when |G| == 0.
double rvd(const CaseVolume& p, const CaseVolume& g);

/// a +- b where a + b is the observed maximum and a - b the minimum.
struct MetricRange {
    double center = 0.0;
    double half_width = 0.0;
};
MetricRange aggregate_range(const std::vector<double>& scores);

struct MetricRow {
    std::string case_id;
    int class_id = 0;
    double dice = 0.0;
    double voe = 0.0;
    VoeVariant voe_variant = VoeVariant::as_printed;
    double rvd = 0.0;
    bool rvd_defined = true;
};

/// CSV with header case_id,class,dice,voe,voe_variant,rvd; one row per case
/// per class, then per-class summary rows with case_id "ALL(a±b)" whose
/// metric cells hold "a±b" over the rows above (undefined rvd rows are
/// skipped in the rvd summary).
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::string format_metrics_csv(const std::vector<MetricRow>& rows);

const char* voe_variant_name(VoeVariant v);

}  // namespace emkd::metrics
