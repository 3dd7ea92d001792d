// metrics.hpp - overlap, surface, centerline, tumour and dose metrics.
//
// Masks are binarised at 0.5 before any metric. Distances are in the
// physical units of the supplied spacing.
#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tracer/volume.hpp"

namespace tracer {

class metric_error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// 2|a n b| / (|a| + |b|). Throws metric_error when both masks are empty.
double dsc(const Mask &a, const Mask &b);

// Foreground voxels with at least one 6-neighbour outside the mask (the grid
// exterior counts as outside).
std::vector<int64_t> surface_voxels(const Mask &m);

// Squared Euclidean distance from every voxel to the nearest feature voxel
// (exact, separable lower-envelope transform). Voxels get +inf when there
// are no features.
std::vector<double> squared_distance_transform(const std::vector<uint8_t> &feature, Extents e, Spacing s = {});

// 95th percentile (linear interpolation between order statistics) of the
// pooled distances from each surface voxel of a to the surface of b and vice
// versa. Throws metric_error when either mask is empty.
double hd95(const Mask &a, const Mask &b, Spacing s = {});

// Percentile with linear interpolation between closest ranks; q in [0, 100].
double percentile(std::vector<double> values, double q);

using Point3 = std::array<double, 3>; // physical (d, h, w)

// Single centerline path of a tubular mask: geodesic farthest-point pair as
// endpoints, joined by the cheapest 26-connected path where stepping onto a
// voxel costs length / (distance-to-background)^2, so the path follows the
// distance-transform ridge. Throws metric_error on fewer than 3 points.
std::vector<Point3> centerline(const Mask &m, Spacing s = {});

// Mean of the two directed medians of closest-point distances between the
// centerlines of a and b.
double mcd(const Mask &a, const Mask &b, Spacing s = {});
double mcd_points(const std::vector<Point3> &a, const std::vector<Point3> &b);

// |V_def - V_m| / V_m x 100 on voxel counts. Throws on an empty y_m.
double delta_T(const Mask &y_m, const Mask &y_def);

// sum(|J - 1| y_m) / |y_m| x 100.
double m_lexs(const Volume &jac, const Mask &y_m);

// Mean over the union of both masks of (I_m y_m - I_def y_def)^2. Throws on an
// empty y_m.
double tumor_mse(const Volume &moving, const Mask &y_m, const Volume &deformed, const Mask &y_def);

enum class DoseSummary { mean, min, max };
// |summary(dose over y_m) - summary(dose over y_def)|.
double delta_ptd(const Volume &dose, const Mask &y_m, const Mask &y_def, DoseSummary summary = DoseSummary::mean);
// Same with the dose resampled alongside the tumour: summary(dose over y_m)
// against summary(dose_def over y_def).
double delta_ptd(const Volume &dose, const Mask &y_m, const Volume &dose_def, const Mask &y_def,
                 DoseSummary summary = DoseSummary::mean);

// Structure names used across the phantom generator, reports and filtering.
namespace structures {
inline const std::string left_lung = "left_lung";
inline const std::string right_lung = "right_lung";
inline const std::string heart = "heart";
inline const std::string spinal_cord = "spinal_cord";
inline const std::string trachea = "trachea";
inline const std::string aorta = "aorta";
inline const std::string pulmonary_artery = "pulmonary_artery";
inline const std::string ivc = "ivc";
inline const std::string body = "body";
inline const std::string tumor = "tumor";

inline const std::vector<std::string> &organs() {
    static const std::vector<std::string> v{left_lung, right_lung, heart, spinal_cord};
    return v;
}
inline const std::vector<std::string> &tubes() {
    static const std::vector<std::string> v{trachea, aorta, pulmonary_artery, ivc};
    return v;
}
} // namespace structures

struct MetricsReport {
    std::string pair;
    std::map<std::string, double> dsc;  // per structure
    std::map<std::string, double> hd95; // per structure, physical units
    std::map<std::string, double> mcd;  // per tubular structure, physical units
    // NaN when the pair has no moving tumour or no dose.
    double delta_T_percent;
    double m_lexs_percent;
    double tumor_mse;
    double delta_ptd;
    bool excluded = false;
    std::string exclusion_reason;

    MetricsReport();
};

struct VbaDecision {
    bool excluded = false;
    std::string reason; // failing structures, e.g. "right lung"
};

// Excluded iff some lung DSC is strictly below the threshold. Throws
// metric_error when a lung entry is missing or not finite.
VbaDecision vba_filter(const MetricsReport &report, double threshold = 0.8);

inline constexpr int kReportFormatVersion = 1;

// Header row plus one row per report; the column order is fixed by
// report_columns(). Missing or undefined values are written as "nan".
std::vector<std::string> report_columns();
void write_report_csv(std::ostream &os, const std::vector<MetricsReport> &reports);

} // namespace tracer
