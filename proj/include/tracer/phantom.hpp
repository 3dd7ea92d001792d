// phantom.hpp - synthetic thoracic phantoms and registration pairs with known truth.
//
// Coordinates are voxel positions (d, h, w); d runs superior to inferior,
// h anterior to posterior, w from the patient's right to left.
#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tracer/engine.hpp"
#include "tracer/volume.hpp"

namespace tracer {

using Vec3 = std::array<double, 3>;

struct Ellipsoid {
    Vec3 center{};
    Vec3 radii{};
    bool contains(double z, double y, double x) const;
};

// Cylinder along d through (h, w).
struct Cylinder {
    double h = 0, w = 0, radius = 0;
};

// Tube of constant radius around the polyline through the control points.
struct TubeSpec {
    std::string name;
    std::vector<Vec3> control;
    double radius = 1;
};

struct TumorSpec {
    Vec3 center{};
    double radius = 3;
    std::string side; // "left" or "right": the lung that must contain the centre
};

struct TissueIntensities {
    float background = 0.0f;
    float soft_tissue = 0.45f;
    float lung = 0.1f;
    float heart = 0.55f;
    float vessel = 0.62f;
    float airway = 0.02f;
    float cord = 0.75f;
    float tumor = 0.7f;
};

struct PhantomSpec {
    Extents extents{24, 32, 32};
    Spacing spacing{3.0, 2.0, 2.0};
    Ellipsoid body;
    Ellipsoid left_lung, right_lung;
    Ellipsoid heart;
    Cylinder cord;
    std::vector<TubeSpec> tubes; // named like structures::tubes()
    std::vector<TumorSpec> tumors; // at most 2
    TissueIntensities intensity;
    double noise_sigma = 0.01;
    uint64_t seed = 0;

    // Anatomy scaled to the extents, no tumours.
    static PhantomSpec standard(Extents e = {24, 32, 32});
    // Throws std::invalid_argument on radii <= 0, structures outside the grid,
    // more than 2 tumours, or a tumour centre outside its lung.
    void validate() const;
};

struct Phantom {
    Volume image;                      // intensities in [0, 1]
    std::map<std::string, Mask> masks; // body, organs, tubes and "tumor" (possibly empty)
};

Phantom generate_phantom(const PhantomSpec &spec);

// Centre of a lung ellipsoid shifted by (dz, dh, dw) as a fraction of its radii.
Vec3 lung_point(const PhantomSpec &spec, const std::string &side, Vec3 offset);

struct PairOptions {
    // Max displacement (voxels) of the known SVF warping moving anatomy onto
    // the fixed grid; 0 keeps the anatomy identical.
    double svf_magnitude = 0;
    double svf_sigma = 4;
    // Without a known SVF, the fixed anatomy can instead be rasterised from a
    // spec whose centres and radii are jittered by up to this many voxels.
    double anatomy_jitter = 0;
    std::vector<TumorSpec> moving_tumors;
    std::vector<TumorSpec> fixed_tumors;
    bool with_dose = true;
    uint64_t seed = 0;
};

struct SyntheticPair {
    RegistrationPair pair;         // moving/fixed images and tumour masks
    std::map<std::string, Mask> moving_masks, fixed_masks;
    std::optional<Volume> dose;    // planned dose on the moving grid
    std::optional<Tensor> svf;     // ground truth: fixed = moving warped by exp(svf)
};

SyntheticPair synth_pair(const PhantomSpec &base, const PairOptions &opt);

// Scenario presets used by the CLI and the acceptance checks.
enum class TumorScenario { none, moving_only, fixed_only, non_corresponding };
TumorScenario scenario_from_name(const std::string &name);
std::string scenario_name(TumorScenario s);

// Pair `index` of a seeded phantom set: known SVF, tumours per scenario with
// seeded positions inside the lungs.
SyntheticPair make_phantom_pair(const PhantomSpec &base, TumorScenario scenario, double svf_magnitude, uint64_t seed,
                                int index);

// Smooth dose: `prescription` in a Gaussian shell around `target`, falling off with distance.
Volume synthetic_dose(Extents e, Vec3 target, double radius, double prescription = 60.0);

} // namespace tracer
