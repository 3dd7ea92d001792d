// deformation.hpp - stationary velocity fields and dense displacement algebra.
//
// All fields are displacements in voxel units, stored as [3, D, H, W] tensors
// with components ordered (d, h, w). A field phi maps output voxel p to the
// sampling location p + phi(p); warping an image I by phi gives I(p + phi(p)).
#pragma once

#include <cstdint>

#include "tracer/tensor.hpp"
#include "tracer/volume.hpp"

namespace tracer {

struct VelocityField {
    Tensor v;

    Extents extents() const { return v.extents(); }
    static VelocityField zeros(Extents e, bool requires_grad = false);
};

struct DeformationField {
    Tensor disp;

    Extents extents() const { return disp.extents(); }
    static DeformationField identity(Extents e);
    static DeformationField from_volume(const Volume &field);
    Volume to_volume(Spacing spacing = {}) const { return disp.to_volume(spacing); }
};

// Scaling and squaring: disp_0 = v / 2^n_int followed by n_int self-compositions.
DeformationField exp_svf(const VelocityField &velocity, int n_int = 7);

// exp(-v), the approximate inverse of exp_svf(v).
DeformationField invert_svf(const VelocityField &velocity, int n_int = 7);

// Field whose warp equals warping by `outer` first and then by `inner`:
// result(p) = inner(p) + outer(p + inner(p)).
DeformationField compose(const DeformationField &outer, const DeformationField &inner);

// det(I + grad disp) per voxel as a [1, D, H, W] tensor; central differences
// in the interior and one-sided differences on boundary planes.
Tensor jacobian_det(const DeformationField &phi);
Volume jacobian_det_volume(const DeformationField &phi, Spacing spacing = {});

// Trilinear warps. Sample coordinates are clamped to the grid.
Tensor warp_image(const Tensor &image, const DeformationField &phi);
Volume warp_image(const Volume &image, const DeformationField &phi);

// Warps a {0,1} mask trilinearly and binarises it. Values exactly at the
// threshold (half-voxel shifts) take the nearest source voxel, rounding half up,
// so translations keep the mask volume.
Volume warp_mask(const Volume &mask, const DeformationField &phi, float threshold = 0.5f);

// Gaussian-smoothed white noise rescaled so that max |v| equals max_magnitude.
VelocityField random_smooth_velocity(Extents e, double max_magnitude, double sigma_voxels, uint64_t seed);

// Largest displacement magnitude over voxels at least `margin` voxels from every face.
double max_interior_magnitude(const DeformationField &phi, int64_t margin = 0);
double mean_magnitude(const DeformationField &phi);

} // namespace tracer
