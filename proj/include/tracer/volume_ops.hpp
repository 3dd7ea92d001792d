// volume_ops.hpp - small non-differentiable helpers on plain volumes.
#pragma once

#include "tracer/volume.hpp"

namespace tracer {

// Separable Gaussian smoothing per channel (sigma in voxels), edges replicated.
Volume gaussian_blur(const Volume &vol, double sigma);

// Binarises at threshold (>=).
Volume binarize(const Volume &vol, float threshold = 0.5f);

double max_abs(const Volume &vol);
double mean_abs_difference(const Volume &a, const Volume &b);

} // namespace tracer
