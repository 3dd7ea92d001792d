// volume_ops.cpp

#include "tracer/volume_ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace tracer {

Volume gaussian_blur(const Volume &vol, double sigma) {
    if (sigma <= 0.0) return vol;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(static_cast<size_t>(2 * radius + 1));
    double norm = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[static_cast<size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
        norm += kernel[static_cast<size_t>(i + radius)];
    }
    for (auto &k : kernel) k /= norm;

    const Extents e = vol.extents;
    Volume out = vol;
    std::vector<float> line;
    for (int axis = 0; axis < 3; ++axis) {
        const int64_t n = e[axis];
        const int64_t stride = axis == 0 ? e.h * e.w : (axis == 1 ? e.w : 1);
        line.resize(static_cast<size_t>(n));
        for (int64_t c = 0; c < vol.channels; ++c) {
            float *base = out.voxels.data() + c * e.voxels();
            for (int64_t v = 0; v < e.voxels(); ++v) {
                if ((v / stride) % n != 0) continue; // start of a line
                for (int64_t i = 0; i < n; ++i) line[static_cast<size_t>(i)] = base[v + i * stride];
                for (int64_t i = 0; i < n; ++i) {
                    double acc = 0.0;
                    for (int k = -radius; k <= radius; ++k) {
                        const int64_t j = std::clamp<int64_t>(i + k, 0, n - 1);
                        acc += kernel[static_cast<size_t>(k + radius)] * line[static_cast<size_t>(j)];
                    }
                    base[v + i * stride] = static_cast<float>(acc);
                }
            }
        }
    }
    return out;
}

Volume binarize(const Volume &vol, float threshold) {
    Volume out = vol;
    for (auto &v : out.voxels) v = v >= threshold ? 1.0f : 0.0f;
    return out;
}

double max_abs(const Volume &vol) {
    double m = 0.0;
    for (float v : vol.voxels) m = std::max(m, static_cast<double>(std::abs(v)));
    return m;
}

double mean_abs_difference(const Volume &a, const Volume &b) {
    require_same_extents(a.extents, b.extents, "mean_abs_difference");
    if (a.voxels.size() != b.voxels.size()) throw dimension_error("mean_abs_difference: channel mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.voxels.size(); ++i) acc += std::abs(static_cast<double>(a.voxels[i]) - b.voxels[i]);
    return a.voxels.empty() ? 0.0 : acc / static_cast<double>(a.voxels.size());
}

} // namespace tracer
