// deformation.cpp

#include "tracer/deformation.hpp"

#include <algorithm>
#include <cmath>

#include "tracer/random.hpp"
#include "tracer/volume_ops.hpp"

namespace tracer {

namespace {

void require_field(const Tensor &t, const char *what) {
    if (!t.defined() || t.rank() != 4 || t.dim(0) != 3) {
        throw dimension_error(std::string(what) + ": expected a [3,D,H,W] field");
    }
}

} // namespace

VelocityField VelocityField::zeros(Extents e, bool requires_grad) {
    return {Tensor::zeros({3, e.d, e.h, e.w}, requires_grad)};
}

DeformationField DeformationField::identity(Extents e) { return {Tensor::zeros({3, e.d, e.h, e.w})}; }

DeformationField DeformationField::from_volume(const Volume &field) {
    if (field.channels != 3) throw dimension_error("deformation field volume must have 3 channels");
    return {Tensor::from_volume(field)};
}

DeformationField exp_svf(const VelocityField &velocity, int n_int) {
    require_field(velocity.v, "exp_svf");
    if (n_int < 1) throw std::invalid_argument("exp_svf: n_int must be >= 1");
    Tensor disp = scale(velocity.v, 1.0f / static_cast<float>(1u << n_int));
    for (int i = 0; i < n_int; ++i) disp = add(disp, grid_sample(disp, disp));
    return {disp};
}

DeformationField invert_svf(const VelocityField &velocity, int n_int) {
    require_field(velocity.v, "invert_svf");
    return exp_svf({scale(velocity.v, -1.0f)}, n_int);
}

DeformationField compose(const DeformationField &outer, const DeformationField &inner) {
    require_field(outer.disp, "compose");
    require_field(inner.disp, "compose");
    require_same_extents(outer.extents(), inner.extents(), "compose");
    return {add(inner.disp, grid_sample(outer.disp, inner.disp))};
}

Tensor jacobian_det(const DeformationField &phi) {
    require_field(phi.disp, "jacobian_det");
    const Extents e = phi.extents();
    if (e.d < 3 || e.h < 3 || e.w < 3) throw dimension_error("jacobian_det: need at least 3 voxels per axis");
    // a[i][j] = d u_i / d x_j
    Tensor a[3][3];
    for (int j = 0; j < 3; ++j) {
        const Tensor dj = finite_difference(phi.disp, j);
        for (int i = 0; i < 3; ++i) a[i][j] = slice_channels(dj, i, i + 1);
    }
    const Tensor j00 = add_scalar(a[0][0], 1.0f), j11 = add_scalar(a[1][1], 1.0f), j22 = add_scalar(a[2][2], 1.0f);
    const Tensor m0 = sub(mul(j11, j22), mul(a[1][2], a[2][1]));
    const Tensor m1 = sub(mul(a[1][0], j22), mul(a[1][2], a[2][0]));
    const Tensor m2 = sub(mul(a[1][0], a[2][1]), mul(j11, a[2][0]));
    return add(sub(mul(j00, m0), mul(a[0][1], m1)), mul(a[0][2], m2));
}

Volume jacobian_det_volume(const DeformationField &phi, Spacing spacing) {
    NoGradGuard ng;
    return jacobian_det(phi).to_volume(spacing);
}

Tensor warp_image(const Tensor &image, const DeformationField &phi) { return grid_sample(image, phi.disp); }

Volume warp_image(const Volume &image, const DeformationField &phi) {
    require_same_extents(image.extents, phi.extents(), "warp_image");
    NoGradGuard ng;
    return grid_sample(Tensor::from_volume(image), phi.disp).to_volume(image.spacing);
}

Volume warp_mask(const Volume &mask, const DeformationField &phi, float threshold) {
    Volume soft = warp_image(mask, phi);
    const Extents e = soft.extents;
    const auto u = phi.disp.data();
    const int64_t nv = e.voxels();
    const int64_t n[3] = {e.d, e.h, e.w};
    for (int64_t c = 0; c < soft.channels; ++c)
        for (int64_t z = 0, v = 0; z < e.d; ++z)
            for (int64_t y = 0; y < e.h; ++y)
                for (int64_t x = 0; x < e.w; ++x, ++v) {
                    float &val = soft.at(z, y, x, c);
                    if (val > threshold) {
                        val = 1.0f;
                    } else if (val < threshold) {
                        val = 0.0f;
                    } else {
                        // Tie: nearest neighbour with half-up rounding.
                        const double q[3] = {z + u[v], y + u[nv + v], x + u[2 * nv + v]};
                        int64_t r[3];
                        for (int a = 0; a < 3; ++a)
                            r[a] = std::clamp<int64_t>(static_cast<int64_t>(std::floor(q[a] + 0.5)), 0, n[a] - 1);
                        val = mask.at(r[0], r[1], r[2], c) > threshold ? 1.0f : 0.0f;
                    }
                }
    return soft;
}

VelocityField random_smooth_velocity(Extents e, double max_magnitude, double sigma_voxels, uint64_t seed) {
    // Noise is drawn on a grid padded by the blur radius and cropped, so the
    // field is equally smooth at the faces and in the middle.
    const auto pad = static_cast<int64_t>(std::ceil(3.0 * sigma_voxels));
    const Extents g{e.d + 2 * pad, e.h + 2 * pad, e.w + 2 * pad};
    Rng rng(seed);
    Volume noise(g, {}, 3);
    for (auto &v : noise.voxels) v = static_cast<float>(rng.normal());
    const Volume smooth = gaussian_blur(noise, sigma_voxels);

    const int64_t nv = e.voxels();
    std::vector<float> out(static_cast<size_t>(3 * nv));
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t z = 0; z < e.d; ++z)
            for (int64_t y = 0; y < e.h; ++y)
                for (int64_t x = 0; x < e.w; ++x)
                    out[static_cast<size_t>(c * nv + (z * e.h + y) * e.w + x)] = smooth.at(z + pad, y + pad, x + pad, c);
    double peak = 0.0;
    for (int64_t i = 0; i < nv; ++i) {
        const double a = out[i], b = out[nv + i], c = out[2 * nv + i];
        peak = std::max(peak, std::sqrt(a * a + b * b + c * c));
    }
    const double s = peak > 0 ? max_magnitude / peak : 0.0;
    for (auto &v : out) v = static_cast<float>(v * s);
    return {Tensor::from_data({3, e.d, e.h, e.w}, std::move(out))};
}

double max_interior_magnitude(const DeformationField &phi, int64_t margin) {
    const Extents e = phi.extents();
    const auto u = phi.disp.data();
    const int64_t nv = e.voxels();
    double best = 0.0;
    for (int64_t z = margin; z < e.d - margin; ++z)
        for (int64_t y = margin; y < e.h - margin; ++y)
            for (int64_t x = margin; x < e.w - margin; ++x) {
                const int64_t v = (z * e.h + y) * e.w + x;
                const double a = u[v], b = u[nv + v], c = u[2 * nv + v];
                best = std::max(best, std::sqrt(a * a + b * b + c * c));
            }
    return best;
}

double mean_magnitude(const DeformationField &phi) {
    const auto u = phi.disp.data();
    const int64_t nv = phi.extents().voxels();
    double acc = 0.0;
    for (int64_t v = 0; v < nv; ++v) {
        const double a = u[v], b = u[nv + v], c = u[2 * nv + v];
        acc += std::sqrt(a * a + b * b + c * c);
    }
    return acc / static_cast<double>(nv);
}

} // namespace tracer
