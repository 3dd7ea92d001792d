// sampling.cpp - trilinear resampling primitives and finite differences.

#include "tracer/tensor.hpp"

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>

namespace tracer {

namespace {

// Linear interpolation stencil along one axis for a clamped coordinate.
struct Stencil {
    int64_t i0 = 0;
    int64_t i1 = 0;
    float f = 0.0f;      // weight of i1
    bool inside = false; // coordinate was not clamped, derivative is non-zero
};

inline Stencil stencil(float q, int64_t n) {
    Stencil s;
    if (n == 1) return s;
    const float hi = static_cast<float>(n - 1);
    s.inside = q >= 0.0f && q <= hi;
    q = std::clamp(q, 0.0f, hi);
    int64_t i0 = static_cast<int64_t>(std::floor(q));
    if (i0 >= n - 1) i0 = n - 2;
    s.i0 = i0;
    s.i1 = i0 + 1;
    s.f = q - static_cast<float>(i0);
    return s;
}

std::vector<Stencil> axis_stencils(int64_t in, int64_t out) {
    std::vector<Stencil> st(static_cast<size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) st[static_cast<size_t>(o)] = stencil(static_cast<float>(o * ratio), in);
    return st;
}

void require_spatial(const Tensor &t, const char *what) {
    if (t.rank() != 4) throw dimension_error(std::string(what) + ": expected [C,D,H,W], got " + shape_str(t.shape()));
}

} // namespace

Tensor resize_trilinear(const Tensor &input, Extents target) {
    require_spatial(input, "resize_trilinear");
    const auto C = input.dim(0);
    const Extents src = input.extents();
    if (target.d <= 0 || target.h <= 0 || target.w <= 0) throw dimension_error("resize_trilinear: empty target");
    const auto sz = axis_stencils(src.d, target.d);
    const auto sy = axis_stencils(src.h, target.h);
    const auto sx = axis_stencils(src.w, target.w);

    const int64_t in_vox = src.voxels();
    const int64_t out_vox = target.voxels();
    std::vector<float> out(static_cast<size_t>(C * out_vox));
    const auto in = input.data();
    for (int64_t c = 0; c < C; ++c) {
        const float *p = in.data() + c * in_vox;
        float *o = out.data() + c * out_vox;
        for (int64_t z = 0; z < target.d; ++z) {
            const auto &a = sz[static_cast<size_t>(z)];
            for (int64_t y = 0; y < target.h; ++y) {
                const auto &b = sy[static_cast<size_t>(y)];
                const float *r00 = p + (a.i0 * src.h + b.i0) * src.w;
                const float *r01 = p + (a.i0 * src.h + b.i1) * src.w;
                const float *r10 = p + (a.i1 * src.h + b.i0) * src.w;
                const float *r11 = p + (a.i1 * src.h + b.i1) * src.w;
                const float w00 = (1 - a.f) * (1 - b.f), w01 = (1 - a.f) * b.f;
                const float w10 = a.f * (1 - b.f), w11 = a.f * b.f;
                for (int64_t x = 0; x < target.w; ++x) {
                    const auto &s = sx[static_cast<size_t>(x)];
                    const float lo = w00 * r00[s.i0] + w01 * r01[s.i0] + w10 * r10[s.i0] + w11 * r11[s.i0];
                    const float hi = w00 * r00[s.i1] + w01 * r01[s.i1] + w10 * r10[s.i1] + w11 * r11[s.i1];
                    o[(z * target.h + y) * target.w + x] = (1 - s.f) * lo + s.f * hi;
                }
            }
        }
    }

    return make_op("resize_trilinear", {C, target.d, target.h, target.w}, std::move(out), {input},
                   [=](detail::Node &self) {
                       auto &g = self.parents[0]->ensure_grad();
                       for (int64_t c = 0; c < C; ++c) {
                           float *p = g.data() + c * in_vox;
                           const float *go = self.grad.data() + c * out_vox;
                           for (int64_t z = 0; z < target.d; ++z) {
                               const auto &a = sz[static_cast<size_t>(z)];
                               for (int64_t y = 0; y < target.h; ++y) {
                                   const auto &b = sy[static_cast<size_t>(y)];
                                   float *r00 = p + (a.i0 * src.h + b.i0) * src.w;
                                   float *r01 = p + (a.i0 * src.h + b.i1) * src.w;
                                   float *r10 = p + (a.i1 * src.h + b.i0) * src.w;
                                   float *r11 = p + (a.i1 * src.h + b.i1) * src.w;
                                   const float w00 = (1 - a.f) * (1 - b.f), w01 = (1 - a.f) * b.f;
                                   const float w10 = a.f * (1 - b.f), w11 = a.f * b.f;
                                   for (int64_t x = 0; x < target.w; ++x) {
                                       const auto &s = sx[static_cast<size_t>(x)];
                                       const float gv = go[(z * target.h + y) * target.w + x];
                                       const float lo = (1 - s.f) * gv, hi = s.f * gv;
                                       r00[s.i0] += w00 * lo;
                                       r01[s.i0] += w01 * lo;
                                       r10[s.i0] += w10 * lo;
                                       r11[s.i0] += w11 * lo;
                                       r00[s.i1] += w00 * hi;
                                       r01[s.i1] += w01 * hi;
                                       r10[s.i1] += w10 * hi;
                                       r11[s.i1] += w11 * hi;
                                   }
                               }
                           }
                       }
                   });
}

Tensor upsample2x_trilinear(const Tensor &input) {
    require_spatial(input, "upsample2x_trilinear");
    const auto e = input.extents();
    return resize_trilinear(input, {2 * e.d, 2 * e.h, 2 * e.w});
}

namespace {

// Per-voxel trilinear footprint: corner 000 index plus axis fractions. The
// other corners sit at fixed strides (zero along singleton axes).
struct Footprint {
    int32_t base;
    float fz, fy, fx;
    uint8_t inside; // bit 0: z, bit 1: y, bit 2: x
};

std::vector<Footprint> footprints(Extents e, std::span<const float> u) {
    const int64_t nv = e.voxels();
    std::vector<Footprint> fp(static_cast<size_t>(nv));
    for (int64_t z = 0, v = 0; z < e.d; ++z) {
        for (int64_t y = 0; y < e.h; ++y) {
            for (int64_t x = 0; x < e.w; ++x, ++v) {
                const auto a = stencil(static_cast<float>(z) + u[v], e.d);
                const auto b = stencil(static_cast<float>(y) + u[nv + v], e.h);
                const auto s = stencil(static_cast<float>(x) + u[2 * nv + v], e.w);
                auto &f = fp[static_cast<size_t>(v)];
                f.base = static_cast<int32_t>((a.i0 * e.h + b.i0) * e.w + s.i0);
                f.fz = a.f;
                f.fy = b.f;
                f.fx = s.f;
                f.inside = static_cast<uint8_t>((a.inside ? 1 : 0) | (b.inside ? 2 : 0) | (s.inside ? 4 : 0));
            }
        }
    }
    return fp;
}

} // namespace

Tensor grid_sample(const Tensor &input, const Tensor &dvf) {
    require_spatial(input, "grid_sample");
    require_spatial(dvf, "grid_sample");
    if (dvf.dim(0) != 3) throw dimension_error("grid_sample: displacement field must have 3 channels");
    const Extents e = input.extents();
    require_same_extents(e, dvf.extents(), "grid_sample");
    if (e.voxels() > INT32_MAX) throw dimension_error("grid_sample: volume too large");
    const int64_t C = input.dim(0);
    const int64_t nv = e.voxels();
    const auto in = input.data();
    const int64_t sz = e.d > 1 ? e.h * e.w : 0, sy = e.h > 1 ? e.w : 0, sx = e.w > 1 ? 1 : 0;

    auto fp = std::make_shared<std::vector<Footprint>>(footprints(e, dvf.data()));
    std::vector<float> out(static_cast<size_t>(C * nv));
    for (int64_t c = 0; c < C; ++c) {
        const float *p = in.data() + c * nv;
        float *o = out.data() + c * nv;
        for (int64_t v = 0; v < nv; ++v) {
            const Footprint &f = (*fp)[static_cast<size_t>(v)];
            const float *q = p + f.base;
            // Weighted form keeps f = 1 exact at the upper edge.
            const float ax = 1 - f.fx, ay = 1 - f.fy;
            const float l00 = ax * q[0] + f.fx * q[sx];
            const float l01 = ax * q[sy] + f.fx * q[sy + sx];
            const float l10 = ax * q[sz] + f.fx * q[sz + sx];
            const float l11 = ax * q[sz + sy] + f.fx * q[sz + sy + sx];
            o[v] = (1 - f.fz) * (ay * l00 + f.fy * l01) + f.fz * (ay * l10 + f.fy * l11);
        }
    }

    return make_op("grid_sample", input.shape(), std::move(out), {input, dvf},
                   [fp, C, nv, sz, sy, sx](detail::Node &self) {
        auto &pin = self.parents[0];
        auto &pu = self.parents[1];
        float *gin = pin->requires_grad ? pin->ensure_grad().data() : nullptr;
        float *gu = pu->requires_grad ? pu->ensure_grad().data() : nullptr;
        for (int64_t c = 0; c < C; ++c) {
            const float *p = pin->data.data() + c * nv;
            const float *go = self.grad.data() + c * nv;
            float *gi = gin ? gin + c * nv : nullptr;
            for (int64_t v = 0; v < nv; ++v) {
                const float g = go[v];
                if (g == 0.0f) continue;
                const Footprint &f = (*fp)[static_cast<size_t>(v)];
                if (gi) {
                    float *q = gi + f.base;
                    const float w0 = g * (1 - f.fz), w1 = g * f.fz;
                    const float w00 = w0 * (1 - f.fy), w01 = w0 * f.fy, w10 = w1 * (1 - f.fy), w11 = w1 * f.fy;
                    const float ax = 1 - f.fx;
                    q[0] += w00 * ax;
                    q[sx] += w00 * f.fx;
                    q[sy] += w01 * ax;
                    q[sy + sx] += w01 * f.fx;
                    q[sz] += w10 * ax;
                    q[sz + sx] += w10 * f.fx;
                    q[sz + sy] += w11 * ax;
                    q[sz + sy + sx] += w11 * f.fx;
                }
                if (gu) {
                    const float *q = p + f.base;
                    const float c000 = q[0], c001 = q[sx], c010 = q[sy], c011 = q[sy + sx];
                    const float c100 = q[sz], c101 = q[sz + sx], c110 = q[sz + sy], c111 = q[sz + sy + sx];
                    const float ax = 1 - f.fx;
                    const float l00 = ax * c000 + f.fx * c001, l01 = ax * c010 + f.fx * c011;
                    const float l10 = ax * c100 + f.fx * c101, l11 = ax * c110 + f.fx * c111;
                    if (f.inside & 1) gu[v] += g * ((1 - f.fy) * (l10 - l00) + f.fy * (l11 - l01));
                    if (f.inside & 2) gu[nv + v] += g * ((1 - f.fz) * (l01 - l00) + f.fz * (l11 - l10));
                    if (f.inside & 4) {
                        const float d0 = (1 - f.fy) * (c001 - c000) + f.fy * (c011 - c010);
                        const float d1 = (1 - f.fy) * (c101 - c100) + f.fy * (c111 - c110);
                        gu[2 * nv + v] += g * ((1 - f.fz) * d0 + f.fz * d1);
                    }
                }
            }
        }
    });
}

Tensor finite_difference(const Tensor &input, int axis) {
    require_spatial(input, "finite_difference");
    if (axis < 0 || axis > 2) throw std::invalid_argument("finite_difference: axis must be 0, 1 or 2");
    const Extents e = input.extents();
    const int64_t n = e[axis];
    if (n < 2) throw dimension_error("finite_difference: need at least 2 samples along the axis");
    const int64_t stride = axis == 0 ? e.h * e.w : (axis == 1 ? e.w : 1);
    const int64_t C = input.dim(0);
    const int64_t nv = e.voxels();
    // Flat index = (outer * n + i) * stride + inner.
    const int64_t outer = C * nv / (n * stride);
    const auto in = input.data();
    std::vector<float> out(in.size());

    for (int64_t o = 0; o < outer; ++o) {
        const float *p = in.data() + o * n * stride;
        float *r = out.data() + o * n * stride;
        for (int64_t k = 0; k < stride; ++k) r[k] = p[stride + k] - p[k];
        for (int64_t i = 1; i < n - 1; ++i) {
            const int64_t b = i * stride;
            for (int64_t k = 0; k < stride; ++k) r[b + k] = 0.5f * (p[b + stride + k] - p[b - stride + k]);
        }
        const int64_t last = (n - 1) * stride;
        for (int64_t k = 0; k < stride; ++k) r[last + k] = p[last + k] - p[last - stride + k];
    }
    return make_op("finite_difference", input.shape(), std::move(out), {input}, [=](detail::Node &self) {
        auto &gv = self.parents[0]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            float *g = gv.data() + o * n * stride;
            const float *go = self.grad.data() + o * n * stride;
            for (int64_t k = 0; k < stride; ++k) {
                g[stride + k] += go[k];
                g[k] -= go[k];
            }
            for (int64_t i = 1; i < n - 1; ++i) {
                const int64_t b = i * stride;
                for (int64_t k = 0; k < stride; ++k) {
                    g[b + stride + k] += 0.5f * go[b + k];
                    g[b - stride + k] -= 0.5f * go[b + k];
                }
            }
            const int64_t last = (n - 1) * stride;
            for (int64_t k = 0; k < stride; ++k) {
                g[last + k] += go[last + k];
                g[last - stride + k] -= go[last + k];
            }
        }
    });
}

} // namespace tracer
