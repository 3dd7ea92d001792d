// conv.cpp - 3D convolution by im2col + sgemm, and per-channel bias.

#include "tracer/tensor.hpp"

#include <algorithm>
#include <cstring>

#include <cblas.h>

namespace tracer {

namespace {

struct ConvGeometry {
    int64_t cin, d, h, w;
    int64_t k, stride, pad;
    int64_t od, oh, ow;

    int64_t rows() const { return cin * k * k * k; }
    int64_t cols() const { return od * oh * ow; }
};

// col[(ci, kz, ky, kx), (oz, oy, ox)] = input[ci, oz*s - p + kz, oy*s - p + ky, ox*s - p + kx]
void im2col(const float *in, const ConvGeometry &g, float *col) {
    const int64_t ncols = g.cols();
    int64_t row = 0;
    for (int64_t ci = 0; ci < g.cin; ++ci) {
        const float *plane = in + ci * g.d * g.h * g.w;
        for (int64_t kz = 0; kz < g.k; ++kz) {
            for (int64_t ky = 0; ky < g.k; ++ky) {
                for (int64_t kx = 0; kx < g.k; ++kx, ++row) {
                    float *dst = col + row * ncols;
                    for (int64_t oz = 0; oz < g.od; ++oz) {
                        const int64_t iz = oz * g.stride - g.pad + kz;
                        for (int64_t oy = 0; oy < g.oh; ++oy) {
                            float *out = dst + (oz * g.oh + oy) * g.ow;
                            const int64_t iy = oy * g.stride - g.pad + ky;
                            if (iz < 0 || iz >= g.d || iy < 0 || iy >= g.h) {
                                std::fill(out, out + g.ow, 0.0f);
                                continue;
                            }
                            const float *src = plane + (iz * g.h + iy) * g.w;
                            if (g.stride == 1) {
                                const int64_t x0 = std::max<int64_t>(0, g.pad - kx);
                                const int64_t x1 = std::min<int64_t>(g.ow, g.w + g.pad - kx);
                                std::fill(out, out + std::min(x0, g.ow), 0.0f);
                                if (x1 > x0) std::memcpy(out + x0, src + x0 - g.pad + kx, sizeof(float) * (x1 - x0));
                                if (x1 < g.ow) std::fill(out + std::max<int64_t>(x1, 0), out + g.ow, 0.0f);
                            } else {
                                for (int64_t ox = 0; ox < g.ow; ++ox) {
                                    const int64_t ix = ox * g.stride - g.pad + kx;
                                    out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0f;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void col2im(const float *col, const ConvGeometry &g, float *in_grad) {
    const int64_t ncols = g.cols();
    int64_t row = 0;
    for (int64_t ci = 0; ci < g.cin; ++ci) {
        float *plane = in_grad + ci * g.d * g.h * g.w;
        for (int64_t kz = 0; kz < g.k; ++kz) {
            for (int64_t ky = 0; ky < g.k; ++ky) {
                for (int64_t kx = 0; kx < g.k; ++kx, ++row) {
                    const float *src_row = col + row * ncols;
                    for (int64_t oz = 0; oz < g.od; ++oz) {
                        const int64_t iz = oz * g.stride - g.pad + kz;
                        if (iz < 0 || iz >= g.d) continue;
                        for (int64_t oy = 0; oy < g.oh; ++oy) {
                            const int64_t iy = oy * g.stride - g.pad + ky;
                            if (iy < 0 || iy >= g.h) continue;
                            const float *src = src_row + (oz * g.oh + oy) * g.ow;
                            float *dst = plane + (iz * g.h + iy) * g.w;
                            for (int64_t ox = 0; ox < g.ow; ++ox) {
                                const int64_t ix = ox * g.stride - g.pad + kx;
                                if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

bool is_pointwise(const ConvGeometry &g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

} // namespace

Tensor conv3d(const Tensor &input, const Tensor &kernel, int stride, int padding) {
    const auto &is = input.shape();
    const auto &ks = kernel.shape();
    if (is.size() != 4) throw dimension_error("conv3d: input must be [C,D,H,W], got " + shape_str(is));
    if (ks.size() != 5 || ks[2] != ks[3] || ks[3] != ks[4]) {
        throw dimension_error("conv3d: kernel must be [Cout,Cin,k,k,k], got " + shape_str(ks));
    }
    if (ks[1] != is[0]) {
        throw dimension_error("conv3d: kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
                              std::to_string(is[0]));
    }
    if (ks[2] % 2 == 0) throw dimension_error("conv3d: kernel size must be odd");
    if (stride != 1 && stride != 2) throw std::invalid_argument("conv3d: stride must be 1 or 2");
    if (padding < 0) throw std::invalid_argument("conv3d: negative padding");

    ConvGeometry g{is[0], is[1], is[2], is[3], ks[2], stride, padding, 0, 0, 0};
    auto out_extent = [&](int64_t n) { return (n + 2 * g.pad - g.k) / g.stride + 1; };
    g.od = out_extent(g.d);
    g.oh = out_extent(g.h);
    g.ow = out_extent(g.w);
    if (g.od <= 0 || g.oh <= 0 || g.ow <= 0) throw dimension_error("conv3d: kernel larger than padded input");

    const int64_t cout = ks[0];
    const int64_t K = g.rows();
    const int64_t N = g.cols();
    std::vector<float> out(static_cast<size_t>(cout * N));

    std::vector<float> col;
    const float *colp = input.data().data();
    if (!is_pointwise(g)) {
        col.resize(static_cast<size_t>(K * N));
        im2col(input.data().data(), g, col.data());
        colp = col.data();
    }
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(cout), static_cast<int>(N),
                static_cast<int>(K), 1.0f, kernel.data().data(), static_cast<int>(K), colp, static_cast<int>(N), 0.0f,
                out.data(), static_cast<int>(N));

    return make_op("conv3d", {cout, g.od, g.oh, g.ow}, std::move(out), {input, kernel}, [g, cout](detail::Node &self) {
        auto &in = self.parents[0];
        auto &w = self.parents[1];
        const int64_t K = g.rows();
        const int64_t N = g.cols();
        std::vector<float> col;
        const float *colp = in->data.data();
        if (w->requires_grad) {
            if (!is_pointwise(g)) {
                col.resize(static_cast<size_t>(K * N));
                im2col(in->data.data(), g, col.data());
                colp = col.data();
            }
            auto &gw = w->ensure_grad();
            cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(cout), static_cast<int>(K),
                        static_cast<int>(N), 1.0f, self.grad.data(), static_cast<int>(N), colp, static_cast<int>(N),
                        1.0f, gw.data(), static_cast<int>(K));
        }
        if (in->requires_grad) {
            auto &gi = in->ensure_grad();
            if (is_pointwise(g)) {
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K), static_cast<int>(N),
                            static_cast<int>(cout), 1.0f, w->data.data(), static_cast<int>(K), self.grad.data(),
                            static_cast<int>(N), 1.0f, gi.data(), static_cast<int>(N));
            } else {
                std::vector<float> dcol(static_cast<size_t>(K * N));
                cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K), static_cast<int>(N),
                            static_cast<int>(cout), 1.0f, w->data.data(), static_cast<int>(K), self.grad.data(),
                            static_cast<int>(N), 0.0f, dcol.data(), static_cast<int>(N));
                col2im(dcol.data(), g, gi.data());
            }
        }
    });
}

Tensor add_bias(const Tensor &input, const Tensor &bias) {
    const auto &s = input.shape();
    if (s.empty() || bias.numel() != s[0]) {
        throw dimension_error("add_bias: bias of " + std::to_string(bias.numel()) + " values for input " + shape_str(s));
    }
    const int64_t per = input.numel() / s[0];
    std::vector<float> out(input.data().begin(), input.data().end());
    const auto b = bias.data();
    for (int64_t c = 0; c < s[0]; ++c) {
        float *p = out.data() + c * per;
        for (int64_t i = 0; i < per; ++i) p[i] += b[static_cast<size_t>(c)];
    }
    return make_op("add_bias", s, std::move(out), {input, bias}, [per](detail::Node &self) {
        auto &in = self.parents[0];
        auto &b = self.parents[1];
        if (in->requires_grad) {
            auto &g = in->ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (b->requires_grad) {
            auto &g = b->ensure_grad();
            for (size_t c = 0; c < g.size(); ++c) {
                double acc = 0.0;
                const float *p = self.grad.data() + static_cast<int64_t>(c) * per;
                for (int64_t i = 0; i < per; ++i) acc += p[i];
                g[c] += static_cast<float>(acc);
            }
        }
    });
}

} // namespace tracer
