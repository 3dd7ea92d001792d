// preprocess.cpp - body crop with margin, resampling and its inverse.

#include <algorithm>
#include <cmath>

#include "tracer/dataio.hpp"
#include "tracer/volume_ops.hpp"

namespace tracer {

namespace {

// Voxel-centre aligned linear weights along one axis: output o samples input
// coordinate (o + 0.5) * n_in / n_out - 0.5, clamped to the grid.
struct Tap {
    int64_t i0, i1;
    float f;
};

std::vector<Tap> taps(int64_t in, int64_t out) {
    std::vector<Tap> t(static_cast<size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
        const double q = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
        const auto i0 = std::min<int64_t>(static_cast<int64_t>(std::floor(q)), std::max<int64_t>(in - 2, 0));
        const int64_t i1 = std::min(i0 + 1, in - 1);
        t[static_cast<size_t>(o)] = {i0, i1, static_cast<float>(q - static_cast<double>(i0))};
    }
    return t;
}

} // namespace

Volume resample(const Volume &vol, Extents target) {
    if (target.d <= 0 || target.h <= 0 || target.w <= 0) throw dimension_error("resample: empty target extents");
    const Extents e = vol.extents;
    Spacing s = vol.spacing;
    s.d *= static_cast<double>(e.d) / static_cast<double>(target.d);
    s.h *= static_cast<double>(e.h) / static_cast<double>(target.h);
    s.w *= static_cast<double>(e.w) / static_cast<double>(target.w);
    Volume out(target, s, vol.channels);
    if (target == e) {
        out.voxels = vol.voxels;
        return out;
    }
    const auto tz = taps(e.d, target.d), ty = taps(e.h, target.h), tx = taps(e.w, target.w);
    for (int64_t c = 0; c < vol.channels; ++c)
        for (int64_t z = 0; z < target.d; ++z) {
            const Tap &a = tz[static_cast<size_t>(z)];
            for (int64_t y = 0; y < target.h; ++y) {
                const Tap &b = ty[static_cast<size_t>(y)];
                for (int64_t x = 0; x < target.w; ++x) {
                    const Tap &t = tx[static_cast<size_t>(x)];
                    auto line = [&](int64_t zz, int64_t yy) {
                        return (1 - t.f) * vol.at(zz, yy, t.i0, c) + t.f * vol.at(zz, yy, t.i1, c);
                    };
                    const float lo = (1 - b.f) * line(a.i0, b.i0) + b.f * line(a.i0, b.i1);
                    const float hi = (1 - b.f) * line(a.i1, b.i0) + b.f * line(a.i1, b.i1);
                    out.at(z, y, x, c) = (1 - a.f) * lo + a.f * hi;
                }
            }
        }
    return out;
}

Mask resample_mask(const Mask &mask, Extents target) {
    if (target == mask.extents) return resample(mask, target);
    return binarize(resample(mask, target), 0.5f);
}

namespace {

Volume crop(const Volume &v, const std::array<int64_t, 3> &lo, Extents c) {
    Volume out(c, v.spacing, v.channels);
    for (int64_t ch = 0; ch < v.channels; ++ch)
        for (int64_t z = 0; z < c.d; ++z)
            for (int64_t y = 0; y < c.h; ++y)
                for (int64_t x = 0; x < c.w; ++x) out.at(z, y, x, ch) = v.at(z + lo[0], y + lo[1], x + lo[2], ch);
    return out;
}

} // namespace

Preprocessed preprocess(const Volume &image, const std::map<std::string, Mask> &masks, const PreprocessOptions &opt) {
    const Extents e = image.extents;
    for (const auto &[name, m] : masks) require_same_extents(e, m.extents, ("preprocess: mask " + name).c_str());
    if (opt.margin_mm < 0) throw std::invalid_argument("preprocess: margin must be >= 0");

    std::array<int64_t, 3> lo{e.d, e.h, e.w}, hi{-1, -1, -1};
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                if (!(image.at(z, y, x) > opt.body_threshold)) continue;
                const int64_t p[3] = {z, y, x};
                for (int a = 0; a < 3; ++a) {
                    lo[a] = std::min(lo[a], p[a]);
                    hi[a] = std::max(hi[a], p[a]);
                }
            }
    if (hi[0] < 0) throw std::invalid_argument("preprocess: empty body region (no voxel above the threshold)");

    CropResample t;
    t.original = e;
    t.original_spacing = image.spacing;
    t.target = opt.target;
    for (int a = 0; a < 3; ++a) {
        const auto grow = static_cast<int64_t>(std::ceil(opt.margin_mm / image.spacing[a] - 1e-9));
        lo[a] = std::max<int64_t>(0, lo[a] - grow);
        hi[a] = std::min<int64_t>(e[a] - 1, hi[a] + grow);
    }
    t.lo = lo;
    t.crop = {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1};

    Preprocessed out;
    out.transform = t;
    out.image = resample(crop(image, lo, t.crop), t.target);
    for (const auto &[name, m] : masks) out.masks[name] = resample_mask(crop(m, lo, t.crop), t.target);
    return out;
}

Volume restore(const Volume &vol, const CropResample &t, bool is_mask) {
    if (vol.extents != t.target) throw dimension_error("restore: volume extents " + vol.extents.str() +
                                                       " do not match the preprocessing target " + t.target.str());
    const Volume back = is_mask ? resample_mask(vol, t.crop) : resample(vol, t.crop);
    Volume out(t.original, t.original_spacing, vol.channels);
    for (int64_t ch = 0; ch < vol.channels; ++ch)
        for (int64_t z = 0; z < t.crop.d; ++z)
            for (int64_t y = 0; y < t.crop.h; ++y)
                for (int64_t x = 0; x < t.crop.w; ++x)
                    out.at(z + t.lo[0], y + t.lo[1], x + t.lo[2], ch) = back.at(z, y, x, ch);
    return out;
}

} // namespace tracer
