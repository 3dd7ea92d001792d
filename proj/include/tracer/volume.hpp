// volume.hpp - dense 3D grids shared by every module.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tracer {

// Grid extents in storage order: d (slowest, slices), h (rows), w (columns).
struct Extents {
    int64_t d = 0;
    int64_t h = 0;
    int64_t w = 0;

    int64_t voxels() const { return d * h * w; }
    int64_t operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    bool operator==(const Extents &) const = default;
    std::string str() const;
};

// Physical voxel size in millimetres, same axis order as Extents.
struct Spacing {
    double d = 1.0;
    double h = 1.0;
    double w = 1.0;

    double operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }
    bool operator==(const Spacing &) const = default;
};

// Plain (non-differentiable) multi-channel volume. Images and masks have one
// channel; vector fields have three (one per axis, d/h/w order).
struct Volume {
    Extents extents;
    Spacing spacing;
    int64_t channels = 1;
    std::vector<float> voxels;

    Volume() = default;
    Volume(Extents e, Spacing s = {}, int64_t c = 1, float fill = 0.0f)
        : extents(e), spacing(s), channels(c),
          voxels(static_cast<size_t>(c * e.voxels()), fill) {}

    size_t index(int64_t z, int64_t y, int64_t x, int64_t c = 0) const {
        return static_cast<size_t>(((c * extents.d + z) * extents.h + y) * extents.w + x);
    }
    float &at(int64_t z, int64_t y, int64_t x, int64_t c = 0) { return voxels[index(z, y, x, c)]; }
    float at(int64_t z, int64_t y, int64_t x, int64_t c = 0) const { return voxels[index(z, y, x, c)]; }

    std::span<float> channel(int64_t c) {
        return {voxels.data() + c * extents.voxels(), static_cast<size_t>(extents.voxels())};
    }
    std::span<const float> channel(int64_t c) const {
        return {voxels.data() + c * extents.voxels(), static_cast<size_t>(extents.voxels())};
    }
    Volume channel_volume(int64_t c) const;
    bool in_bounds(int64_t z, int64_t y, int64_t x) const {
        return z >= 0 && y >= 0 && x >= 0 && z < extents.d && y < extents.h && x < extents.w;
    }
};

using Mask = Volume;

class dimension_error : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

void require_same_extents(const Extents &a, const Extents &b, const char *what);

// Voxels with value >= 0.5 counted as foreground.
int64_t count_foreground(const Volume &mask);

} // namespace tracer
