// phantom.cpp - rasterised thorax phantoms.

#include "tracer/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tracer/deformation.hpp"
#include "tracer/metrics.hpp"
#include "tracer/random.hpp"

namespace tracer {

namespace {

enum Label : uint8_t { kBackground, kSoft, kLung_L, kLung_R, kHeart, kAorta, kPA, kIVC, kTrachea, kCord, kTumor };

double segment_distance2(const Vec3 &p, const Vec3 &a, const Vec3 &b) {
    Vec3 ab{b[0] - a[0], b[1] - a[1], b[2] - a[2]};
    Vec3 ap{p[0] - a[0], p[1] - a[1], p[2] - a[2]};
    const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    double t = len2 > 0 ? (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    double d2 = 0;
    for (int k = 0; k < 3; ++k) {
        const double r = ap[k] - t * ab[k];
        d2 += r * r;
    }
    return d2;
}

bool in_tube(const TubeSpec &t, const Vec3 &p) {
    const double r2 = t.radius * t.radius;
    if (t.control.size() == 1) return segment_distance2(p, t.control[0], t.control[0]) <= r2;
    for (size_t i = 0; i + 1 < t.control.size(); ++i)
        if (segment_distance2(p, t.control[i], t.control[i + 1]) <= r2) return true;
    return false;
}

bool in_sphere(const Vec3 &c, double r, double z, double y, double x) {
    return (z - c[0]) * (z - c[0]) + (y - c[1]) * (y - c[1]) + (x - c[2]) * (x - c[2]) <= r * r;
}

bool inside_grid(const Vec3 &p, Extents e) {
    return p[0] >= -0.5 && p[1] >= -0.5 && p[2] >= -0.5 && p[0] <= e.d - 0.5 && p[1] <= e.h - 0.5 &&
           p[2] <= e.w - 0.5;
}

const Ellipsoid &lung_for(const PhantomSpec &s, const std::string &side) {
    if (side == "left") return s.left_lung;
    if (side == "right") return s.right_lung;
    throw std::invalid_argument("tumour side must be 'left' or 'right', got '" + side + "'");
}

float tissue_value(uint8_t label, const TissueIntensities &t) {
    switch (label) {
    case kSoft: return t.soft_tissue;
    case kLung_L:
    case kLung_R: return t.lung;
    case kHeart: return t.heart;
    case kAorta:
    case kPA:
    case kIVC: return t.vessel;
    case kTrachea: return t.airway;
    case kCord: return t.cord;
    case kTumor: return t.tumor;
    default: return t.background;
    }
}

void add_noise(Volume &img, const std::vector<uint8_t> *only, double sigma, Rng &rng) {
    if (sigma <= 0) return;
    for (size_t i = 0; i < img.voxels.size(); ++i) {
        const double n = rng.normal() * sigma;
        if (only && !(*only)[i]) continue;
        img.voxels[i] = std::clamp(static_cast<float>(img.voxels[i] + n), 0.0f, 1.0f);
    }
}

// Paints tumour spheres into an existing phantom; organ masks lose the tumour voxels.
void paint_tumors(Phantom &ph, const std::vector<TumorSpec> &tumors, const TissueIntensities &t, double sigma,
                  Rng &rng) {
    const Extents e = ph.image.extents;
    Mask &tm = ph.masks[structures::tumor];
    if (tm.extents != e) tm = Mask(e);
    std::vector<uint8_t> painted(static_cast<size_t>(e.voxels()), 0);
    for (const auto &tu : tumors)
        for (int64_t z = 0; z < e.d; ++z)
            for (int64_t y = 0; y < e.h; ++y)
                for (int64_t x = 0; x < e.w; ++x)
                    if (in_sphere(tu.center, tu.radius, z, y, x)) painted[ph.image.index(z, y, x)] = 1;
    for (size_t i = 0; i < painted.size(); ++i) {
        if (!painted[i]) continue;
        ph.image.voxels[i] = t.tumor;
        tm.voxels[i] = 1.0f;
        for (auto &[name, m] : ph.masks)
            if (name != structures::tumor && name != structures::body) m.voxels[i] = 0.0f;
    }
    add_noise(ph.image, &painted, sigma, rng);
}

PhantomSpec jittered(const PhantomSpec &s, double amount, Rng &rng) {
    PhantomSpec j = s;
    auto jv = [&](Vec3 &v) {
        for (auto &c : v) c += rng.uniform(-amount, amount);
    };
    auto jr = [&](Vec3 &r) {
        for (auto &c : r) c = std::max(1.0, c + rng.uniform(-amount, amount) * 0.5);
    };
    for (Ellipsoid *el : {&j.body, &j.left_lung, &j.right_lung, &j.heart}) {
        jv(el->center);
        jr(el->radii);
    }
    j.cord.h += rng.uniform(-amount, amount) * 0.5;
    j.cord.w += rng.uniform(-amount, amount) * 0.5;
    for (auto &t : j.tubes)
        for (auto &c : t.control) jv(c);
    return j;
}

} // namespace

bool Ellipsoid::contains(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0], b = (y - center[1]) / radii[1], c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c <= 1.0;
}

PhantomSpec PhantomSpec::standard(Extents e) {
    PhantomSpec s;
    s.extents = e;
    const double D = static_cast<double>(e.d), H = static_cast<double>(e.h), W = static_cast<double>(e.w);
    const double cd = (D - 1) / 2;
    s.body = {{cd, H * 0.5 - 0.5, W * 0.5 - 0.5}, {D * 0.75, H * 0.40, W * 0.46}};
    s.right_lung = {{cd, H * 0.47, W * 0.30}, {D * 0.40, H * 0.24, W * 0.15}};
    s.left_lung = {{cd, H * 0.47, W * 0.70}, {D * 0.40, H * 0.24, W * 0.14}};
    s.heart = {{D * 0.62, H * 0.38, W * 0.55}, {D * 0.22, H * 0.14, W * 0.13}};
    s.cord = {H * 0.78, W * 0.5 - 0.5, std::max(1.0, W * 0.04)};
    s.tubes = {
        {structures::trachea, {{0, H * 0.40, W * 0.5 - 0.5}, {D * 0.35, H * 0.40, W * 0.5 - 0.5}}, W * 0.05},
        {structures::aorta,
         {{D * 0.05, H * 0.42, W * 0.56}, {D * 0.2, H * 0.52, W * 0.62}, {D * 0.4, H * 0.64, W * 0.60},
          {D - 1, H * 0.64, W * 0.58}},
         W * 0.055},
        {structures::pulmonary_artery,
         {{D * 0.5, H * 0.32, W * 0.50}, {D * 0.38, H * 0.42, W * 0.42}, {D * 0.36, H * 0.47, W * 0.33}},
         W * 0.045},
        {structures::ivc, {{D * 0.62, H * 0.50, W * 0.44}, {D - 1, H * 0.52, W * 0.44}}, W * 0.045},
    };
    return s;
}

void PhantomSpec::validate() const {
    if (extents.d < 4 || extents.h < 4 || extents.w < 4) throw std::invalid_argument("phantom extents must be >= 4");
    if (spacing.d <= 0 || spacing.h <= 0 || spacing.w <= 0) throw std::invalid_argument("phantom spacing must be > 0");
    for (const Ellipsoid *el : {&body, &left_lung, &right_lung, &heart}) {
        for (double r : el->radii)
            if (r <= 0) throw std::invalid_argument("ellipsoid radii must be positive");
        if (!inside_grid(el->center, extents)) throw std::invalid_argument("ellipsoid centre outside the grid");
    }
    if (cord.radius <= 0) throw std::invalid_argument("cord radius must be positive");
    for (const auto &t : tubes) {
        if (t.radius <= 0) throw std::invalid_argument("tube '" + t.name + "' radius must be positive");
        if (t.control.empty()) throw std::invalid_argument("tube '" + t.name + "' has no control points");
        for (const auto &c : t.control)
            if (!inside_grid(c, extents)) throw std::invalid_argument("tube '" + t.name + "' leaves the grid");
    }
    if (tumors.size() > 2) throw std::invalid_argument("at most 2 tumours per phantom");
    for (const auto &t : tumors) {
        if (t.radius <= 0) throw std::invalid_argument("tumour radius must be positive");
        const Ellipsoid &lung = lung_for(*this, t.side);
        if (!lung.contains(t.center[0], t.center[1], t.center[2]))
            throw std::invalid_argument("tumour centre lies outside the " + t.side + " lung");
    }
    if (noise_sigma < 0) throw std::invalid_argument("noise sigma must be >= 0");
}

Phantom generate_phantom(const PhantomSpec &spec) {
    spec.validate();
    const Extents e = spec.extents;
    std::vector<uint8_t> label(static_cast<size_t>(e.voxels()), kBackground);
    std::vector<uint8_t> body(label.size(), 0);
    const std::map<std::string, Label> tube_labels{{structures::trachea, kTrachea},
                                                   {structures::aorta, kAorta},
                                                   {structures::pulmonary_artery, kPA},
                                                   {structures::ivc, kIVC}};
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                const size_t i = static_cast<size_t>((z * e.h + y) * e.w + x);
                const Vec3 p{double(z), double(y), double(x)};
                if (!spec.body.contains(z, y, x)) continue;
                body[i] = 1;
                uint8_t l = kSoft;
                if (spec.right_lung.contains(z, y, x)) l = kLung_R;
                if (spec.left_lung.contains(z, y, x)) l = kLung_L;
                if (spec.heart.contains(z, y, x)) l = kHeart;
                // Vessels first, the airway over them.
                for (const auto &t : spec.tubes) {
                    const auto it = tube_labels.find(t.name);
                    const uint8_t tl = it == tube_labels.end() ? kAorta : it->second;
                    if (tl != kTrachea && in_tube(t, p)) l = tl;
                }
                for (const auto &t : spec.tubes)
                    if (t.name == structures::trachea && in_tube(t, p)) l = kTrachea;
                if ((y - spec.cord.h) * (y - spec.cord.h) + (x - spec.cord.w) * (x - spec.cord.w) <=
                    spec.cord.radius * spec.cord.radius)
                    l = kCord;
                label[i] = l;
            }

    Phantom ph;
    ph.image = Volume(e, spec.spacing);
    for (size_t i = 0; i < label.size(); ++i) ph.image.voxels[i] = tissue_value(label[i], spec.intensity);
    auto mask_of = [&](uint8_t l) {
        Mask m(e, spec.spacing);
        for (size_t i = 0; i < label.size(); ++i) m.voxels[i] = label[i] == l ? 1.0f : 0.0f;
        return m;
    };
    Mask bm(e, spec.spacing);
    for (size_t i = 0; i < body.size(); ++i) bm.voxels[i] = body[i];
    ph.masks[structures::body] = bm;
    ph.masks[structures::left_lung] = mask_of(kLung_L);
    ph.masks[structures::right_lung] = mask_of(kLung_R);
    ph.masks[structures::heart] = mask_of(kHeart);
    ph.masks[structures::spinal_cord] = mask_of(kCord);
    for (const auto &[name, l] : tube_labels) ph.masks[name] = mask_of(l);
    ph.masks[structures::tumor] = Mask(e, spec.spacing);

    Rng rng(spec.seed);
    add_noise(ph.image, nullptr, spec.noise_sigma, rng);
    paint_tumors(ph, spec.tumors, spec.intensity, spec.noise_sigma, rng);
    return ph;
}

Vec3 lung_point(const PhantomSpec &spec, const std::string &side, Vec3 offset) {
    const Ellipsoid &l = lung_for(spec, side);
    return {l.center[0] + offset[0] * l.radii[0], l.center[1] + offset[1] * l.radii[1],
            l.center[2] + offset[2] * l.radii[2]};
}

Volume synthetic_dose(Extents e, Vec3 target, double radius, double prescription) {
    Volume dose(e);
    const double sigma = 3.0;
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                const double r = std::sqrt((z - target[0]) * (z - target[0]) + (y - target[1]) * (y - target[1]) +
                                           (x - target[2]) * (x - target[2]));
                const double out = std::max(0.0, r - radius);
                dose.at(z, y, x) = static_cast<float>(prescription * std::exp(-out * out / (2 * sigma * sigma)));
            }
    return dose;
}

SyntheticPair synth_pair(const PhantomSpec &base, const PairOptions &opt) {
    PhantomSpec spec = base;
    spec.tumors.clear();
    spec.seed = opt.seed;
    for (const auto *list : {&opt.moving_tumors, &opt.fixed_tumors}) {
        PhantomSpec check = spec;
        check.tumors = *list;
        check.validate();
    }
    Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);

    Phantom moving = generate_phantom(spec);
    Phantom fixed;
    SyntheticPair out;
    if (opt.svf_magnitude > 0) {
        const VelocityField v = random_smooth_velocity(spec.extents, opt.svf_magnitude, opt.svf_sigma, rng.next());
        const DeformationField phi = exp_svf(v, 7);
        fixed.image = warp_image(moving.image, phi);
        fixed.image.spacing = spec.spacing;
        for (const auto &[name, m] : moving.masks) {
            fixed.masks[name] = warp_mask(m, phi);
            fixed.masks[name].spacing = spec.spacing;
        }
        out.svf = v.v;
    } else if (opt.anatomy_jitter > 0) {
        PhantomSpec fs = jittered(spec, opt.anatomy_jitter, rng);
        fs.seed = rng.next();
        fixed = generate_phantom(fs);
    } else {
        fixed = moving;
    }
    Rng tumor_rng(rng.next());
    paint_tumors(moving, opt.moving_tumors, spec.intensity, spec.noise_sigma, tumor_rng);
    paint_tumors(fixed, opt.fixed_tumors, spec.intensity, spec.noise_sigma, tumor_rng);

    if (opt.with_dose) {
        Vec3 target = opt.moving_tumors.empty() ? lung_point(spec, "left", {0, 0, 0}) : opt.moving_tumors[0].center;
        const double radius = opt.moving_tumors.empty() ? 3.0 : opt.moving_tumors[0].radius;
        out.dose = synthetic_dose(spec.extents, target, radius);
        out.dose->spacing = spec.spacing;
    }
    out.pair.moving = moving.image;
    out.pair.fixed = fixed.image;
    out.pair.moving_mask = moving.masks.at(structures::tumor);
    out.pair.fixed_mask = fixed.masks.at(structures::tumor);
    out.moving_masks = std::move(moving.masks);
    out.fixed_masks = std::move(fixed.masks);
    return out;
}

TumorScenario scenario_from_name(const std::string &name) {
    if (name == "none") return TumorScenario::none;
    if (name == "moving_only") return TumorScenario::moving_only;
    if (name == "fixed_only") return TumorScenario::fixed_only;
    if (name == "non_corresponding") return TumorScenario::non_corresponding;
    throw std::invalid_argument("unknown tumour scenario '" + name +
                                "' (expected none|moving_only|fixed_only|non_corresponding)");
}

std::string scenario_name(TumorScenario s) {
    switch (s) {
    case TumorScenario::none: return "none";
    case TumorScenario::moving_only: return "moving_only";
    case TumorScenario::fixed_only: return "fixed_only";
    default: return "non_corresponding";
    }
}

SyntheticPair make_phantom_pair(const PhantomSpec &base, TumorScenario scenario, double svf_magnitude, uint64_t seed,
                                int index) {
    Rng rng(seed * 1000003ULL + static_cast<uint64_t>(index) * 7919ULL + 17);
    PairOptions opt;
    opt.svf_magnitude = svf_magnitude;
    opt.seed = rng.next();
    const double scale = std::min({base.extents.d, base.extents.h, base.extents.w}) / 24.0;
    auto tumour = [&](const std::string &side) {
        TumorSpec t;
        t.side = side;
        t.radius = scale * rng.uniform(2.6, 3.4);
        t.center = lung_point(base, side, {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2)});
        return t;
    };
    const std::string side = rng.uniform() < 0.5 ? "left" : "right";
    const std::string other = side == "left" ? "right" : "left";
    if (scenario == TumorScenario::moving_only || scenario == TumorScenario::non_corresponding)
        opt.moving_tumors.push_back(tumour(side));
    if (scenario == TumorScenario::fixed_only) opt.fixed_tumors.push_back(tumour(side));
    if (scenario == TumorScenario::non_corresponding) opt.fixed_tumors.push_back(tumour(other));
    SyntheticPair p = synth_pair(base, opt);
    p.pair.name = "pair_" + std::to_string(index);
    return p;
}

} // namespace tracer
