// acceptance.cpp - end-to-end checks, one line per criterion.
//
// Usage: acceptance --tracer <path to the CLI> [--work DIR] [criterion ...]

#include <algorithm>
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "tracer/deformation.hpp"
#include "tracer/engine.hpp"
#include "tracer/losses.hpp"
#include "tracer/metrics.hpp"
#include "tracer/phantom.hpp"
#include "tracer/pipeline.hpp"

using namespace tracer;
using tracer::testing::directional_grad_check;
using tracer::testing::grad_check;
using tracer::testing::probe;
using tracer::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradRelTol = 1e-3;
constexpr double kGradSuiteSeconds = 300;
constexpr int kSvfCount = 100;
constexpr double kSvfMaxMagnitude = 2.0;
constexpr double kEulerTol = 0.05;
constexpr double kInverseTol = 0.1;
constexpr double kSelfRegTol = 0.05;
constexpr int kRecoveryPairs = 10;
constexpr double kEpeTol = 1.0;
constexpr double kLungDscMin = 0.90;
constexpr int kTumorPairs = 20;
constexpr double kDeltaTMax = 1.0;
constexpr double kTumorMseMax = 0.01;
constexpr double kDeltaTRatio = 10.0;
constexpr int kObliterationPairs = 6;
constexpr double kStretchMax = 0.05;
constexpr double kStretchRatio = 3.0;
constexpr double kMetricTol = 1e-6;
constexpr double kMcdTol = 0.5;
constexpr double kVbaThreshold = 0.8;
constexpr int kRecurrencePairs = 4;
constexpr double kRecurrenceSlack = 0.01;
constexpr double kE2eSeconds = 7200;

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Context {
    std::string tracer;
    fs::path work;
};

std::string fmt(const char *f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char *f, ...) {
    char buf[1024];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_of(const std::vector<double> &v) {
    return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

// ---------------------------------------------------------------- fixtures

Tensor field_from(Extents e, const std::function<std::array<double, 3>(int64_t, int64_t, int64_t)> &f) {
    std::vector<float> u(static_cast<size_t>(3 * e.voxels()));
    const int64_t nv = e.voxels();
    for (int64_t z = 0, v = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x, ++v) {
                const auto d = f(z, y, x);
                for (int c = 0; c < 3; ++c) u[static_cast<size_t>(c * nv + v)] = static_cast<float>(d[c]);
            }
    return Tensor::from_data({3, e.d, e.h, e.w}, std::move(u));
}

Tensor ball_tensor(Extents e, double cz, double cy, double cx, double r) {
    std::vector<float> m(static_cast<size_t>(e.voxels()));
    for (int64_t z = 0, v = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x, ++v)
                m[v] = (z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r ? 1.0f : 0.0f;
    return Tensor::from_data({1, e.d, e.h, e.w}, std::move(m));
}

// Sample points inside the grid and off the integer kinks of trilinear weights.
Tensor interior_dvf(Extents e, std::mt19937 &rng, bool requires_grad) {
    std::uniform_int_distribution<int> cd(0, static_cast<int>(e.d) - 2), ch(0, static_cast<int>(e.h) - 2),
        cw(0, static_cast<int>(e.w) - 2);
    std::uniform_real_distribution<float> frac(0.15f, 0.85f);
    std::vector<float> u(static_cast<size_t>(3 * e.voxels()));
    const int64_t nv = e.voxels();
    for (int64_t z = 0, v = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x, ++v) {
                u[v] = static_cast<float>(cd(rng)) + frac(rng) - static_cast<float>(z);
                u[nv + v] = static_cast<float>(ch(rng)) + frac(rng) - static_cast<float>(y);
                u[2 * nv + v] = static_cast<float>(cw(rng)) + frac(rng) - static_cast<float>(x);
            }
    return Tensor::from_data({3, e.d, e.h, e.w}, std::move(u), requires_grad);
}

std::vector<StepRecord> chain_steps(const LossInputs &in, const std::vector<Tensor> &velocities, int n_int) {
    std::vector<StepRecord> steps;
    Tensor im = in.moving, ym = in.moving_mask, jf = in.fixed, yf = in.fixed_mask;
    for (const auto &v : velocities) {
        StepRecord s;
        s.phi = exp_svf({v}, n_int);
        s.phi_hat = invert_svf({v}, n_int);
        s.moving_mask_prev = ym;
        s.fixed_mask_prev = yf;
        im = warp_image(im, s.phi);
        ym = warp_image(ym, s.phi);
        jf = warp_image(jf, s.phi_hat);
        yf = warp_image(yf, s.phi_hat);
        s.warped_moving = im;
        s.warped_moving_mask = ym;
        s.warped_fixed = jf;
        s.warped_fixed_mask = yf;
        steps.push_back(s);
    }
    return steps;
}

EngineConfig with_conditioning(EngineConfig cfg, const std::string &name) {
    cfg.conditioning = Conditioning::from_name(name);
    return cfg;
}

double mean_lung_dsc(const MetricsReport &r) {
    return 0.5 * (r.dsc.at(structures::left_lung) + r.dsc.at(structures::right_lung));
}

// ---------------------------------------------------------------- 1

Outcome gradients(const Context &) {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0;
    std::string worst_name;
    int checks = 0;
    bool all_nonzero = true;
    auto record = [&](const std::string &name, const testing::GradCheckResult &r) {
        ++checks;
        if (!(r.relative_error <= worst) || std::isnan(r.relative_error)) {
            worst = r.relative_error;
            worst_name = name;
        }
        all_nonzero = all_nonzero && r.grad_norm > 0;
    };
    using Fn = std::function<Tensor(const Tensor &)>;
    auto elem = [&](const std::string &name, Tensor leaf, const Fn &f, float h = 1e-3f) {
        record(name, grad_check(std::move(leaf), f, h));
    };

    std::mt19937 rng(101);
    const Shape s{2, 4, 5, 6};
    auto other = random_tensor(s, rng, 0.5f, 1.5f, false);
    elem("add", random_tensor(s, rng), [&](const Tensor &x) { return probe(add(x, other)); });
    elem("sub", random_tensor(s, rng), [&](const Tensor &x) { return probe(sub(other, x)); });
    elem("mul", random_tensor(s, rng), [&](const Tensor &x) { return probe(mul(x, other)); });
    elem("div numerator", random_tensor(s, rng), [&](const Tensor &x) { return probe(div(x, other)); });
    elem("div denominator", random_tensor(s, rng, 0.5f, 1.5f), [&](const Tensor &x) { return probe(div(other, x)); });
    elem("scale", random_tensor(s, rng), [&](const Tensor &x) { return probe(scale(x, 2.3f)); });
    elem("add_scalar", random_tensor(s, rng), [&](const Tensor &x) { return probe(add_scalar(x, -0.4f)); });
    elem("square", random_tensor(s, rng), [&](const Tensor &x) { return probe(square(x)); });
    elem("sigmoid", random_tensor(s, rng, -3, 3), [&](const Tensor &x) { return probe(sigmoid(x)); });
    elem("tanh", random_tensor(s, rng, -2, 2), [&](const Tensor &x) { return probe(tanh(x)); });
    {
        auto x = random_tensor(s, rng, 0.05f, 1.0f);
        auto d = x.mutable_data();
        for (size_t i = 1; i < d.size(); i += 2) d[i] = -d[i];
        elem("leaky_relu", x, [&](const Tensor &t) { return probe(leaky_relu(t, 0.2f)); });
    }
    elem("sum", random_tensor(s, rng), [&](const Tensor &x) { return square(sum(x)); });
    elem("mean", random_tensor(s, rng), [&](const Tensor &x) { return square(mean(x)); });
    elem("concat_channels", random_tensor(s, rng), [&](const Tensor &x) { return probe(concat_channels({x, other})); });
    elem("slice_channels", random_tensor(s, rng), [&](const Tensor &x) { return probe(slice_channels(x, 1, 2)); });

    const Shape c8{2, 8, 8, 8};
    auto in8 = random_tensor(c8, rng, -1, 1, false);
    auto k = random_tensor({3, 2, 3, 3, 3}, rng, -0.5f, 0.5f, false);
    elem("conv3d input stride 1", random_tensor(c8, rng), [&](const Tensor &x) { return probe(conv3d(x, k, 1, 1)); });
    elem("conv3d input stride 2", random_tensor(c8, rng), [&](const Tensor &x) { return probe(conv3d(x, k, 2, 1)); });
    elem("conv3d kernel", random_tensor({3, 2, 3, 3, 3}, rng, -0.5f, 0.5f),
         [&](const Tensor &w) { return probe(conv3d(in8, w, 1, 1)); });
    elem("add_bias", random_tensor({2}, rng), [&](const Tensor &b) { return probe(add_bias(in8, b)); });
    elem("upsample2x_trilinear", random_tensor({2, 4, 4, 4}, rng),
         [&](const Tensor &x) { return probe(upsample2x_trilinear(x)); });
    elem("resize_trilinear", random_tensor(c8, rng), [&](const Tensor &x) { return probe(resize_trilinear(x, {3, 5, 4})); });
    for (int axis = 0; axis < 3; ++axis)
        elem("finite_difference axis " + std::to_string(axis), random_tensor(c8, rng),
             [&](const Tensor &x) { return probe(finite_difference(x, axis)); });
    const Extents e8{8, 8, 8};
    auto dvf = interior_dvf(e8, rng, false);
    elem("grid_sample volume", random_tensor(c8, rng), [&](const Tensor &x) { return probe(grid_sample(x, dvf)); });
    elem("grid_sample displacement", interior_dvf(e8, rng, true),
         [&](const Tensor &u) { return probe(grid_sample(in8, u)); });
    {
        auto u = random_smooth_velocity(e8, 0.6, 1.5, 102).v.clone(true);
        elem("jacobian_det", u, [](const Tensor &t) { return probe(jacobian_det({t})); });
    }
    {
        // A drift keeps the integration samples off cell faces.
        auto drift = field_from({6, 6, 6}, [](auto, auto, auto) { return std::array<double, 3>{1.3, 1.3, 1.3}; });
        auto v = add(drift, random_smooth_velocity({6, 6, 6}, 0.2, 1.5, 103).v).detach().clone(true);
        elem("exp_svf", v, [](const Tensor &t) { return probe(exp_svf({t}, 3).disp); }, 3e-3f);
        elem("invert_svf", v, [](const Tensor &t) { return probe(invert_svf({t}, 3).disp); }, 3e-3f);
    }
    {
        auto outer = interior_dvf({6, 6, 6}, rng, false);
        auto inner = field_from({6, 6, 6}, [](auto, auto, auto) { return std::array<double, 3>{0.3, -0.4, 0.45}; });
        auto inner_leaf = inner.clone(true);
        auto small = scale(outer, 0.2f).detach().clone(true);
        elem("compose outer", small, [&](const Tensor &t) { return probe(compose({t}, {inner}).disp); });
        elem("compose inner", inner_leaf, [&](const Tensor &t) { return probe(compose({small.detach()}, {t}).disp); });
    }

    // Losses on a two-step chain, as in the recurrent model.
    const Extents e{6, 6, 6};
    auto drift = field_from(e, [](auto, auto, auto) { return std::array<double, 3>{1.3, 1.3, 1.3}; });
    auto back = scale(drift, -1.0f);
    auto v1 = add(drift, random_smooth_velocity(e, 0.15, 1.5, 104).v).detach().clone(true);
    auto v2 = random_smooth_velocity(e, 0.15, 1.5, 105).v.clone(true);
    LossInputs in{random_tensor({1, 6, 6, 6}, rng, 0.2f, 0.8f, false), ball_tensor(e, 2, 2, 2, 1.8), Tensor{},
                  ball_tensor(e, 3, 3, 3, 1.8)};
    in.fixed = in.moving;
    {
        NoGradGuard ng;
        const auto r1 = chain_steps(in, {v1, add(v2, back)}, 2);
        in.fixed = add(r1.back().warped_moving, random_tensor({1, 6, 6, 6}, rng, -0.02f, 0.02f, false)).detach();
        const auto r2 = chain_steps(in, {v1, add(v2, back)}, 2);
        in.moving = add(r2.back().warped_fixed, random_tensor({1, 6, 6, 6}, rng, -0.02f, 0.02f, false)).detach();
    }
    using Loss = std::function<Tensor(const std::vector<StepRecord> &)>;
    struct Term {
        std::string name;
        Loss f;
        bool directional;
    };
    const std::vector<Term> terms{
        {"masked_similarity", [&](const auto &st) { return masked_similarity(st, in.fixed, in.fixed_mask); }, true},
        {"inverse_similarity", [&](const auto &st) { return inverse_similarity(st, in.moving, in.moving_mask); }, true},
        {"smoothness", [&](const auto &st) { return smoothness({st[0].phi, st[1].phi}); }, false},
        {"smoothness inverse", [&](const auto &st) { return smoothness({st[0].phi_hat, st[1].phi_hat}); }, false},
        {"tumor_preservation", [&](const auto &st) { return tumor_preservation(st); }, false},
        {"tumor_obliteration", [&](const auto &st) { return tumor_obliteration(st); }, false},
        {"total_loss", [&](const auto &st) { return total_loss(in, st, LossWeights{}).total; }, true},
    };
    for (const auto &t : terms) {
        auto f1 = [&](const Tensor &a) { return t.f(chain_steps(in, {a, add(v2.detach(), back)}, 2)); };
        auto f2 = [&](const Tensor &b) { return t.f(chain_steps(in, {v1.detach(), add(b, back)}, 2)); };
        // Mean-reduced image terms barely move in float32 when one element is
        // nudged, so those are checked along whole-field directions, with
        // Richardson extrapolation against the cubic determinant terms.
        if (t.directional) {
            record(t.name + " v1", directional_grad_check(v1, f1, 3e-3f, 1, 7, true));
            record(t.name + " v2", directional_grad_check(v2, f2, 3e-3f, 1, 7, true));
        } else {
            record(t.name + " v1", grad_check(v1, f1, 3e-3f));
            record(t.name + " v2", grad_check(v2, f2, 3e-3f));
        }
    }

    const double elapsed = seconds_since(t0);
    Outcome o;
    o.pass = worst <= kGradRelTol && all_nonzero && elapsed < kGradSuiteSeconds;
    o.detail = fmt("%d checks, worst relative error %.2e (%s, tol %.0e), %.1f s (limit %.0f s)%s", checks, worst,
                   worst_name.c_str(), kGradRelTol, elapsed, kGradSuiteSeconds, all_nonzero ? "" : ", a zero gradient");
    return o;
}

// ---------------------------------------------------------------- 2

Outcome integration(const Context &) {
    const Extents e{16, 16, 16};
    double worst_euler = 0, worst_euler_inner = 0, min_det = 1e300, worst_inverse = 0, max_v = 0;
    int over = 0;
    for (int i = 0; i < kSvfCount; ++i) {
        const auto seed = static_cast<uint64_t>(5000 + i);
        const VelocityField vel = random_smooth_velocity(e, kSvfMaxMagnitude, 4.0, seed);
        max_v = std::max(max_v, max_interior_magnitude({vel.v}, 0));
        const DeformationField phi = exp_svf(vel, 7);
        const auto ends = testing::euler_endpoints(vel, 64);
        const double err = testing::max_endpoint_error(phi, ends);
        worst_euler = std::max(worst_euler, err);
        over += err > kEulerTol;
        const auto u = phi.disp.data();
        for (int64_t z = 0, v = 0; z < e.d; ++z)
            for (int64_t y = 0; y < e.h; ++y)
                for (int64_t x = 0; x < e.w; ++x, ++v) {
                    if (std::min({z, y, x, e.d - 1 - z, e.h - 1 - y, e.w - 1 - x}) < 2) continue;
                    const testing::Vec3 p{z + u[v], y + u[e.voxels() + v], x + u[2 * e.voxels() + v]};
                    double d2 = 0;
                    for (int a = 0; a < 3; ++a) d2 += (p[a] - ends[v][a]) * (p[a] - ends[v][a]);
                    worst_euler_inner = std::max(worst_euler_inner, std::sqrt(d2));
                }
        const Tensor j = jacobian_det(phi);
        for (int64_t z = 1; z < e.d - 1; ++z)
            for (int64_t y = 1; y < e.h - 1; ++y)
                for (int64_t x = 1; x < e.w - 1; ++x) min_det = std::min<double>(min_det, j[(z * e.h + y) * e.w + x]);
        const DeformationField inv = invert_svf(vel, 7);
        // Clamped sampling breaks consistency at the faces; three voxels of margin.
        worst_inverse = std::max({worst_inverse, max_interior_magnitude(compose(phi, inv), 3),
                                  max_interior_magnitude(compose(inv, phi), 3)});
    }
    Outcome o;
    o.pass = max_v <= kSvfMaxMagnitude + 1e-5 && worst_euler <= kEulerTol && min_det > 0 && worst_inverse <= kInverseTol;
    o.detail = fmt("%d SVFs at 16^3 (max |v| %.3f): max Euler endpoint error %.4f (tol %.2f, %d fields above; "
                   "%.4f two voxels in from the faces), min interior det %.3f, inverse residual %.4f (tol %.1f)",
                   kSvfCount, max_v, worst_euler, kEulerTol, over, worst_euler_inner, min_det, worst_inverse, kInverseTol);
    return o;
}

// ---------------------------------------------------------------- 3

bool all_zero(const Tensor &t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return v == 0.0f; });
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Outcome identity_start(const Context &) {
    const EngineConfig cfg;
    const NetworkParams params = NetworkParams::init(cfg, 11);
    const PhantomSpec spec = PhantomSpec::standard();
    std::vector<RegistrationPair> pairs;
    for (int i = 0; i < 3; ++i) pairs.push_back(make_phantom_pair(spec, TumorScenario::non_corresponding, 2.0, 21, i).pair);
    {
        std::mt19937 rng(12);
        RegistrationPair noise;
        for (Volume *v : {&noise.moving, &noise.fixed}) {
            *v = Volume(spec.extents);
            std::uniform_real_distribution<float> u(0, 1);
            for (auto &x : v->voxels) x = u(rng);
        }
        noise.moving_mask = ball_tensor(spec.extents, 12, 16, 10, 3).to_volume();
        noise.fixed_mask = ball_tensor(spec.extents, 10, 14, 20, 3).to_volume();
        pairs.push_back(noise);
    }
    int exact = 0;
    for (const auto &p : pairs) {
        NoGradGuard ng;
        const ForwardResult r = forward_register(p, params, cfg);
        bool ok = all_zero(r.phi_final.disp) && all_zero(r.phi_hat_final.disp);
        for (const auto &v : r.velocities) ok = ok && all_zero(v);
        ok = ok && same_bits(r.steps.back().warped_moving.data(), p.moving.voxels) &&
             same_bits(r.steps.back().warped_fixed.data(), p.fixed.voxels);
        exact += ok;
    }

    RegistrationPair self = pairs[0];
    self.fixed = self.moving;
    self.fixed_mask = self.moving_mask;
    const OptimizeResult opt = optimize_pair(self, cfg);
    const double drift = mean_magnitude(opt.result.phi_final);
    const double drift_inv = mean_magnitude(opt.result.phi_hat_final);

    Outcome o;
    o.pass = exact == static_cast<int>(pairs.size()) && drift <= kSelfRegTol && drift_inv <= kSelfRegTol;
    o.detail = fmt("untrained network exact identity on %d/%zu pairs; self-registration mean |disp| %.2e / inverse "
                   "%.2e voxel (tol %.2f)",
                   exact, pairs.size(), drift, drift_inv, kSelfRegTol);
    return o;
}

// ---------------------------------------------------------------- 4

Outcome recovery(const Context &) {
    const EngineConfig cfg;
    const PhantomSpec spec = PhantomSpec::standard();
    std::vector<double> epe, lung;
    double worst_epe = 0, worst_lung = 1;
    for (int i = 0; i < kRecoveryPairs; ++i) {
        const SyntheticPair sp = make_phantom_pair(spec, TumorScenario::none, 2.0, 41, i);
        const Registration reg = register_with_optimizer(sp, cfg);
        const DeformationField truth = exp_svf({*sp.svf}, 7);
        const Mask &body = sp.fixed_masks.at(structures::body);
        const int64_t nv = spec.extents.voxels();
        const auto a = reg.phi.disp.data(), b = truth.disp.data();
        double acc = 0;
        int64_t n = 0;
        for (int64_t v = 0; v < nv; ++v) {
            if (body.voxels[static_cast<size_t>(v)] < 0.5f) continue;
            double d2 = 0;
            for (int c = 0; c < 3; ++c) {
                const double d = static_cast<double>(a[c * nv + v]) - b[c * nv + v];
                d2 += d * d;
            }
            acc += std::sqrt(d2);
            ++n;
        }
        epe.push_back(acc / static_cast<double>(n));
        const MetricsReport rep = evaluate_pair(sp, reg);
        const double l = std::min(rep.dsc.at(structures::left_lung), rep.dsc.at(structures::right_lung));
        lung.push_back(mean_lung_dsc(rep));
        worst_epe = std::max(worst_epe, epe.back());
        worst_lung = std::min(worst_lung, l);
        std::printf("    pair %d: EPE %.3f voxel, lung DSC %.4f / %.4f\n", i, epe.back(),
                    rep.dsc.at(structures::left_lung), rep.dsc.at(structures::right_lung));
        std::fflush(stdout);
    }
    Outcome o;
    o.pass = worst_epe <= kEpeTol && worst_lung >= kLungDscMin;
    o.detail = fmt("%d tumour-free pairs: mean EPE in body %.3f (worst %.3f, tol %.1f) voxel; lung DSC mean %.4f, "
                   "worst single lung %.4f (min %.2f)",
                   kRecoveryPairs, mean_of(epe), worst_epe, kEpeTol, mean_of(lung), worst_lung, kLungDscMin);
    return o;
}

// ---------------------------------------------------------------- 5

Outcome tumor_preservation_check(const Context &) {
    const EngineConfig base;
    const PhantomSpec spec = PhantomSpec::standard();
    std::vector<double> dt_on, dt_off, mse_on, mse_off;
    for (int i = 0; i < kTumorPairs; ++i) {
        const SyntheticPair sp = make_phantom_pair(spec, TumorScenario::non_corresponding, 2.0, 51, i);
        const MetricsReport on = evaluate_pair(sp, register_with_optimizer(sp, with_conditioning(base, "both")));
        const MetricsReport off = evaluate_pair(sp, register_with_optimizer(sp, with_conditioning(base, "none")));
        dt_on.push_back(on.delta_T_percent);
        dt_off.push_back(off.delta_T_percent);
        mse_on.push_back(on.tumor_mse);
        mse_off.push_back(off.tumor_mse);
        std::printf("    pair %d: on  dT %.2f%% mse %.4f | off dT %.2f%% mse %.4f\n", i, dt_on.back(), mse_on.back(),
                    dt_off.back(), mse_off.back());
        std::fflush(stdout);
    }
    const double on = mean_of(dt_on), off = mean_of(dt_off), mse = mean_of(mse_on);
    Outcome o;
    o.pass = on <= kDeltaTMax && mse <= kTumorMseMax && off >= kDeltaTRatio * on;
    o.detail = fmt("%d non-corresponding pairs: conditioned dT %.2f%% (max %.1f%%), tumor_mse %.4f (max %.2f); "
                   "unconditioned dT %.2f%% = %.1fx (min %.0fx), tumor_mse %.4f",
                   kTumorPairs, on, kDeltaTMax, mse, kTumorMseMax, off, on > 0 ? off / on : INFINITY, kDeltaTRatio,
                   mean_of(mse_off));
    return o;
}

// ---------------------------------------------------------------- 6

Outcome obliteration(const Context &) {
    const EngineConfig base;
    const PhantomSpec spec = PhantomSpec::standard();
    std::vector<double> on, off;
    for (int i = 0; i < kObliterationPairs; ++i) {
        const SyntheticPair sp = make_phantom_pair(spec, TumorScenario::fixed_only, 2.0, 61, i);
        on.push_back(obliteration_stretch(sp, register_with_optimizer(sp, with_conditioning(base, "both"))));
        off.push_back(obliteration_stretch(sp, register_with_optimizer(sp, with_conditioning(base, "none"))));
        std::printf("    pair %d: mean |det - 1| on %.4f off %.4f\n", i, on.back(), off.back());
        std::fflush(stdout);
    }
    const double a = mean_of(on), b = mean_of(off);
    Outcome o;
    o.pass = a <= kStretchMax && b >= kStretchRatio * a;
    o.detail = fmt("%d fixed-only pairs: mean |det J - 1| over the mapped fixed tumour %.4f conditioned (max %.2f), "
                   "%.4f unconditioned = %.1fx (min %.0fx)",
                   kObliterationPairs, a, kStretchMax, b, a > 0 ? b / a : INFINITY, kStretchRatio);
    return o;
}

// ---------------------------------------------------------------- 7

Mask random_mask(Extents e, double p, std::mt19937 &rng) {
    std::bernoulli_distribution b(p);
    Mask m(e);
    for (auto &v : m.voxels) v = b(rng) ? 1.0f : 0.0f;
    return m;
}

Volume random_volume(Extents e, double lo, double hi, std::mt19937 &rng) {
    std::uniform_real_distribution<double> u(lo, hi);
    Volume v(e);
    for (auto &x : v.voxels) x = static_cast<float>(u(rng));
    return v;
}

double oracle_dsc(const Mask &a, const Mask &b) {
    long inter = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.voxels.size(); ++i) {
        const bool x = a.voxels[i] >= 0.5f, y = b.voxels[i] >= 0.5f;
        inter += x && y;
        na += x;
        nb += y;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

double oracle_hd95(const Mask &a, const Mask &b, Spacing s) {
    auto surface = [](const Mask &m) {
        std::vector<std::array<int64_t, 3>> out;
        const Extents e = m.extents;
        for (int64_t z = 0; z < e.d; ++z)
            for (int64_t y = 0; y < e.h; ++y)
                for (int64_t x = 0; x < e.w; ++x) {
                    if (m.at(z, y, x) < 0.5f) continue;
                    bool edge = false;
                    for (int a = 0; a < 3; ++a)
                        for (int sgn : {-1, 1}) {
                            const int64_t q[3] = {z + (a == 0) * sgn, y + (a == 1) * sgn, x + (a == 2) * sgn};
                            edge = edge || !m.in_bounds(q[0], q[1], q[2]) || m.at(q[0], q[1], q[2]) < 0.5f;
                        }
                    if (edge) out.push_back({z, y, x});
                }
        return out;
    };
    const auto sa = surface(a), sb = surface(b);
    std::vector<double> d;
    auto directed = [&](const auto &from, const auto &to) {
        for (const auto &p : from) {
            double best = INFINITY;
            for (const auto &q : to) {
                const double dz = (p[0] - q[0]) * s.d, dy = (p[1] - q[1]) * s.h, dx = (p[2] - q[2]) * s.w;
                best = std::min(best, dz * dz + dy * dy + dx * dx);
            }
            d.push_back(std::sqrt(best));
        }
    };
    directed(sa, sb);
    directed(sb, sa);
    std::sort(d.begin(), d.end());
    const double h = 0.95 * static_cast<double>(d.size() - 1);
    const auto k = static_cast<size_t>(h);
    return k + 1 < d.size() ? d[k] + (h - static_cast<double>(k)) * (d[k + 1] - d[k]) : d[k];
}

double oracle_delta_T(const Mask &ym, const Mask &yd) {
    double vm = 0, vd = 0;
    for (size_t i = 0; i < ym.voxels.size(); ++i) {
        vm += ym.voxels[i] >= 0.5f;
        vd += yd.voxels[i] >= 0.5f;
    }
    return std::abs(vd - vm) / vm * 100.0;
}

double oracle_m_lexs(const Volume &jac, const Mask &ym) {
    double acc = 0, n = 0;
    for (size_t i = 0; i < ym.voxels.size(); ++i)
        if (ym.voxels[i] >= 0.5f) {
            acc += std::abs(static_cast<double>(jac.voxels[i]) - 1.0);
            n += 1;
        }
    return acc / n * 100.0;
}

double oracle_tumor_mse(const Volume &im, const Mask &ym, const Volume &idef, const Mask &yd) {
    double acc = 0, n = 0;
    for (size_t i = 0; i < ym.voxels.size(); ++i) {
        const bool a = ym.voxels[i] >= 0.5f, b = yd.voxels[i] >= 0.5f;
        if (!a && !b) continue;
        const double r = (a ? im.voxels[i] : 0.0) - (b ? idef.voxels[i] : 0.0);
        acc += r * r;
        n += 1;
    }
    return acc / n;
}

double oracle_ptd(const Volume &dose, const Mask &ym, const Volume &dose_def, const Mask &yd, DoseSummary s) {
    auto stat = [&](const Volume &d, const Mask &m) {
        std::vector<double> v;
        for (size_t i = 0; i < m.voxels.size(); ++i)
            if (m.voxels[i] >= 0.5f) v.push_back(d.voxels[i]);
        if (s == DoseSummary::min) return *std::min_element(v.begin(), v.end());
        if (s == DoseSummary::max) return *std::max_element(v.begin(), v.end());
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    return std::abs(stat(dose, ym) - stat(dose_def, yd));
}

using Curve = std::function<std::array<double, 3>(double)>;

std::vector<std::array<double, 3>> sample_curve(const Curve &c, int n = 4000) {
    std::vector<std::array<double, 3>> p;
    for (int i = 0; i <= n; ++i) p.push_back(c(static_cast<double>(i) / n));
    return p;
}

Mask tube_mask(Extents e, double r, const Curve &c) {
    const auto pts = sample_curve(c, 2000);
    Mask m(e);
    for (int64_t z = 0; z < e.d; ++z)
        for (int64_t y = 0; y < e.h; ++y)
            for (int64_t x = 0; x < e.w; ++x) {
                double best = INFINITY;
                for (const auto &p : pts)
                    best = std::min(best, (z - p[0]) * (z - p[0]) + (y - p[1]) * (y - p[1]) + (x - p[2]) * (x - p[2]));
                m.at(z, y, x) = best <= r * r ? 1.0f : 0.0f;
            }
    return m;
}

// Centerline distance of the continuous curves: mean of the two directed
// medians of closest-point distances.
double analytic_mcd(const Curve &a, const Curve &b) {
    const auto pa = sample_curve(a), pb = sample_curve(b);
    auto directed = [](const auto &from, const auto &to) {
        std::vector<double> d;
        for (const auto &p : from) {
            double best = INFINITY;
            for (const auto &q : to)
                best = std::min(best, (p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) +
                                          (p[2] - q[2]) * (p[2] - q[2]));
            d.push_back(std::sqrt(best));
        }
        std::nth_element(d.begin(), d.begin() + static_cast<long>(d.size() / 2), d.end());
        return d[d.size() / 2];
    };
    return 0.5 * (directed(pa, pb) + directed(pb, pa));
}

Outcome metric_oracles(const Context &) {
    const Extents e{8, 8, 8};
    std::mt19937 rng(71);
    double worst = 0;
    std::string worst_name = "-";
    auto cmp = [&](const char *name, double got, double want) {
        const double d = std::abs(got - want);
        if (!(d <= worst)) {
            worst = d;
            worst_name = name;
        }
    };
    const Spacing aniso{2.5, 1.2, 0.8};
    const DoseSummary sums[] = {DoseSummary::mean, DoseSummary::min, DoseSummary::max};
    int trials = 0;
    for (int t = 0; t < 25; ++t) {
        const Mask a = random_mask(e, 0.15 + 0.02 * t, rng), b = random_mask(e, 0.5 - 0.01 * t, rng);
        if (count_foreground(a) == 0 || count_foreground(b) == 0) continue;
        ++trials;
        cmp("dsc", dsc(a, b), oracle_dsc(a, b));
        cmp("hd95", hd95(a, b), oracle_hd95(a, b, {}));
        cmp("hd95 anisotropic", hd95(a, b, aniso), oracle_hd95(a, b, aniso));
        cmp("delta_T", delta_T(a, b), oracle_delta_T(a, b));
        const Volume jac = random_volume(e, 0.3, 1.8, rng);
        cmp("m_lexs", m_lexs(jac, a), oracle_m_lexs(jac, a));
        const Volume im = random_volume(e, 0, 1, rng), idef = random_volume(e, 0, 1, rng);
        cmp("tumor_mse", tumor_mse(im, a, idef, b), oracle_tumor_mse(im, a, idef, b));
        const Volume dose = random_volume(e, 0, 70, rng), dose_def = random_volume(e, 0, 70, rng);
        for (DoseSummary s : sums) {
            cmp("delta_ptd", delta_ptd(dose, a, b, s), oracle_ptd(dose, a, dose, b, s));
            cmp("delta_ptd resampled", delta_ptd(dose, a, dose_def, b, s), oracle_ptd(dose, a, dose_def, b, s));
        }
    }

    struct TubeCase {
        const char *name;
        Extents e;
        double r;
        Curve a, b;
    };
    const std::vector<TubeCase> tubes{
        {"parallel", {24, 16, 16}, 2.0, [](double t) { return std::array<double, 3>{2 + 19 * t, 6, 5}; },
         [](double t) { return std::array<double, 3>{2 + 19 * t, 6, 9.5}; }},
        {"oblique", {24, 20, 20}, 1.8, [](double t) { return std::array<double, 3>{3 + 17 * t, 4 + 10 * t, 6}; },
         [](double t) { return std::array<double, 3>{3 + 17 * t, 4 + 10 * t, 9}; }},
        {"arc", {26, 24, 24}, 1.6,
         [](double t) {
             const double a = 2 * M_PI * 1.2 * t;
             return std::array<double, 3>{3 + 20 * t, 11 + 5 * std::cos(a), 11 + 5 * std::sin(a)};
         },
         [](double t) {
             const double a = 2 * M_PI * 1.2 * t;
             return std::array<double, 3>{3 + 20 * t, 13 + 5 * std::cos(a), 11 + 5 * std::sin(a)};
         }},
        {"converging", {24, 18, 18}, 1.7, [](double t) { return std::array<double, 3>{2 + 19 * t, 5, 5}; },
         [](double t) { return std::array<double, 3>{2 + 19 * t, 5 + 6 * t, 11}; }},
    };
    double worst_mcd = 0;
    std::string mcd_line;
    for (const auto &tc : tubes) {
        const double got = mcd(tube_mask(tc.e, tc.r, tc.a), tube_mask(tc.e, tc.r, tc.b));
        const double want = analytic_mcd(tc.a, tc.b);
        worst_mcd = std::max(worst_mcd, std::abs(got - want));
        mcd_line += fmt(" %s %.2f/%.2f", tc.name, got, want);
    }

    Outcome o;
    o.pass = worst <= kMetricTol && worst_mcd <= kMcdTol;
    o.detail = fmt("%d random 8^3 mask pairs: worst |impl - brute force| %.1e (%s, tol %.0e); mcd vs analytic "
                   "centerline distance worst %.3f voxel (tol %.1f):%s",
                   trials, worst, worst_name.c_str(), kMetricTol, worst_mcd, kMcdTol, mcd_line.c_str());
    return o;
}

// ---------------------------------------------------------------- 8

Outcome vba(const Context &) {
    const double below = std::nextafter(kVbaThreshold, 0.0);
    const std::pair<double, double> rows[] = {
        {kVbaThreshold, 0.95}, {0.95, kVbaThreshold}, {below, 0.95}, {0.93, below}, {0.55, 0.62}, {0.91, 0.88},
    };
    int agree = 0;
    std::string line;
    for (const auto &[l, r] : rows) {
        MetricsReport rep;
        rep.dsc[structures::left_lung] = l;
        rep.dsc[structures::right_lung] = r;
        const bool expected = l < kVbaThreshold || r < kVbaThreshold;
        const bool got = vba_filter(rep, kVbaThreshold).excluded;
        agree += got == expected;
        line += fmt(" (%.17g, %.2f)->%s", l, r, got ? "excluded" : "kept");
    }
    Outcome o;
    o.pass = agree == 6;
    o.detail = fmt("%d/6 rows agree with DSC < %.1f:%s", agree, kVbaThreshold, line.c_str());
    return o;
}

// ---------------------------------------------------------------- 9

Outcome recurrence(const Context &) {
    RunConfig rc;
    rc.data.pairs = kRecurrencePairs;
    const auto set = make_phantom_set(rc, 91);
    std::vector<double> lung;
    std::string line;
    for (int t : {1, 2, 4, 8}) {
        EngineConfig cfg;
        cfg.steps = t;
        std::vector<double> v;
        for (const auto &sp : set) v.push_back(mean_lung_dsc(evaluate_pair(sp, register_with_optimizer(sp, cfg))));
        lung.push_back(mean_of(v));
        line += fmt(" T=%d %.4f", t, lung.back());
        std::printf("    T=%d lung DSC %.4f\n", t, lung.back());
        std::fflush(stdout);
    }
    bool ok = true;
    for (size_t i = 1; i < lung.size(); ++i) ok = ok && lung[i] >= lung[i - 1] - kRecurrenceSlack;
    Outcome o;
    o.pass = ok;
    o.detail = fmt("mean lung DSC over %d evaluation pairs (optimize_pair), slack %.2f:%s", kRecurrencePairs,
                   kRecurrenceSlack, line.c_str());
    return o;
}

// ---------------------------------------------------------------- 10

std::string slurp(const fs::path &p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

// First and last `total` column of loss.csv.
std::pair<double, double> loss_endpoints(const fs::path &csv) {
    std::ifstream f(csv);
    std::string line;
    std::getline(f, line);
    std::vector<double> totals;
    while (std::getline(f, line)) {
        const auto comma = line.rfind(',');
        if (comma != std::string::npos) totals.push_back(std::stod(line.substr(comma + 1)));
    }
    if (totals.empty()) return {NAN, NAN};
    return {totals.front(), totals.back()};
}

Outcome end_to_end(const Context &ctx) {
    if (ctx.tracer.empty()) return {false, "no --tracer executable given"};
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> reports, checkpoints;
    std::pair<double, double> loss{NAN, NAN};
    for (int run = 0; run < 2; ++run) {
        const fs::path dir = ctx.work / ("e2e_run" + std::to_string(run));
        fs::remove_all(dir);
        fs::create_directories(dir);
        const std::string log = (dir / "log.txt").string();
        const std::string t = "\"" + ctx.tracer + "\"";
        const std::string d = "\"" + dir.string() + "\"";
        const std::vector<std::string> cmds{
            t + " phantom --pairs 10 --seed 2024 --out " + d + "/data",
            t + " train --data " + d + "/data --epochs 40 --seed 2024 --out " + d + "/train",
            t + " evaluate --data " + d + "/data --checkpoint " + d + "/train/checkpoint.trcr --out " + d + "/eval",
        };
        for (const auto &c : cmds) {
            const int rc = std::system((c + " >> \"" + log + "\" 2>&1").c_str());
            if (rc != 0) return {false, fmt("run %d: `%s` failed (status %d), see %s", run, c.c_str(), rc, log.c_str())};
        }
        reports.push_back(slurp(dir / "eval" / "report.csv"));
        checkpoints.push_back(slurp(dir / "train" / "checkpoint.trcr"));
        if (run == 0) loss = loss_endpoints(dir / "train" / "loss.csv");
        std::printf("    run %d done at %.0f s\n", run, seconds_since(t0));
        std::fflush(stdout);
    }
    const double elapsed = seconds_since(t0);
    const bool same = !reports[0].empty() && reports[0] == reports[1];
    Outcome o;
    o.pass = same && elapsed <= kE2eSeconds;
    o.detail = fmt("report.csv %s (%zu bytes), checkpoints %s; %.0f s total (limit %.0f s); training loss %.5f -> "
                   "%.5f (ratio %.3f)",
                   same ? "bit-identical" : "DIFFERENT", reports[0].size(),
                   checkpoints[0] == checkpoints[1] ? "bit-identical" : "different", elapsed, kE2eSeconds, loss.first,
                   loss.second, loss.second / loss.first);
    return o;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"acceptance checks"};
    Context ctx;
    std::string work = (fs::temp_directory_path() / "tracer_acceptance").string();
    std::vector<int> only;
    app.add_option("--tracer", ctx.tracer, "CLI executable used by the end-to-end check");
    app.add_option("--work", work, "scratch directory");
    app.add_option("criteria", only, "run only these criteria")->check(CLI::Range(1, 10));
    CLI11_PARSE(app, argc, argv);
    ctx.work = work;
    fs::create_directories(ctx.work);

    const std::vector<std::pair<const char *, std::function<Outcome(const Context &)>>> criteria{
        {"gradient correctness", gradients},
        {"diffeomorphic integration", integration},
        {"identity start", identity_start},
        {"known-deformation recovery", recovery},
        {"tumour preservation", tumor_preservation_check},
        {"obliteration behaviour", obliteration},
        {"metric oracle equivalence", metric_oracles},
        {"vba filtering", vba},
        {"recurrence value", recurrence},
        {"end-to-end determinism", end_to_end},
    };
    int failed = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i) + 1;
        if (!only.empty() && std::find(only.begin(), only.end(), n) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second(ctx);
        } catch (const std::exception &ex) {
            o = {false, std::string("exception: ") + ex.what()};
        }
        failed += !o.pass;
        std::printf("criterion %2d %s  %s: %s [%.0f s]\n", n, o.pass ? "PASS" : "FAIL", criteria[i].first,
                    o.detail.c_str(), seconds_since(t0));
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
