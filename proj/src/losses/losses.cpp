// losses.cpp

#include "tracer/losses.hpp"

#include <algorithm>
#include <stdexcept>

namespace tracer {

namespace {

void require_steps(const std::vector<StepRecord> &steps, const char *what) {
    if (steps.empty()) throw std::invalid_argument(std::string(what) + ": need at least one step");
}

// mean(((a - b) (1 - ma) (1 - mb))^2)
Tensor masked_mse(const Tensor &a, const Tensor &ma, const Tensor &b, const Tensor &mb) {
    const Tensor keep = mul(add_scalar(scale(ma, -1.0f), 1.0f), add_scalar(scale(mb, -1.0f), 1.0f));
    return mean(square(mul(sub(a, b), keep)));
}

Tensor average(const std::vector<Tensor> &terms) {
    Tensor acc = terms.front();
    for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return scale(acc, 1.0f / static_cast<float>(terms.size()));
}

} // namespace

void LossWeights::validate() const {
    if (lambda_smooth < 0 || lambda_pre < 0 || lambda_ob < 0)
        throw std::invalid_argument("loss weights must be non-negative");
}

Tensor masked_similarity(const std::vector<StepRecord> &steps, const Tensor &fixed, const Tensor &fixed_mask) {
    require_steps(steps, "masked_similarity");
    std::vector<Tensor> terms;
    for (const auto &s : steps) {
        require_same_extents(s.warped_moving.extents(), fixed.extents(), "masked_similarity");
        terms.push_back(masked_mse(fixed, fixed_mask, s.warped_moving, s.warped_moving_mask));
    }
    return average(terms);
}

Tensor inverse_similarity(const std::vector<StepRecord> &steps, const Tensor &moving, const Tensor &moving_mask) {
    require_steps(steps, "inverse_similarity");
    std::vector<Tensor> terms;
    for (const auto &s : steps) {
        require_same_extents(s.warped_fixed.extents(), moving.extents(), "inverse_similarity");
        terms.push_back(masked_mse(moving, moving_mask, s.warped_fixed, s.warped_fixed_mask));
    }
    return average(terms);
}

Tensor smoothness(const std::vector<DeformationField> &fields, SmoothnessNorm norm, SmoothnessUnits units) {
    if (fields.empty()) throw std::invalid_argument("smoothness: need at least one field");
    std::vector<Tensor> terms;
    for (const auto &phi : fields) {
        Tensor disp = phi.disp;
        if (units == SmoothnessUnits::normalized) {
            const Extents e = phi.extents();
            std::vector<Tensor> parts;
            for (int c = 0; c < 3; ++c)
                parts.push_back(scale(slice_channels(disp, c, c + 1), 2.0f / static_cast<float>(std::max<int64_t>(e[c] - 1, 1))));
            disp = concat_channels(parts);
        }
        Tensor acc;
        for (int axis = 0; axis < 3; ++axis) {
            const Tensor g = sum(square(finite_difference(disp, axis)));
            acc = acc.defined() ? add(acc, g) : g;
        }
        if (norm == SmoothnessNorm::per_voxel) acc = scale(acc, 1.0f / static_cast<float>(phi.extents().voxels()));
        terms.push_back(acc);
    }
    return average(terms);
}

Tensor masked_jacobian_penalty(const DeformationField &phi, const Tensor &mask, bool *empty) {
    require_same_extents(phi.extents(), mask.extents(), "masked_jacobian_penalty");
    double weight = 0;
    for (float m : mask.data()) weight += m;
    const bool none = weight < 0.5;
    if (empty) *empty = none;
    if (none) return Tensor::scalar(0.0f);
    const Tensor dev = square(add_scalar(jacobian_det(phi), -1.0f));
    return div(sum(mul(dev, mask)), sum(mask));
}

Tensor tumor_preservation(const std::vector<StepRecord> &steps, bool *empty_mask_warning) {
    require_steps(steps, "tumor_preservation");
    std::vector<Tensor> terms;
    bool any_empty = false;
    for (const auto &s : steps) {
        bool empty = false;
        terms.push_back(masked_jacobian_penalty(s.phi, s.moving_mask_prev, &empty));
        any_empty = any_empty || empty;
    }
    if (empty_mask_warning) *empty_mask_warning = any_empty;
    return average(terms);
}

Tensor tumor_obliteration(const std::vector<StepRecord> &steps, bool *empty_mask_warning) {
    require_steps(steps, "tumor_obliteration");
    std::vector<Tensor> terms;
    bool any_empty = false;
    for (const auto &s : steps) {
        bool empty = false;
        terms.push_back(masked_jacobian_penalty(s.phi_hat, s.fixed_mask_prev, &empty));
        any_empty = any_empty || empty;
    }
    if (empty_mask_warning) *empty_mask_warning = any_empty;
    return average(terms);
}

double weighted_total(const LossTerms &t, const LossWeights &w) {
    return t.sim + t.sim_hat + w.lambda_smooth * (t.smooth + t.smooth_hat) + w.lambda_pre * t.pre + w.lambda_ob * t.ob;
}

LossBreakdown total_loss(const LossInputs &pair, const std::vector<StepRecord> &steps, const LossWeights &w,
                         SmoothnessOptions smooth_opts) {
    w.validate();
    require_steps(steps, "total_loss");
    std::vector<DeformationField> fwd, inv;
    for (const auto &s : steps) {
        fwd.push_back(s.phi);
        inv.push_back(s.phi_hat);
    }
    LossBreakdown out;
    const Tensor sim = masked_similarity(steps, pair.fixed, pair.fixed_mask);
    const Tensor sim_hat = inverse_similarity(steps, pair.moving, pair.moving_mask);
    const Tensor smooth = smoothness(fwd, smooth_opts.norm, smooth_opts.units);
    const Tensor smooth_hat = smoothness(inv, smooth_opts.norm, smooth_opts.units);
    Tensor total = add(add(sim, sim_hat), scale(add(smooth, smooth_hat), static_cast<float>(w.lambda_smooth)));
    // Skipping disabled rigidity terms also skips their Jacobian graphs.
    if (w.lambda_pre > 0) {
        const Tensor pre = tumor_preservation(steps, &out.pre_empty_mask);
        out.terms.pre = pre.item();
        total = add(total, scale(pre, static_cast<float>(w.lambda_pre)));
    }
    if (w.lambda_ob > 0) {
        const Tensor ob = tumor_obliteration(steps, &out.ob_empty_mask);
        out.terms.ob = ob.item();
        total = add(total, scale(ob, static_cast<float>(w.lambda_ob)));
    }
    out.terms.sim = sim.item();
    out.terms.sim_hat = sim_hat.item();
    out.terms.smooth = smooth.item();
    out.terms.smooth_hat = smooth_hat.item();
    out.total = total;
    out.total_value = total.item();
    return out;
}

} // namespace tracer
