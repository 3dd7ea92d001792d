// losses.hpp - tumor-conditioned registration objective.
//
// Every term is averaged over the recurrent steps. Images and masks are
// [1, D, H, W] tensors; masks may be soft (trilinearly warped) values in [0, 1].
#pragma once

#include <string>
#include <vector>

#include "tracer/deformation.hpp"
#include "tracer/tensor.hpp"

namespace tracer {

struct LossWeights {
    double lambda_smooth = 25.0;
    double lambda_pre = 1000.0;
    double lambda_ob = 1000.0;

    // Throws std::invalid_argument on a negative weight.
    void validate() const;
};

enum class SmoothnessNorm {
    per_voxel, // squared gradients averaged over voxels
    raw_sum,   // plain sum over voxels
};

// Unit of the displacement whose gradient is penalised. `normalized` rescales
// component a by 2 / (n_a - 1), i.e. the [-1, 1] grid coordinates used by
// most spatial-transformer code.
enum class SmoothnessUnits { voxel, normalized };

struct SmoothnessOptions {
    SmoothnessNorm norm = SmoothnessNorm::per_voxel;
    SmoothnessUnits units = SmoothnessUnits::normalized;
};

// State recorded for recurrent step t (1-based in the notation below).
struct StepRecord {
    DeformationField phi;     // phi^t
    DeformationField phi_hat; // exp(-v^t)
    Tensor warped_moving;     // I_m^t
    Tensor warped_moving_mask; // y_m^t
    Tensor warped_fixed;      // I_f^t, fixed image pulled into moving space
    Tensor warped_fixed_mask; // y_f^t
    Tensor moving_mask_prev;  // y_m^{t-1}
    Tensor fixed_mask_prev;   // y_f^{t-1}
};

// Unwarped inputs of one pair as tensors.
struct LossInputs {
    Tensor moving, moving_mask, fixed, fixed_mask;
};

// mean_t MSE between I_f and I_m^t outside both tumours, i.e. of
// (I_f - I_m^t) (1 - y_f) (1 - y_m^t).
Tensor masked_similarity(const std::vector<StepRecord> &steps, const Tensor &fixed, const Tensor &fixed_mask);
// Inverse direction: the same between I_m and I_f^t with y_m and y_f^t.
Tensor inverse_similarity(const std::vector<StepRecord> &steps, const Tensor &moving, const Tensor &moving_mask);

// mean_t of the summed squared spatial derivatives of all displacement components.
Tensor smoothness(const std::vector<DeformationField> &fields, SmoothnessNorm norm = SmoothnessNorm::per_voxel,
                  SmoothnessUnits units = SmoothnessUnits::voxel);

// Mean of (det - 1)^2 weighted by `mask` (differentiable in both).
// Returns 0 and sets `empty` when the mask has no weight.
Tensor masked_jacobian_penalty(const DeformationField &phi, const Tensor &mask, bool *empty = nullptr);

// mean_t of the masked (det grad phi^t - 1)^2 over y_m^{t-1}.
Tensor tumor_preservation(const std::vector<StepRecord> &steps, bool *empty_mask_warning = nullptr);
// Same over y_f^{t-1} with the inverse flows.
Tensor tumor_obliteration(const std::vector<StepRecord> &steps, bool *empty_mask_warning = nullptr);

struct LossTerms {
    double sim = 0, sim_hat = 0, smooth = 0, smooth_hat = 0, pre = 0, ob = 0;
};

// sim + sim_hat + l_s (smooth + smooth_hat) + l_p pre + l_o ob.
double weighted_total(const LossTerms &terms, const LossWeights &w);

struct LossBreakdown {
    Tensor total;
    LossTerms terms;
    double total_value = 0;
    bool pre_empty_mask = false;
    bool ob_empty_mask = false;
};

LossBreakdown total_loss(const LossInputs &pair, const std::vector<StepRecord> &steps, const LossWeights &w,
                         SmoothnessOptions smooth = {});

} // namespace tracer
