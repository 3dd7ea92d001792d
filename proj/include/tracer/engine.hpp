// engine.hpp - recurrent registration network, training and per-pair optimisation.
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "tracer/deformation.hpp"
#include "tracer/losses.hpp"
#include "tracer/tensor.hpp"
#include "tracer/volume.hpp"

namespace tracer {

// Which tumour masks condition the model. Disabling a side zeroes its mask
// channel at the input, drops it from the similarity masking and disables
// the matching rigidity term (preservation for forward, obliteration for inverse).
struct Conditioning {
    bool forward = true; // moving-image tumour y_m
    bool inverse = true; // fixed-image tumour y_f

    static Conditioning from_name(const std::string &name); // none|forward|inverse|both
    std::string name() const;
};

struct EngineConfig {
    int steps = 8;  // recurrent steps T
    int n_int = 7;  // scaling-and-squaring steps per velocity field
    std::vector<int> channels{8, 16, 16, 32}; // one entry per encoder level
    bool half_res_flow = true; // predict velocities at half resolution
    float leaky_slope = 0.2f;

    double learning_rate = 2e-4;
    int epochs = 100;
    int batch_size = 2;
    uint64_t seed = 0;

    LossWeights weights;
    SmoothnessOptions smoothness;
    Conditioning conditioning;

    // Per-pair optimisation.
    int optimize_iterations = 150;
    double optimize_learning_rate = 0.05;
    bool optimize_half_res = true;

    int levels() const { return static_cast<int>(channels.size()); }
    // Throws std::invalid_argument on an inconsistent configuration.
    void validate() const;
};

struct RegistrationPair {
    Volume moving, moving_mask, fixed, fixed_mask;
    std::string name;

    Extents extents() const { return moving.extents; }
    // Throws dimension_error when the four volumes disagree.
    void validate() const;
};

// Weights of one convolutional LSTM level. The gate kernel acts on the
// channel concatenation {x, h} and stacks the four gates along its output
// channels in the order forget, input, candidate, output.
struct CLSTMParams {
    Tensor kernel; // [4C, Cin + C, 3, 3, 3]
    Tensor bias;   // [4C]
    int64_t in_channels = 0;
    int64_t hidden = 0;

    static CLSTMParams zeros(int64_t in_channels, int64_t hidden, bool requires_grad = false);
};

struct ConvParams {
    Tensor kernel;
    Tensor bias;
};

struct NetworkParams {
    std::vector<CLSTMParams> clstm; // per encoder level
    std::vector<ConvParams> down;   // stride-2 convolution after each level
    std::vector<ConvParams> decoder; // decoder[j] produces the features at level j
    ConvParams flow_head;           // 3 output channels, zero-initialised

    // Uniform(+-1/sqrt(fan_in)) kernels, zero biases, zero flow head.
    static NetworkParams init(const EngineConfig &cfg, uint64_t seed);

    std::vector<Tensor> tensors() const; // fixed traversal order
    int64_t parameter_count() const;
    NetworkParams clone() const;
};

struct CLSTMState {
    Tensor h, c;
};

// f = s(W_f * {x,h} + b_f), i = s(...), c~ = tanh(...), o = s(...),
// c' = f c + i c~, h' = o tanh(c'). A default-constructed state counts as zero.
CLSTMState clstm_step(const Tensor &x, const CLSTMState &state, const CLSTMParams &params);

struct ForwardResult {
    std::vector<StepRecord> steps;
    std::vector<Tensor> velocities; // full-resolution v^t
    DeformationField phi_final;     // compose of phi^1 .. phi^T, warps moving onto fixed
    DeformationField phi_hat_final; // exp(-v) fields composed in reverse order, warps fixed onto moving
    LossInputs inputs;              // pair tensors after conditioning masks are applied
};

// Runs the T recurrent steps. The graph is recorded when gradients are enabled.
ForwardResult forward_register(const RegistrationPair &pair, const NetworkParams &params, const EngineConfig &cfg);

// Builds the step records for given per-step full-resolution velocity fields.
ForwardResult unroll_velocities(const RegistrationPair &pair, const std::vector<Tensor> &velocities,
                                const EngineConfig &cfg);

struct EpochLog {
    int epoch = 0;
    double learning_rate = 0;
    LossTerms terms;
    double total = 0;
};

using EpochCallback = std::function<void(const EpochLog &)>;

// Adam (0.9, 0.999, 1e-8).
class Adam {
  public:
    Adam(std::vector<Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    // Applies one update from the accumulated gradients, then clears them.
    void step(double lr);
    int64_t iterations() const { return t_; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<float>> m_, v_;
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Learning rate for a zero-based epoch: constant for the first half, then a
// linear decay that would reach zero at `epochs`.
double scheduled_learning_rate(double lr0, int epoch, int epochs);

struct TrainResult {
    NetworkParams params;
    std::vector<EpochLog> history;
};

TrainResult train(const std::vector<RegistrationPair> &dataset, const EngineConfig &cfg,
                  const NetworkParams *initial = nullptr, const EpochCallback &on_epoch = {});

struct OptimizeResult {
    std::vector<Tensor> velocities; // full resolution
    ForwardResult result;
    std::vector<double> loss_history;
};

// Direct gradient descent on T velocity fields against the training objective.
OptimizeResult optimize_pair(const RegistrationPair &pair, const EngineConfig &cfg);

// Loss history as CSV rows: epoch,L_sim,L_hat_sim,L_smooth,L_hat_smooth,L_pre,L_ob,total.
void write_loss_csv(std::ostream &os, const std::vector<EpochLog> &history);

// Checkpoint: "TRCR", format version byte, config JSON, then every tensor as
// rank + extents + little-endian float32 data. See README for the layout.
void save_checkpoint(const std::string &path, const NetworkParams &params, const EngineConfig &cfg);
NetworkParams load_checkpoint(const std::string &path, EngineConfig *cfg = nullptr);

std::string config_to_json(const EngineConfig &cfg);
// Missing keys keep the values already in `base`.
EngineConfig config_from_json(const std::string &text, EngineConfig base = {});

} // namespace tracer
