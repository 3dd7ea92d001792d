// network.cpp - recurrent encoder/decoder and the unrolled registration.

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "tracer/engine.hpp"
#include "tracer/random.hpp"

namespace tracer {

namespace {

Tensor uniform_tensor(Shape shape, double bound, Rng &rng) {
    std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
    for (auto &v : data) v = static_cast<float>(rng.uniform(-bound, bound));
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

ConvParams make_conv(int64_t out, int64_t in, Rng &rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * 27));
    return {uniform_tensor({out, in, 3, 3, 3}, bound, rng), Tensor::zeros({out}, true)};
}

Tensor apply_conv(const Tensor &x, const ConvParams &p, int stride = 1) {
    return add_bias(conv3d(x, p.kernel, stride, 1), p.bias);
}

void require_finite(const Tensor &t, int step, const char *where, int level) {
    for (float v : t.data()) {
        if (!std::isfinite(v)) {
            std::ostringstream msg;
            msg << "non-finite activation at step " << step << ", " << where << " level " << level;
            throw std::runtime_error(msg.str());
        }
    }
}

Tensor mask_tensor(const Volume &mask, bool enabled) {
    return enabled ? Tensor::from_volume(mask) : Tensor::zeros({1, mask.extents.d, mask.extents.h, mask.extents.w});
}

// One pass of the encoder/decoder; returns the full-resolution velocity field.
Tensor predict_velocity(const Tensor &input, std::vector<CLSTMState> &states, const NetworkParams &params,
                        const EngineConfig &cfg, int step) {
    const int levels = cfg.levels();
    const float slope = cfg.leaky_slope;
    std::vector<Tensor> x(static_cast<size_t>(levels + 1));
    x[0] = input;
    for (int l = 0; l < levels; ++l) {
        states[l] = clstm_step(x[l], states[l], params.clstm[l]);
        require_finite(states[l].h, step, "encoder", l);
        x[l + 1] = leaky_relu(apply_conv(states[l].h, params.down[l], 2), slope);
    }
    Tensor d = x[levels];
    for (int j = levels - 1; j >= 1; --j) {
        const Tensor up = resize_trilinear(d, states[j].h.extents());
        d = leaky_relu(apply_conv(concat_channels({up, states[j].h}), params.decoder[j]), slope);
        require_finite(d, step, "decoder", j);
    }
    if (cfg.half_res_flow) {
        d = leaky_relu(apply_conv(concat_channels({d, x[1]}), params.decoder[0]), slope);
    } else {
        const Tensor up = resize_trilinear(d, states[0].h.extents());
        d = leaky_relu(apply_conv(concat_channels({up, states[0].h}), params.decoder[0]), slope);
    }
    require_finite(d, step, "decoder", 0);
    Tensor v = apply_conv(d, params.flow_head);
    if (cfg.half_res_flow) v = resize_trilinear(v, input.extents());
    return v;
}

struct Unroller {
    const EngineConfig &cfg;
    ForwardResult out;
    Tensor im, ym, jf, yf;

    Unroller(const RegistrationPair &pair, const EngineConfig &c) : cfg(c) {
        pair.validate();
        out.inputs.moving = Tensor::from_volume(pair.moving);
        out.inputs.fixed = Tensor::from_volume(pair.fixed);
        out.inputs.moving_mask = mask_tensor(pair.moving_mask, cfg.conditioning.forward);
        out.inputs.fixed_mask = mask_tensor(pair.fixed_mask, cfg.conditioning.inverse);
        im = out.inputs.moving;
        ym = out.inputs.moving_mask;
        jf = out.inputs.fixed;
        yf = out.inputs.fixed_mask;
    }

    Tensor network_input() const { return concat_channels({im, ym, out.inputs.fixed, out.inputs.fixed_mask}); }

    void advance(const Tensor &v) {
        StepRecord s;
        s.phi = exp_svf({v}, cfg.n_int);
        s.phi_hat = invert_svf({v}, cfg.n_int);
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
        out.steps.push_back(std::move(s));
        out.velocities.push_back(v);
    }

    ForwardResult finish() {
        NoGradGuard ng;
        DeformationField phi{out.steps.front().phi.disp.detach()};
        DeformationField phi_hat{out.steps.front().phi_hat.disp.detach()};
        for (size_t t = 1; t < out.steps.size(); ++t) {
            phi = compose(phi, {out.steps[t].phi.disp.detach()});
            phi_hat = compose({out.steps[t].phi_hat.disp.detach()}, phi_hat);
        }
        out.phi_final = phi;
        out.phi_hat_final = phi_hat;
        return std::move(out);
    }
};

} // namespace

Conditioning Conditioning::from_name(const std::string &name) {
    if (name == "both") return {true, true};
    if (name == "forward") return {true, false};
    if (name == "inverse") return {false, true};
    if (name == "none") return {false, false};
    throw std::invalid_argument("unknown conditioning '" + name + "' (expected none|forward|inverse|both)");
}

std::string Conditioning::name() const {
    if (forward && inverse) return "both";
    if (forward) return "forward";
    if (inverse) return "inverse";
    return "none";
}

void EngineConfig::validate() const {
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    if (n_int < 1) throw std::invalid_argument("n_int must be >= 1");
    if (channels.size() < 2) throw std::invalid_argument("need at least 2 encoder levels");
    for (int c : channels)
        if (c <= 0) throw std::invalid_argument("channel counts must be positive");
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (learning_rate < 0 || optimize_learning_rate < 0) throw std::invalid_argument("learning rates must be >= 0");
    if (optimize_iterations < 0) throw std::invalid_argument("optimize_iterations must be >= 0");
    weights.validate();
}

void RegistrationPair::validate() const {
    const Extents e = moving.extents;
    require_same_extents(e, fixed.extents, "registration pair (fixed image)");
    require_same_extents(e, moving_mask.extents, "registration pair (moving mask)");
    require_same_extents(e, fixed_mask.extents, "registration pair (fixed mask)");
    for (const Volume *v : {&moving, &fixed, &moving_mask, &fixed_mask})
        if (v->channels != 1) throw dimension_error("registration pair volumes must have one channel");
}

CLSTMParams CLSTMParams::zeros(int64_t in_channels, int64_t hidden, bool requires_grad) {
    CLSTMParams p;
    p.in_channels = in_channels;
    p.hidden = hidden;
    p.kernel = Tensor::zeros({4 * hidden, in_channels + hidden, 3, 3, 3}, requires_grad);
    p.bias = Tensor::zeros({4 * hidden}, requires_grad);
    return p;
}

NetworkParams NetworkParams::init(const EngineConfig &cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    NetworkParams p;
    const int levels = cfg.levels();
    int64_t in = 4;
    for (int l = 0; l < levels; ++l) {
        const int64_t c = cfg.channels[l];
        CLSTMParams cell = CLSTMParams::zeros(in, c, true);
        cell.kernel = uniform_tensor(cell.kernel.shape(), 1.0 / std::sqrt(static_cast<double>((in + c) * 27)), rng);
        p.clstm.push_back(cell);
        p.down.push_back(make_conv(c, c, rng));
        in = c;
    }
    p.decoder.resize(static_cast<size_t>(levels));
    for (int j = levels - 1; j >= 0; --j) {
        const int64_t below = j == levels - 1 ? cfg.channels[j] : cfg.channels[j + 1];
        p.decoder[j] = make_conv(cfg.channels[j], below + cfg.channels[j], rng);
    }
    p.flow_head = {Tensor::zeros({3, cfg.channels[0], 3, 3, 3}, true), Tensor::zeros({3}, true)};
    return p;
}

std::vector<Tensor> NetworkParams::tensors() const {
    std::vector<Tensor> out;
    for (const auto &c : clstm) {
        out.push_back(c.kernel);
        out.push_back(c.bias);
    }
    for (const auto *group : {&down, &decoder}) {
        for (const auto &c : *group) {
            out.push_back(c.kernel);
            out.push_back(c.bias);
        }
    }
    out.push_back(flow_head.kernel);
    out.push_back(flow_head.bias);
    return out;
}

int64_t NetworkParams::parameter_count() const {
    int64_t n = 0;
    for (const auto &t : tensors()) n += t.numel();
    return n;
}

NetworkParams NetworkParams::clone() const {
    NetworkParams p = *this;
    for (auto &c : p.clstm) {
        c.kernel = c.kernel.clone(true);
        c.bias = c.bias.clone(true);
    }
    for (auto *group : {&p.down, &p.decoder}) {
        for (auto &c : *group) {
            c.kernel = c.kernel.clone(true);
            c.bias = c.bias.clone(true);
        }
    }
    p.flow_head.kernel = p.flow_head.kernel.clone(true);
    p.flow_head.bias = p.flow_head.bias.clone(true);
    return p;
}

CLSTMState clstm_step(const Tensor &x, const CLSTMState &state, const CLSTMParams &params) {
    if (x.rank() != 4 || x.dim(0) != params.in_channels)
        throw dimension_error("clstm_step: input has " + std::to_string(x.rank() == 4 ? x.dim(0) : -1) +
                              " channels, expected " + std::to_string(params.in_channels));
    const int64_t c = params.hidden;
    const Extents e = x.extents();
    const Tensor h = state.h.defined() ? state.h : Tensor::zeros({c, e.d, e.h, e.w});
    if (h.extents() != e || h.dim(0) != c) throw dimension_error("clstm_step: hidden state shape mismatch");
    const Tensor gates = add_bias(conv3d(concat_channels({x, h}), params.kernel, 1, 1), params.bias);
    const Tensor f = sigmoid(slice_channels(gates, 0, c));
    const Tensor i = sigmoid(slice_channels(gates, c, 2 * c));
    const Tensor g = tanh(slice_channels(gates, 2 * c, 3 * c));
    const Tensor o = sigmoid(slice_channels(gates, 3 * c, 4 * c));
    const Tensor ig = mul(i, g);
    const Tensor cell = state.c.defined() ? add(mul(f, state.c), ig) : ig;
    return {mul(o, tanh(cell)), cell};
}

ForwardResult forward_register(const RegistrationPair &pair, const NetworkParams &params, const EngineConfig &cfg) {
    cfg.validate();
    if (static_cast<int>(params.clstm.size()) != cfg.levels())
        throw std::invalid_argument("network has " + std::to_string(params.clstm.size()) + " levels, config expects " +
                                    std::to_string(cfg.levels()));
    Unroller u(pair, cfg);
    std::vector<CLSTMState> states(static_cast<size_t>(cfg.levels()));
    for (int t = 1; t <= cfg.steps; ++t) u.advance(predict_velocity(u.network_input(), states, params, cfg, t));
    return u.finish();
}

ForwardResult unroll_velocities(const RegistrationPair &pair, const std::vector<Tensor> &velocities,
                                const EngineConfig &cfg) {
    if (velocities.empty()) throw std::invalid_argument("unroll_velocities: need at least one velocity field");
    Unroller u(pair, cfg);
    for (const auto &v : velocities) {
        require_same_extents(v.extents(), pair.extents(), "unroll_velocities");
        u.advance(v);
    }
    return u.finish();
}

} // namespace tracer
