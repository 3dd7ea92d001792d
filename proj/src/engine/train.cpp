// train.cpp - Adam, the training loop and per-pair optimisation.

#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "tracer/engine.hpp"
#include "tracer/random.hpp"

namespace tracer {

namespace {

// Switching a conditioning side off also switches its rigidity term off.
LossWeights effective_weights(const EngineConfig &cfg) {
    LossWeights w = cfg.weights;
    if (!cfg.conditioning.forward) w.lambda_pre = 0;
    if (!cfg.conditioning.inverse) w.lambda_ob = 0;
    return w;
}

void add_terms(LossTerms &acc, const LossTerms &t, double s) {
    acc.sim += s * t.sim;
    acc.sim_hat += s * t.sim_hat;
    acc.smooth += s * t.smooth;
    acc.smooth_hat += s * t.smooth_hat;
    acc.pre += s * t.pre;
    acc.ob += s * t.ob;
}

Extents half_extents(Extents e) { return {(e.d + 1) / 2, (e.h + 1) / 2, (e.w + 1) / 2}; }

} // namespace

Adam::Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto &p : params_) {
        if (!p.requires_grad()) throw std::invalid_argument("Adam: parameter does not require a gradient");
        m_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
        v_.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    }
}

void Adam::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        Tensor &p = params_[k];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto x = p.mutable_data();
        auto &m = m_[k];
        auto &v = v_[k];
        for (size_t i = 0; i < x.size(); ++i) {
            m[i] = static_cast<float>(beta1_ * m[i] + (1 - beta1_) * g[i]);
            v[i] = static_cast<float>(beta2_ * v[i] + (1 - beta2_) * g[i] * g[i]);
            const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            x[i] = static_cast<float>(x[i] - update);
        }
        p.zero_grad();
    }
}

double scheduled_learning_rate(double lr0, int epoch, int epochs) {
    if (epochs <= 0) return lr0;
    const int half = epochs / 2;
    if (epoch < half) return lr0;
    return lr0 * static_cast<double>(epochs - epoch) / static_cast<double>(epochs - half);
}

TrainResult train(const std::vector<RegistrationPair> &dataset, const EngineConfig &cfg, const NetworkParams *initial,
                  const EpochCallback &on_epoch) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
    for (const auto &p : dataset) p.validate();
    TrainResult out;
    out.params = initial ? initial->clone() : NetworkParams::init(cfg, cfg.seed);
    for (auto &t : out.params.tensors()) t.zero_grad();
    Adam opt(out.params.tensors());
    const LossWeights w = effective_weights(cfg);
    Rng shuffle_rng(cfg.seed ^ 0x5eedf00dULL);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t{0});

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.integer(0, static_cast<int64_t>(i) - 1))]);
        const double lr = scheduled_learning_rate(cfg.learning_rate, epoch, cfg.epochs);
        EpochLog log;
        log.epoch = epoch;
        log.learning_rate = lr;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const float inv_batch = 1.0f / static_cast<float>(end - start);
            for (size_t k = start; k < end; ++k) {
                const RegistrationPair &pair = dataset[order[k]];
                const ForwardResult fr = forward_register(pair, out.params, cfg);
                const LossBreakdown lb = total_loss(fr.inputs, fr.steps, w, cfg.smoothness);
                if (!std::isfinite(lb.total_value)) {
                    std::ostringstream msg;
                    msg << "training diverged at epoch " << epoch << " on pair '" << pair.name << "'";
                    throw std::runtime_error(msg.str());
                }
                backward(scale(lb.total, inv_batch));
                add_terms(log.terms, lb.terms, 1.0 / static_cast<double>(dataset.size()));
                log.total += lb.total_value / static_cast<double>(dataset.size());
            }
            opt.step(lr);
        }
        out.history.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return out;
}

OptimizeResult optimize_pair(const RegistrationPair &pair, const EngineConfig &cfg) {
    cfg.validate();
    pair.validate();
    const Extents full = pair.extents();
    const Extents grid = cfg.optimize_half_res ? half_extents(full) : full;
    std::vector<Tensor> leaves;
    for (int t = 0; t < cfg.steps; ++t) leaves.push_back(Tensor::zeros({3, grid.d, grid.h, grid.w}, true));
    const LossWeights w = effective_weights(cfg);
    auto expand = [&] {
        std::vector<Tensor> v;
        for (const auto &leaf : leaves) v.push_back(cfg.optimize_half_res ? resize_trilinear(leaf, full) : leaf);
        return v;
    };

    OptimizeResult out;
    Adam opt(leaves);
    for (int it = 0; it < cfg.optimize_iterations; ++it) {
        const ForwardResult fr = unroll_velocities(pair, expand(), cfg);
        const LossBreakdown lb = total_loss(fr.inputs, fr.steps, w, cfg.smoothness);
        if (!std::isfinite(lb.total_value))
            throw std::runtime_error("optimize_pair diverged at iteration " + std::to_string(it));
        out.loss_history.push_back(lb.total_value);
        backward(lb.total);
        opt.step(scheduled_learning_rate(cfg.optimize_learning_rate, it, cfg.optimize_iterations));
    }
    NoGradGuard ng;
    for (const auto &v : expand()) out.velocities.push_back(v.detach());
    out.result = unroll_velocities(pair, out.velocities, cfg);
    return out;
}

void write_loss_csv(std::ostream &os, const std::vector<EpochLog> &history) {
    os << "epoch,L_sim,L_hat_sim,L_smooth,L_hat_smooth,L_pre,L_ob,total\n";
    const auto old = os.precision(9);
    for (const auto &h : history) {
        const LossTerms &t = h.terms;
        os << h.epoch << ',' << t.sim << ',' << t.sim_hat << ',' << t.smooth << ',' << t.smooth_hat << ',' << t.pre
           << ',' << t.ob << ',' << h.total << '\n';
    }
    os.precision(old);
}

} // namespace tracer
