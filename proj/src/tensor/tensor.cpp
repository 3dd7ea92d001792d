// tensor.cpp - graph bookkeeping, elementwise primitives and reductions.

#include "tracer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tracer {

namespace {

thread_local bool g_grad_enabled = true;

std::vector<float> &grad_of(const std::shared_ptr<detail::Node> &n) { return n->ensure_grad(); }

void require_same_shape(const Tensor &a, const Tensor &b, const char *what) {
    if (!a.defined() || !b.defined()) {
        throw std::invalid_argument(std::string(what) + ": undefined tensor");
    }
    if (a.shape() != b.shape()) {
        throw dimension_error(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
    }
}

template <class F> Tensor unary(const char *name, const Tensor &a, F f, std::function<void(detail::Node &)> bw) {
    const auto in = a.data();
    std::vector<float> out(in.size());
    for (size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return make_op(name, a.shape(), std::move(out), {a}, std::move(bw));
}

} // namespace

int64_t shape_numel(const Shape &shape) {
    int64_t n = 1;
    for (auto e : shape) {
        if (e <= 0) throw dimension_error("non-positive extent in shape " + shape_str(shape));
        n *= e;
    }
    return n;
}

std::string shape_str(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

std::string Extents::str() const {
    return std::to_string(d) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

Volume Volume::channel_volume(int64_t c) const {
    Volume out(extents, spacing, 1);
    auto src = channel(c);
    std::copy(src.begin(), src.end(), out.voxels.begin());
    return out;
}

void require_same_extents(const Extents &a, const Extents &b, const char *what) {
    if (!(a == b)) throw dimension_error(std::string(what) + ": extent mismatch " + a.str() + " vs " + b.str());
}

int64_t count_foreground(const Volume &mask) {
    return std::count_if(mask.voxels.begin(), mask.voxels.end(), [](float v) { return v >= 0.5f; });
}

std::vector<float> &detail::Node::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    return grad;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0f, requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<float>(static_cast<size_t>(n), value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data, bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw dimension_error("data length " + std::to_string(data.size()) + " does not match shape " +
                              shape_str(shape));
    }
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) { return from_data({1}, {value}, requires_grad); }

Tensor Tensor::from_volume(const Volume &vol, bool requires_grad) {
    return from_data({vol.channels, vol.extents.d, vol.extents.h, vol.extents.w}, vol.voxels, requires_grad);
}

const Shape &Tensor::shape() const {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->shape;
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_ ? node_->data.size() : 0); }

Extents Tensor::extents() const {
    const auto &s = shape();
    if (s.size() != 4) throw dimension_error("expected a [C,D,H,W] tensor, got " + shape_str(s));
    return {s[1], s[2], s[3]};
}

std::span<const float> Tensor::data() const {
    if (!node_) throw std::logic_error("undefined tensor");
    return node_->data;
}

std::span<float> Tensor::mutable_data() {
    if (!node_) throw std::logic_error("undefined tensor");
    if (!node_->parents.empty()) throw std::logic_error("only leaf tensors may be mutated");
    return node_->data;
}

float Tensor::item() const {
    if (numel() != 1) throw dimension_error("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
std::span<const float> Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
}
std::span<float> Tensor::mutable_grad() { return node_->ensure_grad(); }
void Tensor::zero_grad() {
    if (node_) node_->grad.assign(node_->data.size(), 0.0f);
}
bool Tensor::is_leaf() const { return node_ && node_->parents.empty() && !node_->backward; }
const char *Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Volume Tensor::to_volume(Spacing spacing) const {
    const auto e = extents();
    Volume v(e, spacing, shape()[0]);
    std::copy(data().begin(), data().end(), v.voxels.begin());
    return v;
}

Tensor Tensor::detach() const { return from_data(shape(), node_->data, false); }
Tensor Tensor::clone(bool requires_grad) const { return from_data(shape(), node_->data, requires_grad); }

// ---------------------------------------------------------------------------
// Graph

Tensor make_op(const char *name, Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
               std::function<void(detail::Node &)> backward_fn) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = name;
    if (g_grad_enabled) {
        const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor &t) { return t.requires_grad(); });
        if (any) {
            n->requires_grad = true;
            n->backward = std::move(backward_fn);
            n->parents.reserve(inputs.size());
            for (auto &t : inputs) n->parents.push_back(t.node());
        }
    }
    return Tensor(std::move(n));
}

Tape::Tape(const Tensor &root) {
    // Iterative post-order DFS so deep recurrent graphs don't blow the stack.
    std::unordered_set<detail::Node *> visited;
    std::vector<std::pair<detail::Node *, size_t>> stack;
    if (!root.defined()) return;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            auto *p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order_.push_back(node);
            stack.pop_back();
        }
    }
}

void backward(const Tensor &loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
    if (loss.numel() != 1) throw dimension_error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;
    Tape tape(loss);
    loss.node()->ensure_grad()[0] += 1.0f;
    const auto &order = tape.nodes();
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        auto *n = *it;
        n->ensure_grad();
        if (n->backward) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "add");
    const auto x = a.data(), y = b.data();
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
    return make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
        for (auto &p : self.parents) {
            if (!p->requires_grad) continue;
            auto &g = grad_of(p);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Tensor sub(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "sub");
    const auto x = a.data(), y = b.data();
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
    return make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
        const float sign[2] = {1.0f, -1.0f};
        for (size_t k = 0; k < 2; ++k) {
            auto &p = self.parents[k];
            if (!p->requires_grad) continue;
            auto &g = grad_of(p);
            for (size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
        }
    });
}

Tensor mul(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "mul");
    const auto x = a.data(), y = b.data();
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
    return make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
        auto &pa = self.parents[0];
        auto &pb = self.parents[1];
        if (pa->requires_grad) {
            auto &g = grad_of(pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            auto &g = grad_of(pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
    });
}

Tensor div(const Tensor &a, const Tensor &b) {
    require_same_shape(a, b, "div");
    const auto x = a.data(), y = b.data();
    std::vector<float> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
    return make_op("div", a.shape(), std::move(out), {a, b}, [](detail::Node &self) {
        auto &pa = self.parents[0];
        auto &pb = self.parents[1];
        if (pa->requires_grad) {
            auto &g = grad_of(pa);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / pb->data[i];
        }
        if (pb->requires_grad) {
            auto &g = grad_of(pb);
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * self.data[i] / pb->data[i];
        }
    });
}

Tensor scale(const Tensor &a, float s) {
    return unary("scale", a, [s](float v) { return v * s; }, [s](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

Tensor add_scalar(const Tensor &a, float s) {
    return unary("add_scalar", a, [s](float v) { return v + s; }, [](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Tensor square(const Tensor &a) {
    return unary("square", a, [](float v) { return v * v; }, [](detail::Node &self) {
        auto &p = self.parents[0];
        auto &g = grad_of(p);
        for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * p->data[i] * self.grad[i];
    });
}

Tensor sigmoid(const Tensor &a) {
    return unary("sigmoid", a, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) {
            const float s = self.data[i];
            g[i] += self.grad[i] * s * (1.0f - s);
        }
    });
}

Tensor tanh(const Tensor &a) {
    return unary("tanh", a, [](float v) { return std::tanh(v); }, [](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        for (size_t i = 0; i < g.size(); ++i) {
            const float t = self.data[i];
            g[i] += self.grad[i] * (1.0f - t * t);
        }
    });
}

Tensor leaky_relu(const Tensor &a, float alpha) {
    return unary("leaky_relu", a, [alpha](float v) { return v >= 0.0f ? v : alpha * v; },
                 [alpha](detail::Node &self) {
                     auto &p = self.parents[0];
                     auto &g = grad_of(p);
                     for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (p->data[i] >= 0.0f ? 1.0f : alpha);
                 });
}

Tensor elementwise(Elementwise op, const Tensor &a, const Tensor &b, float alpha) {
    switch (op) {
    case Elementwise::sigmoid: return sigmoid(a);
    case Elementwise::tanh: return tanh(a);
    case Elementwise::leaky_relu: return leaky_relu(a, alpha);
    case Elementwise::add: return add(a, b);
    case Elementwise::mul: return mul(a, b);
    }
    throw std::invalid_argument("elementwise: unknown op");
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor &a) {
    // Accumulated in double.
    double acc = 0.0;
    for (float v : a.data()) acc += v;
    return make_op("sum", {1}, {static_cast<float>(acc)}, {a}, [](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        const float s = self.grad[0];
        for (auto &v : g) v += s;
    });
}

Tensor mean(const Tensor &a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

// ---------------------------------------------------------------------------
// Channels

Tensor concat_channels(const std::vector<Tensor> &parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    Shape shape = parts.front().shape();
    int64_t channels = 0;
    for (const auto &p : parts) {
        const auto &s = p.shape();
        if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
            throw dimension_error("concat_channels: incompatible shapes " + shape_str(shape) + " and " +
                                  shape_str(s));
        }
        channels += s[0];
    }
    shape[0] = channels;
    std::vector<float> out;
    out.reserve(static_cast<size_t>(shape_numel(shape)));
    for (const auto &p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return make_op("concat_channels", shape, std::move(out), parts, [](detail::Node &self) {
        size_t offset = 0;
        for (auto &p : self.parents) {
            const size_t n = p->data.size();
            if (p->requires_grad) {
                auto &g = grad_of(p);
                for (size_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

Tensor slice_channels(const Tensor &a, int64_t begin, int64_t end) {
    const auto &s = a.shape();
    if (begin < 0 || end > s[0] || begin >= end) {
        throw dimension_error("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(end) +
                              ") outside " + shape_str(s));
    }
    const size_t per = static_cast<size_t>(a.numel() / s[0]);
    Shape out_shape = s;
    out_shape[0] = end - begin;
    std::vector<float> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                           a.data().begin() + static_cast<std::ptrdiff_t>(end * per));
    const size_t offset = static_cast<size_t>(begin) * per;
    return make_op("slice_channels", out_shape, std::move(out), {a}, [offset](detail::Node &self) {
        auto &g = grad_of(self.parents[0]);
        for (size_t i = 0; i < self.grad.size(); ++i) g[offset + i] += self.grad[i];
    });
}

} // namespace tracer
