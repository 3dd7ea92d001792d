// tensor.hpp - dense float32 arrays with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto an immutable node of a dynamically recorded
// graph. Every primitive below records how to push gradients back to its inputs
// whenever at least one input requires a gradient and recording is enabled.
// Spatial primitives use the [C, D, H, W] layout, row-major.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tracer/volume.hpp"

namespace tracer {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape &shape);
std::string shape_str(const Shape &shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;
    bool requires_grad = false;
    const char *op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node &)> backward;

    std::vector<float> &ensure_grad();
};

} // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false);
    static Tensor scalar(float value, bool requires_grad = false);
    static Tensor from_volume(const Volume &vol, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape &shape() const;
    int64_t dim(size_t i) const { return shape().at(i); }
    size_t rank() const { return shape().size(); }
    int64_t numel() const;
    // Spatial extents of a [C, D, H, W] tensor.
    Extents extents() const;

    std::span<const float> data() const;
    // Only leaves may be mutated in place (parameter updates, fixtures).
    std::span<float> mutable_data();
    float item() const;
    float operator[](int64_t i) const { return data()[static_cast<size_t>(i)]; }

    bool requires_grad() const;
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad();
    void zero_grad();
    bool is_leaf() const;
    const char *op_name() const;

    Volume to_volume(Spacing spacing = {}) const;
    // Same values, cut from the graph.
    Tensor detach() const;
    Tensor clone(bool requires_grad = false) const;

    const std::shared_ptr<detail::Node> &node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  private:
    std::shared_ptr<detail::Node> node_;
};

// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard &) = delete;
    NoGradGuard &operator=(const NoGradGuard &) = delete;

  private:
    bool previous_;
};
bool grad_enabled();

// Ordered record of the operations reachable from a root; every entry comes
// after all entries producing its inputs.
class Tape {
  public:
    explicit Tape(const Tensor &root);
    const std::vector<detail::Node *> &nodes() const { return order_; }
    size_t size() const { return order_.size(); }

  private:
    std::vector<detail::Node *> order_;
};

// Reverse pass from a single-element tensor. Leaf gradients accumulate across
// calls; call zero_grad() on parameters between independent passes.
void backward(const Tensor &loss);

// Builds a recorded node from a custom forward result. `backward_fn` receives
// the output node, whose grad is populated, and must accumulate into parents.
Tensor make_op(const char *name, Shape shape, std::vector<float> data,
               std::vector<Tensor> inputs, std::function<void(detail::Node &)> backward_fn);

// Elementwise arithmetic. Binary operations need equal shapes.
Tensor add(const Tensor &a, const Tensor &b);
Tensor sub(const Tensor &a, const Tensor &b);
Tensor mul(const Tensor &a, const Tensor &b);
Tensor div(const Tensor &a, const Tensor &b);
Tensor scale(const Tensor &a, float s);
Tensor add_scalar(const Tensor &a, float s);
Tensor square(const Tensor &a);
Tensor sigmoid(const Tensor &a);
Tensor tanh(const Tensor &a);
Tensor leaky_relu(const Tensor &a, float alpha = 0.2f);

enum class Elementwise { sigmoid, tanh, leaky_relu, add, mul };
Tensor elementwise(Elementwise op, const Tensor &a, const Tensor &b = {}, float alpha = 0.2f);

// Reductions to a one-element tensor.
Tensor sum(const Tensor &a);
Tensor mean(const Tensor &a);

// Channel (first axis) manipulation.
Tensor concat_channels(const std::vector<Tensor> &parts);
Tensor slice_channels(const Tensor &a, int64_t begin, int64_t end);

// input [Cin, D, H, W], kernel [Cout, Cin, k, k, k] -> [Cout, D', H', W'].
Tensor conv3d(const Tensor &input, const Tensor &kernel, int stride = 1, int padding = 0);
// Adds bias[c] to every voxel of channel c.
Tensor add_bias(const Tensor &input, const Tensor &bias);

// Trilinear resize. Voxel centres sit at integer coordinates and output voxel o
// samples input coordinate o * in / out (o / 2 for the doubling case), clamped
// to the valid box.
Tensor upsample2x_trilinear(const Tensor &input);
Tensor resize_trilinear(const Tensor &input, Extents target);

// output(c, p) = input(c, p + dvf(p)) with trilinear interpolation. dvf is
// [3, D, H, W] in voxel units (d, h, w components); sample coordinates are
// clamped to the valid box.
Tensor grid_sample(const Tensor &input, const Tensor &dvf);

// Per-channel spatial derivative along axis (0 = d, 1 = h, 2 = w): central
// differences in the interior, one-sided at the two boundary planes.
Tensor finite_difference(const Tensor &input, int axis);

} // namespace tracer
