#pragma once

// Dense row-major tensors with tape-free reverse-mode autodiff.
//
// Every operation allocates a fresh result node that remembers its inputs
// and a closure propagating its gradient back to them.  Nodes carry a
// monotonically increasing creation number; since an op's inputs always
// exist before the op runs, sorting reachable nodes by that number yields a
// topological order without an explicit tape.
//
// The scalar type is a template parameter: float for training, double for
// finite-difference gradient checks.  A graph can never mix the two.

#include "dfm/errors.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dfm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first touched
    bool requires_grad = false;
    std::uint64_t order = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode>> inputs;
    std::function<void(TensorNode&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class BasicTensor {
public:
    using Scalar = T;
    using Node = TensorNode<T>;

    BasicTensor() = default;
    explicit BasicTensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static BasicTensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
    static BasicTensor zeros(Shape shape, bool requires_grad = false);
    static BasicTensor full(Shape shape, T value, bool requires_grad = false);
    static BasicTensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<const T> data() const { return node_->value; }
    // Only leaves may be written; results of ops are immutable.
    std::span<T> mutable_data();

    // Zero-filled when no gradient has reached this tensor yet.
    std::span<const T> grad() const { return node_->ensure_grad(); }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool is_leaf() const { return node_->inputs.empty() && !node_->backward; }

    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    // Same values, no history.
    BasicTensor detach() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    const char* op_name() const { return node_->op; }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds an op result.  `backward` reads self.grad and accumulates into
// self.inputs[i]->ensure_grad().  Public so tests and grad-check fixtures can
// define their own primitives.
template <typename T>
BasicTensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                       std::vector<BasicTensor<T>> inputs,
                       std::function<void(TensorNode<T>&)> backward);

// Nodes reachable from a root that take part in differentiation, ordered so
// that every node's inputs precede it.
template <typename T>
class ComputeGraph {
public:
    explicit ComputeGraph(const BasicTensor<T>& root);
    const std::vector<TensorNode<T>*>& nodes() const { return nodes_; }
    // Seeds d(root)/d(root) = 1 and runs every backward closure in reverse.
    void backward();

private:
    BasicTensor<T> root_;
    std::vector<TensorNode<T>*> nodes_;
};

// Accumulates gradients of a scalar loss into all requires_grad leaves.
template <typename T>
void backward(const BasicTensor<T>& loss);

// ---- primitives ----------------------------------------------------------

// [m,k]x[k,n] or batched [b,m,k]x[b,k,n].
template <typename T> BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// Elementwise; `b` may also have a shape equal to a trailing suffix of a's
// shape, in which case it is broadcast over the leading axes.
template <typename T> BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b);
template <typename T> BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T> BasicTensor<T> scale(const BasicTensor<T>& a, T factor);
template <typename T> BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset);
template <typename T> BasicTensor<T> relu(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> sigmoid(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> tanh(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> log(const BasicTensor<T>& a);
template <typename T> BasicTensor<T> abs(const BasicTensor<T>& a);
// max(a, floor); gradient is zero where the floor is active.
template <typename T> BasicTensor<T> clamp_min(const BasicTensor<T>& a, T floor);

// Max-subtracted softmax along `axis`.  Throws NumericError on NaN/Inf input.
template <typename T> BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x);
// Reduce one axis away.
template <typename T> BasicTensor<T> sum(const BasicTensor<T>& x, std::size_t axis);
template <typename T> BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);
// Half-open range [begin, end) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);

template <typename T> BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T> BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes);
// Swaps the last two axes.
template <typename T> BasicTensor<T> transpose(const BasicTensor<T>& x);

// Normalizes over the last axis: gamma * (x - mean) / sqrt(var + eps) + beta.
template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

// Rows of a [vocab, d] table selected by index -> [n, d].
template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::size_t> rows);

// Replaces entries whose mask byte is nonzero with `fill`; those entries
// receive no gradient.
template <typename T>
BasicTensor<T> masked_fill(const BasicTensor<T>& x, std::span<const std::uint8_t> mask, T fill);

}  // namespace dfm
