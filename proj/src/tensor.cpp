#include "dfm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace dfm {

namespace {

std::atomic<std::uint64_t> g_node_counter{0};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
std::shared_ptr<TensorNode<T>> new_node(Shape shape, std::vector<T> value) {
    if (shape_numel(shape) != value.size()) {
        throw ShapeError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<TensorNode<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->order = g_node_counter.fetch_add(1, std::memory_order_relaxed);
    return node;
}

// Size of the suffix-broadcast operand; returns 0 when shapes are
// incompatible.
std::size_t suffix_broadcast(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return 0;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (a[a.size() - b.size() + i] != b[i]) return 0;
    }
    return shape_numel(b);
}

struct AxisSplit {
    std::size_t outer = 1;
    std::size_t extent = 1;
    std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(shape));
    }
}

template <typename T, typename F, typename G>
BasicTensor<T> unary(const char* name, const BasicTensor<T>& a, F forward, G derivative) {
    const auto x = a.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
    return make_op<T>(name, a.shape(), std::move(out), {a},
                      [derivative](TensorNode<T>& self) {
                          auto& in = *self.inputs[0];
                          if (!in.requires_grad) return;
                          auto& g = in.ensure_grad();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                              g[i] += self.grad[i] * derivative(in.value[i], self.value[i]);
                          }
                      });
}

enum class Binary { Add, Sub, Mul };

template <typename T>
BasicTensor<T> binary(const char* name, Binary kind, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const std::size_t nb = suffix_broadcast(a.shape(), b.shape());
    if (nb == 0 && a.numel() != 0) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const auto x = a.data();
    const auto y = b.data();
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T yv = y[i % nb];
        switch (kind) {
            case Binary::Add: out[i] = x[i] + yv; break;
            case Binary::Sub: out[i] = x[i] - yv; break;
            case Binary::Mul: out[i] = x[i] * yv; break;
        }
    }
    return make_op<T>(name, a.shape(), std::move(out), {a, b}, [kind, nb](TensorNode<T>& self) {
        auto& in_a = *self.inputs[0];
        auto& in_b = *self.inputs[1];
        const auto& g = self.grad;
        if (in_a.requires_grad) {
            auto& ga = in_a.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga[i] += kind == Binary::Mul ? g[i] * in_b.value[i % nb] : g[i];
            }
        }
        if (in_b.requires_grad) {
            auto& gb = in_b.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                switch (kind) {
                    case Binary::Add: gb[i % nb] += g[i]; break;
                    case Binary::Sub: gb[i % nb] -= g[i]; break;
                    case Binary::Mul: gb[i % nb] += g[i] * in_a.value[i]; break;
                }
            }
        }
    });
}

}  // namespace

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- BasicTensor ------------------------------------------------------------

template <typename T>
BasicTensor<T> BasicTensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
    auto node = new_node<T>(std::move(shape), std::move(values));
    node->requires_grad = requires_grad;
    return BasicTensor(std::move(node));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
    return from({}, {value}, requires_grad);
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    check_axis(shape(), axis, "dim");
    return node_->shape[axis];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (!is_leaf()) throw UsageError(std::string("cannot mutate result of op '") + node_->op + "'");
    return node_->value;
}

template <typename T>
void BasicTensor<T>::zero_grad() {
    node_->grad.assign(node_->value.size(), T(0));
}

template <typename T>
void BasicTensor<T>::set_requires_grad(bool on) {
    if (!is_leaf()) throw UsageError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw UsageError("index rank does not match tensor rank");
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= node_->shape[axis]) throw std::out_of_range("tensor index out of range");
        flat = flat * node_->shape[axis] + i;
        ++axis;
    }
    return node_->value[flat];
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return from(shape(), node_->value, false);
}

template <typename T>
BasicTensor<T> make_op(const char* name, Shape shape, std::vector<T> value,
                       std::vector<BasicTensor<T>> inputs,
                       std::function<void(TensorNode<T>&)> backward) {
    auto node = new_node<T>(std::move(shape), std::move(value));
    node->op = name;
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const BasicTensor<T>& t) { return t.requires_grad(); });
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
    }
    return BasicTensor<T>(std::move(node));
}

// ---- graph ------------------------------------------------------------------

template <typename T>
ComputeGraph<T>::ComputeGraph(const BasicTensor<T>& root) : root_(root) {
    if (!root.requires_grad()) return;
    std::unordered_set<TensorNode<T>*> seen;
    std::vector<TensorNode<T>*> stack{root.node().get()};
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto* n = stack.back();
        stack.pop_back();
        nodes_.push_back(n);
        for (auto& in : n->inputs) {
            if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
        }
    }
    std::sort(nodes_.begin(), nodes_.end(),
              [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->order < b->order; });
}

template <typename T>
void ComputeGraph<T>::backward() {
    if (root_.numel() != 1) {
        throw UsageError("backward requires a scalar loss, got shape " + shape_str(root_.shape()));
    }
    if (nodes_.empty()) return;
    for (auto* n : nodes_) {
        if (n->backward) n->grad.assign(n->value.size(), T(0));
    }
    root_.node()->ensure_grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    ComputeGraph<T>(loss).backward();
}

// ---- primitives -------------------------------------------------------------

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const bool batched = a.rank() == 3 && b.rank() == 3;
    const bool plain = a.rank() == 2 && b.rank() == 2;
    if ((!batched && !plain) || (batched && a.dim(0) != b.dim(0)) ||
        a.shape()[a.rank() - 1] != b.shape()[b.rank() - 2]) {
        throw ShapeError("matmul: dimension mismatch between " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t batch = batched ? a.dim(0) : 1;
    const auto m = static_cast<Eigen::Index>(a.shape()[a.rank() - 2]);
    const auto k = static_cast<Eigen::Index>(a.shape()[a.rank() - 1]);
    const auto n = static_cast<Eigen::Index>(b.shape()[b.rank() - 1]);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap<T> A(a.data().data() + i * m * k, m, k);
        ConstMatMap<T> B(b.data().data() + i * k * n, k, n);
        MatMap<T> C(out.data() + i * m * n, m, n);
        C.noalias() = A * B;
    }
    Shape shape = batched ? Shape{batch, std::size_t(m), std::size_t(n)} : Shape{std::size_t(m), std::size_t(n)};
    return make_op<T>("matmul", std::move(shape), std::move(out), {a, b},
                      [batch, m, k, n](TensorNode<T>& self) {
                          auto& na = *self.inputs[0];
                          auto& nb = *self.inputs[1];
                          for (std::size_t i = 0; i < batch; ++i) {
                              ConstMatMap<T> G(self.grad.data() + i * m * n, m, n);
                              if (na.requires_grad) {
                                  ConstMatMap<T> B(nb.value.data() + i * k * n, k, n);
                                  MatMap<T> GA(na.ensure_grad().data() + i * m * k, m, k);
                                  GA.noalias() += G * B.transpose();
                              }
                              if (nb.requires_grad) {
                                  ConstMatMap<T> A(na.value.data() + i * m * k, m, k);
                                  MatMap<T> GB(nb.ensure_grad().data() + i * k * n, k, n);
                                  GB.noalias() += A.transpose() * G;
                              }
                          }
                      });
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary("add", Binary::Add, a, b);
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary("sub", Binary::Sub, a, b);
}

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    return binary("mul", Binary::Mul, a, b);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    return unary("scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, T offset) {
    return unary("add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
    return unary("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                 [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
    return unary("sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                 [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
BasicTensor<T> tanh(const BasicTensor<T>& a) {
    return unary("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
BasicTensor<T> log(const BasicTensor<T>& a) {
    return unary("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
BasicTensor<T> abs(const BasicTensor<T>& a) {
    return unary("abs", a, [](T x) { return std::abs(x); },
                 [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
BasicTensor<T> clamp_min(const BasicTensor<T>& a, T floor) {
    return unary("clamp_min", a, [floor](T x) { return x < floor ? floor : x; },
                 [floor](T x, T) { return x < floor ? T(0) : T(1); });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    check_axis(x.shape(), axis, "softmax");
    const auto in = x.data();
    for (T v : in) {
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
    }
    const AxisSplit s = split_at(x.shape(), axis);
    std::vector<T> out(in.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            T mx = in[base];
            for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, in[base + j * s.inner]);
            T total = 0;
            for (std::size_t j = 0; j < s.extent; ++j) {
                const T e = std::exp(in[base + j * s.inner] - mx);
                out[base + j * s.inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
        }
    }
    return make_op<T>("softmax", x.shape(), std::move(out), {x}, [s](TensorNode<T>& self) {
        auto& g_in = self.inputs[0]->ensure_grad();
        const auto& y = self.value;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t i = 0; i < s.inner; ++i) {
                const std::size_t base = o * s.extent * s.inner + i;
                T dot = 0;
                for (std::size_t j = 0; j < s.extent; ++j) {
                    const std::size_t p = base + j * s.inner;
                    dot += g[p] * y[p];
                }
                for (std::size_t j = 0; j < s.extent; ++j) {
                    const std::size_t p = base + j * s.inner;
                    g_in[p] += y[p] * (g[p] - dot);
                }
            }
        }
    });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    T total = 0;
    for (T v : x.data()) total += v;
    return make_op<T>("sum", {}, {total}, {x}, [](TensorNode<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x, std::size_t axis) {
    check_axis(x.shape(), axis, "sum");
    const AxisSplit s = split_at(x.shape(), axis);
    const auto in = x.data();
    std::vector<T> out(s.outer * s.inner, T(0));
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.extent; ++j)
            for (std::size_t i = 0; i < s.inner; ++i)
                out[o * s.inner + i] += in[(o * s.extent + j) * s.inner + i];
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    return make_op<T>("sum_axis", std::move(shape), std::move(out), {x}, [s](TensorNode<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t j = 0; j < s.extent; ++j)
                for (std::size_t i = 0; i < s.inner; ++i)
                    g[(o * s.extent + j) * s.inner + i] += self.grad[o * s.inner + i];
    });
}

template <typename T>
BasicTensor<T> mean(const BasicTensor<T>& x, std::size_t axis) {
    check_axis(x.shape(), axis, "mean");
    if (x.dim(axis) == 0) throw ShapeError("mean over empty axis");
    return scale(sum(x, axis), T(1) / static_cast<T>(x.dim(axis)));
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts.front().shape();
    check_axis(first, axis, "concat");
    Shape shape = first;
    shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& ps = p.shape();
        bool ok = ps.size() == first.size();
        for (std::size_t i = 0; ok && i < ps.size(); ++i) ok = i == axis || ps[i] == first[i];
        if (!ok) {
            throw ShapeError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(ps));
        }
        shape[axis] += ps[axis];
    }
    const AxisSplit s = split_at(shape, axis);
    std::vector<T> out(shape_numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        offsets.push_back(offset);
        const std::size_t ext = p.dim(axis);
        const auto src = p.data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner), ext * s.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * s.extent + offset) * s.inner));
        }
        offset += ext;
    }
    return make_op<T>("concat", std::move(shape), std::move(out), parts,
                      [s, offsets, axis](TensorNode<T>& self) {
                          for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                              auto& in = *self.inputs[k];
                              if (!in.requires_grad) continue;
                              auto& g = in.ensure_grad();
                              const std::size_t ext = in.shape[axis];
                              for (std::size_t o = 0; o < s.outer; ++o) {
                                  const T* src = self.grad.data() + (o * s.extent + offsets[k]) * s.inner;
                                  T* dst = g.data() + o * ext * s.inner;
                                  for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
                              }
                          }
                      });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    check_axis(x.shape(), axis, "slice");
    if (begin > end || end > x.dim(axis)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for shape " + shape_str(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), axis);
    const std::size_t ext = end - begin;
    Shape shape = x.shape();
    shape[axis] = ext;
    std::vector<T> out(s.outer * ext * s.inner);
    const auto in = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * s.extent + begin) * s.inner), ext * s.inner,
                    out.begin() + static_cast<std::ptrdiff_t>(o * ext * s.inner));
    }
    return make_op<T>("slice", std::move(shape), std::move(out), {x}, [s, begin, ext](TensorNode<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = self.grad.data() + o * ext * s.inner;
            T* dst = g.data() + (o * s.extent + begin) * s.inner;
            for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_op<T>("reshape", std::move(shape), std::move(out), {x}, [](TensorNode<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& axes) {
    const Shape& in_shape = x.shape();
    const std::size_t r = in_shape.size();
    std::vector<bool> used(r, false);
    if (axes.size() != r) throw ShapeError("permute: axis count does not match rank");
    for (std::size_t a : axes) {
        if (a >= r || used[a]) throw ShapeError("permute: invalid axis permutation");
        used[a] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<std::size_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    // source offset for every destination element
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t off = 0;
        for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_stride[axes[i]];
        src[flat] = off;
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    std::vector<T> out(n);
    const auto in = x.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = in[src[i]];
    return make_op<T>("permute", std::move(out_shape), std::move(out), {x},
                      [src = std::move(src)](TensorNode<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < src.size(); ++i) g[src[i]] += self.grad[i];
                      });
}

template <typename T>
BasicTensor<T> transpose(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(x.shape()));
    std::vector<std::size_t> axes(x.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
    return permute(x, axes);
}

template <typename T>
BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
    if (x.rank() == 0) throw ShapeError("layer_norm on a scalar");
    const std::size_t d = x.shape().back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: affine parameters must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    const std::size_t rows = x.numel() / d;
    const auto in = x.data();
    const auto gm = gamma.data();
    const auto bt = beta.data();
    std::vector<T> out(in.size());
    std::vector<T> xhat(in.size());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = in.data() + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gm[j] + bt[j];
        }
    }
    return make_op<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](TensorNode<T>& self) {
                          auto& nx = *self.inputs[0];
                          auto& ng = *self.inputs[1];
                          auto& nb = *self.inputs[2];
                          const auto& g = self.grad;
                          if (ng.requires_grad || nb.requires_grad) {
                              auto& gg = ng.ensure_grad();
                              auto& gb = nb.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r)
                                  for (std::size_t j = 0; j < d; ++j) {
                                      gg[j] += g[r * d + j] * xhat[r * d + j];
                                      gb[j] += g[r * d + j];
                                  }
                          }
                          if (!nx.requires_grad) return;
                          auto& gx = nx.ensure_grad();
                          const T inv_d = T(1) / static_cast<T>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                              T s1 = 0, s2 = 0;
                              for (std::size_t j = 0; j < d; ++j) {
                                  const T dh = g[r * d + j] * ng.value[j];
                                  s1 += dh;
                                  s2 += dh * xhat[r * d + j];
                              }
                              for (std::size_t j = 0; j < d; ++j) {
                                  const T dh = g[r * d + j] * ng.value[j];
                                  gx[r * d + j] += inv_std[r] * (dh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
                              }
                          }
                      });
}

template <typename T>
BasicTensor<T> gather_rows(const BasicTensor<T>& table, std::span<const std::size_t> rows) {
    if (table.rank() != 2) throw ShapeError("gather_rows needs a 2-D table, got " + shape_str(table.shape()));
    const std::size_t vocab = table.dim(0);
    const std::size_t d = table.dim(1);
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * d);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= vocab) throw std::out_of_range("gather_rows: row index out of range");
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return make_op<T>("gather_rows", {idx.size(), d}, std::move(out), {table},
                      [idx, d](TensorNode<T>& self) {
                          auto& g = self.inputs[0]->ensure_grad();
                          for (std::size_t i = 0; i < idx.size(); ++i)
                              for (std::size_t j = 0; j < d; ++j) g[idx[i] * d + j] += self.grad[i * d + j];
                      });
}

template <typename T>
BasicTensor<T> masked_fill(const BasicTensor<T>& x, std::span<const std::uint8_t> mask, T fill) {
    if (mask.size() != x.numel()) {
        throw ShapeError("masked_fill: mask length " + std::to_string(mask.size()) +
                         " does not match shape " + shape_str(x.shape()));
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    std::vector<T> out(x.data().begin(), x.data().end());
    for (std::size_t i = 0; i < out.size(); ++i)
        if (m[i]) out[i] = fill;
    return make_op<T>("masked_fill", x.shape(), std::move(out), {x}, [m = std::move(m)](TensorNode<T>& self) {
        auto& g = self.inputs[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!m[i]) g[i] += self.grad[i];
    });
}

#define DFM_INSTANTIATE(T)                                                                              \
    template class BasicTensor<T>;                                                                      \
    template class ComputeGraph<T>;                                                                     \
    template BasicTensor<T> make_op(const char*, Shape, std::vector<T>, std::vector<BasicTensor<T>>,    \
                                    std::function<void(TensorNode<T>&)>);                              \
    template void backward(const BasicTensor<T>&);                                                      \
    template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                      \
    template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> mul(const BasicTensor<T>&, const BasicTensor<T>&);                         \
    template BasicTensor<T> scale(const BasicTensor<T>&, T);                                            \
    template BasicTensor<T> add_scalar(const BasicTensor<T>&, T);                                       \
    template BasicTensor<T> relu(const BasicTensor<T>&);                                                \
    template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                             \
    template BasicTensor<T> tanh(const BasicTensor<T>&);                                                \
    template BasicTensor<T> log(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> abs(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> clamp_min(const BasicTensor<T>&, T);                                        \
    template BasicTensor<T> softmax(const BasicTensor<T>&, std::size_t);                                \
    template BasicTensor<T> sum(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> sum(const BasicTensor<T>&, std::size_t);                                    \
    template BasicTensor<T> mean(const BasicTensor<T>&, std::size_t);                                   \
    template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);                    \
    template BasicTensor<T> slice(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);        \
    template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                      \
    template BasicTensor<T> permute(const BasicTensor<T>&, const std::vector<std::size_t>&);            \
    template BasicTensor<T> transpose(const BasicTensor<T>&);                                           \
    template BasicTensor<T> layer_norm(const BasicTensor<T>&, const BasicTensor<T>&,                    \
                                       const BasicTensor<T>&, T);                                       \
    template BasicTensor<T> gather_rows(const BasicTensor<T>&, std::span<const std::size_t>);           \
    template BasicTensor<T> masked_fill(const BasicTensor<T>&, std::span<const std::uint8_t>, T);

DFM_INSTANTIATE(float)
DFM_INSTANTIATE(double)

#undef DFM_INSTANTIATE

}  // namespace dfm
