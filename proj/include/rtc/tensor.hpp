#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// Every operation records its inputs and a backward closure on the produced
// node; the nodes reachable from a loss form the computation graph (acyclic by
// construction, inputs always created before their consumers). backward(loss)
// topologically sorts that graph and accumulates gradients into every
// requires_grad leaf.
//
// Tensors are immutable after construction except for gradient buffers and the
// explicit values_mut() hook used by the optimizer between steps.

namespace rtc {

// Raised when an operation produces NaN/Inf; finite values are an invariant.
class numeric_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Optional collector of discrete forward-pass decisions (relu signs, argmax
// indices, top-k sets, threshold comparisons). The finite-difference harness
// uses it to detect parameters sitting next to a nondifferentiable kink: if a
// small perturbation changes any recorded decision, the signatures differ.
class TraceCollector {
public:
    void feed(std::uint64_t v) {
        hash_ ^= v + 0x9E3779B97F4A7C15ull + (hash_ << 6) + (hash_ >> 2);
    }
    void feed_bool(bool b) { feed(b ? 0x9ull : 0x2ull); }
    std::uint64_t hash() const { return hash_; }

private:
    std::uint64_t hash_ = 0x632BE59BD9B4E019ull;
};

inline TraceCollector*& trace_collector() {
    thread_local TraceCollector* collector = nullptr;
    return collector;
}

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;
    const char* op = "leaf";
};

inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        if (shape.empty()) throw std::invalid_argument("tensor: rank must be >= 1");
        for (std::size_t e : shape)
            if (e == 0) throw std::invalid_argument("tensor: extents must be positive");
        if (detail::shape_numel(shape) != values.size())
            throw std::invalid_argument("tensor: shape/data size mismatch");
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        for (double v : node->value)
            if (!std::isfinite(v)) throw numeric_error("tensor: non-finite initial value");
        return Tensor(std::move(node));
    }

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        std::vector<double> v(detail::shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(std::vector<std::size_t> shape, double fill,
                       bool requires_grad = false) {
        std::vector<double> v(detail::shape_numel(shape), fill);
        return from(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node()->shape; }
    std::size_t rank() const { return node()->shape.size(); }
    std::size_t extent(std::size_t axis) const { return node()->shape.at(axis); }
    std::size_t numel() const { return node()->value.size(); }
    bool is_scalar() const { return numel() == 1; }

    const std::vector<double>& values() const { return node()->value; }
    double v(std::size_t i) const { return node()->value[i]; }
    double item() const {
        if (!is_scalar()) throw std::invalid_argument("item: tensor is not a scalar");
        return node()->value[0];
    }

    // Mutable access for parameter updates between training steps. Using this
    // on a tensor that is part of a live graph invalidates recorded values.
    std::vector<double>& values_mut() { return node()->value; }

    bool requires_grad() const { return node()->requires_grad; }

    // Gradient buffer; valid after backward() over a graph containing this leaf.
    const std::vector<double>& grad() const {
        if (node()->grad.size() != node()->value.size())
            throw std::logic_error("grad: no gradient has been computed");
        return node()->grad;
    }

    void zero_grad() {
        node()->grad.assign(node()->value.size(), 0.0);
    }

    std::shared_ptr<detail::TensorNode> node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

private:
    const std::shared_ptr<detail::TensorNode>& node() const {
        if (!node_) throw std::logic_error("tensor: use of undefined tensor");
        return node_;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v)
        if (!std::isfinite(x)) throw numeric_error(std::string(op) + ": produced non-finite value");
}

inline Tensor make_result(std::vector<std::size_t> shape, std::vector<double> value,
                          const char* op,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorNode&)> backward_fn) {
    check_finite(value, op);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->op = op;
    bool needs_grad = false;
    for (const auto& t : inputs) needs_grad = needs_grad || t.requires_grad();
    node->requires_grad = needs_grad;
    if (needs_grad) {
        node->parents.reserve(inputs.size());
        for (auto& t : inputs) node->parents.push_back(t.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(node));
}

inline std::vector<double>& ensure_grad(TensorNode& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

inline void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradient buffers of every reachable
// node are zeroed first, so one call per forward pass yields exactly the
// gradients of this loss for every requires_grad leaf.
inline void backward(const Tensor& loss) {
    detail::require(loss.is_scalar(), "backward: loss must be a scalar");
    using detail::TensorNode;
    TensorNode* root = loss.node_ptr().get();
    if (!root->requires_grad) return;

    // Iterative DFS post-order: children (parents in graph terms) first.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [n, next_child] = stack.back();
        if (next_child < n->parents.size()) {
            TensorNode* p = n->parents[next_child++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    for (TensorNode* n : order) n->grad.assign(n->value.size(), 0.0);
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const bool a_scalar = a.is_scalar();
    const bool b_scalar = b.is_scalar();
    require(a.shape() == b.shape() || a_scalar || b_scalar,
            "elementwise: shape mismatch (only scalars broadcast)");
    const std::size_t n = std::max(a.numel(), b.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    if (kind == BinKind::Div)
        for (double x : bv)
            if (x == 0.0) throw std::invalid_argument("div: division by zero");

    std::vector<double> out(n);
    const bool broadcast_a = a_scalar && !b_scalar;
    const bool broadcast_b = b_scalar && !a_scalar;
    for (std::size_t i = 0; i < n; ++i) {
        const double x = broadcast_a ? av[0] : av[i];
        const double y = broadcast_b ? bv[0] : bv[i];
        switch (kind) {
            case BinKind::Add: out[i] = x + y; break;
            case BinKind::Sub: out[i] = x - y; break;
            case BinKind::Mul: out[i] = x * y; break;
            case BinKind::Div: out[i] = x / y; break;
        }
    }
    auto shape = broadcast_a ? b.shape() : a.shape();
    return make_result(
        std::move(shape), std::move(out), name, {a, b},
        [kind, broadcast_a, broadcast_b](TensorNode& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            const std::size_t n = node.value.size();
            if (pa.requires_grad) {
                auto& ga = ensure_grad(pa);
                for (std::size_t i = 0; i < n; ++i) {
                    const double g = node.grad[i];
                    double d;
                    switch (kind) {
                        case BinKind::Add:
                        case BinKind::Sub: d = g; break;
                        case BinKind::Mul:
                            d = g * (broadcast_b ? pb.value[0] : pb.value[i]);
                            break;
                        case BinKind::Div:
                            d = g / (broadcast_b ? pb.value[0] : pb.value[i]);
                            break;
                    }
                    ga[broadcast_a ? 0 : i] += d;
                }
            }
            if (pb.requires_grad) {
                auto& gb = ensure_grad(pb);
                for (std::size_t i = 0; i < n; ++i) {
                    const double g = node.grad[i];
                    const double x = broadcast_a ? pa.value[0] : pa.value[i];
                    const double y = broadcast_b ? pb.value[0] : pb.value[i];
                    double d;
                    switch (kind) {
                        case BinKind::Add: d = g; break;
                        case BinKind::Sub: d = -g; break;
                        case BinKind::Mul: d = g * x; break;
                        case BinKind::Div: d = -g * x / (y * y); break;
                    }
                    gb[broadcast_b ? 0 : i] += d;
                }
            }
        });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Mul, "mul");
}
inline Tensor divide(const Tensor& a, const Tensor& b) {
    return detail::binary_op(a, b, detail::BinKind::Div, "div");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }

inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator/(const Tensor& a, double s) { return divide(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

// relu'(0) = 0 by convention; the sign pattern is fed to the active trace
// collector so gradient checks can skip parameters near the kink.
inline Tensor relu(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    TraceCollector* tc = trace_collector();
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = av[i] > 0.0 ? av[i] : 0.0;
        if (tc) tc->feed_bool(av[i] > 0.0);
    }
    return detail::make_result(
        a.shape(), std::move(out), "relu", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i)
                if (p.value[i] > 0.0) g[i] += node.grad[i];
        });
}

inline Tensor abs(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    TraceCollector* tc = trace_collector();
    for (std::size_t i = 0; i < av.size(); ++i) {
        out[i] = std::fabs(av[i]);
        if (tc) tc->feed_bool(av[i] > 0.0);
    }
    return detail::make_result(
        a.shape(), std::move(out), "abs", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i) {
                const double x = p.value[i];
                const double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                g[i] += s * node.grad[i];
            }
        });
}

inline Tensor log(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        if (av[i] <= 0.0) throw std::invalid_argument("log: non-positive operand");
        out[i] = std::log(av[i]);
    }
    return detail::make_result(
        a.shape(), std::move(out), "log", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i)
                g[i] += node.grad[i] / p.value[i];
        });
}

inline Tensor exp(const Tensor& a) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
    return detail::make_result(
        a.shape(), std::move(out), "exp", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i)
                g[i] += node.grad[i] * node.value[i];
        });
}

inline Tensor pow(const Tensor& a, double exponent) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::pow(av[i], exponent);
    return detail::make_result(
        a.shape(), std::move(out), "pow", {a},
        [exponent](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i)
                g[i] += node.grad[i] * exponent * std::pow(p.value[i], exponent - 1.0);
        });
}

// Constant copy outside the graph; gradient does not flow past it.
inline Tensor detach(const Tensor& a) {
    return Tensor::from(a.shape(), a.values(), false);
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    detail::require(detail::shape_numel(shape) == a.numel(), "reshape: element count mismatch");
    return detail::make_result(
        std::move(shape), a.values(), "reshape", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i) g[i] += node.grad[i];
        });
}

inline Tensor transpose(const Tensor& a) {
    detail::require(a.rank() == 2, "transpose: rank-2 tensor required");
    const std::size_t m = a.extent(0), n = a.extent(1);
    std::vector<double> out(m * n);
    const auto& av = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
    return detail::make_result(
        {n, m}, std::move(out), "transpose", {a},
        [m, n](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += node.grad[j * m + i];
        });
}

// Concatenates along axis 0; remaining extents must match.
inline Tensor concat0(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat: no inputs");
    auto shape = parts[0].shape();
    std::size_t total0 = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == shape.size(), "concat: rank mismatch");
        for (std::size_t d = 1; d < shape.size(); ++d)
            detail::require(p.extent(d) == shape[d], "concat: trailing extent mismatch");
        total0 += p.extent(0);
    }
    shape[0] = total0;
    std::vector<double> out;
    out.reserve(detail::shape_numel(shape));
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    std::vector<std::size_t> sizes;
    for (const auto& p : parts) sizes.push_back(p.numel());
    return detail::make_result(
        std::move(shape), std::move(out), "concat", parts,
        [sizes](detail::TensorNode& node) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < node.parents.size(); ++k) {
                auto& p = *node.parents[k];
                if (p.requires_grad) {
                    auto& g = detail::ensure_grad(p);
                    for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += node.grad[offset + i];
                }
                offset += sizes[k];
            }
        });
}

// Sub-range [begin, end) along axis 0.
inline Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end) {
    detail::require(begin < end && end <= a.extent(0), "slice: range out of bounds");
    auto shape = a.shape();
    const std::size_t inner = a.numel() / shape[0];
    shape[0] = end - begin;
    const auto& av = a.values();
    std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * inner),
                            av.begin() + static_cast<std::ptrdiff_t>(end * inner));
    return detail::make_result(
        std::move(shape), std::move(out), "slice", {a},
        [begin, inner](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < node.value.size(); ++i)
                g[begin * inner + i] += node.grad[i];
        });
}

// Gathers elements of a rank-1 tensor; repeated indices accumulate in backward.
inline Tensor gather(const Tensor& a, const std::vector<std::size_t>& indices) {
    detail::require(a.rank() == 1, "gather: rank-1 tensor required");
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        detail::require(indices[i] < a.numel(), "gather: index out of range");
        out[i] = a.v(indices[i]);
    }
    auto idx = indices;
    return detail::make_result(
        {indices.size()}, std::move(out), "gather", {a},
        [idx](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t i = 0; i < idx.size(); ++i) g[idx[i]] += node.grad[i];
        });
}

// Gathers columns of a rank-2 tensor: out[r][j] = a[r][indices[j]].
inline Tensor gather_cols(const Tensor& a, const std::vector<std::size_t>& indices) {
    detail::require(a.rank() == 2, "gather_cols: rank-2 tensor required");
    const std::size_t m = a.extent(0), n = a.extent(1), k = indices.size();
    for (std::size_t j : indices)
        detail::require(j < n, "gather_cols: index out of range");
    std::vector<double> out(m * k);
    const auto& av = a.values();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = av[r * n + indices[j]];
    auto idx = indices;
    return detail::make_result(
        {m, k}, std::move(out), "gather_cols", {a},
        [idx, m, n, k](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t r = 0; r < m; ++r)
                for (std::size_t j = 0; j < k; ++j)
                    g[r * n + idx[j]] += node.grad[r * k + j];
        });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
    const std::size_t m = a.extent(0), k = a.extent(1), p = b.extent(1);
    detail::require(b.extent(0) == k, "matmul: inner extent mismatch");
    const auto& av = a.values();
    const auto& bv = b.values();
    std::vector<double> out(m * p, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t t = 0; t < k; ++t) {
            const double x = av[i * k + t];
            const double* brow = bv.data() + t * p;
            double* orow = out.data() + i * p;
            for (std::size_t j = 0; j < p; ++j) orow[j] += x * brow[j];
        }
    return detail::make_result(
        {m, p}, std::move(out), "matmul", {a, b},
        [m, k, p](detail::TensorNode& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            if (pa.requires_grad) {  // dA = G * B^T
                auto& ga = detail::ensure_grad(pa);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        double acc = 0.0;
                        const double* grow = node.grad.data() + i * p;
                        const double* brow = pb.value.data() + t * p;
                        for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                        ga[i * k + t] += acc;
                    }
            }
            if (pb.requires_grad) {  // dB = A^T * G
                auto& gb = detail::ensure_grad(pb);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t t = 0; t < k; ++t) {
                        const double x = pa.value[i * k + t];
                        const double* grow = node.grad.data() + i * p;
                        double* gbrow = gb.data() + t * p;
                        for (std::size_t j = 0; j < p; ++j) gbrow[j] += x * grow[j];
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// convolution (cross-correlation, odd square kernels)
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1,
                     std::size_t pad = 0) {
    detail::require(input.rank() == 3, "conv2d: input must be c_in x h x w");
    detail::require(kernel.rank() == 4, "conv2d: kernel must be c_out x c_in x k x k");
    const std::size_t ci = input.extent(0), h = input.extent(1), w = input.extent(2);
    const std::size_t co = kernel.extent(0), k = kernel.extent(2);
    detail::require(kernel.extent(1) == ci, "conv2d: channel mismatch");
    detail::require(kernel.extent(3) == k, "conv2d: kernel must be square");
    detail::require(k % 2 == 1, "conv2d: kernel extent must be odd");
    detail::require(stride >= 1, "conv2d: stride must be >= 1");
    const std::ptrdiff_t num_h = static_cast<std::ptrdiff_t>(h + 2 * pad) -
                                 static_cast<std::ptrdiff_t>(k);
    const std::ptrdiff_t num_w = static_cast<std::ptrdiff_t>(w + 2 * pad) -
                                 static_cast<std::ptrdiff_t>(k);
    detail::require(num_h >= 0 && num_w >= 0, "conv2d: kernel larger than padded input");
    detail::require(num_h % static_cast<std::ptrdiff_t>(stride) == 0 &&
                        num_w % static_cast<std::ptrdiff_t>(stride) == 0,
                    "conv2d: non-integral output extent");
    const std::size_t oh = static_cast<std::size_t>(num_h) / stride + 1;
    const std::size_t ow = static_cast<std::size_t>(num_w) / stride + 1;

    const auto& in = input.values();
    const auto& ker = kernel.values();
    std::vector<double> out(co * oh * ow, 0.0);
    const std::ptrdiff_t ip = static_cast<std::ptrdiff_t>(pad);
    for (std::size_t oc = 0; oc < co; ++oc)
        for (std::size_t icn = 0; icn < ci; ++icn)
            for (std::size_t kh = 0; kh < k; ++kh)
                for (std::size_t kw = 0; kw < k; ++kw) {
                    const double wv = ker[((oc * ci + icn) * k + kh) * k + kw];
                    if (wv == 0.0) continue;
                    for (std::size_t oy = 0; oy < oh; ++oy) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + kh) - ip;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        const double* irow = in.data() + (icn * h + iy) * w;
                        double* orow = out.data() + (oc * oh + oy) * ow;
                        for (std::size_t ox = 0; ox < ow; ++ox) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kw) - ip;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            orow[ox] += wv * irow[ix];
                        }
                    }
                }
    return detail::make_result(
        {co, oh, ow}, std::move(out), "conv2d", {input, kernel},
        [ci, h, w, co, k, oh, ow, stride, ip](detail::TensorNode& node) {
            auto& pin = *node.parents[0];
            auto& pker = *node.parents[1];
            const bool need_in = pin.requires_grad;
            const bool need_ker = pker.requires_grad;
            auto* gin = need_in ? &detail::ensure_grad(pin) : nullptr;
            auto* gker = need_ker ? &detail::ensure_grad(pker) : nullptr;
            for (std::size_t oc = 0; oc < co; ++oc)
                for (std::size_t icn = 0; icn < ci; ++icn)
                    for (std::size_t kh = 0; kh < k; ++kh)
                        for (std::size_t kw = 0; kw < k; ++kw) {
                            const std::size_t kidx = ((oc * ci + icn) * k + kh) * k + kw;
                            const double wv = pker.value[kidx];
                            double wacc = 0.0;
                            for (std::size_t oy = 0; oy < oh; ++oy) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + kh) - ip;
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                                const double* grow = node.grad.data() + (oc * oh + oy) * ow;
                                const std::size_t irow = (icn * h + iy) * w;
                                for (std::size_t ox = 0; ox < ow; ++ox) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(ox * stride + kw) - ip;
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                                    const double g = grow[ox];
                                    if (need_in) (*gin)[irow + ix] += g * wv;
                                    if (need_ker) wacc += g * pin.value[irow + ix];
                                }
                            }
                            if (need_ker) (*gker)[kidx] += wacc;
                        }
        });
}

// Adds a per-channel bias to a c x h x w map.
inline Tensor add_channel_bias(const Tensor& a, const Tensor& bias) {
    detail::require(a.rank() == 3 && bias.rank() == 1, "add_channel_bias: c x h x w plus c");
    const std::size_t c = a.extent(0), hw = a.extent(1) * a.extent(2);
    detail::require(bias.extent(0) == c, "add_channel_bias: channel mismatch");
    std::vector<double> out(a.values());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += bias.v(ch);
    return detail::make_result(
        a.shape(), std::move(out), "add_channel_bias", {a, bias},
        [c, hw](detail::TensorNode& node) {
            auto& pa = *node.parents[0];
            auto& pb = *node.parents[1];
            if (pa.requires_grad) {
                auto& g = detail::ensure_grad(pa);
                for (std::size_t i = 0; i < node.value.size(); ++i) g[i] += node.grad[i];
            }
            if (pb.requires_grad) {
                auto& g = detail::ensure_grad(pb);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < hw; ++i) acc += node.grad[ch * hw + i];
                    g[ch] += acc;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    return detail::make_result(
        {1}, {s}, "sum", {a},
        [](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (double& gi : g) gi += node.grad[0];
        });
}

inline Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.values()) s += x;
    const double inv = 1.0 / static_cast<double>(a.numel());
    return detail::make_result(
        {1}, {s * inv}, "mean", {a},
        [inv](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (double& gi : g) gi += node.grad[0] * inv;
        });
}

// Max over all elements; under ties the gradient routes to the first maximal
// element in row-major order.
inline Tensor max_all(const Tensor& a) {
    const auto& av = a.values();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < av.size(); ++i)
        if (av[i] > av[arg]) arg = i;
    if (TraceCollector* tc = trace_collector()) tc->feed(arg);
    return detail::make_result(
        {1}, {av[arg]}, "max", {a},
        [arg](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            detail::ensure_grad(p)[arg] += node.grad[0];
        });
}

namespace detail {

enum class ReduceKind { Sum, Mean, Max };

// Rank-2 reduction along one axis; axis is the one being removed.
inline Tensor reduce_axis(const Tensor& a, std::size_t axis, ReduceKind kind, const char* name) {
    require(a.rank() == 2, "reduce: rank-2 tensor required");
    require(axis < 2, "reduce: invalid axis");
    const std::size_t m = a.extent(0), n = a.extent(1);
    const std::size_t out_n = axis == 0 ? n : m;
    const std::size_t red_n = axis == 0 ? m : n;
    const auto& av = a.values();
    std::vector<double> out(out_n, 0.0);
    std::vector<std::size_t> argmax(kind == ReduceKind::Max ? out_n : 0, 0);
    for (std::size_t o = 0; o < out_n; ++o) {
        auto at = [&](std::size_t r) {
            return axis == 0 ? av[r * n + o] : av[o * n + r];
        };
        if (kind == ReduceKind::Max) {
            std::size_t arg = 0;
            for (std::size_t r = 1; r < red_n; ++r)
                if (at(r) > at(arg)) arg = r;
            argmax[o] = arg;
            out[o] = at(arg);
        } else {
            double s = 0.0;
            for (std::size_t r = 0; r < red_n; ++r) s += at(r);
            out[o] = kind == ReduceKind::Mean ? s / static_cast<double>(red_n) : s;
        }
    }
    if (kind == ReduceKind::Max)
        if (TraceCollector* tc = trace_collector())
            for (std::size_t arg : argmax) tc->feed(arg);
    return make_result(
        {out_n}, std::move(out), name, {a},
        [axis, n, red_n, kind, argmax](TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = ensure_grad(p);
            const double scale = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(red_n) : 1.0;
            for (std::size_t o = 0; o < node.value.size(); ++o) {
                if (kind == ReduceKind::Max) {
                    const std::size_t r = argmax[o];
                    g[axis == 0 ? r * n + o : o * n + r] += node.grad[o];
                } else {
                    for (std::size_t r = 0; r < red_n; ++r)
                        g[axis == 0 ? r * n + o : o * n + r] += node.grad[o] * scale;
                }
            }
        });
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, std::size_t axis) {
    return detail::reduce_axis(a, axis, detail::ReduceKind::Sum, "sum_axis");
}
inline Tensor mean_axis(const Tensor& a, std::size_t axis) {
    return detail::reduce_axis(a, axis, detail::ReduceKind::Mean, "mean_axis");
}
inline Tensor max_axis(const Tensor& a, std::size_t axis) {
    return detail::reduce_axis(a, axis, detail::ReduceKind::Max, "max_axis");
}

// Spatial mean of a c x h x w map, one value per channel.
inline Tensor global_avg_pool(const Tensor& a) {
    detail::require(a.rank() == 3, "global_avg_pool: c x h x w tensor required");
    const std::size_t c = a.extent(0), hw = a.extent(1) * a.extent(2);
    const auto& av = a.values();
    std::vector<double> out(c, 0.0);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += av[ch * hw + i];
        out[ch] = s * inv;
    }
    return detail::make_result(
        {c}, std::move(out), "global_avg_pool", {a},
        [c, hw, inv](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += node.grad[ch] * inv;
        });
}

// ---------------------------------------------------------------------------
// softmax / normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared slice walker for axis-wise ops on rank-1/rank-2 tensors. Calls
// fn(base, stride, count) for every 1-D slice along `axis`.
template <typename Fn>
void for_each_slice(const std::vector<std::size_t>& shape, std::size_t axis, Fn&& fn) {
    if (shape.size() == 1) {
        require(axis == 0, "axis out of range");
        fn(std::size_t{0}, std::size_t{1}, shape[0]);
        return;
    }
    require(shape.size() == 2 && axis < 2, "axis-wise op: rank-1/2 tensor required");
    const std::size_t m = shape[0], n = shape[1];
    if (axis == 1) {
        for (std::size_t i = 0; i < m; ++i) fn(i * n, std::size_t{1}, n);
    } else {
        for (std::size_t j = 0; j < n; ++j) fn(j, n, m);
    }
}

}  // namespace detail

// Numerically stable softmax along `axis` (max-subtraction per slice).
inline Tensor softmax(const Tensor& a, std::size_t axis = 0) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    detail::for_each_slice(a.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t cnt) {
        double mx = av[base];
        for (std::size_t r = 1; r < cnt; ++r) mx = std::max(mx, av[base + r * stride]);
        double denom = 0.0;
        for (std::size_t r = 0; r < cnt; ++r) {
            const double e = std::exp(av[base + r * stride] - mx);
            out[base + r * stride] = e;
            denom += e;
        }
        for (std::size_t r = 0; r < cnt; ++r) out[base + r * stride] /= denom;
    });
    auto shape = a.shape();
    return detail::make_result(
        std::move(shape), std::move(out), "softmax", {a},
        [axis](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            detail::for_each_slice(node.shape, axis,
                                   [&](std::size_t base, std::size_t stride, std::size_t cnt) {
                double dot = 0.0;
                for (std::size_t r = 0; r < cnt; ++r) {
                    const std::size_t i = base + r * stride;
                    dot += node.grad[i] * node.value[i];
                }
                for (std::size_t r = 0; r < cnt; ++r) {
                    const std::size_t i = base + r * stride;
                    g[i] += node.value[i] * (node.grad[i] - dot);
                }
            });
        });
}

inline Tensor log_softmax(const Tensor& a, std::size_t axis = 0) {
    const auto& av = a.values();
    std::vector<double> out(av.size());
    detail::for_each_slice(a.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t cnt) {
        double mx = av[base];
        for (std::size_t r = 1; r < cnt; ++r) mx = std::max(mx, av[base + r * stride]);
        double denom = 0.0;
        for (std::size_t r = 0; r < cnt; ++r) denom += std::exp(av[base + r * stride] - mx);
        const double lse = mx + std::log(denom);
        for (std::size_t r = 0; r < cnt; ++r) out[base + r * stride] = av[base + r * stride] - lse;
    });
    auto shape = a.shape();
    return detail::make_result(
        std::move(shape), std::move(out), "log_softmax", {a},
        [axis](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            detail::for_each_slice(node.shape, axis,
                                   [&](std::size_t base, std::size_t stride, std::size_t cnt) {
                double gsum = 0.0;
                for (std::size_t r = 0; r < cnt; ++r) gsum += node.grad[base + r * stride];
                for (std::size_t r = 0; r < cnt; ++r) {
                    const std::size_t i = base + r * stride;
                    g[i] += node.grad[i] - std::exp(node.value[i]) * gsum;
                }
            });
        });
}

// Scales each slice along `axis` to unit L2 norm; slices with norm below eps
// are divided by eps instead (so the zero vector maps to itself).
inline Tensor l2_normalize(const Tensor& a, std::size_t axis = 0, double eps = 1e-8) {
    detail::require(eps > 0.0, "l2_normalize: eps must be positive");
    const auto& av = a.values();
    std::vector<double> out(av.size());
    std::vector<double> norms;
    TraceCollector* tc = trace_collector();
    detail::for_each_slice(a.shape(), axis, [&](std::size_t base, std::size_t stride, std::size_t cnt) {
        double sq = 0.0;
        for (std::size_t r = 0; r < cnt; ++r) {
            const double x = av[base + r * stride];
            sq += x * x;
        }
        const double norm = std::sqrt(sq);
        const double denom = std::max(norm, eps);
        norms.push_back(denom);
        if (tc) tc->feed_bool(norm > eps);
        for (std::size_t r = 0; r < cnt; ++r) out[base + r * stride] = av[base + r * stride] / denom;
    });
    auto shape = a.shape();
    return detail::make_result(
        std::move(shape), std::move(out), "l2_normalize", {a},
        [axis, eps, norms](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            std::size_t slice = 0;
            detail::for_each_slice(node.shape, axis,
                                   [&](std::size_t base, std::size_t stride, std::size_t cnt) {
                const double denom = norms[slice++];
                if (denom <= eps) {  // constant 1/eps scaling branch
                    for (std::size_t r = 0; r < cnt; ++r) {
                        const std::size_t i = base + r * stride;
                        g[i] += node.grad[i] / denom;
                    }
                    return;
                }
                double dot = 0.0;  // x . grad, using x = y * denom
                for (std::size_t r = 0; r < cnt; ++r) {
                    const std::size_t i = base + r * stride;
                    dot += p.value[i] * node.grad[i];
                }
                const double d3 = denom * denom * denom;
                for (std::size_t r = 0; r < cnt; ++r) {
                    const std::size_t i = base + r * stride;
                    g[i] += node.grad[i] / denom - p.value[i] * dot / d3;
                }
            });
        });
}

// ---------------------------------------------------------------------------
// resampling
// ---------------------------------------------------------------------------

namespace detail {

struct ResampleTap {
    std::size_t lo, hi;
    double w_hi;  // weight of hi; lo gets 1 - w_hi
};

// Half-pixel-center source coordinates with edge clamping.
inline std::vector<ResampleTap> bilinear_taps(std::size_t src, std::size_t dst) {
    std::vector<ResampleTap> taps(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t o = 0; o < dst; ++o) {
        const double s = (static_cast<double>(o) + 0.5) * scale - 0.5;
        double f = std::floor(s);
        double frac = s - f;
        std::ptrdiff_t lo = static_cast<std::ptrdiff_t>(f);
        if (lo < 0) {
            lo = 0;
            frac = 0.0;
        }
        std::size_t hi = static_cast<std::size_t>(lo) + 1;
        if (hi >= src) {
            hi = src - 1;
            if (static_cast<std::size_t>(lo) >= src - 1) {
                lo = static_cast<std::ptrdiff_t>(src) - 1;
                frac = 0.0;
            }
        }
        taps[o] = {static_cast<std::size_t>(lo), hi, frac};
    }
    return taps;
}

}  // namespace detail

inline Tensor bilinear_resize(const Tensor& a, std::size_t out_h, std::size_t out_w) {
    detail::require(a.rank() == 3, "bilinear_resize: c x h x w tensor required");
    detail::require(out_h >= 1 && out_w >= 1, "bilinear_resize: output extents must be >= 1");
    const std::size_t c = a.extent(0), h = a.extent(1), w = a.extent(2);
    const auto ytaps = detail::bilinear_taps(h, out_h);
    const auto xtaps = detail::bilinear_taps(w, out_w);
    const auto& av = a.values();
    std::vector<double> out(c * out_h * out_w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* plane = av.data() + ch * h * w;
        double* oplane = out.data() + ch * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& ty = ytaps[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const auto& tx = xtaps[ox];
                const double v00 = plane[ty.lo * w + tx.lo];
                const double v01 = plane[ty.lo * w + tx.hi];
                const double v10 = plane[ty.hi * w + tx.lo];
                const double v11 = plane[ty.hi * w + tx.hi];
                const double top = v00 + (v01 - v00) * tx.w_hi;
                const double bot = v10 + (v11 - v10) * tx.w_hi;
                oplane[oy * out_w + ox] = top + (bot - top) * ty.w_hi;
            }
        }
    }
    return detail::make_result(
        {c, out_h, out_w}, std::move(out), "bilinear_resize", {a},
        [c, h, w, out_h, out_w, ytaps, xtaps](detail::TensorNode& node) {
            auto& p = *node.parents[0];
            auto& g = detail::ensure_grad(p);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double* gplane = g.data() + ch * h * w;
                const double* goplane = node.grad.data() + ch * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const auto& ty = ytaps[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const auto& tx = xtaps[ox];
                        const double gv = goplane[oy * out_w + ox];
                        const double wy0 = 1.0 - ty.w_hi, wy1 = ty.w_hi;
                        const double wx0 = 1.0 - tx.w_hi, wx1 = tx.w_hi;
                        gplane[ty.lo * w + tx.lo] += gv * wy0 * wx0;
                        gplane[ty.lo * w + tx.hi] += gv * wy0 * wx1;
                        gplane[ty.hi * w + tx.lo] += gv * wy1 * wx0;
                        gplane[ty.hi * w + tx.hi] += gv * wy1 * wx1;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// selection
// ---------------------------------------------------------------------------

// Indices of the k largest values over the flattened tensor, descending;
// ties break toward the lower index. Selection carries no gradient.
inline std::vector<std::size_t> topk_indices(const Tensor& a, std::size_t k) {
    const auto& av = a.values();
    detail::require(k >= 1 && k <= av.size(), "topk: k out of range");
    std::vector<std::size_t> idx(av.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) {
        if (av[i] != av[j]) return av[i] > av[j];
        return i < j;
    });
    idx.resize(k);
    if (TraceCollector* tc = trace_collector())
        for (std::size_t i : idx) tc->feed(i);
    return idx;
}

}  // namespace rtc
