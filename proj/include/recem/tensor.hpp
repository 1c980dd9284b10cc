#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace recem {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Runtime switch for the per-op NaN/Inf scan. On by default in debug
/// builds; release builds skip it unless a test flips it on.
inline bool& finite_check_enabled() {
#ifdef NDEBUG
    static bool enabled = false;
#else
    static bool enabled = true;
#endif
    return enabled;
}

/// Thread-local autodiff recording switch (see NoGradGuard).
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// One value in the autodiff graph: row-major f64 payload, lazily
/// allocated gradient, and (for op results) the recorded parents plus a
/// closure that scatters this node's gradient into them.
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until backward touches this node
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return values.size(); }

    /// Gradient buffer, allocated on demand; nullptr when this node does
    /// not participate in differentiation.
    double* grad_buf() {
        if (!requires_grad) return nullptr;
        if (grad.empty()) grad.assign(values.size(), 0.0);
        return grad.data();
    }
};

namespace detail {
inline void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) throw std::runtime_error(std::string("non-finite value produced by op '") + op + "'");
    }
}
}  // namespace detail

/// Value-semantics handle onto a graph node. Copying a Tensor aliases the
/// node; tensors are immutable after construction apart from gradient
/// accumulation and explicit parameter updates by the optimizer.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one axis");
        for (std::size_t d : shape) {
            if (d == 0) throw std::invalid_argument("tensor axes must be positive (got shape " + shape_str(shape) + ")");
        }
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        }
        for (double x : data) {
            if (!std::isfinite(x)) throw std::invalid_argument("tensor data contains a non-finite entry");
        }
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from({1}, {v}); }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static Tensor full(Shape shape, double v) {
        std::size_t n = shape_numel(shape);
        return from(std::move(shape), std::vector<double>(n, v));
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t rank() const { return n_->shape.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape[i]; }
    std::size_t numel() const { return n_->values.size(); }
    const std::vector<double>& values() const { return n_->values; }
    std::vector<double>& values_mut() { return n_->values; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const char* op() const { return n_->op; }
    const NodePtr& node() const { return n_; }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor, got shape " + shape_str(shape()));
        return n_->values[0];
    }

    void zero_grad() {
        if (n_) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

private:
    NodePtr n_;
};

inline Tensor make_tensor(Shape shape, std::vector<double> data) { return Tensor::from(std::move(shape), std::move(data)); }

namespace detail {

/// Build an op-result node. Parents and the backward closure are recorded
/// only when grad mode is on and some parent needs gradients; otherwise the
/// result is a detached leaf and temporaries free eagerly.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> values, std::vector<NodePtr> parents,
                      std::function<void(TensorNode&)> backward) {
    if (finite_check_enabled()) check_finite(values, op);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->op = op;
    bool track = grad_mode();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p->requires_grad;
        track = any;
    }
    if (track) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    return Tensor(std::move(n));
}

// ---- flat row-major matmul kernels ------------------------------------

// C[m x n] (+)= A[m x k] * B[k x n]
inline void mm_ab(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(C, C + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[p];
            const double* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C[m x n] (+)= A[m x k] * B[n x k]^T
inline void mm_abt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] = accumulate ? c[j] + acc : acc;
        }
    }
}

// C[k x n] (+)= A[m x k]^T * B[m x n]
inline void mm_atb(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(C, C + k * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        const double* b = B + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[p];
            double* c = C + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// Broadcast classification for binary elementwise ops: shapes must be
// identical, or identical except that one side has extent 1 on the
// trailing axis.
enum class Broadcast { None, BLast1, ALast1 };

inline Broadcast classify_broadcast(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Broadcast::None;
    auto mismatch = [&]() {
        throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
    };
    if (a.size() != b.size() || a.empty()) mismatch();
    for (std::size_t i = 0; i + 1 < a.size(); ++i)
        if (a[i] != b[i]) mismatch();
    std::size_t la = a.back(), lb = b.back();
    if (lb == 1 && la > 1) return Broadcast::BLast1;
    if (la == 1 && lb > 1) return Broadcast::ALast1;
    mismatch();
    return Broadcast::None;  // unreachable
}

}  // namespace detail

// ---- elementwise ops ----------------------------------------------------

namespace detail {

template <typename FwdFn, typename BwdFn>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, FwdFn fwd, BwdFn bwd) {
    Broadcast bc = classify_broadcast(a.shape(), b.shape(), op);
    const Tensor& big = (bc == Broadcast::ALast1) ? b : a;
    std::size_t n = big.numel();
    std::size_t inner = big.shape().back();
    std::vector<double> out(n);
    const auto& av = a.values();
    const auto& bv = b.values();
    switch (bc) {
        case Broadcast::None:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
            break;
        case Broadcast::BLast1:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i / inner]);
            break;
        case Broadcast::ALast1:
            for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i / inner], bv[i]);
            break;
    }
    return make_op(op, big.shape(), std::move(out), {a.node(), b.node()},
                   [bc, inner, bwd](TensorNode& self) {
                       TensorNode& pa = *self.parents[0];
                       TensorNode& pb = *self.parents[1];
                       double* ga = pa.grad_buf();
                       double* gb = pb.grad_buf();
                       const double* g = self.grad.data();
                       std::size_t n = self.values.size();
                       for (std::size_t i = 0; i < n; ++i) {
                           std::size_t ia = (bc == Broadcast::ALast1) ? i / inner : i;
                           std::size_t ib = (bc == Broadcast::BLast1) ? i / inner : i;
                           double da, db;
                           bwd(pa.values[ia], pb.values[ib], da, db);
                           if (ga) ga[ia] += g[i] * da;
                           if (gb) gb[ib] += g[i] * db;
                       }
                   });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double, double& da, double& db) { da = 1.0; db = 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double, double& da, double& db) { da = 1.0; db = -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_elementwise(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double x, double y, double& da, double& db) { da = y; db = x; });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    return detail::make_op("scale_by_const", a.shape(), std::move(out), {a.node()}, [c](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            for (std::size_t i = 0; i < self.values.size(); ++i) g[i] += c * self.grad[i];
        }
    });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
    // Clamped off the exact endpoints so the (0,1) range invariant holds
    // even for saturating inputs.
    constexpr double kEps = 1e-15;
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double x = av[i];
        double s = (x >= 0.0) ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = std::min(1.0 - kEps, std::max(kEps, s));
    }
    return detail::make_op("sigmoid", a.shape(), std::move(out), {a.node()}, [](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            for (std::size_t i = 0; i < self.values.size(); ++i) {
                double s = self.values[i];
                g[i] += self.grad[i] * s * (1.0 - s);
            }
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
    return detail::make_op("relu", a.shape(), std::move(out), {a.node()}, [](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            const auto& xv = self.parents[0]->values;
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < self.values.size(); ++i)
                if (xv[i] > 0.0) g[i] += self.grad[i];
        }
    });
}

// ---- matmul ---------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    detail::mm_ab(a.values().data(), b.values().data(), out.data(), m, k, n, false);
    return detail::make_op("matmul", {m, n}, std::move(out), {a.node(), b.node()}, [m, k, n](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        const double* g = self.grad.data();
        if (double* ga = pa.grad_buf()) detail::mm_abt(g, pb.values.data(), ga, m, n, k, true);   // dA = g * B^T
        if (double* gb = pb.grad_buf()) detail::mm_atb(pa.values.data(), g, gb, m, k, n, true);   // dB = A^T * g
    });
}

// ---- reductions -------------------------------------------------------

namespace detail {

struct AxisSplit {
    std::size_t outer, n, inner;
};

inline AxisSplit axis_split(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw std::invalid_argument("reduce: axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
    AxisSplit sp{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
    Shape out;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out.push_back(s[i]);
    if (out.empty()) out.push_back(1);
    return out;
}

enum class ReduceKind { Sum, Mean, L1 };

inline Tensor reduce_all(ReduceKind kind, const Tensor& a) {
    const auto& v = a.values();
    double acc = 0.0;
    for (double x : v) acc += (kind == ReduceKind::L1) ? std::fabs(x) : x;
    if (kind == ReduceKind::Mean) acc /= static_cast<double>(v.size());
    const char* tag = kind == ReduceKind::Sum ? "sum" : kind == ReduceKind::Mean ? "mean" : "l1_norm";
    return make_op(tag, {1}, {acc}, {a.node()}, [kind](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            const auto& xv = self.parents[0]->values;
            double up = self.grad[0];
            double w = (kind == ReduceKind::Mean) ? up / static_cast<double>(xv.size()) : up;
            for (std::size_t i = 0; i < xv.size(); ++i) {
                if (kind == ReduceKind::L1) {
                    double s = xv[i] > 0.0 ? 1.0 : (xv[i] < 0.0 ? -1.0 : 0.0);
                    g[i] += up * s;
                } else {
                    g[i] += w;
                }
            }
        }
    });
}

inline Tensor reduce_axis(ReduceKind kind, const Tensor& a, std::size_t axis) {
    AxisSplit sp = axis_split(a.shape(), axis);
    Shape out_shape = drop_axis(a.shape(), axis);
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    const auto& v = a.values();
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i) {
                double x = v[(o * sp.n + k) * sp.inner + i];
                out[o * sp.inner + i] += (kind == ReduceKind::L1) ? std::fabs(x) : x;
            }
    if (kind == ReduceKind::Mean)
        for (double& x : out) x /= static_cast<double>(sp.n);
    const char* tag = kind == ReduceKind::Sum ? "sum" : kind == ReduceKind::Mean ? "mean" : "l1_norm";
    return make_op(tag, std::move(out_shape), std::move(out), {a.node()}, [kind, sp](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            const auto& xv = self.parents[0]->values;
            for (std::size_t o = 0; o < sp.outer; ++o)
                for (std::size_t k = 0; k < sp.n; ++k)
                    for (std::size_t i = 0; i < sp.inner; ++i) {
                        std::size_t xi = (o * sp.n + k) * sp.inner + i;
                        double up = self.grad[o * sp.inner + i];
                        if (kind == ReduceKind::L1) {
                            double s = xv[xi] > 0.0 ? 1.0 : (xv[xi] < 0.0 ? -1.0 : 0.0);
                            g[xi] += up * s;
                        } else if (kind == ReduceKind::Mean) {
                            g[xi] += up / static_cast<double>(sp.n);
                        } else {
                            g[xi] += up;
                        }
                    }
        }
    });
}

}  // namespace detail

inline Tensor sum(const Tensor& a) { return detail::reduce_all(detail::ReduceKind::Sum, a); }
inline Tensor sum(const Tensor& a, std::size_t axis) { return detail::reduce_axis(detail::ReduceKind::Sum, a, axis); }
inline Tensor mean(const Tensor& a) { return detail::reduce_all(detail::ReduceKind::Mean, a); }
inline Tensor mean(const Tensor& a, std::size_t axis) { return detail::reduce_axis(detail::ReduceKind::Mean, a, axis); }
inline Tensor l1_norm(const Tensor& a) { return detail::reduce_all(detail::ReduceKind::L1, a); }
inline Tensor l1_norm(const Tensor& a, std::size_t axis) { return detail::reduce_axis(detail::ReduceKind::L1, a, axis); }

// ---- shape ops ----------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    return detail::make_op("reshape", std::move(new_shape), a.values(), {a.node()}, [](TensorNode& self) {
        if (double* g = self.parents[0]->grad_buf()) {
            for (std::size_t i = 0; i < self.values.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor concat(const std::vector<Tensor>& ts, std::size_t axis) {
    if (ts.empty()) throw std::invalid_argument("concat: need at least one tensor");
    const Shape& s0 = ts[0].shape();
    if (axis >= s0.size()) throw std::invalid_argument("concat: axis out of range");
    Shape out_shape = s0;
    std::size_t total_axis = 0;
    for (const Tensor& t : ts) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i]) throw std::invalid_argument("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
        total_axis += s[axis];
    }
    out_shape[axis] = total_axis;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

    std::vector<double> out(shape_numel(out_shape));
    std::vector<std::size_t> blocks;  // per-input axis extent * inner
    blocks.reserve(ts.size());
    for (const Tensor& t : ts) blocks.push_back(t.shape()[axis] * inner);
    std::size_t row = total_axis * inner;
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = o * row;
        for (std::size_t ti = 0; ti < ts.size(); ++ti) {
            const auto& v = ts[ti].values();
            std::copy(v.begin() + o * blocks[ti], v.begin() + (o + 1) * blocks[ti], out.begin() + off);
            off += blocks[ti];
        }
    }
    std::vector<NodePtr> parents;
    parents.reserve(ts.size());
    for (const Tensor& t : ts) parents.push_back(t.node());
    return detail::make_op("concat", std::move(out_shape), std::move(out), std::move(parents),
                           [outer, row, blocks](TensorNode& self) {
                               for (std::size_t o = 0; o < outer; ++o) {
                                   std::size_t off = o * row;
                                   for (std::size_t ti = 0; ti < self.parents.size(); ++ti) {
                                       if (double* g = self.parents[ti]->grad_buf()) {
                                           for (std::size_t j = 0; j < blocks[ti]; ++j) g[o * blocks[ti] + j] += self.grad[off + j];
                                       }
                                       off += blocks[ti];
                                   }
                               }
                           });
}

inline Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size()) throw std::invalid_argument("slice: axis out of range");
    if (len == 0 || start + len > s[axis]) {
        throw std::invalid_argument("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) + ") out of bounds for axis extent " + std::to_string(s[axis]));
    }
    detail::AxisSplit sp = detail::axis_split(s, axis);
    Shape out_shape = s;
    out_shape[axis] = len;
    std::vector<double> out(sp.outer * len * sp.inner);
    const auto& v = a.values();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        std::size_t src = (o * sp.n + start) * sp.inner;
        std::copy(v.begin() + src, v.begin() + src + len * sp.inner, out.begin() + o * len * sp.inner);
    }
    return detail::make_op("slice", std::move(out_shape), std::move(out), {a.node()},
                           [sp, start, len](TensorNode& self) {
                               if (double* g = self.parents[0]->grad_buf()) {
                                   for (std::size_t o = 0; o < sp.outer; ++o) {
                                       std::size_t dst = (o * sp.n + start) * sp.inner;
                                       for (std::size_t j = 0; j < len * sp.inner; ++j) g[dst + j] += self.grad[o * len * sp.inner + j];
                                   }
                               }
                           });
}

/// Constant copy: severs the value from the graph.
inline Tensor detach(const Tensor& a) {
    auto n = std::make_shared<TensorNode>();
    n->shape = a.shape();
    n->values = a.values();
    n->op = "detach";
    return Tensor(std::move(n));
}

/// Hard 0/1 threshold. Gradient-blocking by construction (there is no
/// useful derivative), which is exactly the Bool-CBM bottleneck behavior.
inline Tensor hard_threshold(const Tensor& a, double thr = 0.5) {
    std::vector<double> out(a.numel());
    const auto& v = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] >= thr ? 1.0 : 0.0;
    auto n = std::make_shared<TensorNode>();
    n->shape = a.shape();
    n->values = std::move(out);
    n->op = "hard_threshold";
    return Tensor(std::move(n));
}

// ---- backward -------------------------------------------------------------

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node with requires_grad; call zero_grad between steps.
inline void backward(const Tensor& root) {
    if (root.numel() != 1) throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(root.shape()));
    if (!root.requires_grad()) return;  // nothing to differentiate

    // Iterative DFS topological order (parents before children).
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // order is parents-first; run children-first.
    root.node()->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---- gradient checking ------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t resampled = 0;  // coordinates moved off non-differentiable points
};

/// Max over coordinates of |analytic - numeric| / max(1, |numeric|) with
/// central differences. f must be scalar-valued.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
    Tensor xg = Tensor::from(x.shape(), x.values(), true);
    Tensor y = f(xg);
    if (y.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    backward(y);
    std::vector<double> analytic(x.numel(), 0.0);
    if (!xg.grad().empty()) analytic = xg.grad();

    double worst = 0.0;
    std::vector<double> v = x.values();
    NoGradGuard ng;
    for (std::size_t i = 0; i < v.size(); ++i) {
        double orig = v[i];
        v[i] = orig + eps;
        double fp = f(Tensor::from(x.shape(), v)).item();
        v[i] = orig - eps;
        double fm = f(Tensor::from(x.shape(), v)).item();
        v[i] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

/// grad_check with the kink-avoidance convention: input coordinates within
/// `margin` of 0 (where relu/l1 are non-differentiable) are replaced by
/// fresh() draws first, and the replacement count is reported.
inline GradCheckReport grad_check_resampled(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double margin,
                                            const std::function<double()>& fresh, double eps = 1e-5) {
    std::vector<double> v = x.values();
    GradCheckReport rep;
    for (double& c : v) {
        while (std::fabs(c) < margin) {
            c = fresh();
            ++rep.resampled;
        }
    }
    rep.max_rel_err = grad_check(f, Tensor::from(x.shape(), std::move(v)), eps);
    return rep;
}

}  // namespace recem
