#pragma once

// Dense 64-bit real tensors with reverse-mode automatic differentiation.
//
// Operations record backward closures onto an explicit Tape while a
// Tape::Scope is open and at least one input requires gradients. Calling
// Tape::backward(loss) replays the closures in exact reverse recording
// order; leaf gradients accumulate additively across calls, intermediate
// gradients are reset at the start of each backward pass.
//
// Everything is double precision and single-threaded by design: the test
// suite depends on tight finite-difference tolerances and bit-identical
// reruns.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tokpo {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first touched
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

[[noreturn]] inline void op_fail(const char* op, const std::string& detail) {
    throw std::invalid_argument(std::string(op) + ": " + detail);
}

}  // namespace detail

class Tensor {
public:
    Tensor() : n_(std::make_shared<detail::TensorNode>()) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.n_->value.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
        t.n_->shape = std::move(shape);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            detail::op_fail("Tensor::from", "shape " + shape_str(shape) + " does not match " +
                                                std::to_string(data.size()) + " values");
        Tensor t;
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({}, {v}, requires_grad);
    }

    const Shape& shape() const { return n_->shape; }
    std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }
    std::int64_t dim(std::size_t i) const { return n_->shape.at(i); }
    std::size_t rank() const { return n_->shape.size(); }
    bool is_scalar() const { return n_->value.size() == 1 && n_->shape.empty(); }

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }

    std::vector<double>& data() { return n_->value; }
    const std::vector<double>& data() const { return n_->value; }

    bool has_grad() const { return n_->grad.size() == n_->value.size(); }
    std::vector<double>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    const std::vector<double>& grad_view() const {
        n_->ensure_grad();
        return n_->grad;
    }
    void zero_grad() {
        if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }

    double item() const {
        if (n_->value.size() != 1)
            detail::op_fail("item", "tensor " + shape_str(n_->shape) + " is not a scalar");
        return n_->value[0];
    }

    double at(std::int64_t r, std::int64_t c) const {
        return n_->value[static_cast<std::size_t>(r * n_->shape.at(1) + c)];
    }

    // Deep copy of values; gradient state is not copied.
    Tensor clone() const {
        Tensor t;
        t.n_->shape = n_->shape;
        t.n_->value = n_->value;
        t.n_->requires_grad = n_->requires_grad;
        return t;
    }

    const std::shared_ptr<detail::TensorNode>& node() const { return n_; }

private:
    std::shared_ptr<detail::TensorNode> n_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
public:
    // Opens this tape for recording; restores the previous one on destruction.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_) { active_ = &t; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    static Tape* active() { return active_; }

    void record(std::shared_ptr<detail::TensorNode> out, std::function<void()> fn) {
        steps_.push_back({std::move(out), std::move(fn)});
    }

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

    // Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable
    // from `loss`. Intermediate gradients are reset per call, so repeated
    // calls add another full contribution to the leaves.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            detail::op_fail("backward", "loss must be a scalar, got " + shape_str(loss.shape()));
        for (auto& s : steps_) {
            s.out->ensure_grad();
            std::fill(s.out->grad.begin(), s.out->grad.end(), 0.0);
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] += 1.0;
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
    }

private:
    struct Step {
        std::shared_ptr<detail::TensorNode> out;
        std::function<void()> fn;
    };
    std::vector<Step> steps_;
    inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
    if (Tape::active() == nullptr) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(Shape shape, std::size_t n) {
    Tensor t = Tensor::zeros(std::move(shape));
    (void)n;
    return t;
}

// Marks `out` as tape-attached and registers the closure.
inline void attach(Tensor& out, std::function<void()> fn) {
    out.set_requires_grad(true);
    Tape::active()->record(out.node(), std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (same shape, or scalar broadcast on either side)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul, Div };

inline const char* bin_name(BinKind k) {
    switch (k) {
        case BinKind::Add: return "add";
        case BinKind::Sub: return "sub";
        case BinKind::Mul: return "mul";
        default: return "div";
    }
}

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind) {
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape())
        op_fail(bin_name(kind), "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));

    const Shape& out_shape = a_scalar && !b_scalar ? b.shape() : a.shape();
    Tensor out = Tensor::zeros(out_shape);
    const auto& av = a.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    const std::size_t n = ov.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: ov[i] = x + y; break;
            case BinKind::Sub: ov[i] = x - y; break;
            case BinKind::Mul: ov[i] = x * y; break;
            case BinKind::Div: ov[i] = x / y; break;
        }
    }

    if (!recording({&a, &b})) return out;
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    detail::attach(out, [an, bn, on, kind, a_scalar, b_scalar, need_a, need_b]() {
        const auto& g = on->grad;
        const std::size_t n = g.size();
        if (need_a) {
            an->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double y = bn->value[b_scalar ? 0 : i];
                double d = 0.0;
                switch (kind) {
                    case BinKind::Add:
                    case BinKind::Sub: d = g[i]; break;
                    case BinKind::Mul: d = g[i] * y; break;
                    case BinKind::Div: d = g[i] / y; break;
                }
                an->grad[a_scalar ? 0 : i] += d;
            }
        }
        if (need_b) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double x = an->value[a_scalar ? 0 : i];
                const double y = bn->value[b_scalar ? 0 : i];
                double d = 0.0;
                switch (kind) {
                    case BinKind::Add: d = g[i]; break;
                    case BinKind::Sub: d = -g[i]; break;
                    case BinKind::Mul: d = g[i] * x; break;
                    case BinKind::Div: d = -g[i] * x / (y * y); break;
                }
                bn->grad[b_scalar ? 0 : i] += d;
            }
        }
    });
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::Div); }

inline Tensor add(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor sub(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor mul(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor div(const Tensor& a, double c) { return div(a, Tensor::scalar(c)); }
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// `dfn(x, y)` returns dy/dx given the input and the cached output value.
inline Tensor unary_op(const Tensor& a, double (*fn)(double), double (*dfn)(double, double),
                       const char* /*name*/) {
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fn(av[i]);
    if (!recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, dfn]() {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->value.size(); ++i)
            an->grad[i] += on->grad[i] * dfn(an->value[i], on->value[i]);
    });
    return out;
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double log_sigmoid_scalar(double x) {
    // log sigma(x) = -softplus(-x), computed without overflow on either tail
    if (x >= 0.0) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return detail::sigmoid_scalar(x); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

inline Tensor log(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

inline Tensor log_sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return detail::log_sigmoid_scalar(x); },
        [](double x, double) { return detail::sigmoid_scalar(-x); }, "log_sigmoid");
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) detail::op_fail("clamp", "lo > hi");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::min(std::max(av[i], lo), hi);
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, lo, hi]() {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->value.size(); ++i) {
            const double x = an->value[i];
            if (x >= lo && x <= hi) an->grad[i] += on->grad[i];
        }
    });
    return out;
}

// Returns the values unchanged but blocks gradient flow.
inline Tensor stop_gradient(const Tensor& a) {
    Tensor out = a.clone();
    out.set_requires_grad(false);
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n], optionally transposing either input in-place.
inline void matmul_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                       std::int64_t n, bool trans_a, bool trans_b) {
    // i-k-j loop order keeps the inner accesses contiguous for the common
    // (untransposed) case.
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const double aval = trans_a ? a[p * m + i] : a[i * k + p];
            if (aval == 0.0) continue;
            const double* brow = trans_b ? nullptr : b + p * n;
            double* crow = c + i * n;
            if (!trans_b) {
                for (std::int64_t j = 0; j < n; ++j) crow[j] += aval * brow[j];
            } else {
                for (std::int64_t j = 0; j < n; ++j) crow[j] += aval * b[j * k + p];
            }
        }
    }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        detail::op_fail("matmul",
                        "shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n, false, false);
    if (!detail::recording({&a, &b})) return out;
    auto an = a.node();
    auto bn = b.node();
    auto on = out.node();
    const bool need_a = a.requires_grad();
    const bool need_b = b.requires_grad();
    detail::attach(out, [an, bn, on, m, k, n, need_a, need_b]() {
        if (need_a) {
            an->ensure_grad();
            // dA = dC * B^T
            detail::matmul_acc(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k, false,
                               true);
        }
        if (need_b) {
            bn->ensure_grad();
            // dB = A^T * dC
            detail::matmul_acc(an->value.data(), on->grad.data(), bn->grad.data(), k, m, n, true,
                               false);
        }
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) detail::op_fail("transpose", "expected rank-2, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) ov[j * m + i] = av[i * n + j];
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, m, n]() {
        an->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) an->grad[i * n + j] += on->grad[j * m + i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        detail::op_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    Tensor out = Tensor::from(std::move(shape), a.data());
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on]() {
        an->ensure_grad();
        for (std::size_t i = 0; i < an->value.size(); ++i) an->grad[i] += on->grad[i];
    });
    return out;
}

inline Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
    if (a.rank() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
        detail::op_fail("slice_rows", "rows [" + std::to_string(r0) + "," + std::to_string(r1) +
                                          ") of " + shape_str(a.shape()));
    const std::int64_t n = a.dim(1);
    Tensor out = Tensor::zeros({r1 - r0, n});
    std::copy(a.data().begin() + r0 * n, a.data().begin() + r1 * n, out.data().begin());
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, r0, n]() {
        an->ensure_grad();
        for (std::size_t i = 0; i < on->value.size(); ++i)
            an->grad[static_cast<std::size_t>(r0 * n) + i] += on->grad[i];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    if (a.rank() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
        detail::op_fail("slice_cols", "cols [" + std::to_string(c0) + "," + std::to_string(c1) +
                                          ") of " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({m, w});
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < w; ++j) ov[i * w + j] = av[i * n + c0 + j];
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, m, n, w, c0]() {
        an->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < w; ++j) an->grad[i * n + c0 + j] += on->grad[i * w + j];
    });
    return out;
}

// Concatenation over a named axis of rank-2 tensors.
inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) detail::op_fail("concat", "no inputs");
    if (axis != 0 && axis != 1) detail::op_fail("concat", "axis must be 0 or 1");
    for (const auto& p : parts)
        if (p.rank() != 2)
            detail::op_fail("concat", "expected rank-2 inputs, got " + shape_str(p.shape()));
    const std::int64_t fixed = axis == 0 ? parts[0].dim(1) : parts[0].dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        const std::int64_t pf = axis == 0 ? p.dim(1) : p.dim(0);
        if (pf != fixed)
            detail::op_fail("concat", "incompatible shapes " + shape_str(parts[0].shape()) +
                                          " vs " + shape_str(p.shape()));
        total += axis == 0 ? p.dim(0) : p.dim(1);
    }
    const std::int64_t m = axis == 0 ? total : fixed;
    const std::int64_t n = axis == 0 ? fixed : total;
    Tensor out = Tensor::zeros({m, n});
    auto& ov = out.data();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        const auto& pv = p.data();
        if (axis == 0) {
            std::copy(pv.begin(), pv.end(), ov.begin() + offset * n);
            offset += p.dim(0);
        } else {
            const std::int64_t pw = p.dim(1);
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < pw; ++j) ov[i * n + offset + j] = pv[i * pw + j];
            offset += pw;
        }
    }
    bool rec = false;
    if (Tape::active())
        for (const auto& p : parts) rec = rec || p.requires_grad();
    if (!rec) return out;
    std::vector<std::shared_ptr<detail::TensorNode>> pnodes;
    std::vector<bool> need;
    for (const auto& p : parts) {
        pnodes.push_back(p.node());
        need.push_back(p.requires_grad());
    }
    auto on = out.node();
    detail::attach(out, [pnodes, need, on, axis, m, n]() {
        std::int64_t offset = 0;
        for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
            auto& pn = pnodes[pi];
            const std::int64_t pm = pn->shape[0], pw = pn->shape[1];
            if (need[pi]) {
                pn->ensure_grad();
                if (axis == 0) {
                    for (std::size_t i = 0; i < pn->value.size(); ++i)
                        pn->grad[i] += on->grad[static_cast<std::size_t>(offset * n) + i];
                } else {
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t j = 0; j < pw; ++j)
                            pn->grad[i * pw + j] += on->grad[i * n + offset + j];
                }
            }
            offset += axis == 0 ? pm : pw;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on]() {
        an->ensure_grad();
        const double g = on->grad[0];
        for (auto& gv : an->grad) gv += g;
    });
    return out;
}

namespace detail {

struct AxisView {
    std::int64_t groups;  // number of output elements
    std::int64_t len;     // elements reduced per group
    std::int64_t outer_stride;
    std::int64_t inner_stride;
};

inline AxisView axis_view(const Tensor& a, int axis, const char* op) {
    if (a.rank() == 1) {
        if (axis != 0) op_fail(op, "axis out of range for " + shape_str(a.shape()));
        return {1, a.dim(0), 0, 1};
    }
    if (a.rank() != 2) op_fail(op, "expected rank-1 or rank-2, got " + shape_str(a.shape()));
    if (axis == 0) return {a.dim(1), a.dim(0), 1, a.dim(1)};
    if (axis == 1) return {a.dim(0), a.dim(1), a.dim(1), 1};
    op_fail(op, "axis out of range for " + shape_str(a.shape()));
}

inline Shape reduced_shape(const Tensor& a, int axis) {
    if (a.rank() == 1) return {};  // scalar
    return axis == 0 ? Shape{a.dim(1)} : Shape{a.dim(0)};
}

}  // namespace detail

inline Tensor sum_axis(const Tensor& a, int axis) {
    const auto v = detail::axis_view(a, axis, "sum_axis");
    Tensor out = Tensor::zeros(detail::reduced_shape(a, axis));
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::int64_t g = 0; g < v.groups; ++g) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i) acc += av[g * v.outer_stride + i * v.inner_stride];
        ov[g] = acc;
    }
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, v]() {
        an->ensure_grad();
        for (std::int64_t g = 0; g < v.groups; ++g)
            for (std::int64_t i = 0; i < v.len; ++i)
                an->grad[g * v.outer_stride + i * v.inner_stride] += on->grad[g];
    });
    return out;
}

inline Tensor mean_axis(const Tensor& a, int axis) {
    const auto v = detail::axis_view(a, axis, "mean_axis");
    Tensor out = sum_axis(a, axis);
    return mul(out, 1.0 / static_cast<double>(v.len));
}

// Population variance (divide by the count, not count-1).
inline Tensor var_axis(const Tensor& a, int axis) {
    const auto v = detail::axis_view(a, axis, "var_axis");
    Tensor out = Tensor::zeros(detail::reduced_shape(a, axis));
    const auto& av = a.data();
    auto& ov = out.data();
    std::vector<double> means(static_cast<std::size_t>(v.groups));
    for (std::int64_t g = 0; g < v.groups; ++g) {
        double m = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i) m += av[g * v.outer_stride + i * v.inner_stride];
        m /= static_cast<double>(v.len);
        means[static_cast<std::size_t>(g)] = m;
        double acc = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i) {
            const double d = av[g * v.outer_stride + i * v.inner_stride] - m;
            acc += d * d;
        }
        ov[g] = acc / static_cast<double>(v.len);
    }
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, v, means]() {
        an->ensure_grad();
        const double inv_n = 1.0 / static_cast<double>(v.len);
        for (std::int64_t g = 0; g < v.groups; ++g) {
            const double m = means[static_cast<std::size_t>(g)];
            for (std::int64_t i = 0; i < v.len; ++i) {
                const std::size_t idx =
                    static_cast<std::size_t>(g * v.outer_stride + i * v.inner_stride);
                an->grad[idx] += on->grad[g] * 2.0 * (an->value[idx] - m) * inv_n;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family (row-wise over the named axis; axis=-1 means last)
// ---------------------------------------------------------------------------

namespace detail {

// Iterates groups along `axis` of a rank-1/2 tensor like the reductions do.
inline AxisView softmax_view(const Tensor& a, int axis, const char* op) {
    if (axis == -1) axis = a.rank() == 1 ? 0 : 1;
    return axis_view(a, axis, op);
}

}  // namespace detail

inline Tensor log_softmax(const Tensor& a, int axis = -1) {
    const auto v = detail::softmax_view(a, axis, "log_softmax");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::int64_t g = 0; g < v.groups; ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < v.len; ++i)
            mx = std::max(mx, av[g * v.outer_stride + i * v.inner_stride]);
        double z = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i)
            z += std::exp(av[g * v.outer_stride + i * v.inner_stride] - mx);
        const double lse = mx + std::log(z);
        for (std::int64_t i = 0; i < v.len; ++i) {
            const auto idx = g * v.outer_stride + i * v.inner_stride;
            ov[idx] = av[idx] - lse;
        }
    }
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, v]() {
        an->ensure_grad();
        for (std::int64_t g = 0; g < v.groups; ++g) {
            double gsum = 0.0;
            for (std::int64_t i = 0; i < v.len; ++i)
                gsum += on->grad[g * v.outer_stride + i * v.inner_stride];
            for (std::int64_t i = 0; i < v.len; ++i) {
                const auto idx = g * v.outer_stride + i * v.inner_stride;
                an->grad[idx] += on->grad[idx] - std::exp(on->value[idx]) * gsum;
            }
        }
    });
    return out;
}

inline Tensor softmax(const Tensor& a, int axis = -1) {
    const auto v = detail::softmax_view(a, axis, "softmax");
    Tensor out = Tensor::zeros(a.shape());
    const auto& av = a.data();
    auto& ov = out.data();
    for (std::int64_t g = 0; g < v.groups; ++g) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < v.len; ++i)
            mx = std::max(mx, av[g * v.outer_stride + i * v.inner_stride]);
        double z = 0.0;
        for (std::int64_t i = 0; i < v.len; ++i) {
            const auto idx = g * v.outer_stride + i * v.inner_stride;
            ov[idx] = std::exp(av[idx] - mx);
            z += ov[idx];
        }
        for (std::int64_t i = 0; i < v.len; ++i) ov[g * v.outer_stride + i * v.inner_stride] /= z;
    }
    if (!detail::recording({&a})) return out;
    auto an = a.node();
    auto on = out.node();
    detail::attach(out, [an, on, v]() {
        an->ensure_grad();
        for (std::int64_t g = 0; g < v.groups; ++g) {
            double dot = 0.0;
            for (std::int64_t i = 0; i < v.len; ++i) {
                const auto idx = g * v.outer_stride + i * v.inner_stride;
                dot += on->value[idx] * on->grad[idx];
            }
            for (std::int64_t i = 0; i < v.len; ++i) {
                const auto idx = g * v.outer_stride + i * v.inner_stride;
                an->grad[idx] += on->value[idx] * (on->grad[idx] - dot);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Layer normalization (row-wise over the last axis, with gain and bias)
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    if (x.rank() != 2) detail::op_fail("layer_norm", "expected rank-2 input, got " + shape_str(x.shape()));
    const std::int64_t rows = x.dim(0), d = x.dim(1);
    if (gain.numel() != d || bias.numel() != d)
        detail::op_fail("layer_norm", "gain/bias " + shape_str(gain.shape()) + "/" +
                                          shape_str(bias.shape()) + " do not match width " +
                                          std::to_string(d));
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    auto& ov = out.data();
    auto xhat = std::make_shared<std::vector<double>>(xv.size());
    auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        double m = 0.0;
        for (std::int64_t j = 0; j < d; ++j) m += xv[r * d + j];
        m /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double dif = xv[r * d + j] - m;
            var += dif * dif;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[static_cast<std::size_t>(r)] = is;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xh = (xv[r * d + j] - m) * is;
            (*xhat)[static_cast<std::size_t>(r * d + j)] = xh;
            ov[r * d + j] = gv[j] * xh + bv[j];
        }
    }
    if (!detail::recording({&x, &gain, &bias})) return out;
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    auto on = out.node();
    const bool need_x = x.requires_grad();
    const bool need_g = gain.requires_grad();
    const bool need_b = bias.requires_grad();
    detail::attach(out, [xn, gn, bn, on, xhat, inv_sigma, rows, d, need_x, need_g, need_b]() {
        if (need_g) gn->ensure_grad();
        if (need_b) bn->ensure_grad();
        if (need_x) xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const double is = (*inv_sigma)[static_cast<std::size_t>(r)];
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::int64_t j = 0; j < d; ++j) {
                const auto idx = static_cast<std::size_t>(r * d + j);
                const double g = on->grad[idx];
                const double xh = (*xhat)[idx];
                if (need_g) gn->grad[static_cast<std::size_t>(j)] += g * xh;
                if (need_b) bn->grad[static_cast<std::size_t>(j)] += g;
                const double dxh = g * gn->value[static_cast<std::size_t>(j)];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh;
            }
            if (!need_x) continue;
            mean_dxhat /= static_cast<double>(d);
            mean_dxhat_xhat /= static_cast<double>(d);
            for (std::int64_t j = 0; j < d; ++j) {
                const auto idx = static_cast<std::size_t>(r * d + j);
                const double dxh = on->grad[idx] * gn->value[static_cast<std::size_t>(j)];
                xn->grad[idx] += is * (dxh - mean_dxhat - (*xhat)[idx] * mean_dxhat_xhat);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Indexed ops
// ---------------------------------------------------------------------------

inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) detail::op_fail("embedding", "table must be rank-2, got " + shape_str(table.shape()));
    const std::int64_t v = table.dim(0), d = table.dim(1);
    for (std::size_t t = 0; t < ids.size(); ++t)
        if (ids[t] < 0 || ids[t] >= v)
            detail::op_fail("embedding", "id " + std::to_string(ids[t]) + " at position " +
                                             std::to_string(t) + " out of range [0," +
                                             std::to_string(v) + ")");
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(ids.size()), d});
    const auto& tv = table.data();
    auto& ov = out.data();
    for (std::size_t t = 0; t < ids.size(); ++t)
        std::copy(tv.begin() + ids[t] * d, tv.begin() + (ids[t] + 1) * d, ov.begin() + t * d);
    if (!detail::recording({&table})) return out;
    auto tn = table.node();
    auto on = out.node();
    detail::attach(out, [tn, on, ids, d]() {
        tn->ensure_grad();
        for (std::size_t t = 0; t < ids.size(); ++t)
            for (std::int64_t j = 0; j < d; ++j)
                tn->grad[ids[t] * d + j] += on->grad[t * d + j];
    });
    return out;
}

// out[t] = x[t, ids[t]] — one element per row.
inline Tensor select_per_row(const Tensor& x, const std::vector<int>& ids) {
    if (x.rank() != 2 || static_cast<std::int64_t>(ids.size()) != x.dim(0))
        detail::op_fail("select_per_row", "need one index per row of " + shape_str(x.shape()) +
                                              ", got " + std::to_string(ids.size()));
    const std::int64_t n = x.dim(1);
    for (std::size_t t = 0; t < ids.size(); ++t)
        if (ids[t] < 0 || ids[t] >= n)
            detail::op_fail("select_per_row", "index " + std::to_string(ids[t]) + " at row " +
                                                  std::to_string(t) + " out of range [0," +
                                                  std::to_string(n) + ")");
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(ids.size())});
    const auto& xv = x.data();
    auto& ov = out.data();
    for (std::size_t t = 0; t < ids.size(); ++t) ov[t] = xv[t * n + ids[t]];
    if (!detail::recording({&x})) return out;
    auto xn = x.node();
    auto on = out.node();
    detail::attach(out, [xn, on, ids, n]() {
        xn->ensure_grad();
        for (std::size_t t = 0; t < ids.size(); ++t) xn->grad[t * n + ids[t]] += on->grad[t];
    });
    return out;
}

// x[T,d] + b[d] broadcast over rows.
inline Tensor add_rowwise(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.numel() != x.dim(1))
        detail::op_fail("add_rowwise", "bias " + shape_str(b.shape()) + " does not match rows of " +
                                           shape_str(x.shape()));
    const std::int64_t rows = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    const auto& xv = x.data();
    const auto& bv = b.data();
    auto& ov = out.data();
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) ov[r * d + j] = xv[r * d + j] + bv[j];
    if (!detail::recording({&x, &b})) return out;
    auto xn = x.node();
    auto bn = b.node();
    auto on = out.node();
    const bool need_x = x.requires_grad();
    const bool need_b = b.requires_grad();
    detail::attach(out, [xn, bn, on, rows, d, need_x, need_b]() {
        if (need_x) {
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->value.size(); ++i) xn->grad[i] += on->grad[i];
        }
        if (need_b) {
            bn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t j = 0; j < d; ++j) bn->grad[j] += on->grad[r * d + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

inline void zero_grads(const std::vector<Tensor*>& params) {
    for (Tensor* p : params) p->zero_grad();
}

// Additive causal mask: 0 on and below the diagonal, a large negative
// constant above it. exp() of the masked scores underflows to exactly 0.
inline Tensor causal_mask(std::int64_t t) {
    Tensor m = Tensor::zeros({t, t});
    auto& v = m.data();
    for (std::int64_t i = 0; i < t; ++i)
        for (std::int64_t j = i + 1; j < t; ++j) v[i * t + j] = -1e30;
    return m;
}

}  // namespace tokpo
