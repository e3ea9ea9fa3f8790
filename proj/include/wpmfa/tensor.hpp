#pragma once

// Dense 64-bit tensors with tape-based reverse-mode autodiff.
// Storage is row-major contiguous; broadcasting is limited to bias-add
// and scalar ops so every backward rule stays auditable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace wpmfa {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<double> data;
        std::vector<double> grad;   // allocated lazily, same length as data
        bool requires_grad = false; // leaf parameter flag
        bool needs_grad = false;    // requires_grad, or depends on such a leaf

        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        }
    };

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(Shape shape) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), 0.0);
        return Tensor(std::move(n));
    }

    static Tensor full(Shape shape, double v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor from(std::vector<double> values, Shape shape) {
        if (values.size() != shape_numel(shape))
            throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v) { return from({v}, {1}); }

    static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
        Tensor t = zeros(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (double& v : t.data()) v = dist(rng);
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t ndim() const { return n_->shape.size(); }
    std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
    std::size_t numel() const { return n_->data.size(); }
    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    // 2-D accessors (rows x cols)
    std::size_t rows() const { return n_->shape.at(0); }
    std::size_t cols() const { return n_->shape.size() > 1 ? n_->shape[1] : 1; }
    double& at(std::size_t r, std::size_t c) { return n_->data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return n_->data[r * cols() + c]; }
    double& operator[](std::size_t i) { return n_->data[i]; }
    double operator[](std::size_t i) const { return n_->data[i]; }

    bool requires_grad() const { return n_->requires_grad; }
    bool needs_grad() const { return n_->needs_grad; }
    Tensor& set_requires_grad(bool b = true) {
        n_->requires_grad = b;
        n_->needs_grad = b;
        return *this;
    }

    const std::vector<double>& grad() const {
        if (n_->grad.size() != n_->data.size())
            throw std::runtime_error("gradient not populated; run backward first");
        return n_->grad;
    }
    bool has_grad() const { return n_->grad.size() == n_->data.size(); }
    void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }

    std::shared_ptr<Node> node() const { return n_; }

    Tensor clone() const {
        Tensor t = zeros(n_->shape);
        t.data() = n_->data;
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

// Single-owner tape of backward closures; replaying them in reverse
// recorded order accumulates gradients by the chain rule.
class Tape {
public:
    Tape() {
        prev_ = active_;
        active_ = this;
    }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward expects a scalar loss, got " +
                                        shape_str(loss.shape()));
        loss.node()->ensure_grad();
        loss.node()->grad[0] = 1.0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
    Tape* prev_ = nullptr;
    static inline thread_local Tape* active_ = nullptr;
};

namespace detail {

using NodePtr = std::shared_ptr<Tensor::Node>;

inline bool recording(std::initializer_list<const Tensor*> ins) {
    if (!Tape::active()) return false;
    for (const Tensor* t : ins)
        if (t->needs_grad()) return true;
    return false;
}

// Marks the output as gradient-carrying and registers the backward closure.
inline void record(Tensor& out, std::function<void()> fn) {
    out.node()->needs_grad = true;
    Tape::active()->record(std::move(fn));
}

inline void accum(const NodePtr& n, std::size_t i, double v) {
    if (!n->needs_grad) return;
    n->ensure_grad();
    n->grad[i] += v;
}

inline const std::vector<double>& out_grad(const NodePtr& n) {
    n->ensure_grad();
    return n->grad;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    if (detail::recording({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = detail::out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) {
                detail::accum(an, i, g[i]);
                detail::accum(bn, i, g[i]);
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    if (detail::recording({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = detail::out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) {
                detail::accum(an, i, g[i]);
                detail::accum(bn, i, -g[i]);
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    if (detail::recording({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node()] {
            const auto& g = detail::out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) {
                detail::accum(an, i, g[i] * bn->data[i]);
                detail::accum(bn, i, g[i] * an->data[i]);
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), s] {
            const auto& g = detail::out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) detail::accum(an, i, g[i] * s);
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + s;
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node()] {
            const auto& g = detail::out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) detail::accum(an, i, g[i]);
        });
    }
    return out;
}

namespace detail {

template <class Fwd, class Dfn>
Tensor unary_op(const Tensor& a, Fwd fwd, Dfn dfn) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = fwd(a[i]);
    if (recording({&a})) {
        std::vector<double> d(a.numel());
        for (std::size_t i = 0; i < a.numel(); ++i) d[i] = dfn(a[i]);
        record(out, [an = a.node(), on = out.node(), d = std::move(d)] {
            const auto& g = out_grad(on);
            for (std::size_t i = 0; i < g.size(); ++i) accum(an, i, g[i] * d[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor tanh_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::tanh(x); },
                            [](double x) {
                                double t = std::tanh(x);
                                return 1.0 - t * t;
                            });
}

// Exact GELU, x * Phi(x).
inline Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    return detail::unary_op(
        a,
        [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [=](double x) {
            double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

inline Tensor exp_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::exp(x); },
                            [](double x) { return std::exp(x); });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::log(x); },
                            [](double x) { return 1.0 / x; });
}

inline Tensor sqrt_op(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return std::sqrt(x); },
                            [](double x) { return 0.5 / std::sqrt(x); });
}

inline Tensor reciprocal(const Tensor& a) {
    return detail::unary_op(a, [](double x) { return 1.0 / x; },
                            [](double x) { return -1.0 / (x * x); });
}

// max(x, lo); gradient passes only where x > lo.
inline Tensor clamp_min(const Tensor& a, double lo) {
    return detail::unary_op(a, [lo](double x) { return x > lo ? x : lo; },
                            [lo](double x) { return x > lo ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[p * n + j];
        }
    }
    if (detail::recording({&a, &b})) {
        detail::record(out, [an = a.node(), bn = b.node(), on = out.node(), m, k, n] {
            const auto& g = detail::out_grad(on);
            if (an->needs_grad) {
                an->ensure_grad();
                // dL/da = g . b^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += g[i * n + j] * bn->data[p * n + j];
                        an->grad[i * k + p] += acc;
                    }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                // dL/db = a^T . g
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const double av = an->data[i * k + p];
                        if (av == 0.0) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            bn->grad[p * n + j] += av * g[i * n + j];
                    }
            }
        });
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("transpose: expected 2-D tensor");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), r, c] {
            const auto& g = detail::out_grad(on);
            an->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += g[j * r + i];
        });
    }
    return out;
}

// x[C x T] + per-channel bias b[C], broadcast over columns.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 2 || b.numel() != x.dim(0))
        throw std::invalid_argument("bias_add: bias length " + shape_str(b.shape()) +
                                    " does not match channels of " + shape_str(x.shape()));
    const std::size_t c = x.dim(0), t = x.dim(1);
    Tensor out = Tensor::zeros({c, t});
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < t; ++j) out[i * t + j] = x[i * t + j] + b[i];
    if (detail::recording({&x, &b})) {
        detail::record(out, [xn = x.node(), bn = b.node(), on = out.node(), c, t] {
            const auto& g = detail::out_grad(on);
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < t; ++j) acc += g[i * t + j];
                    bn->grad[i] += acc;
                }
            }
        });
    }
    return out;
}

// Scales row i of x by s[i]; differentiable in both arguments.
inline Tensor row_scale(const Tensor& x, const Tensor& s) {
    if (x.ndim() != 2 || s.numel() != x.dim(0))
        throw std::invalid_argument("row_scale: scale length does not match rows of " +
                                    shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros({r, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * s[i];
    if (detail::recording({&x, &s})) {
        detail::record(out, [xn = x.node(), sn = s.node(), on = out.node(), r, c] {
            const auto& g = detail::out_grad(on);
            if (xn->needs_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        xn->grad[i * c + j] += g[i * c + j] * sn->data[i];
            }
            if (sn->needs_grad) {
                sn->ensure_grad();
                for (std::size_t i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * xn->data[i * c + j];
                    sn->grad[i] += acc;
                }
            }
        });
    }
    return out;
}

// Linear layer: W[Cout x Cin] . x[Cin x T] + b[Cout].
inline Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b) {
    return bias_add(matmul(w, x), b);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input list");
    const std::size_t c = parts[0].ndim() == 2 ? parts[0].dim(1) : 1;
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.cols() != c)
            throw std::invalid_argument("concat_rows: column mismatch " +
                                        shape_str(p.shape()));
        total += p.rows();
    }
    Tensor out = Tensor::zeros({total, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off * c);
        off += p.rows();
    }
    bool rec = false;
    if (Tape::active())
        for (const auto& p : parts)
            if (p.needs_grad()) rec = true;
    if (rec) {
        std::vector<detail::NodePtr> nodes;
        std::vector<std::size_t> rowcount;
        for (const auto& p : parts) {
            nodes.push_back(p.node());
            rowcount.push_back(p.rows());
        }
        detail::record(out, [nodes, rowcount, on = out.node(), c] {
            const auto& g = detail::out_grad(on);
            std::size_t off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                if (nodes[k]->needs_grad) {
                    nodes[k]->ensure_grad();
                    for (std::size_t i = 0; i < rowcount[k] * c; ++i)
                        nodes[k]->grad[i] += g[off * c + i];
                }
                off += rowcount[k];
            }
        });
    }
    return out;
}

// Rows [r0, r1) of a 2-D tensor (contiguous in row-major storage).
inline Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
    if (x.ndim() != 2 || r1 > x.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + "," +
                                    std::to_string(r1) + ") for " + shape_str(x.shape()));
    const std::size_t c = x.dim(1);
    Tensor out = Tensor::zeros({r1 - r0, c});
    std::copy(x.data().begin() + r0 * c, x.data().begin() + r1 * c, out.data().begin());
    if (detail::recording({&x})) {
        detail::record(out, [xn = x.node(), on = out.node(), r0, c] {
            const auto& g = detail::out_grad(on);
            xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) xn->grad[r0 * c + i] += g[i];
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(x.shape()) +
                                    " -> " + shape_str(shape));
    Tensor out = Tensor::zeros(std::move(shape));
    out.data() = x.data();
    if (detail::recording({&x})) {
        detail::record(out, [xn = x.node(), on = out.node()] {
            const auto& g = detail::out_grad(on);
            xn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    out[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node()] {
            const double g = detail::out_grad(on)[0];
            an->ensure_grad();
            for (double& v : an->grad) v += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// Biased (population) variance over all elements.
inline Tensor variance_all(const Tensor& a) {
    const std::size_t n = a.numel();
    if (n == 0) throw std::invalid_argument("variance_all: empty tensor");
    Tensor m = mean_all(a);
    double mv = m[0];
    Tensor out = Tensor::zeros({1});
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += (a[i] - mv) * (a[i] - mv);
    out[0] = acc / static_cast<double>(n);
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), mv, n] {
            const double g = detail::out_grad(on)[0];
            an->ensure_grad();
            const double k = 2.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                an->grad[i] += g * k * (an->data[i] - mv);
        });
    }
    return out;
}

// Per-row mean of a 2-D tensor -> [R].
inline Tensor row_mean(const Tensor& a) {
    if (a.ndim() != 2) throw std::invalid_argument("row_mean: expected 2-D tensor");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor out = Tensor::zeros({r});
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < c; ++j) acc += a[i * c + j];
        out[i] = acc / static_cast<double>(c);
    }
    if (detail::recording({&a})) {
        detail::record(out, [an = a.node(), on = out.node(), r, c] {
            const auto& g = detail::out_grad(on);
            an->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    an->grad[i * c + j] += g[i] / static_cast<double>(c);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax / normalization
// ---------------------------------------------------------------------------

// Softmax along axis 1 (per row) or axis 0 (per column) of a 2-D tensor;
// 1-D input is treated as a single row. Max-shifted for stability.
inline Tensor softmax(const Tensor& x, int axis = 1) {
    Shape sh = x.shape();
    const std::size_t r = x.rows(), c = x.cols();
    Tensor out = Tensor::zeros(sh);
    const std::size_t nslice = (axis == 1) ? r : c;
    const std::size_t len = (axis == 1) ? c : r;
    if (len == 0) throw std::invalid_argument("softmax: empty axis");
    auto idx = [axis, c](std::size_t s, std::size_t i) {
        return (axis == 1) ? s * c + i : i * c + s;
    };
    for (std::size_t s = 0; s < nslice; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, x[idx(s, i)]);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) z += std::exp(x[idx(s, i)] - mx);
        for (std::size_t i = 0; i < len; ++i) out[idx(s, i)] = std::exp(x[idx(s, i)] - mx) / z;
    }
    if (detail::recording({&x})) {
        detail::record(out, [xn = x.node(), on = out.node(), nslice, len, idx] {
            const auto& g = detail::out_grad(on);
            xn->ensure_grad();
            for (std::size_t s = 0; s < nslice; ++s) {
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i)
                    dot += g[idx(s, i)] * on->data[idx(s, i)];
                for (std::size_t i = 0; i < len; ++i)
                    xn->grad[idx(s, i)] += on->data[idx(s, i)] * (g[idx(s, i)] - dot);
            }
        });
    }
    return out;
}

// Per-column normalization over channels with affine gamma/beta.
// x[C x T]; each column is normalized to zero mean, unit variance (eps inside
// the variance denominator), then y = gamma * xhat + beta.
// eps is headroom against constant frames only; keep it far below any
// realistic activation variance so normalized variance stays within 1e-6
// of exactly 1.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-12) {
    if (x.ndim() != 2) throw std::invalid_argument("layer_norm: expected 2-D input");
    const std::size_t c = x.dim(0), t = x.dim(1);
    if (c == 0) throw std::invalid_argument("layer_norm: empty channel axis");
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("layer_norm: affine params must have length " +
                                    std::to_string(c));
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    Tensor out = Tensor::zeros({c, t});
    std::vector<double> xhat(c * t), inv_std(t);
    for (std::size_t j = 0; j < t; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < c; ++i) mean += x[i * t + j];
        mean /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t i = 0; i < c; ++i) {
            double d = x[i * t + j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[j] = is;
        for (std::size_t i = 0; i < c; ++i) {
            xhat[i * t + j] = (x[i * t + j] - mean) * is;
            out[i * t + j] = gamma[i] * xhat[i * t + j] + beta[i];
        }
    }
    if (detail::recording({&x, &gamma, &beta})) {
        detail::record(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                             on = out.node(), xhat = std::move(xhat),
                             inv_std = std::move(inv_std), c, t] {
            const auto& g = detail::out_grad(on);
            if (gn->needs_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < t; ++j) acc += g[i * t + j] * xhat[i * t + j];
                    gn->grad[i] += acc;
                }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < t; ++j) acc += g[i * t + j];
                    bn->grad[i] += acc;
                }
            }
            if (xn->needs_grad) {
                xn->ensure_grad();
                const double cn = static_cast<double>(c);
                for (std::size_t j = 0; j < t; ++j) {
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (std::size_t i = 0; i < c; ++i) {
                        double dy = g[i * t + j] * gn->data[i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat[i * t + j];
                    }
                    for (std::size_t i = 0; i < c; ++i) {
                        double dy = g[i * t + j] * gn->data[i];
                        xn->grad[i * t + j] += inv_std[j] *
                            (dy - sum_dy / cn - xhat[i * t + j] * sum_dy_xhat / cn);
                    }
                }
            }
        });
    }
    return out;
}

// 1-D batch norm over the batch axis. x[C x B]: per-channel statistics over
// the B columns. In training mode batch statistics are used and running
// stats (plain buffers, never differentiated) are updated in place.
inline Tensor batch_norm_1d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            Tensor& running_mean, Tensor& running_var, Tensor& batch_count,
                            bool training, double momentum = 0.1, double eps = 1e-5) {
    if (x.ndim() != 2) throw std::invalid_argument("batch_norm_1d: expected 2-D input");
    const std::size_t c = x.dim(0), b = x.dim(1);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw std::invalid_argument("batch_norm_1d: parameter length mismatch, channels=" +
                                    std::to_string(c));
    std::vector<double> mean(c), var(c);
    if (training) {
        for (std::size_t i = 0; i < c; ++i) {
            double m = 0.0;
            for (std::size_t j = 0; j < b; ++j) m += x[i * b + j];
            m /= static_cast<double>(b);
            double v = 0.0;
            for (std::size_t j = 0; j < b; ++j) {
                double d = x[i * b + j] - m;
                v += d * d;
            }
            v /= static_cast<double>(b);
            mean[i] = m;
            var[i] = v;
            running_mean[i] = (1.0 - momentum) * running_mean[i] + momentum * m;
            running_var[i] = (1.0 - momentum) * running_var[i] + momentum * v;
        }
        batch_count[0] += 1.0;
    } else {
        if (batch_count[0] < 1.0)
            throw std::runtime_error(
                "batch_norm_1d: eval mode requested before any running statistics exist");
        for (std::size_t i = 0; i < c; ++i) {
            mean[i] = running_mean[i];
            var[i] = running_var[i];
        }
    }
    Tensor out = Tensor::zeros({c, b});
    std::vector<double> xhat(c * b), inv_std(c);
    for (std::size_t i = 0; i < c; ++i) {
        inv_std[i] = 1.0 / std::sqrt(var[i] + eps);
        for (std::size_t j = 0; j < b; ++j) {
            xhat[i * b + j] = (x[i * b + j] - mean[i]) * inv_std[i];
            out[i * b + j] = gamma[i] * xhat[i * b + j] + beta[i];
        }
    }
    if (detail::recording({&x, &gamma, &beta})) {
        detail::record(out, [xn = x.node(), gn = gamma.node(), bn = beta.node(),
                             on = out.node(), xhat = std::move(xhat),
                             inv_std = std::move(inv_std), c, b, training] {
            const auto& g = detail::out_grad(on);
            if (gn->needs_grad) {
                gn->ensure_grad();
                for (std::size_t i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < b; ++j) acc += g[i * b + j] * xhat[i * b + j];
                    gn->grad[i] += acc;
                }
            }
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < c; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < b; ++j) acc += g[i * b + j];
                    bn->grad[i] += acc;
                }
            }
            if (xn->needs_grad) {
                xn->ensure_grad();
                const double nb = static_cast<double>(b);
                for (std::size_t i = 0; i < c; ++i) {
                    if (training) {
                        double sum_dy = 0.0, sum_dy_xhat = 0.0;
                        for (std::size_t j = 0; j < b; ++j) {
                            double dy = g[i * b + j] * gn->data[i];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[i * b + j];
                        }
                        for (std::size_t j = 0; j < b; ++j) {
                            double dy = g[i * b + j] * gn->data[i];
                            xn->grad[i * b + j] += inv_std[i] *
                                (dy - sum_dy / nb - xhat[i * b + j] * sum_dy_xhat / nb);
                        }
                    } else {
                        for (std::size_t j = 0; j < b; ++j)
                            xn->grad[i * b + j] += g[i * b + j] * gn->data[i] * inv_std[i];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// 1-D convolution. x[Cin x T], w[Cout x Cin x K], b[Cout]; zero padding.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b,
                     std::size_t stride = 1, std::size_t pad = 0) {
    if (x.ndim() != 2 || w.ndim() != 3)
        throw std::invalid_argument("conv1d: expected x[Cin x T], w[Cout x Cin x K]");
    const std::size_t cin = x.dim(0), t = x.dim(1);
    const std::size_t cout = w.dim(0), k = w.dim(2);
    if (w.dim(1) != cin)
        throw std::invalid_argument("conv1d: weight input channels " + std::to_string(w.dim(1)) +
                                    " != input channels " + std::to_string(cin));
    if (b.numel() != cout) throw std::invalid_argument("conv1d: bias length mismatch");
    if (t == 0) throw std::invalid_argument("conv1d: empty time axis");
    if (t + 2 * pad < k) throw std::invalid_argument("conv1d: input shorter than kernel");
    const std::size_t tout = (t + 2 * pad - k) / stride + 1;
    Tensor out = Tensor::zeros({cout, tout});
    auto xat = [&](std::size_t ci, std::ptrdiff_t ti) -> double {
        return (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t)) ? 0.0 : x[ci * t + ti];
    };
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t to = 0; to < tout; ++to) {
            double acc = b[o];
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (std::size_t kk = 0; kk < k; ++kk)
                    acc += w[(o * cin + ci) * k + kk] *
                           xat(ci, static_cast<std::ptrdiff_t>(to * stride + kk) -
                                       static_cast<std::ptrdiff_t>(pad));
            out[o * tout + to] = acc;
        }
    if (detail::recording({&x, &w, &b})) {
        detail::record(out, [xn = x.node(), wn = w.node(), bn = b.node(), on = out.node(),
                             cin, t, cout, k, tout, stride, pad] {
            const auto& g = detail::out_grad(on);
            if (bn->needs_grad) {
                bn->ensure_grad();
                for (std::size_t o = 0; o < cout; ++o) {
                    double acc = 0.0;
                    for (std::size_t to = 0; to < tout; ++to) acc += g[o * tout + to];
                    bn->grad[o] += acc;
                }
            }
            // Allocate up front: a skipped zero contribution must still leave
            // the input with a (zero) gradient buffer.
            if (wn->needs_grad) wn->ensure_grad();
            if (xn->needs_grad) xn->ensure_grad();
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t to = 0; to < tout; ++to) {
                    const double gy = g[o * tout + to];
                    if (gy == 0.0) continue;
                    for (std::size_t ci = 0; ci < cin; ++ci)
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const std::ptrdiff_t ti =
                                static_cast<std::ptrdiff_t>(to * stride + kk) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(t)) continue;
                            if (wn->needs_grad)
                                wn->grad[(o * cin + ci) * k + kk] += gy * xn->data[ci * t + ti];
                            if (xn->needs_grad)
                                xn->grad[ci * t + ti] += gy * wn->data[(o * cin + ci) * k + kk];
                        }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

// Central-difference gradient estimate of a scalar-valued pure function.
// Test oracle; never records onto a tape.
template <class F>
Tensor finite_diff_grad(F&& f, Tensor x, double h = 1e-5) {
    if (h <= 0.0) throw std::invalid_argument("finite_diff_grad: step must be positive");
    Tensor g = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(x);
        x[i] = orig - h;
        const double fm = f(x);
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_grad: function returned non-finite value");
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

}  // namespace wpmfa
