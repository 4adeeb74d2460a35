#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ucap/rng.hpp"

namespace ucap {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream ss;
    ss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) ss << 'x';
        ss << shape[i];
    }
    ss << ']';
    return ss.str();
}

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // allocated on demand, same length as data
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Dense row-major f64 tensor. Value-semantics handle over shared storage:
// copies alias the same buffer, which is what parameter collections rely on.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(std::move(shape), {});
    }

    static Tensor scalar(double v) {
        Tensor t = from_data({1}, {v});
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<double> data) {
        auto impl = std::make_shared<TensorImpl>();
        std::size_t n = shape_numel(shape);
        if (shape.empty()) throw std::invalid_argument("Tensor: rank-0 shape not supported");
        for (std::size_t d : shape)
            if (d == 0) throw std::invalid_argument("Tensor: zero dimension in " + shape_str(shape));
        if (data.empty()) data.assign(n, 0.0);
        if (data.size() != n)
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        return Tensor(std::move(impl));
    }

    // Uniform(-0.08, 0.08) entries; the standard init for every weight matrix here.
    static Tensor param(Shape shape, Rng& rng, double half_range = 0.08) {
        std::size_t n = shape_numel(shape);
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = uniform(rng, -half_range, half_range);
        Tensor t = from_data(std::move(shape), std::move(data));
        t.set_requires_grad(true);
        return t;
    }

    // Zero-initialized trainable tensor (biases).
    static Tensor param_zeros(Shape shape) {
        Tensor t = zeros(std::move(shape));
        t.set_requires_grad(true);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return check()->shape; }
    std::size_t numel() const { return check()->data.size(); }
    std::size_t dim(std::size_t i) const { return check()->shape.at(i); }
    std::size_t rank() const { return check()->shape.size(); }

    std::span<const double> data() const { return check()->data; }
    std::span<double> mutable_data() { return check()->data; }

    double value() const {
        if (numel() != 1)
            throw std::invalid_argument("Tensor::value: tensor " + shape_str(shape()) + " is not scalar");
        return check()->data[0];
    }
    double at(std::size_t i) const { return check()->data.at(i); }

    bool requires_grad() const { return check()->requires_grad; }
    void set_requires_grad(bool rg) {
        check()->requires_grad = rg;
        if (rg) check()->ensure_grad();
    }

    std::span<const double> grad() const {
        check()->ensure_grad();
        return impl_->grad;
    }
    std::span<double> mutable_grad() {
        check()->ensure_grad();
        return impl_->grad;
    }
    void zero_grad() {
        if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    // Copy of the current values with no grad participation.
    Tensor detached_copy() const {
        return from_data(shape(), std::vector<double>(impl_->data));
    }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    const std::shared_ptr<TensorImpl>& check() const {
        if (!impl_) throw std::logic_error("Tensor: use of default-constructed tensor");
        return impl_;
    }
    std::shared_ptr<TensorImpl> impl_;
};

// Define-by-run tape. Ops executed while a tape is active push one backward
// closure each, in execution order; backward() replays them once, in reverse.
// The closures hold shared ownership of every impl they touch, so the graph
// outlives local Tensor handles.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return active_; }

    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw std::invalid_argument("backward: loss is not connected to this tape");
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    // Activates a tape for the enclosing scope.
    struct Scope {
        explicit Scope(Tape& tape) : prev_(active_) { active_ = &tape; }
        ~Scope() { active_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;
    private:
        Tape* prev_;
    };

    // Suspends recording: forward math inside runs grad-free.
    struct Pause {
        Pause() : prev_(active_) { active_ = nullptr; }
        ~Pause() { active_ = prev_; }
        Pause(const Pause&) = delete;
        Pause& operator=(const Pause&) = delete;
    private:
        Tape* prev_;
    };

private:
    std::vector<std::function<void()>> nodes_;
    inline static thread_local Tape* active_ = nullptr;
};

namespace detail {

inline bool want_grad(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

inline void mark_output(Tensor& out) { out.set_requires_grad(true); }

[[noreturn]] inline void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        detail::shape_error("matmul", a.shape(), b.shape());
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    {
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
                const double av = pa[i * k + l];
                const double* brow = pb + l * n;
                double* orow = po + i * n;
                for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
    }
    if (detail::want_grad({&a, &b})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), m, k, n] {
            oi->ensure_grad();
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        double acc = 0.0;
                        for (std::size_t l = 0; l < n; ++l)
                            acc += g[i * n + l] * bi->data[j * n + l];
                        ai->grad[i * k + j] += acc;
                    }
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (std::size_t l = 0; l < m; ++l)
                            acc += ai->data[l * k + i] * g[l * n + j];
                        bi->grad[i * n + j] += acc;
                    }
            }
        });
    }
    return out;
}

inline Tensor matvec(const Tensor& a, const Tensor& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0))
        detail::shape_error("matvec", a.shape(), x.shape());
    const std::size_t m = a.dim(0), k = a.dim(1);
    Tensor out = Tensor::zeros({m});
    {
        const double* pa = a.data().data();
        const double* px = x.data().data();
        double* po = out.mutable_data().data();
        for (std::size_t i = 0; i < m; ++i) {
            const double* row = pa + i * k;
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) acc += row[j] * px[j];
            po[i] = acc;
        }
    }
    if (detail::want_grad({&a, &x})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), xi = x.impl(), oi = out.impl(), m, k] {
            oi->ensure_grad();
            const double* g = oi->grad.data();
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    double* row = ai->grad.data() + i * k;
                    for (std::size_t j = 0; j < k; ++j) row[j] += gi * xi->data[j];
                }
            }
            if (xi->requires_grad) {
                xi->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    const double gi = g[i];
                    if (gi == 0.0) continue;
                    const double* row = ai->data.data() + i * k;
                    for (std::size_t j = 0; j < k; ++j) xi->grad[j] += gi * row[j];
                }
            }
        });
    }
    return out;
}

inline Tensor dot(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) detail::shape_error("dot", a.shape(), b.shape());
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
    Tensor out = Tensor::scalar(acc);
    if (detail::want_grad({&a, &b})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl()] {
            oi->ensure_grad();
            const double g = oi->grad[0];
            if (ai->requires_grad) {
                ai->ensure_grad();
                for (std::size_t i = 0; i < ai->data.size(); ++i) ai->grad[i] += g * bi->data[i];
            }
            if (bi->requires_grad) {
                bi->ensure_grad();
                for (std::size_t i = 0; i < bi->data.size(); ++i) bi->grad[i] += g * ai->data[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops; broadcasting is scalar-vs-tensor only
// ---------------------------------------------------------------------------

namespace detail {

enum class Broadcast { None, LeftScalar, RightScalar };

inline Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Broadcast::None;
    if (a.numel() == 1) return Broadcast::LeftScalar;
    if (b.numel() == 1) return Broadcast::RightScalar;
    shape_error(op, a.shape(), b.shape());
}

template <typename Fwd, typename Bwd>
Tensor binary_ew(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    const Broadcast bc = broadcast_kind(op, a, b);
    const Shape& out_shape = bc == Broadcast::LeftScalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(out_shape);
    Tensor out = Tensor::zeros(out_shape);
    {
        double* po = out.mutable_data().data();
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < n; ++i) {
            const double av = bc == Broadcast::LeftScalar ? pa[0] : pa[i];
            const double bv = bc == Broadcast::RightScalar ? pb[0] : pb[i];
            po[i] = fwd(av, bv);
        }
    }
    if (want_grad({&a, &b})) {
        mark_output(out);
        Tape::current()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(), bc, n, bwd] {
            oi->ensure_grad();
            if (ai->requires_grad) ai->ensure_grad();
            if (bi->requires_grad) bi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const double g = oi->grad[i];
                if (g == 0.0) continue;
                const std::size_t ia = bc == Broadcast::LeftScalar ? 0 : i;
                const std::size_t ib = bc == Broadcast::RightScalar ? 0 : i;
                const auto [da, db] = bwd(ai->data[ia], bi->data[ib]);
                if (ai->requires_grad) ai->grad[ia] += g * da;
                if (bi->requires_grad) bi->grad[ib] += g * db;
            }
        });
    }
    return out;
}

struct GradPair { double first, second; };

template <typename Fwd, typename Bwd>
Tensor unary_ew(const Tensor& a, Fwd fwd, Bwd bwd) {
    const std::size_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    for (std::size_t i = 0; i < n; ++i) out.mutable_data()[i] = fwd(a.data()[i]);
    if (want_grad({&a})) {
        mark_output(out);
        Tape::current()->record([ai = a.impl(), oi = out.impl(), n, bwd] {
            oi->ensure_grad();
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                ai->grad[i] += oi->grad[i] * bwd(ai->data[i], oi->data[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_ew("add", a, b,
        [](double x, double y) { return x + y; },
        [](double, double) { return detail::GradPair{1.0, 1.0}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_ew("sub", a, b,
        [](double x, double y) { return x - y; },
        [](double, double) { return detail::GradPair{1.0, -1.0}; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_ew("mul", a, b,
        [](double x, double y) { return x * y; },
        [](double x, double y) { return detail::GradPair{y, x}; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::unary_ew(a,
        [c](double x) { return c * x; },
        [c](double, double) { return c; });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_ew(a,
        [](double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                       : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& a) {
    return detail::unary_ew(a,
        [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Tensor log(const Tensor& a) {
    for (double v : a.data())
        if (!(v > 0.0))
            throw std::domain_error("log: non-positive input " + std::to_string(v));
    return detail::unary_ew(a,
        [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary_ew(a,
        [](double x) { return x * x; },
        [](double x, double) { return 2.0 * x; });
}

// Clamp with pass-through gradient strictly inside (lo, hi), zero outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary_ew(a,
        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (detail::want_grad({&a})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), oi = out.impl()] {
            oi->ensure_grad();
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            const double g = oi->grad[0];
            for (double& gv : ai->grad) gv += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Sum of same-shape tensors; the workhorse for accumulating per-step scalar losses.
inline Tensor add_n(std::span<const Tensor> terms) {
    if (terms.empty()) throw std::invalid_argument("add_n: no terms");
    const Shape& shape = terms[0].shape();
    Tensor out = Tensor::zeros(shape);
    for (const Tensor& t : terms) {
        if (t.shape() != shape) detail::shape_error("add_n", shape, t.shape());
        for (std::size_t i = 0; i < t.numel(); ++i) out.mutable_data()[i] += t.data()[i];
    }
    bool rg = false;
    for (const Tensor& t : terms) rg = rg || t.requires_grad();
    if (Tape::current() && rg) {
        detail::mark_output(out);
        std::vector<std::shared_ptr<TensorImpl>> impls;
        impls.reserve(terms.size());
        for (const Tensor& t : terms) impls.push_back(t.impl());
        Tape::current()->record([impls = std::move(impls), oi = out.impl()] {
            oi->ensure_grad();
            for (const auto& ti : impls) {
                if (!ti->requires_grad) continue;
                ti->ensure_grad();
                for (std::size_t i = 0; i < ti->grad.size(); ++i) ti->grad[i] += oi->grad[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// indexing
// ---------------------------------------------------------------------------

inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t len) {
    if (a.rank() != 1 || begin + len > a.dim(0))
        throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " +
                                    std::to_string(begin + len) + ") out of bounds for " +
                                    shape_str(a.shape()));
    Tensor out = Tensor::from_data({len}, std::vector<double>(a.data().begin() + begin,
                                                              a.data().begin() + begin + len));
    if (detail::want_grad({&a})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), oi = out.impl(), begin, len] {
            oi->ensure_grad();
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            for (std::size_t i = 0; i < len; ++i) ai->grad[begin + i] += oi->grad[i];
        });
    }
    return out;
}

// Row lookup into an embedding matrix; backward scatters into that row only.
inline Tensor embedding_row(const Tensor& table, std::size_t row) {
    if (table.rank() != 2 || row >= table.dim(0))
        throw std::invalid_argument("embedding_row: row " + std::to_string(row) +
                                    " out of range for " + shape_str(table.shape()));
    const std::size_t d = table.dim(1);
    Tensor out = Tensor::from_data({d}, std::vector<double>(table.data().begin() + row * d,
                                                            table.data().begin() + (row + 1) * d));
    if (detail::want_grad({&table})) {
        detail::mark_output(out);
        Tape::current()->record([ti = table.impl(), oi = out.impl(), row, d] {
            oi->ensure_grad();
            if (!ti->requires_grad) return;
            ti->ensure_grad();
            for (std::size_t i = 0; i < d; ++i) ti->grad[row * d + i] += oi->grad[i];
        });
    }
    return out;
}

inline Tensor pick(const Tensor& a, std::size_t index) {
    if (a.rank() != 1 || index >= a.dim(0))
        throw std::invalid_argument("pick: index " + std::to_string(index) + " out of range for " +
                                    shape_str(a.shape()));
    Tensor out = Tensor::scalar(a.data()[index]);
    if (detail::want_grad({&a})) {
        detail::mark_output(out);
        Tape::current()->record([ai = a.impl(), oi = out.impl(), index] {
            oi->ensure_grad();
            if (!ai->requires_grad) return;
            ai->ensure_grad();
            ai->grad[index] += oi->grad[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax family (max-shifted for stability)
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> softmax_values(std::span<const double> x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> p(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        p[i] = std::exp(x[i] - mx);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

}  // namespace detail

inline Tensor softmax(const Tensor& x) {
    if (x.rank() != 1 || x.dim(0) < 1)
        throw std::invalid_argument("softmax: expected non-empty vector, got " + shape_str(x.shape()));
    for (double v : x.data())
        if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite input");
    Tensor out = Tensor::from_data(x.shape(), detail::softmax_values(x.data()));
    if (detail::want_grad({&x})) {
        detail::mark_output(out);
        const std::size_t n = x.dim(0);
        Tape::current()->record([xi = x.impl(), oi = out.impl(), n] {
            oi->ensure_grad();
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            double gdotp = 0.0;
            for (std::size_t i = 0; i < n; ++i) gdotp += oi->grad[i] * oi->data[i];
            for (std::size_t i = 0; i < n; ++i)
                xi->grad[i] += oi->data[i] * (oi->grad[i] - gdotp);
        });
    }
    return out;
}

// log(softmax(x)[index]) as one fused op: the numerically safe route to
// per-token log-probabilities. Gradient is (one_hot(index) - softmax(x)).
inline Tensor log_softmax_pick(const Tensor& x, std::size_t index) {
    if (x.rank() != 1 || index >= x.dim(0))
        throw std::invalid_argument("log_softmax_pick: index " + std::to_string(index) +
                                    " out of range for " + shape_str(x.shape()));
    std::span<const double> xs = x.data();
    double mx = xs[0];
    for (double v : xs) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : xs) z += std::exp(v - mx);
    Tensor out = Tensor::scalar(xs[index] - mx - std::log(z));
    if (detail::want_grad({&x})) {
        detail::mark_output(out);
        Tape::current()->record([xi = x.impl(), oi = out.impl(), index] {
            oi->ensure_grad();
            if (!xi->requires_grad) return;
            xi->ensure_grad();
            const double g = oi->grad[0];
            if (g == 0.0) return;
            const auto p = detail::softmax_values(xi->data);
            for (std::size_t i = 0; i < p.size(); ++i) xi->grad[i] -= g * p[i];
            xi->grad[index] += g;
        });
    }
    return out;
}

}  // namespace ucap
