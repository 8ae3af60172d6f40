#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape owns every node created while building a computation. Nodes are
// appended in evaluation order, so the node index is already a topological
// order and backward() is a single reverse sweep. Leaves are either tracked
// (requires_grad) or constants; an op node requires a gradient iff one of its
// parents does.

#include "pacmeta/binary_kl.hpp"
#include "pacmeta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace pacmeta {

class Tape;

class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    double item() const { return value().item(); }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

enum class OpKind : std::uint8_t {
    leaf,
    matmul,
    add_bias,
    row_slice,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sqrt,
    square,
    relu,
    log_softmax,
    mean,
    sum,
    scale,
    add_scalar,
    clamp,
    minimum,
    pick,
    kl_inv_upper,
};

inline const char* op_name(OpKind op) {
    switch (op) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add_bias: return "add_bias";
    case OpKind::row_slice: return "row_slice";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::div: return "div";
    case OpKind::neg: return "neg";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::sqrt: return "sqrt";
    case OpKind::square: return "square";
    case OpKind::relu: return "relu";
    case OpKind::log_softmax: return "log_softmax";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::clamp: return "clamp";
    case OpKind::minimum: return "minimum";
    case OpKind::pick: return "pick";
    case OpKind::kl_inv_upper: return "kl_inv_upper";
    }
    return "?";
}

struct TapeNode {
    OpKind op = OpKind::leaf;
    int lhs = -1;
    int rhs = -1;
    Tensor value;
    bool requires_grad = false;
    double p0 = 0.0; // scale factor, clamp lo, slice begin
    double p1 = 0.0; // clamp hi, slice end
    std::vector<std::size_t> labels;
};

/// Gradients of one scalar with respect to every tracked node of a tape.
class Gradients {
public:
    bool has(const Var& v) const {
        return v.id() >= 0 && static_cast<std::size_t>(v.id()) < grads_.size() &&
               grads_[v.id()].has_value();
    }

    const Tensor& operator[](const Var& v) const {
        if (!has(v)) throw std::invalid_argument("gradients: variable is not tracked");
        return *grads_[v.id()];
    }

private:
    friend class Tape;
    std::vector<std::optional<Tensor>> grads_;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true) {
        TapeNode node;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        return push(std::move(node));
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }
    Var constant(double v) { return leaf(Tensor::scalar(v), false); }

    const TapeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return nodes_.size(); }

    Var push(TapeNode node) {
        if (node.op != OpKind::leaf) {
            node.requires_grad = (node.lhs >= 0 && nodes_[node.lhs].requires_grad) ||
                                 (node.rhs >= 0 && nodes_[node.rhs].requires_grad);
        }
        nodes_.push_back(std::move(node));
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    /// d(loss)/d(node) for every tracked node reachable from `loss`.
    Gradients backward(const Var& loss) const;

private:
    std::vector<TapeNode> nodes_;
};

inline const Tensor& Var::value() const {
    if (!tape_) throw std::logic_error("var: not attached to a tape");
    return tape_->node(id_).value;
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (!a.valid() || a.tape() != b.tape()) {
        throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
    }
    return *a.tape();
}

inline Tape& tape_of(const Var& a, const char* op) {
    if (!a.valid()) throw std::invalid_argument(std::string(op) + ": detached variable");
    return *a.tape();
}

[[noreturn]] inline void shape_mismatch(OpKind op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) + " and " +
                     to_string(b));
}

template <class F>
Var unary(const Var& a, OpKind op, F f, double p0 = 0.0, double p1 = 0.0) {
    Tape& tape = tape_of(a, op_name(op));
    const Tensor& x = a.value();
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    TapeNode node;
    node.op = op;
    node.lhs = a.id();
    node.value = std::move(y);
    node.p0 = p0;
    node.p1 = p1;
    return tape.push(std::move(node));
}

template <class F>
Var binary(const Var& a, const Var& b, OpKind op, F f) {
    Tape& tape = same_tape(a, b, op_name(op));
    const Tensor& x = a.value();
    const Tensor& z = b.value();
    if (x.shape() != z.shape()) shape_mismatch(op, x.shape(), z.shape());
    Tensor y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i], z[i]);
    TapeNode node;
    node.op = op;
    node.lhs = a.id();
    node.rhs = b.id();
    node.value = std::move(y);
    return tape.push(std::move(node));
}

inline void require_rank2(OpKind op, const Shape& s) {
    if (s.size() != 2) {
        throw ShapeError(std::string(op_name(op)) + ": expected a matrix, got shape " + to_string(s));
    }
}

// Partial derivatives of the upper KL inverse p*(q, c) from the implicit
// root of kl(q || p*) = c. Zero when p* saturates at 1.
inline std::pair<double, double> kl_inv_partials(double q, double c, double p) {
    if (p >= 1.0 || c <= 0.0) return {p >= 1.0 ? 0.0 : 1.0, 0.0};
    const double dkl_dp = (p - q) / (p * (1.0 - p));
    if (!(dkl_dp > 0.0)) return {1.0, 0.0};
    double dkl_dq = 0.0;
    if (q > 0.0) dkl_dq += std::log(q / p);
    if (q < 1.0) dkl_dq -= std::log((1.0 - q) / (1.0 - p));
    return {-dkl_dq / dkl_dp, 1.0 / dkl_dp};
}

} // namespace detail

// ---- ops -------------------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    Tape& tape = detail::same_tape(a, b, "matmul");
    const Tensor& x = a.value();
    const Tensor& w = b.value();
    detail::require_rank2(OpKind::matmul, x.shape());
    detail::require_rank2(OpKind::matmul, w.shape());
    const std::size_t n = x.dim(0), k = x.dim(1), m = w.dim(1);
    if (w.dim(0) != k) detail::shape_mismatch(OpKind::matmul, x.shape(), w.shape());
    Tensor y(Shape{n, m});
    const double* xp = x.data().data();
    const double* wp = w.data().data();
    double* yp = y.data().data();
    for (std::size_t i = 0; i < n; ++i) {
        double* yrow = yp + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = xp[i * k + p];
            if (xv == 0.0) continue;
            const double* wrow = wp + p * m;
            for (std::size_t j = 0; j < m; ++j) yrow[j] += xv * wrow[j];
        }
    }
    TapeNode node;
    node.op = OpKind::matmul;
    node.lhs = a.id();
    node.rhs = b.id();
    node.value = std::move(y);
    return tape.push(std::move(node));
}

/// Adds a bias row (shape [m] or [1,m]) to every row of an [n,m] matrix.
inline Var add_bias(const Var& a, const Var& bias) {
    Tape& tape = detail::same_tape(a, bias, "add_bias");
    const Tensor& x = a.value();
    const Tensor& b = bias.value();
    detail::require_rank2(OpKind::add_bias, x.shape());
    const std::size_t n = x.dim(0), m = x.dim(1);
    const bool ok = (b.rank() == 1 && b.dim(0) == m) || (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == m);
    if (!ok) detail::shape_mismatch(OpKind::add_bias, x.shape(), b.shape());
    Tensor y = x;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) y[i * m + j] += b[j];
    TapeNode node;
    node.op = OpKind::add_bias;
    node.lhs = a.id();
    node.rhs = bias.id();
    node.value = std::move(y);
    return tape.push(std::move(node));
}

/// Rows [begin, end) of a matrix.
inline Var row_slice(const Var& a, std::size_t begin, std::size_t end) {
    Tape& tape = detail::tape_of(a, "row_slice");
    const Tensor& x = a.value();
    detail::require_rank2(OpKind::row_slice, x.shape());
    if (begin > end || end > x.dim(0)) {
        throw ShapeError("row_slice: rows [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of range for shape " + to_string(x.shape()));
    }
    const std::size_t cols = x.dim(1);
    std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                             x.data().begin() + static_cast<std::ptrdiff_t>(end * cols));
    TapeNode node;
    node.op = OpKind::row_slice;
    node.lhs = a.id();
    node.value = Tensor(Shape{end - begin, cols}, std::move(data));
    node.p0 = static_cast<double>(begin);
    node.p1 = static_cast<double>(end);
    return tape.push(std::move(node));
}

inline Var add(const Var& a, const Var& b) {
    return detail::binary(a, b, OpKind::add, [](double x, double y) { return x + y; });
}
inline Var sub(const Var& a, const Var& b) {
    return detail::binary(a, b, OpKind::sub, [](double x, double y) { return x - y; });
}
inline Var mul(const Var& a, const Var& b) {
    return detail::binary(a, b, OpKind::mul, [](double x, double y) { return x * y; });
}
inline Var div(const Var& a, const Var& b) {
    return detail::binary(a, b, OpKind::div, [](double x, double y) { return x / y; });
}
/// Elementwise minimum; ties route the gradient to the first operand.
inline Var minimum(const Var& a, const Var& b) {
    return detail::binary(a, b, OpKind::minimum, [](double x, double y) { return x <= y ? x : y; });
}

inline Var neg(const Var& a) { return detail::unary(a, OpKind::neg, [](double x) { return -x; }); }
inline Var exp(const Var& a) { return detail::unary(a, OpKind::exp, [](double x) { return std::exp(x); }); }
inline Var log(const Var& a) { return detail::unary(a, OpKind::log, [](double x) { return std::log(x); }); }
inline Var sqrt(const Var& a) { return detail::unary(a, OpKind::sqrt, [](double x) { return std::sqrt(x); }); }
inline Var square(const Var& a) { return detail::unary(a, OpKind::square, [](double x) { return x * x; }); }
inline Var relu(const Var& a) {
    return detail::unary(a, OpKind::relu, [](double x) { return x > 0.0 ? x : 0.0; });
}
inline Var scale(const Var& a, double s) {
    return detail::unary(a, OpKind::scale, [s](double x) { return s * x; }, s);
}
inline Var add_scalar(const Var& a, double s) {
    return detail::unary(a, OpKind::add_scalar, [s](double x) { return x + s; }, s);
}
inline Var clamp(const Var& a, double lo, double hi) {
    if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
    return detail::unary(a, OpKind::clamp, [lo, hi](double x) { return std::clamp(x, lo, hi); }, lo, hi);
}

/// Row-wise log-softmax of a matrix (a vector is treated as one row).
inline Var log_softmax(const Var& a) {
    Tape& tape = detail::tape_of(a, "log_softmax");
    const Tensor& x = a.value();
    if (x.rank() != 1 && x.rank() != 2) {
        throw ShapeError("log_softmax: expected a vector or matrix, got shape " + to_string(x.shape()));
    }
    const std::size_t cols = x.shape().back();
    const std::size_t rows = cols == 0 ? 0 : x.size() / cols;
    Tensor y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = x.data().data() + r * cols;
        double* out = y.data().data() + r * cols;
        const double mx = *std::max_element(in, in + cols);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += std::exp(in[c] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t c = 0; c < cols; ++c) out[c] = in[c] - lse;
    }
    TapeNode node;
    node.op = OpKind::log_softmax;
    node.lhs = a.id();
    node.value = std::move(y);
    return tape.push(std::move(node));
}

inline Var sum(const Var& a) {
    Tape& tape = detail::tape_of(a, "sum");
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    TapeNode node;
    node.op = OpKind::sum;
    node.lhs = a.id();
    node.value = Tensor::scalar(s);
    return tape.push(std::move(node));
}

inline Var mean(const Var& a) {
    Tape& tape = detail::tape_of(a, "mean");
    const std::size_t n = a.value().size();
    if (n == 0) throw ShapeError("mean: empty tensor");
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    TapeNode node;
    node.op = OpKind::mean;
    node.lhs = a.id();
    node.value = Tensor::scalar(s / static_cast<double>(n));
    return tape.push(std::move(node));
}

/// Selects x[i, labels[i]] from an [n,k] matrix.
inline Var pick(const Var& a, const std::vector<std::size_t>& labels) {
    Tape& tape = detail::tape_of(a, "pick");
    const Tensor& x = a.value();
    detail::require_rank2(OpKind::pick, x.shape());
    if (labels.size() != x.dim(0)) {
        detail::shape_mismatch(OpKind::pick, x.shape(), Shape{labels.size()});
    }
    const std::size_t k = x.dim(1);
    Tensor y(Shape{labels.size()});
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= k) throw std::out_of_range("pick: label " + std::to_string(labels[i]) + " out of range");
        y[i] = x[i * k + labels[i]];
    }
    TapeNode node;
    node.op = OpKind::pick;
    node.lhs = a.id();
    node.value = std::move(y);
    node.labels = labels;
    return tape.push(std::move(node));
}

/// Elementwise upper inverse of the binary KL, differentiable through the
/// implicit relation kl(q || p) = budget.
inline Var kl_inv_upper(const Var& q, const Var& budget) {
    Tape& tape = detail::same_tape(q, budget, "kl_inv_upper");
    const Tensor& qv = q.value();
    const Tensor& cv = budget.value();
    if (qv.shape() != cv.shape()) detail::shape_mismatch(OpKind::kl_inv_upper, qv.shape(), cv.shape());
    Tensor y(qv.shape());
    for (std::size_t i = 0; i < qv.size(); ++i) y[i] = kl_inv_upper(qv[i], cv[i]);
    TapeNode node;
    node.op = OpKind::kl_inv_upper;
    node.lhs = q.id();
    node.rhs = budget.id();
    node.value = std::move(y);
    return tape.push(std::move(node));
}

// Scalar-friendly operators used by the bound formulas.
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator+(double s, const Var& a) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(double s, const Var& a) { return add_scalar(neg(a), s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator/(const Var& a, double s) { return scale(a, 1.0 / s); }
inline Var operator/(double s, const Var& a) {
    return div(detail::tape_of(a, "div").constant(Tensor(a.shape(), s)), a);
}

// ---- backward ----------------------------------------------------------------

inline Gradients Tape::backward(const Var& loss) const {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss belongs to another tape");
    const Tensor& lv = loss.value();
    if (lv.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + to_string(lv.shape()));
    }
    Gradients out;
    out.grads_.resize(nodes_.size());
    auto& g = out.grads_;
    if (!nodes_[loss.id()].requires_grad) return out;

    auto slot = [&](int id) -> Tensor* {
        if (id < 0 || !nodes_[id].requires_grad) return nullptr;
        if (!g[id]) g[id] = Tensor(nodes_[id].value.shape());
        return &*g[id];
    };

    g[loss.id()] = Tensor(lv.shape(), 1.0);
    for (int id = loss.id(); id >= 0; --id) {
        const TapeNode& node = nodes_[id];
        if (!node.requires_grad || !g[id] || node.op == OpKind::leaf) continue;
        const Tensor& gy = *g[id];
        const Tensor& y = node.value;
        Tensor* ga = slot(node.lhs);
        Tensor* gb = slot(node.rhs);
        const Tensor* xa = node.lhs >= 0 ? &nodes_[node.lhs].value : nullptr;
        const Tensor* xb = node.rhs >= 0 ? &nodes_[node.rhs].value : nullptr;
        const std::size_t n = y.size();

        switch (node.op) {
        case OpKind::leaf: break;
        case OpKind::matmul: {
            const std::size_t rows = xa->dim(0), k = xa->dim(1), m = xb->dim(1);
            if (ga) { // dA = dY * B^T
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < m; ++j) s += gy[i * m + j] * (*xb)[p * m + j];
                        (*ga)[i * k + p] += s;
                    }
            }
            if (gb) { // dB = A^T * dY
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double av = (*xa)[i * k + p];
                        if (av == 0.0) continue;
                        double* brow = gb->data().data() + p * m;
                        const double* grow = gy.data().data() + i * m;
                        for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
                    }
            }
            break;
        }
        case OpKind::add_bias: {
            const std::size_t m = y.dim(1);
            if (ga)
                for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i];
            if (gb)
                for (std::size_t i = 0; i < n; ++i) (*gb)[i % m] += gy[i];
            break;
        }
        case OpKind::row_slice: {
            const std::size_t offset = static_cast<std::size_t>(node.p0) * y.dim(1);
            for (std::size_t i = 0; i < n; ++i) (*ga)[offset + i] += gy[i];
            break;
        }
        case OpKind::add:
            if (ga) for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i];
            if (gb) for (std::size_t i = 0; i < n; ++i) (*gb)[i] += gy[i];
            break;
        case OpKind::sub:
            if (ga) for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i];
            if (gb) for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= gy[i];
            break;
        case OpKind::mul:
            if (ga) for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] * (*xb)[i];
            if (gb) for (std::size_t i = 0; i < n; ++i) (*gb)[i] += gy[i] * (*xa)[i];
            break;
        case OpKind::div:
            if (ga) for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] / (*xb)[i];
            if (gb) for (std::size_t i = 0; i < n; ++i) (*gb)[i] -= gy[i] * y[i] / (*xb)[i];
            break;
        case OpKind::minimum:
            for (std::size_t i = 0; i < n; ++i) {
                if ((*xa)[i] <= (*xb)[i]) {
                    if (ga) (*ga)[i] += gy[i];
                } else if (gb) {
                    (*gb)[i] += gy[i];
                }
            }
            break;
        case OpKind::neg:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] -= gy[i];
            break;
        case OpKind::exp:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] * y[i];
            break;
        case OpKind::log:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] / (*xa)[i];
            break;
        case OpKind::sqrt:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] * 0.5 / y[i];
            break;
        case OpKind::square:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] * 2.0 * (*xa)[i];
            break;
        case OpKind::relu:
            for (std::size_t i = 0; i < n; ++i)
                if ((*xa)[i] > 0.0) (*ga)[i] += gy[i];
            break;
        case OpKind::scale:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i] * node.p0;
            break;
        case OpKind::add_scalar:
            for (std::size_t i = 0; i < n; ++i) (*ga)[i] += gy[i];
            break;
        case OpKind::clamp:
            for (std::size_t i = 0; i < n; ++i) {
                const double v = (*xa)[i];
                if (v >= node.p0 && v <= node.p1) (*ga)[i] += gy[i];
            }
            break;
        case OpKind::log_softmax: {
            const std::size_t cols = y.shape().back();
            const std::size_t rows = n / cols;
            for (std::size_t r = 0; r < rows; ++r) {
                double gsum = 0.0;
                for (std::size_t c = 0; c < cols; ++c) gsum += gy[r * cols + c];
                for (std::size_t c = 0; c < cols; ++c) {
                    const std::size_t i = r * cols + c;
                    (*ga)[i] += gy[i] - std::exp(y[i]) * gsum;
                }
            }
            break;
        }
        case OpKind::sum:
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += gy[0];
            break;
        case OpKind::mean: {
            const double w = gy[0] / static_cast<double>(ga->size());
            for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += w;
            break;
        }
        case OpKind::pick: {
            const std::size_t k = xa->dim(1);
            for (std::size_t i = 0; i < node.labels.size(); ++i) (*ga)[i * k + node.labels[i]] += gy[i];
            break;
        }
        case OpKind::kl_inv_upper:
            for (std::size_t i = 0; i < n; ++i) {
                const auto [dq, dc] = detail::kl_inv_partials((*xa)[i], (*xb)[i], y[i]);
                if (ga) (*ga)[i] += gy[i] * dq;
                if (gb) (*gb)[i] += gy[i] * dc;
            }
            break;
        }
    }
    return out;
}

} // namespace pacmeta
