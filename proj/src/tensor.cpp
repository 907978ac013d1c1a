#include "pmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <utility>

#include "pmae/threadpool.hpp"

namespace pmae {

namespace {

constexpr uint64_t kLeafEpoch = std::numeric_limits<uint64_t>::max();
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct Tape {
    std::vector<std::function<void()>> ops;
    uint64_t epoch = 0;
};

Tape& tape() {
    thread_local Tape t;
    return t;
}

thread_local bool g_grad_enabled = true;

void ensure_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NonFiniteError(std::string(op) + " produced a non-finite value");
        }
    }
}

} // namespace

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (size_t e : s) n *= e;
    return n;
}

struct Tensor::Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    DType dtype = DType::F64;
    uint64_t epoch = kLeafEpoch;
};

Tensor::Tensor(Shape shape, double fill) {
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), fill);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    return t;
}

Tensor Tensor::scalar(double v) { return from_data({}, {v}); }

const Shape& Tensor::shape() const {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->shape;
}

size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

size_t Tensor::extent(size_t axis) const {
    const Shape& s = shape();
    if (axis >= s.size()) {
        throw ShapeError("extent: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
    }
    return s[axis];
}

DType Tensor::dtype() const { return node_ ? node_->dtype : DType::F64; }

Tensor& Tensor::set_dtype(DType dt) {
    node_->dtype = dt;
    if (dt == DType::F32) quantize_f32();
    return *this;
}

void Tensor::quantize_f32() {
    for (double& v : node_->data) v = static_cast<double>(static_cast<float>(v));
}

const std::vector<double>& Tensor::data() const {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->data;
}

std::vector<double>& Tensor::data_mut() {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->data;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
    if (!node_) throw Error("use of an undefined tensor");
    return node_->grad;
}

std::vector<double>& Tensor::grad_mut() {
    if (!node_) throw Error("use of an undefined tensor");
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.clear();
}

Tensor Tensor::clone() const {
    Tensor t = from_data(shape(), data());
    t.node_->dtype = node_->dtype;
    return t;
}

void Tensor::stamp_epoch() { node_->epoch = tape().epoch; }

bool Tensor::produced_this_epoch() const { return node_ && node_->epoch == tape().epoch; }

bool Tensor::is_leaf() const { return node_ && node_->epoch == kLeafEpoch; }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void tape_record(std::function<void()> backward_fn) {
    tape().ops.push_back(std::move(backward_fn));
}

void tape_clear() {
    tape().ops.clear();
    ++tape().epoch;
}

size_t tape_size() { return tape().ops.size(); }

void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    Tape& t = tape();
    if (!loss.requires_grad()) {
        tape_clear();
        return;
    }
    if (!loss.is_leaf() && !loss.produced_this_epoch()) {
        throw Error("backward: graph already consumed (double backward is unsupported)");
    }
    const_cast<Tensor&>(loss).grad_mut()[0] += 1.0;
    for (auto it = t.ops.rbegin(); it != t.ops.rend(); ++it) (*it)();
    tape_clear();
}

namespace {

// ---- broadcast plumbing for elementwise binary ops ----

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Returns true if b is the (possibly equal) smaller operand.
bool binary_layout(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return true;
    if (is_suffix(b.shape(), a.shape())) return true;
    if (is_suffix(a.shape(), b.shape())) return false;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " do not broadcast over leading extents");
}

template <typename Fwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 const std::function<void(Tensor, Tensor, Tensor)>& make_backward) {
    bool b_small = binary_layout(name, a, b);
    const Tensor& big = b_small ? a : b;
    const Tensor& small = b_small ? b : a;
    const size_t bn = big.numel();
    const size_t sn = small.numel();
    std::vector<double> out(bn);
    const auto& bd = big.data();
    const auto& sd = small.data();
    if (b_small) {
        for (size_t i = 0; i < bn; ++i) out[i] = fwd(bd[i], sd[i % sn]);
    } else {
        for (size_t i = 0; i < bn; ++i) out[i] = fwd(sd[i % sn], bd[i]);
    }
    ensure_finite(name, out);
    Tensor y = Tensor::from_data(big.shape(), std::move(out));
    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        make_backward(a, b, y);
    }
    return y;
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](Tensor a, Tensor b, Tensor y) {
            tape_record([a, b, y]() mutable {
                if (!y.has_grad()) return;
                const auto& g = y.grad();
                for (Tensor* t : {&a, &b}) {
                    if (!t->requires_grad()) continue;
                    auto& tg = t->grad_mut();
                    const size_t sn = t->numel();
                    if (sn == g.size()) {
                        for (size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
                    } else {
                        for (size_t i = 0; i < g.size(); ++i) tg[i % sn] += g[i];
                    }
                }
            });
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](Tensor a, Tensor b, Tensor y) {
            tape_record([a, b, y]() mutable {
                if (!y.has_grad()) return;
                const auto& g = y.grad();
                if (a.requires_grad()) {
                    auto& ag = a.grad_mut();
                    const size_t sn = a.numel();
                    for (size_t i = 0; i < g.size(); ++i) ag[i % sn] += g[i];
                }
                if (b.requires_grad()) {
                    auto& bg = b.grad_mut();
                    const size_t sn = b.numel();
                    for (size_t i = 0; i < g.size(); ++i) bg[i % sn] -= g[i];
                }
            });
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](Tensor a, Tensor b, Tensor y) {
            tape_record([a, b, y]() mutable {
                if (!y.has_grad()) return;
                const auto& g = y.grad();
                const auto& ad = a.data();
                const auto& bd = b.data();
                const size_t an = a.numel();
                const size_t bn = b.numel();
                if (a.requires_grad()) {
                    auto& ag = a.grad_mut();
                    for (size_t i = 0; i < g.size(); ++i) ag[i % an] += g[i] * bd[i % bn];
                }
                if (b.requires_grad()) {
                    auto& bg = b.grad_mut();
                    for (size_t i = 0; i < g.size(); ++i) bg[i % bn] += g[i] * ad[i % an];
                }
            });
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](Tensor a, Tensor b, Tensor y) {
            tape_record([a, b, y]() mutable {
                if (!y.has_grad()) return;
                const auto& g = y.grad();
                const auto& ad = a.data();
                const auto& bd = b.data();
                const size_t an = a.numel();
                const size_t bn = b.numel();
                if (a.requires_grad()) {
                    auto& ag = a.grad_mut();
                    for (size_t i = 0; i < g.size(); ++i) ag[i % an] += g[i] / bd[i % bn];
                }
                if (b.requires_grad()) {
                    auto& bg = b.grad_mut();
                    for (size_t i = 0; i < g.size(); ++i) {
                        const double bv = bd[i % bn];
                        bg[i % bn] -= g[i] * ad[i % an] / (bv * bv);
                    }
                }
            });
        });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd_factor) {
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i]);
    ensure_finite(name, out);
    Tensor y = Tensor::from_data(a.shape(), std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, bwd_factor]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            const auto& xd = ac.data();
            const auto& yd = y.data();
            auto& ag = ac.grad_mut();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * bwd_factor(xd[i], yd[i]);
        });
    }
    return y;
}

} // namespace

Tensor add_scalar(const Tensor& a, double s) {
    return unary_op(
        "add_scalar", a, [s](double x) { return x + s; },
        [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary_op(
        "mul_scalar", a, [s](double x) { return x * s; },
        [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor sqrt(const Tensor& a) {
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        [](double, double y) { return 0.5 / y; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        "exp", a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor gelu(const Tensor& a) {
    return unary_op(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        });
}

namespace {

// ---- raw matmul kernels (row-major, accumulate into C) ----

void mm_nn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        for (size_t p = 0; p < k; ++p) {
            const double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            double* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is stored [n,k].
void mm_nt(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            c[i * n + j] += s;
        }
    }
}

// C[m,n] += A^T * B where A is stored [k,m], B is [k,n].
void mm_tn(double* c, const double* a, const double* b, size_t m, size_t k, size_t n) {
    for (size_t p = 0; p < k; ++p) {
        const double* brow = b + p * n;
        for (size_t i = 0; i < m; ++i) {
            const double av = a[p * m + i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    const size_t m = as[as.size() - 2];
    const size_t k = as[as.size() - 1];
    const size_t k2 = bs[bs.size() - 2];
    const size_t n = bs[bs.size() - 1];
    if (k != k2) {
        throw ShapeError("matmul: inner extents differ, " + shape_str(as) + " vs " +
                         shape_str(bs));
    }
    Shape a_batch(as.begin(), as.end() - 2);
    Shape b_batch(bs.begin(), bs.end() - 2);
    if (!(a_batch == b_batch || a_batch.empty() || b_batch.empty())) {
        throw ShapeError("matmul: batch extents differ, " + shape_str(as) + " vs " +
                         shape_str(bs));
    }
    const Shape& batch = a_batch.empty() ? b_batch : a_batch;
    const size_t nb = shape_numel(batch);
    const bool a_shared = a_batch.empty() && !batch.empty();
    const bool b_shared = b_batch.empty() && !batch.empty();

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(shape_numel(out_shape), 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    const size_t a_step = a_shared ? 0 : m * k;
    const size_t b_step = b_shared ? 0 : k * n;
    parallel_for(0, nb, [&](size_t i) {
        mm_nn(out.data() + i * m * n, ad + i * a_step, bd + i * b_step, m, k, n);
    });
    ensure_finite("matmul", out);
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    if (grad_enabled() && (a.requires_grad() || b.requires_grad())) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a, bc = b;
        tape_record([ac, bc, y, m, k, n, nb, a_step, b_step]() mutable {
            if (!y.has_grad()) return;
            const double* g = y.grad().data();
            if (ac.requires_grad()) {
                double* ag = ac.grad_mut().data();
                const double* bd = bc.data().data();
                for (size_t i = 0; i < nb; ++i) {
                    // dA = dC * B^T; B slice is [k,n].
                    mm_nt(ag + i * a_step, g + i * m * n, bd + i * b_step, m, n, k);
                }
            }
            if (bc.requires_grad()) {
                double* bg = bc.grad_mut().data();
                const double* ad = ac.data().data();
                for (size_t i = 0; i < nb; ++i) {
                    // dB = A^T * dC; A slice is [m,k].
                    mm_tn(bg + i * b_step, ad + i * a_step, g + i * m * n, k, m, n);
                }
            }
        });
    }
    return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const Shape& xs = x.shape();
    if (xs.empty() || xs.back() != w.extent(0)) {
        throw ShapeError("linear: input " + shape_str(xs) + " does not match weight " +
                         shape_str(w.shape()));
    }
    Tensor x2 = x;
    bool squeezed = false;
    if (x.rank() == 1) {
        x2 = reshape(x, {1, xs[0]});
        squeezed = true;
    }
    Tensor y = matmul(x2, w);
    if (bias.defined()) y = add(y, bias);
    if (squeezed) y = reshape(y, {w.extent(1)});
    return y;
}

namespace {

std::vector<size_t> strides_of(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Applies axis permutation to raw data; out[new_index] = in[old_index].
std::vector<double> permute_raw(const std::vector<double>& in, const Shape& in_shape,
                                const std::vector<size_t>& axes, Shape& out_shape) {
    const size_t r = in_shape.size();
    out_shape.resize(r);
    for (size_t i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
    const auto in_st = strides_of(in_shape);
    std::vector<size_t> out_to_in(r);
    for (size_t i = 0; i < r; ++i) out_to_in[i] = in_st[axes[i]];
    std::vector<double> out(in.size());
    const size_t n = in.size();
    std::vector<size_t> idx(r, 0);
    size_t src = 0;
    for (size_t flat = 0; flat < n; ++flat) {
        out[flat] = in[src];
        for (size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += out_to_in[d];
                break;
            }
            src -= out_to_in[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    return out;
}

} // namespace

Tensor permute(const Tensor& a, const std::vector<size_t>& axes) {
    const size_t r = a.rank();
    if (axes.size() != r) {
        throw ShapeError("permute: got " + std::to_string(axes.size()) + " axes for rank " +
                         std::to_string(r));
    }
    std::vector<bool> seen(r, false);
    for (size_t ax : axes) {
        if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis list");
        seen[ax] = true;
    }
    Shape out_shape;
    std::vector<double> out = permute_raw(a.data(), a.shape(), axes, out_shape);
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        std::vector<size_t> inv(r);
        for (size_t i = 0; i < r; ++i) inv[axes[i]] = i;
        Tensor ac = a;
        tape_record([ac, y, inv]() mutable {
            if (!y.has_grad()) return;
            Shape tmp;
            std::vector<double> gi = permute_raw(y.grad(), y.shape(), inv, tmp);
            auto& ag = ac.grad_mut();
            for (size_t i = 0; i < gi.size(); ++i) ag[i] += gi[i];
        });
    }
    return y;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2) {
        throw ShapeError("transpose_last2: rank must be >= 2, got " + shape_str(a.shape()));
    }
    std::vector<size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
    return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(new_shape));
    }
    Tensor y = Tensor::from_data(std::move(new_shape), a.data());
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            auto& ag = ac.grad_mut();
            for (size_t i = 0; i < g.size(); ++i) ag[i] += g[i];
        });
    }
    return y;
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) {
        throw ShapeError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s0));
    }
    Shape out_shape = s0;
    size_t total = s0[axis];
    for (size_t p = 1; p < parts.size(); ++p) {
        const Shape& sp = parts[p].shape();
        if (sp.size() != s0.size()) {
            throw ShapeError("concat: rank mismatch " + shape_str(s0) + " vs " + shape_str(sp));
        }
        for (size_t d = 0; d < s0.size(); ++d) {
            if (d != axis && sp[d] != s0[d]) {
                throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(sp) +
                                 " differ off-axis");
            }
        }
        total += sp[axis];
    }
    out_shape[axis] = total;

    const size_t outer = std::accumulate(s0.begin(), s0.begin() + axis, size_t{1},
                                         std::multiplies<size_t>());
    const size_t inner = std::accumulate(s0.begin() + axis + 1, s0.end(), size_t{1},
                                         std::multiplies<size_t>());
    std::vector<double> out(shape_numel(out_shape));
    const size_t out_row = total * inner;
    size_t off = 0;
    std::vector<size_t> offsets(parts.size());
    for (size_t p = 0; p < parts.size(); ++p) {
        offsets[p] = off;
        const size_t row = parts[p].extent(axis) * inner;
        const auto& pd = parts[p].data();
        for (size_t o = 0; o < outer; ++o) {
            std::copy(pd.begin() + o * row, pd.begin() + (o + 1) * row,
                      out.begin() + o * out_row + off);
        }
        off += row;
    }
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    bool any_grad = false;
    for (const Tensor& p : parts) any_grad = any_grad || p.requires_grad();
    if (grad_enabled() && any_grad) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        std::vector<Tensor> pc = parts;
        tape_record([pc, y, outer, inner, out_row, offsets, axis]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            for (size_t p = 0; p < pc.size(); ++p) {
                if (!pc[p].requires_grad()) continue;
                auto& pg = pc[p].grad_mut();
                const size_t row = pc[p].extent(axis) * inner;
                for (size_t o = 0; o < outer; ++o) {
                    const double* src = g.data() + o * out_row + offsets[p];
                    double* dst = pg.data() + o * row;
                    for (size_t i = 0; i < row; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return y;
}

Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw ShapeError("slice: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
    }
    if (start + len > s[axis] || len == 0) {
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") invalid for extent " +
                         std::to_string(s[axis]));
    }
    Shape out_shape = s;
    out_shape[axis] = len;
    const size_t outer = std::accumulate(s.begin(), s.begin() + axis, size_t{1},
                                         std::multiplies<size_t>());
    const size_t inner = std::accumulate(s.begin() + axis + 1, s.end(), size_t{1},
                                         std::multiplies<size_t>());
    const size_t in_row = s[axis] * inner;
    const size_t out_row = len * inner;
    std::vector<double> out(shape_numel(out_shape));
    const auto& ad = a.data();
    for (size_t o = 0; o < outer; ++o) {
        std::copy(ad.begin() + o * in_row + start * inner,
                  ad.begin() + o * in_row + (start + len) * inner, out.begin() + o * out_row);
    }
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, outer, inner, in_row, out_row, start]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            auto& ag = ac.grad_mut();
            for (size_t o = 0; o < outer; ++o) {
                const double* src = g.data() + o * out_row;
                double* dst = ag.data() + o * in_row + start * inner;
                for (size_t i = 0; i < out_row; ++i) dst[i] += src[i];
            }
        });
    }
    return y;
}

Tensor gather_flat(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> indices,
                   Shape out_shape) {
    if (!indices) throw Error("gather_flat: null index map");
    if (indices->size() != shape_numel(out_shape)) {
        throw ShapeError("gather_flat: index count " + std::to_string(indices->size()) +
                         " does not match output " + shape_str(out_shape));
    }
    const auto& ad = a.data();
    const int64_t limit = static_cast<int64_t>(ad.size());
    std::vector<double> out(indices->size());
    for (size_t i = 0; i < out.size(); ++i) {
        const int64_t idx = (*indices)[i];
        if (idx >= limit) {
            throw ShapeError("gather_flat: index " + std::to_string(idx) +
                             " out of range for " + std::to_string(ad.size()) + " values");
        }
        out[i] = idx >= 0 ? ad[static_cast<size_t>(idx)] : 0.0;
    }
    Tensor y = Tensor::from_data(std::move(out_shape), std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, indices]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            auto& ag = ac.grad_mut();
            for (size_t i = 0; i < g.size(); ++i) {
                const int64_t idx = (*indices)[i];
                if (idx >= 0) ag[static_cast<size_t>(idx)] += g[i];
            }
        });
    }
    return y;
}

Tensor expand_leading(const Tensor& a, const Shape& lead) {
    Shape out_shape = lead;
    out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
    const size_t reps = shape_numel(lead);
    const size_t n = a.numel();
    std::vector<double> out(reps * n);
    const auto& ad = a.data();
    for (size_t r = 0; r < reps; ++r) {
        std::copy(ad.begin(), ad.end(), out.begin() + r * n);
    }
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, reps, n]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            auto& ag = ac.grad_mut();
            for (size_t r = 0; r < reps; ++r) {
                const double* src = g.data() + r * n;
                for (size_t i = 0; i < n; ++i) ag[i] += src[i];
            }
        });
    }
    return y;
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    if (!std::isfinite(s)) throw NonFiniteError("sum_all produced a non-finite value");
    Tensor y = Tensor::scalar(s);
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y]() mutable {
            if (!y.has_grad()) return;
            const double g = y.grad()[0];
            auto& ag = ac.grad_mut();
            for (double& v : ag) v += g;
        });
    }
    return y;
}

Tensor mean_all(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

namespace {

Tensor reduce_axis(const char* name, const Tensor& a, size_t axis, double scale) {
    const Shape& s = a.shape();
    if (axis >= s.size()) {
        throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
    }
    const size_t outer = std::accumulate(s.begin(), s.begin() + axis, size_t{1},
                                         std::multiplies<size_t>());
    const size_t n = s[axis];
    const size_t inner = std::accumulate(s.begin() + axis + 1, s.end(), size_t{1},
                                         std::multiplies<size_t>());
    Shape out_shape;
    for (size_t d = 0; d < s.size(); ++d) {
        if (d != axis) out_shape.push_back(s[d]);
    }
    std::vector<double> out(outer * inner, 0.0);
    const auto& ad = a.data();
    for (size_t o = 0; o < outer; ++o) {
        for (size_t j = 0; j < n; ++j) {
            const double* src = ad.data() + (o * n + j) * inner;
            double* dst = out.data() + o * inner;
            for (size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    if (scale != 1.0) {
        for (double& v : out) v *= scale;
    }
    ensure_finite(name, out);
    Tensor y = Tensor::from_data(out_shape, std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, outer, n, inner, scale]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            auto& ag = ac.grad_mut();
            for (size_t o = 0; o < outer; ++o) {
                const double* src = g.data() + o * inner;
                for (size_t j = 0; j < n; ++j) {
                    double* dst = ag.data() + (o * n + j) * inner;
                    for (size_t i = 0; i < inner; ++i) dst[i] += src[i] * scale;
                }
            }
        });
    }
    return y;
}

} // namespace

Tensor sum_axis(const Tensor& a, size_t axis) { return reduce_axis("sum_axis", a, axis, 1.0); }

Tensor mean_axis(const Tensor& a, size_t axis) {
    return reduce_axis("mean_axis", a, axis, 1.0 / static_cast<double>(a.extent(axis)));
}

Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() == 0) throw ShapeError("softmax_lastdim: scalar input");
    const size_t n = a.shape().back();
    const size_t rows = a.numel() / n;
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* x = ad.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (size_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        double z = 0.0;
        for (size_t i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            z += y[i];
        }
        const double inv = 1.0 / z;
        for (size_t i = 0; i < n; ++i) y[i] *= inv;
    }
    ensure_finite("softmax_lastdim", out);
    Tensor y = Tensor::from_data(a.shape(), std::move(out));
    if (grad_enabled() && a.requires_grad()) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor ac = a;
        tape_record([ac, y, rows, n]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            const auto& yd = y.data();
            auto& ag = ac.grad_mut();
            for (size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * n;
                const double* yr = yd.data() + r * n;
                double dot = 0.0;
                for (size_t i = 0; i < n; ++i) dot += gr[i] * yr[i];
                double* ar = ag.data() + r * n;
                for (size_t i = 0; i < n; ++i) ar[i] += yr[i] * (gr[i] - dot);
            }
        });
    }
    return y;
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps) {
    if (x.rank() == 0) throw ShapeError("layer_norm_lastdim: scalar input");
    const size_t n = x.shape().back();
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
        throw ShapeError("layer_norm_lastdim: gamma/beta must be [" + std::to_string(n) +
                         "], got " + shape_str(gamma.shape()) + " and " +
                         shape_str(beta.shape()));
    }
    const size_t rows = x.numel() / n;
    std::vector<double> out(x.numel());
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    const auto& xd = x.data();
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = xd.data() + r * n;
        double mu = 0.0;
        for (size_t i = 0; i < n; ++i) mu += xr[i];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double d = xr[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        double* hr = xhat->data() + r * n;
        double* yr = out.data() + r * n;
        for (size_t i = 0; i < n; ++i) {
            hr[i] = (xr[i] - mu) * inv;
            yr[i] = hr[i] * gd[i] + bd[i];
        }
    }
    ensure_finite("layer_norm_lastdim", out);
    Tensor y = Tensor::from_data(x.shape(), std::move(out));
    if (grad_enabled() &&
        (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())) {
        y.set_requires_grad(true);
        y.stamp_epoch();
        Tensor xc = x, gc = gamma, bc = beta;
        tape_record([xc, gc, bc, y, xhat, inv_std, rows, n]() mutable {
            if (!y.has_grad()) return;
            const auto& g = y.grad();
            const auto& gd = gc.data();
            for (size_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * n;
                const double* hr = xhat->data() + r * n;
                if (gc.requires_grad()) {
                    auto& gg = gc.grad_mut();
                    for (size_t i = 0; i < n; ++i) gg[i] += gr[i] * hr[i];
                }
                if (bc.requires_grad()) {
                    auto& bg = bc.grad_mut();
                    for (size_t i = 0; i < n; ++i) bg[i] += gr[i];
                }
                if (xc.requires_grad()) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (size_t i = 0; i < n; ++i) {
                        const double dh = gr[i] * gd[i];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[i];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    const double inv = (*inv_std)[r];
                    auto& xg = xc.grad_mut();
                    double* xr = xg.data() + r * n;
                    for (size_t i = 0; i < n; ++i) {
                        const double dh = gr[i] * gd[i];
                        xr[i] += inv * (dh - mean_dh - hr[i] * mean_dh_h);
                    }
                }
            }
        });
    }
    return y;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) {
        throw ShapeError("softmax_cross_entropy: logits must be [N,K], got " +
                         shape_str(logits.shape()));
    }
    const size_t nrows = logits.extent(0);
    const size_t k = logits.extent(1);
    if (labels.size() != nrows) {
        throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(nrows) + " rows");
    }
    auto probs = std::make_shared<std::vector<double>>(logits.numel());
    const auto& zd = logits.data();
    double loss = 0.0;
    for (size_t r = 0; r < nrows; ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<size_t>(y) >= k) {
            throw ShapeError("softmax_cross_entropy: label " + std::to_string(y) +
                             " out of range for " + std::to_string(k) + " classes");
        }
        const double* z = zd.data() + r * k;
        double mx = z[0];
        for (size_t i = 1; i < k; ++i) mx = std::max(mx, z[i]);
        double sum = 0.0;
        double* p = probs->data() + r * k;
        for (size_t i = 0; i < k; ++i) {
            p[i] = std::exp(z[i] - mx);
            sum += p[i];
        }
        const double inv = 1.0 / sum;
        for (size_t i = 0; i < k; ++i) p[i] *= inv;
        loss -= std::log(std::max(p[y], 1e-300));
    }
    loss /= static_cast<double>(nrows);
    if (!std::isfinite(loss)) {
        throw NonFiniteError("softmax_cross_entropy produced a non-finite value");
    }
    Tensor out = Tensor::scalar(loss);
    if (grad_enabled() && logits.requires_grad()) {
        out.set_requires_grad(true);
        out.stamp_epoch();
        Tensor zc = logits;
        auto lab = std::make_shared<std::vector<int>>(labels);
        tape_record([zc, out, probs, lab, nrows, k]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad()[0] / static_cast<double>(nrows);
            auto& zg = zc.grad_mut();
            for (size_t r = 0; r < nrows; ++r) {
                const double* p = probs->data() + r * k;
                double* zr = zg.data() + r * k;
                const size_t y = static_cast<size_t>((*lab)[r]);
                for (size_t i = 0; i < k; ++i) zr[i] += g * (p[i] - (i == y ? 1.0 : 0.0));
            }
        });
    }
    return out;
}

GradCheckReport grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x, double eps) {
    if (eps <= 0.0) throw Error("grad_check: eps must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    tape_clear();
    Tensor y = f(x);
    if (y.numel() != 1) {
        throw ShapeError("grad_check: f must be scalar-valued, got " + shape_str(y.shape()));
    }
    backward(y);
    std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);
    x.zero_grad();

    GradCheckReport rep;
    NoGradGuard ng;
    auto& xd = x.data_mut();
    for (size_t i = 0; i < xd.size(); ++i) {
        const double v = xd[i];
        xd[i] = v + eps;
        const double fp = f(x).data()[0];
        xd[i] = v - eps;
        const double fm = f(x).data()[0];
        xd[i] = v;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw NonFiniteError("grad_check: non-finite objective during probing");
        }
        const double num = (fp - fm) / (2.0 * eps);
        const double a = analytic[i];
        const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
        if (rel >= rep.max_rel_err) {
            rep.max_rel_err = rel;
            rep.worst_index = i;
            rep.analytic = a;
            rep.numeric = num;
        }
    }
    return rep;
}

} // namespace pmae
