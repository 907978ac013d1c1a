#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pmae/errors.hpp"

namespace pmae {

enum class DType : uint8_t { F32 = 0, F64 = 1 };

using Shape = std::vector<size_t>;

std::string shape_str(const Shape& s);
size_t shape_numel(const Shape& s);

// Dense row-major real array. Copies are shallow: they share the underlying
// storage and gradient, so a Tensor works as a value-typed handle on the tape.
// Values are held as double regardless of dtype; dtype only selects the
// serialized precision, and F32 tensors keep their storage snapped to float
// so checkpoints round-trip bit-exactly.
//
// Tensors are immutable once created except for gradient accumulation.
// data_mut() exists for optimizer steps and finite-difference probes, which
// run between tape recordings, never on a live graph.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double v);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    size_t rank() const { return shape().size(); }
    size_t numel() const;
    size_t extent(size_t axis) const;

    DType dtype() const;
    Tensor& set_dtype(DType dt);
    void quantize_f32();

    const std::vector<double>& data() const;
    std::vector<double>& data_mut();

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);

    bool has_grad() const;
    const std::vector<double>& grad() const;
    std::vector<double>& grad_mut();
    void zero_grad();

    Tensor clone() const;

    // Autograd plumbing, also used by modules that record custom ops:
    // mark this tensor as produced under the current tape epoch.
    void stamp_epoch();
    bool produced_this_epoch() const;
    bool is_leaf() const;

private:
    struct Node;
    std::shared_ptr<Node> node_;
};

// Thread-local gradient mode. Ops record adjoints only while enabled.
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Thread-local tape. Ops push backward closures in execution order; backward
// replays them in reverse. Closures capture Tensors by value, which keeps the
// nodes they touch alive.
void tape_record(std::function<void()> backward_fn);
void tape_clear();
size_t tape_size();

// Accumulates d(loss)/d(leaf) into grad of every requires_grad leaf, then
// clears the tape. loss must be scalar (numel 1). A loss that does not
// require grad just clears the tape. Calling backward twice on the same
// graph is an error.
void backward(const Tensor& loss);

// Elementwise ops. Shapes must match, or the smaller operand's shape must
// equal a trailing suffix of the larger's (broadcast over leading extents
// only). Rank-0 tensors broadcast as scalars.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor sqrt(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);

// Batched matmul: a is [*, m, k] and b is [*, k, n] with equal leading
// extents, or either operand is rank-2 and shared across the other's batch.
Tensor matmul(const Tensor& a, const Tensor& b);
// x [*, in] times w [in, out] plus bias [out] (bias optional: pass undefined).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

Tensor permute(const Tensor& a, const std::vector<size_t>& axes);
Tensor transpose_last2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor concat(const std::vector<Tensor>& parts, size_t axis);
Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len);

// out[i] = a.data[indices[i]] for indices[i] >= 0, else 0 (no gradient flows
// through the -1 slots). Covers patchify, token gather/scatter, and mask-token
// assembly as pure index maps.
Tensor gather_flat(const Tensor& a, std::shared_ptr<const std::vector<int64_t>> indices,
                   Shape out_shape);
// Tile a across new leading extents; adjoint sums over the replicas.
Tensor expand_leading(const Tensor& a, const Shape& lead);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, size_t axis);
Tensor mean_axis(const Tensor& a, size_t axis);

Tensor softmax_lastdim(const Tensor& a);
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps);
// logits [N, K], labels length N; returns mean cross-entropy as a scalar.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares backward() against central differences per coordinate of x.
// f must rebuild its graph from x on every call; relative error uses
// denominator max(|analytic|, |numeric|, 1e-8).
GradCheckReport grad_check(const std::function<Tensor(Tensor&)>& f, Tensor& x,
                           double eps = 1e-3);

} // namespace pmae
