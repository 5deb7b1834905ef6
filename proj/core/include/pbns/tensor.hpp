#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pbns/common.hpp"

namespace pbns {

// Dense 64-bit real tensors with reverse-mode autodiff over a flat tape.
// The op set is fixed: it covers exactly what the deformation model and the
// energy terms need. Shapes are rank <= 2 in practice (scalars are 1x1,
// vectors are n x 1 unless reshaped).

enum class Op {
    add,
    sub,
    mul,
    scalar_mul,
    matmul,
    relu,
    gather_rows,
    gather_cols,
    sum,
    mean,
    square,
    sqrt_op,
    norm_rows,
    cross_rows,
    normalize_rows,
    clamp_max_zero,
    batched_rodrigues,
    concat,
    reshape,
    rows_matvec3,
    rows_dot,
    spmv_rows,
    joint_deltas,
    masked_softmax_rows,
};

const char* op_name(Op op);

/// Fixed sparse matrix used by spmv_rows. `at` holds the transpose for the
/// backward pass; both are built once and shared between tapes.
struct SparseMatrix {
    i64 rows = 0;
    i64 cols = 0;
    std::vector<i64> offsets;  // rows+1
    std::vector<i64> idx;
    std::vector<double> vals;

    std::vector<double> apply(std::span<const double> x, i64 ncols) const;
    SparseMatrix transposed() const;
};

struct SparseOpData {
    SparseMatrix a;
    SparseMatrix at;
    static std::shared_ptr<SparseOpData> make(SparseMatrix m) {
        auto d = std::make_shared<SparseOpData>();
        d->at = m.transposed();
        d->a = std::move(m);
        return d;
    }
};

/// Skeleton topology captured by the joint_deltas op: parents (root = -1),
/// rest joint positions (K x 3) and a topological joint order.
struct SkeletonRef {
    i64 K = 0;
    std::vector<i64> parents;
    std::vector<double> rest_joints;
    std::vector<i64> order;
};

/// Row support mask for masked_softmax_rows, CSR over allowed columns.
struct RowSupport {
    i64 rows = 0;
    i64 cols = 0;
    std::vector<i64> offsets;
    std::vector<i64> idx;
};

struct OpAttrs {
    double scalar = 0.0;
    double eps = 0.0;
    i64 axis = 0;
    std::vector<i64> out_shape;
    std::shared_ptr<const std::vector<i64>> indices;
    std::shared_ptr<const SparseOpData> sparse;
    std::shared_ptr<const SkeletonRef> skeleton;
    std::shared_ptr<const RowSupport> support;
};

struct TensorData {
    std::vector<i64> shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad;  // empty until touched by backward
    bool requires_grad = false;
    std::string name;
};

class Tensor {
  public:
    Tensor() = default;

    static Tensor from_values(std::vector<i64> shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(std::vector<i64> shape, bool requires_grad = false);
    static Tensor scalar(double v);

    bool defined() const { return d_ != nullptr; }
    const std::vector<i64>& shape() const { return d_->shape; }
    i64 size() const { return static_cast<i64>(d_->values->size()); }
    i64 rows() const;
    i64 cols() const;

    std::vector<double>& values() { return *d_->values; }
    const std::vector<double>& values() const { return *d_->values; }
    double value_at(i64 i) const { return (*d_->values)[static_cast<size_t>(i)]; }
    double scalar_value() const;

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }
    Tensor& named(const std::string& n) {
        d_->name = n;
        return *this;
    }
    const std::string& name() const { return d_->name; }

    bool has_grad() const { return !d_->grad.empty(); }
    std::vector<double>& grad();              // allocates zeros on first use
    const std::vector<double>& grad() const;  // throws if absent
    void zero_grad();

    /// Shares the value storage, drops gradient state. Workers clone
    /// parameters with this at batch start.
    Tensor clone_shared_values() const;
    Tensor deep_copy() const;

    TensorData* data_ptr() const { return d_.get(); }

  private:
    std::shared_ptr<TensorData> d_;
};

/// Records op applications in execution order; backward replays them in
/// reverse exactly once. Rebuilt from scratch every forward pass.
class Tape {
  public:
    Tensor forward(Op op, const std::vector<Tensor>& inputs, OpAttrs attrs = {});
    void backward(const Tensor& root);

    size_t num_entries() const { return entries_.size(); }
    void clear() { entries_.clear(); }

    /// Evaluate without recording (tape-free path used for body skinning,
    /// validation and inference checks).
    static Tensor eval(Op op, const std::vector<Tensor>& inputs, OpAttrs attrs = {});

  private:
    struct Entry {
        Op op;
        std::vector<Tensor> in;
        Tensor out;
        OpAttrs attrs;
        std::shared_ptr<std::vector<double>> saved;
    };
    std::vector<Entry> entries_;
};

// Tape-aware builders. A null tape evaluates without recording.
namespace ops {

Tensor add(Tape* t, const Tensor& a, const Tensor& b);
Tensor sub(Tape* t, const Tensor& a, const Tensor& b);
Tensor mul(Tape* t, const Tensor& a, const Tensor& b);
Tensor scalar_mul(Tape* t, const Tensor& a, double s);
Tensor matmul(Tape* t, const Tensor& a, const Tensor& b);
Tensor relu(Tape* t, const Tensor& a);
Tensor gather_rows(Tape* t, const Tensor& a, std::shared_ptr<const std::vector<i64>> idx);
Tensor gather_cols(Tape* t, const Tensor& a, std::shared_ptr<const std::vector<i64>> idx);
Tensor sum(Tape* t, const Tensor& a);
Tensor mean(Tape* t, const Tensor& a);
Tensor square(Tape* t, const Tensor& a);
Tensor sqrt(Tape* t, const Tensor& a);
Tensor norm_rows(Tape* t, const Tensor& a);
Tensor cross_rows(Tape* t, const Tensor& a, const Tensor& b);
Tensor normalize_rows(Tape* t, const Tensor& a, double eps);
Tensor clamp_max_zero(Tape* t, const Tensor& a);
Tensor batched_rodrigues(Tape* t, const Tensor& axis_angles);  // K x 3 -> K x 9
Tensor concat(Tape* t, const std::vector<Tensor>& parts, i64 axis);
Tensor reshape(Tape* t, const Tensor& a, std::vector<i64> shape);
Tensor rows_matvec3(Tape* t, const Tensor& m, const Tensor& v);  // N x 9, N x 3 -> N x 3
Tensor rows_dot(Tape* t, const Tensor& a, const Tensor& b);      // N x C -> N x 1
Tensor spmv_rows(Tape* t, const Tensor& x, std::shared_ptr<const SparseOpData> sp);
Tensor joint_deltas(Tape* t, const Tensor& rotations, std::shared_ptr<const SkeletonRef> skel);
Tensor masked_softmax_rows(Tape* t, const Tensor& logits, std::shared_ptr<const RowSupport> support);

}  // namespace ops

/// Rotation matrix (row-major 3x3) from one axis-angle vector. Taylor branch
/// below 1e-8 keeps the zero vector and its neighborhood exact and smooth.
std::array<double, 9> rodrigues_matrix(const double* axis_angle);

void check_finite(std::span<const double> v, const char* what);

}  // namespace pbns
