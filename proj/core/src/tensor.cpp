#include "pbns/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace pbns {

namespace {

std::string shape_str(const std::vector<i64>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

i64 numel(const std::vector<i64>& shape) {
    i64 n = 1;
    for (i64 e : shape) n *= e;
    return n;
}

[[noreturn]] void shape_fail(Op op, const std::vector<Tensor>& in, const char* detail) {
    std::string msg = strformat("%s: %s; shapes:", op_name(op), detail);
    for (const auto& t : in) msg += " " + shape_str(t.shape());
    throw Error(msg);
}

// Tensors are rank <= 2; rank-1 is treated as a column (n x 1).
i64 trows(const Tensor& t) { return t.shape().empty() ? 1 : t.shape()[0]; }
i64 tcols(const Tensor& t) { return t.shape().size() < 2 ? 1 : t.shape()[1]; }

void cross3(const double* a, const double* b, double* out) {
    out[0] = a[1] * b[2] - a[2] * b[1];
    out[1] = a[2] * b[0] - a[0] * b[2];
    out[2] = a[0] * b[1] - a[1] * b[0];
}

void mat3_mul(const double* a, const double* b, double* out) {
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
}

void mat3_vec(const double* m, const double* v, double* out) {
    for (int i = 0; i < 3; ++i) out[i] = m[3 * i] * v[0] + m[3 * i + 1] * v[1] + m[3 * i + 2] * v[2];
}

}  // namespace

const char* op_name(Op op) {
    switch (op) {
        case Op::add: return "add";
        case Op::sub: return "sub";
        case Op::mul: return "mul";
        case Op::scalar_mul: return "scalar_mul";
        case Op::matmul: return "matmul";
        case Op::relu: return "relu";
        case Op::gather_rows: return "gather_rows";
        case Op::gather_cols: return "gather_cols";
        case Op::sum: return "sum";
        case Op::mean: return "mean";
        case Op::square: return "square";
        case Op::sqrt_op: return "sqrt";
        case Op::norm_rows: return "norm_rows";
        case Op::cross_rows: return "cross_rows";
        case Op::normalize_rows: return "normalize_rows";
        case Op::clamp_max_zero: return "clamp_max_zero";
        case Op::batched_rodrigues: return "batched_rodrigues";
        case Op::concat: return "concat";
        case Op::reshape: return "reshape";
        case Op::rows_matvec3: return "rows_matvec3";
        case Op::rows_dot: return "rows_dot";
        case Op::spmv_rows: return "spmv_rows";
        case Op::joint_deltas: return "joint_deltas";
        case Op::masked_softmax_rows: return "masked_softmax_rows";
    }
    return "?";
}

void check_finite(std::span<const double> v, const char* what) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw NumericError(strformat("%s: non-finite value %g at index %zu", what, v[i], i));
    }
}

std::vector<double> SparseMatrix::apply(std::span<const double> x, i64 ncols) const {
    std::vector<double> y(static_cast<size_t>(rows * ncols), 0.0);
    for (i64 r = 0; r < rows; ++r) {
        for (i64 k = offsets[r]; k < offsets[r + 1]; ++k) {
            const double w = vals[k];
            const double* xp = x.data() + idx[k] * ncols;
            double* yp = y.data() + r * ncols;
            for (i64 c = 0; c < ncols; ++c) yp[c] += w * xp[c];
        }
    }
    return y;
}

SparseMatrix SparseMatrix::transposed() const {
    SparseMatrix t;
    t.rows = cols;
    t.cols = rows;
    std::vector<i64> count(static_cast<size_t>(cols), 0);
    for (i64 k : idx) count[k]++;
    t.offsets.assign(static_cast<size_t>(cols) + 1, 0);
    for (i64 c = 0; c < cols; ++c) t.offsets[c + 1] = t.offsets[c] + count[c];
    t.idx.resize(idx.size());
    t.vals.resize(vals.size());
    std::vector<i64> cursor(t.offsets.begin(), t.offsets.end() - 1);
    for (i64 r = 0; r < rows; ++r) {
        for (i64 k = offsets[r]; k < offsets[r + 1]; ++k) {
            i64 pos = cursor[idx[k]]++;
            t.idx[pos] = r;
            t.vals[pos] = vals[k];
        }
    }
    return t;
}

std::array<double, 9> rodrigues_matrix(const double* v) {
    const double x = v[0], y = v[1], z = v[2];
    const double t2 = x * x + y * y + z * z;
    std::array<double, 9> r;
    if (t2 < 1e-16) {
        // I + [v]x + 0.5 [v]x^2, exact at zero
        r = {1.0 - 0.5 * (y * y + z * z), -z + 0.5 * x * y, y + 0.5 * x * z,
             z + 0.5 * x * y, 1.0 - 0.5 * (x * x + z * z), -x + 0.5 * y * z,
             -y + 0.5 * x * z, x + 0.5 * y * z, 1.0 - 0.5 * (x * x + y * y)};
        if (t2 == 0.0) r = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        return r;
    }
    const double th = std::sqrt(t2);
    const double c = std::cos(th), s = std::sin(th);
    const double kx = x / th, ky = y / th, kz = z / th;
    const double ic = 1.0 - c;
    r[0] = c + kx * kx * ic;
    r[1] = kx * ky * ic - kz * s;
    r[2] = kx * kz * ic + ky * s;
    r[3] = ky * kx * ic + kz * s;
    r[4] = c + ky * ky * ic;
    r[5] = ky * kz * ic - kx * s;
    r[6] = kz * kx * ic - ky * s;
    r[7] = kz * ky * ic + kx * s;
    r[8] = c + kz * kz * ic;
    return r;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::from_values(std::vector<i64> shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != static_cast<i64>(values.size()))
        throw Error(strformat("tensor: shape %s does not match %zu values", shape_str(shape).c_str(),
                              values.size()));
    check_finite(values, "tensor");
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->values = std::make_shared<std::vector<double>>(std::move(values));
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::zeros(std::vector<i64> shape, bool requires_grad) {
    return from_values(std::move(shape), std::vector<double>(static_cast<size_t>(numel(shape)), 0.0),
                       requires_grad);
}

Tensor Tensor::scalar(double v) { return from_values({1, 1}, {v}); }

i64 Tensor::rows() const { return trows(*this); }
i64 Tensor::cols() const { return tcols(*this); }

double Tensor::scalar_value() const {
    if (size() != 1) throw Error(strformat("scalar_value on tensor of shape %s", shape_str(shape()).c_str()));
    return (*d_->values)[0];
}

std::vector<double>& Tensor::grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values->size(), 0.0);
    return d_->grad;
}

const std::vector<double>& Tensor::grad() const {
    if (d_->grad.empty()) throw Error("gradient not computed for tensor " + d_->name);
    return d_->grad;
}

void Tensor::zero_grad() { d_->grad.assign(d_->values->size(), 0.0); }

Tensor Tensor::clone_shared_values() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = d_->requires_grad;
    t.d_->name = d_->name;
    return t;
}

Tensor Tensor::deep_copy() const {
    Tensor t = from_values(d_->shape, *d_->values, d_->requires_grad);
    t.d_->name = d_->name;
    return t;
}

// ---------------------------------------------------------------------------
// Forward kernels

namespace {

Tensor make_out(std::vector<i64> shape, std::vector<double> values) {
    // Outputs skip the finite scan; the tape boundary checks cover leaves and
    // the backward root.
    Tensor t;
    struct Access : Tensor {
        using Tensor::Tensor;
    };
    // from_values without the finite check:
    auto d = std::make_shared<TensorData>();
    if (numel(shape) != static_cast<i64>(values.size()))
        throw Error("internal: op output shape mismatch");
    d->shape = std::move(shape);
    d->values = std::make_shared<std::vector<double>>(std::move(values));
    // Place into a Tensor via from_values-equivalent layout.
    Tensor out = Tensor::from_values({1, 1}, {0.0});
    *out.data_ptr() = std::move(*d);
    return out;
}

enum class Bcast { same, scalar, row, colvec };

Bcast bcast_kind(Op op, const Tensor& a, const Tensor& b, bool allow_colvec) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::scalar;
    if (trows(b) == 1 && tcols(b) == tcols(a)) return Bcast::row;
    if (allow_colvec && tcols(b) == 1 && trows(b) == trows(a)) return Bcast::colvec;
    shape_fail(op, {a, b}, "incompatible shapes");
}

Tensor forward_values(Op op, const std::vector<Tensor>& in, const OpAttrs& attrs,
                      std::shared_ptr<std::vector<double>>& saved) {
    switch (op) {
        case Op::add:
        case Op::sub: {
            const Tensor& a = in[0];
            const Tensor& b = in[1];
            const double sign = (op == Op::sub) ? -1.0 : 1.0;
            Bcast k = bcast_kind(op, a, b, false);
            std::vector<double> out = a.values();
            const auto& bv = b.values();
            const i64 C = tcols(a);
            if (k == Bcast::same) {
                for (size_t i = 0; i < out.size(); ++i) out[i] += sign * bv[i];
            } else if (k == Bcast::scalar) {
                for (double& o : out) o += sign * bv[0];
            } else {  // row
                for (size_t i = 0; i < out.size(); ++i) out[i] += sign * bv[i % static_cast<size_t>(C)];
            }
            return make_out(a.shape(), std::move(out));
        }
        case Op::mul: {
            const Tensor& a = in[0];
            const Tensor& b = in[1];
            Bcast k = bcast_kind(op, a, b, true);
            std::vector<double> out = a.values();
            const auto& bv = b.values();
            const i64 C = tcols(a);
            if (k == Bcast::same) {
                for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
            } else if (k == Bcast::scalar) {
                for (double& o : out) o *= bv[0];
            } else if (k == Bcast::row) {
                for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % static_cast<size_t>(C)];
            } else {  // colvec: scale row r by bv[r]
                for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i / static_cast<size_t>(C)];
            }
            return make_out(a.shape(), std::move(out));
        }
        case Op::scalar_mul: {
            std::vector<double> out = in[0].values();
            for (double& o : out) o *= attrs.scalar;
            return make_out(in[0].shape(), std::move(out));
        }
        case Op::matmul: {
            const Tensor& a = in[0];
            const Tensor& b = in[1];
            const i64 M = trows(a), K = tcols(a), K2 = trows(b), N = tcols(b);
            if (K != K2) shape_fail(op, in, "inner dimensions differ");
            std::vector<double> out(static_cast<size_t>(M * N), 0.0);
            const double* ap = a.values().data();
            const double* bp = b.values().data();
            for (i64 m = 0; m < M; ++m) {
                double* op_ = out.data() + m * N;
                const double* ar = ap + m * K;
                for (i64 k = 0; k < K; ++k) {
                    const double av = ar[k];
                    if (av == 0.0) continue;
                    const double* br = bp + k * N;
                    for (i64 n = 0; n < N; ++n) op_[n] += av * br[n];
                }
            }
            return make_out({M, N}, std::move(out));
        }
        case Op::relu: {
            std::vector<double> out = in[0].values();
            for (double& o : out) o = o > 0.0 ? o : 0.0;
            return make_out(in[0].shape(), std::move(out));
        }
        case Op::gather_rows: {
            const Tensor& a = in[0];
            const auto& idx = *attrs.indices;
            const i64 C = tcols(a), N = trows(a);
            std::vector<double> out(idx.size() * static_cast<size_t>(C));
            for (size_t r = 0; r < idx.size(); ++r) {
                if (idx[r] < 0 || idx[r] >= N)
                    throw Error(strformat("gather_rows: index %lld out of range [0,%lld)",
                                          static_cast<long long>(idx[r]), static_cast<long long>(N)));
                std::memcpy(out.data() + r * static_cast<size_t>(C),
                            a.values().data() + idx[r] * C, sizeof(double) * static_cast<size_t>(C));
            }
            return make_out({static_cast<i64>(idx.size()), C}, std::move(out));
        }
        case Op::gather_cols: {
            const Tensor& a = in[0];
            const auto& idx = *attrs.indices;
            const i64 C = tcols(a), N = trows(a), M = static_cast<i64>(idx.size());
            std::vector<double> out(static_cast<size_t>(N * M));
            for (i64 r = 0; r < N; ++r)
                for (i64 j = 0; j < M; ++j) {
                    if (idx[j] < 0 || idx[j] >= C)
                        throw Error(strformat("gather_cols: index %lld out of range [0,%lld)",
                                              static_cast<long long>(idx[j]), static_cast<long long>(C)));
                    out[r * M + j] = a.values()[r * C + idx[j]];
                }
            return make_out({N, M}, std::move(out));
        }
        case Op::sum:
        case Op::mean: {
            double s = 0.0;
            for (double v : in[0].values()) s += v;
            if (op == Op::mean) s /= static_cast<double>(in[0].size());
            return make_out({1, 1}, {s});
        }
        case Op::square: {
            std::vector<double> out = in[0].values();
            for (double& o : out) o *= o;
            return make_out(in[0].shape(), std::move(out));
        }
        case Op::sqrt_op: {
            std::vector<double> out = in[0].values();
            for (double& o : out) {
                if (o < 0.0) throw Error(strformat("sqrt of negative value %g", o));
                o = std::sqrt(o);
            }
            return make_out(in[0].shape(), std::move(out));
        }
        case Op::norm_rows: {
            const Tensor& a = in[0];
            const i64 N = trows(a), C = tcols(a);
            std::vector<double> out(static_cast<size_t>(N));
            for (i64 r = 0; r < N; ++r) {
                double s = 0.0;
                const double* p = a.values().data() + r * C;
                for (i64 c = 0; c < C; ++c) s += p[c] * p[c];
                out[r] = std::sqrt(s);
            }
            return make_out({N, 1}, std::move(out));
        }
        case Op::cross_rows: {
            const Tensor& a = in[0];
            const Tensor& b = in[1];
            if (a.shape() != b.shape() || tcols(a) != 3) shape_fail(op, in, "expects matching N x 3");
            const i64 N = trows(a);
            std::vector<double> out(static_cast<size_t>(N * 3));
            for (i64 r = 0; r < N; ++r)
                cross3(a.values().data() + r * 3, b.values().data() + r * 3, out.data() + r * 3);
            return make_out({N, 3}, std::move(out));
        }
        case Op::normalize_rows: {
            const Tensor& a = in[0];
            const i64 N = trows(a), C = tcols(a);
            std::vector<double> out(a.values());
            saved = std::make_shared<std::vector<double>>(static_cast<size_t>(N));
            for (i64 r = 0; r < N; ++r) {
                double s = 0.0;
                double* p = out.data() + r * C;
                for (i64 c = 0; c < C; ++c) s += p[c] * p[c];
                const double n = std::sqrt(s);
                const double d = n > attrs.eps ? n : attrs.eps;
                (*saved)[r] = d;
                for (i64 c = 0; c < C; ++c) p[c] /= d;
            }
            return make_out(a.shape(), std::move(out));
        }
        case Op::clamp_max_zero: {
            std::vector<double> out = in[0].values();
            for (double& o : out) o = o < 0.0 ? o : 0.0;
            return make_out(in[0].shape(), std::move(out));
        }
        case Op::batched_rodrigues: {
            const Tensor& a = in[0];
            if (tcols(a) != 3) shape_fail(op, in, "expects K x 3");
            const i64 K = trows(a);
            std::vector<double> out(static_cast<size_t>(K * 9));
            for (i64 k = 0; k < K; ++k) {
                auto r = rodrigues_matrix(a.values().data() + k * 3);
                std::memcpy(out.data() + k * 9, r.data(), sizeof(double) * 9);
            }
            return make_out({K, 9}, std::move(out));
        }
        case Op::concat: {
            if (in.empty()) shape_fail(op, in, "needs at least one input");
            if (attrs.axis == 0) {
                const i64 C = tcols(in[0]);
                i64 N = 0;
                for (const auto& t : in) {
                    if (tcols(t) != C) shape_fail(op, in, "column counts differ for axis-0 concat");
                    N += trows(t);
                }
                std::vector<double> out;
                out.reserve(static_cast<size_t>(N * C));
                for (const auto& t : in) out.insert(out.end(), t.values().begin(), t.values().end());
                return make_out({N, C}, std::move(out));
            }
            const i64 N = trows(in[0]);
            i64 C = 0;
            for (const auto& t : in) {
                if (trows(t) != N) shape_fail(op, in, "row counts differ for axis-1 concat");
                C += tcols(t);
            }
            std::vector<double> out(static_cast<size_t>(N * C));
            i64 off = 0;
            for (const auto& t : in) {
                const i64 tc = tcols(t);
                for (i64 r = 0; r < N; ++r)
                    std::memcpy(out.data() + r * C + off, t.values().data() + r * tc,
                                sizeof(double) * static_cast<size_t>(tc));
                off += tc;
            }
            return make_out({N, C}, std::move(out));
        }
        case Op::reshape: {
            if (numel(attrs.out_shape) != in[0].size()) shape_fail(op, in, "element count changes");
            return make_out(attrs.out_shape, in[0].values());
        }
        case Op::rows_matvec3: {
            const Tensor& m = in[0];
            const Tensor& v = in[1];
            if (tcols(m) != 9 || tcols(v) != 3 || trows(m) != trows(v))
                shape_fail(op, in, "expects N x 9 and N x 3");
            const i64 N = trows(m);
            std::vector<double> out(static_cast<size_t>(N * 3));
            for (i64 r = 0; r < N; ++r)
                mat3_vec(m.values().data() + r * 9, v.values().data() + r * 3, out.data() + r * 3);
            return make_out({N, 3}, std::move(out));
        }
        case Op::rows_dot: {
            const Tensor& a = in[0];
            const Tensor& b = in[1];
            if (a.shape() != b.shape()) shape_fail(op, in, "shapes differ");
            const i64 N = trows(a), C = tcols(a);
            std::vector<double> out(static_cast<size_t>(N), 0.0);
            for (i64 r = 0; r < N; ++r) {
                double s = 0.0;
                for (i64 c = 0; c < C; ++c) s += a.values()[r * C + c] * b.values()[r * C + c];
                out[r] = s;
            }
            return make_out({N, 1}, std::move(out));
        }
        case Op::spmv_rows: {
            const Tensor& x = in[0];
            const auto& sp = attrs.sparse->a;
            if (trows(x) != sp.cols) shape_fail(op, in, "sparse matrix column count mismatch");
            auto out = sp.apply(x.values(), tcols(x));
            return make_out({sp.rows, tcols(x)}, std::move(out));
        }
        case Op::joint_deltas: {
            const Tensor& rot = in[0];
            const auto& sk = *attrs.skeleton;
            if (trows(rot) != sk.K || tcols(rot) != 9) shape_fail(op, in, "expects K x 9 rotations");
            const i64 K = sk.K;
            // saved: per joint [dA (9) | B (3)] where dA = R_global - I and
            // B is accumulated translation drift. Exactly zero at rest pose.
            saved = std::make_shared<std::vector<double>>(static_cast<size_t>(K * 12), 0.0);
            std::vector<double> out(static_cast<size_t>(K * 12));
            for (i64 oi = 0; oi < K; ++oi) {
                const i64 k = sk.order[oi];
                const i64 p = sk.parents[k];
                const double* rk = rot.values().data() + k * 9;
                double* dA = saved->data() + k * 12;
                double* B = saved->data() + k * 12 + 9;
                double rk_minus_i[9];
                for (int i = 0; i < 9; ++i) rk_minus_i[i] = rk[i] - (i % 4 == 0 ? 1.0 : 0.0);
                if (p < 0) {
                    std::memcpy(dA, rk_minus_i, sizeof rk_minus_i);
                    B[0] = B[1] = B[2] = 0.0;
                } else {
                    const double* dAp = saved->data() + p * 12;
                    const double* Bp = saved->data() + p * 12 + 9;
                    double prod[9];
                    mat3_mul(dAp, rk, prod);
                    for (int i = 0; i < 9; ++i) dA[i] = prod[i] + rk_minus_i[i];
                    double d[3];
                    for (int i = 0; i < 3; ++i)
                        d[i] = sk.rest_joints[k * 3 + i] - sk.rest_joints[p * 3 + i];
                    double offs[3];
                    mat3_vec(dAp, d, offs);
                    for (int i = 0; i < 3; ++i) B[i] = Bp[i] + offs[i];
                }
                double tj[3];
                mat3_vec(dA, sk.rest_joints.data() + k * 3, tj);
                double* orow = out.data() + k * 12;
                std::memcpy(orow, dA, sizeof(double) * 9);
                for (int i = 0; i < 3; ++i) orow[9 + i] = B[i] - tj[i];
            }
            return make_out({K, 12}, std::move(out));
        }
        case Op::masked_softmax_rows: {
            const Tensor& l = in[0];
            const auto& sp = *attrs.support;
            if (trows(l) != sp.rows || tcols(l) != sp.cols)
                shape_fail(op, in, "support mask shape mismatch");
            std::vector<double> out(l.values().size(), 0.0);
            for (i64 r = 0; r < sp.rows; ++r) {
                double mx = -1e300;
                for (i64 k = sp.offsets[r]; k < sp.offsets[r + 1]; ++k)
                    mx = std::max(mx, l.values()[r * sp.cols + sp.idx[k]]);
                double z = 0.0;
                for (i64 k = sp.offsets[r]; k < sp.offsets[r + 1]; ++k)
                    z += std::exp(l.values()[r * sp.cols + sp.idx[k]] - mx);
                for (i64 k = sp.offsets[r]; k < sp.offsets[r + 1]; ++k) {
                    const i64 c = sp.idx[k];
                    out[r * sp.cols + c] = std::exp(l.values()[r * sp.cols + c] - mx) / z;
                }
            }
            return make_out(l.shape(), std::move(out));
        }
    }
    throw Error("unknown op");
}

// ---------------------------------------------------------------------------
// Backward kernels. Each accumulates into input grads; inputs without
// requires_grad are skipped by the caller via want().

struct GradCtx {
    const std::vector<Tensor>& in;
    const Tensor& out;
    const OpAttrs& attrs;
    const std::vector<double>* saved;
    const std::vector<double>& g;  // cotangent of out
    bool want(size_t i) const { return in[i].requires_grad(); }
    std::vector<double>& gin(size_t i) const { return const_cast<Tensor&>(in[i]).grad(); }
};

void backward_op(Op op, const GradCtx& c) {
    switch (op) {
        case Op::add:
        case Op::sub: {
            const double sign = (op == Op::sub) ? -1.0 : 1.0;
            const Tensor& a = c.in[0];
            const Tensor& b = c.in[1];
            Bcast k = bcast_kind(op, a, b, false);
            if (c.want(0)) {
                auto& ga = c.gin(0);
                for (size_t i = 0; i < c.g.size(); ++i) ga[i] += c.g[i];
            }
            if (c.want(1)) {
                auto& gb = c.gin(1);
                const i64 C = tcols(a);
                if (k == Bcast::same) {
                    for (size_t i = 0; i < c.g.size(); ++i) gb[i] += sign * c.g[i];
                } else if (k == Bcast::scalar) {
                    double s = 0.0;
                    for (double v : c.g) s += v;
                    gb[0] += sign * s;
                } else {
                    for (size_t i = 0; i < c.g.size(); ++i)
                        gb[i % static_cast<size_t>(C)] += sign * c.g[i];
                }
            }
            break;
        }
        case Op::mul: {
            const Tensor& a = c.in[0];
            const Tensor& b = c.in[1];
            Bcast k = bcast_kind(op, a, b, true);
            const i64 C = tcols(a);
            const auto& av = a.values();
            const auto& bv = b.values();
            if (c.want(0)) {
                auto& ga = c.gin(0);
                if (k == Bcast::same)
                    for (size_t i = 0; i < c.g.size(); ++i) ga[i] += c.g[i] * bv[i];
                else if (k == Bcast::scalar)
                    for (size_t i = 0; i < c.g.size(); ++i) ga[i] += c.g[i] * bv[0];
                else if (k == Bcast::row)
                    for (size_t i = 0; i < c.g.size(); ++i)
                        ga[i] += c.g[i] * bv[i % static_cast<size_t>(C)];
                else
                    for (size_t i = 0; i < c.g.size(); ++i)
                        ga[i] += c.g[i] * bv[i / static_cast<size_t>(C)];
            }
            if (c.want(1)) {
                auto& gb = c.gin(1);
                if (k == Bcast::same)
                    for (size_t i = 0; i < c.g.size(); ++i) gb[i] += c.g[i] * av[i];
                else if (k == Bcast::scalar) {
                    double s = 0.0;
                    for (size_t i = 0; i < c.g.size(); ++i) s += c.g[i] * av[i];
                    gb[0] += s;
                } else if (k == Bcast::row)
                    for (size_t i = 0; i < c.g.size(); ++i)
                        gb[i % static_cast<size_t>(C)] += c.g[i] * av[i];
                else
                    for (size_t i = 0; i < c.g.size(); ++i)
                        gb[i / static_cast<size_t>(C)] += c.g[i] * av[i];
            }
            break;
        }
        case Op::scalar_mul: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                for (size_t i = 0; i < c.g.size(); ++i) ga[i] += c.g[i] * c.attrs.scalar;
            }
            break;
        }
        case Op::matmul: {
            const Tensor& a = c.in[0];
            const Tensor& b = c.in[1];
            const i64 M = trows(a), K = tcols(a), N = tcols(b);
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const double* bp = b.values().data();
                for (i64 m = 0; m < M; ++m)
                    for (i64 k = 0; k < K; ++k) {
                        double s = 0.0;
                        const double* gr = c.g.data() + m * N;
                        const double* br = bp + k * N;
                        for (i64 n = 0; n < N; ++n) s += gr[n] * br[n];
                        ga[m * K + k] += s;
                    }
            }
            if (c.want(1)) {
                auto& gb = c.gin(1);
                const double* ap = a.values().data();
                for (i64 m = 0; m < M; ++m)
                    for (i64 k = 0; k < K; ++k) {
                        const double av = ap[m * K + k];
                        if (av == 0.0) continue;
                        const double* gr = c.g.data() + m * N;
                        double* gbr = gb.data() + k * N;
                        for (i64 n = 0; n < N; ++n) gbr[n] += av * gr[n];
                    }
            }
            break;
        }
        case Op::relu: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& av = c.in[0].values();
                for (size_t i = 0; i < c.g.size(); ++i)
                    if (av[i] > 0.0) ga[i] += c.g[i];
            }
            break;
        }
        case Op::gather_rows: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& idx = *c.attrs.indices;
                const i64 C = tcols(c.in[0]);
                for (size_t r = 0; r < idx.size(); ++r) {
                    double* gp = ga.data() + idx[r] * C;
                    const double* gr = c.g.data() + r * static_cast<size_t>(C);
                    for (i64 ci = 0; ci < C; ++ci) gp[ci] += gr[ci];
                }
            }
            break;
        }
        case Op::gather_cols: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& idx = *c.attrs.indices;
                const i64 C = tcols(c.in[0]), N = trows(c.in[0]), M = static_cast<i64>(idx.size());
                for (i64 r = 0; r < N; ++r)
                    for (i64 j = 0; j < M; ++j) ga[r * C + idx[j]] += c.g[r * M + j];
            }
            break;
        }
        case Op::sum: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                for (double& v : ga) v += c.g[0];
            }
            break;
        }
        case Op::mean: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const double s = c.g[0] / static_cast<double>(c.in[0].size());
                for (double& v : ga) v += s;
            }
            break;
        }
        case Op::square: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& av = c.in[0].values();
                for (size_t i = 0; i < c.g.size(); ++i) ga[i] += 2.0 * av[i] * c.g[i];
            }
            break;
        }
        case Op::sqrt_op: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& ov = c.out.values();
                for (size_t i = 0; i < c.g.size(); ++i)
                    ga[i] += c.g[i] / (2.0 * std::max(ov[i], 1e-150));
            }
            break;
        }
        case Op::norm_rows: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const i64 N = trows(c.in[0]), C = tcols(c.in[0]);
                const auto& av = c.in[0].values();
                const auto& ov = c.out.values();
                for (i64 r = 0; r < N; ++r) {
                    const double d = std::max(ov[r], 1e-30);
                    const double gr = c.g[r] / d;
                    for (i64 ci = 0; ci < C; ++ci) ga[r * C + ci] += gr * av[r * C + ci];
                }
            }
            break;
        }
        case Op::cross_rows: {
            const i64 N = trows(c.in[0]);
            const auto& av = c.in[0].values();
            const auto& bv = c.in[1].values();
            for (i64 r = 0; r < N; ++r) {
                const double* gr = c.g.data() + r * 3;
                if (c.want(0)) {
                    double t[3];
                    cross3(bv.data() + r * 3, gr, t);
                    auto& ga = c.gin(0);
                    for (int i = 0; i < 3; ++i) ga[r * 3 + i] += t[i];
                }
                if (c.want(1)) {
                    double t[3];
                    cross3(gr, av.data() + r * 3, t);
                    auto& gb = c.gin(1);
                    for (int i = 0; i < 3; ++i) gb[r * 3 + i] += t[i];
                }
            }
            break;
        }
        case Op::normalize_rows: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const i64 N = trows(c.in[0]), C = tcols(c.in[0]);
                const auto& yv = c.out.values();
                for (i64 r = 0; r < N; ++r) {
                    const double d = (*c.saved)[r];
                    const double* y = yv.data() + r * C;
                    const double* g = c.g.data() + r * C;
                    bool clamped = d <= c.attrs.eps;
                    if (clamped) {
                        for (i64 ci = 0; ci < C; ++ci) ga[r * C + ci] += g[ci] / d;
                    } else {
                        double yg = 0.0;
                        for (i64 ci = 0; ci < C; ++ci) yg += y[ci] * g[ci];
                        for (i64 ci = 0; ci < C; ++ci) ga[r * C + ci] += (g[ci] - y[ci] * yg) / d;
                    }
                }
            }
            break;
        }
        case Op::clamp_max_zero: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& av = c.in[0].values();
                // subgradient 0 at exactly zero
                for (size_t i = 0; i < c.g.size(); ++i)
                    if (av[i] < 0.0) ga[i] += c.g[i];
            }
            break;
        }
        case Op::batched_rodrigues: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const i64 K = trows(c.in[0]);
                const auto& av = c.in[0].values();
                const auto& rv = c.out.values();
                for (i64 k = 0; k < K; ++k) {
                    const double* v = av.data() + k * 3;
                    const double* R = rv.data() + k * 9;
                    const double* G = c.g.data() + k * 9;
                    const double t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
                    double gv[3];
                    if (t2 < 1e-16) {
                        gv[0] = -G[5] + G[7];
                        gv[1] = G[2] - G[6];
                        gv[2] = -G[1] + G[3];
                    } else {
                        // P = G R^T; q = antisymmetric part of P as a vector
                        double P[9];
                        for (int i = 0; i < 3; ++i)
                            for (int j = 0; j < 3; ++j)
                                P[3 * i + j] = G[3 * i] * R[3 * j] + G[3 * i + 1] * R[3 * j + 1] +
                                               G[3 * i + 2] * R[3 * j + 2];
                        const double q[3] = {P[7] - P[5], P[2] - P[6], P[3] - P[1]};
                        double qv[3];
                        cross3(q, v, qv);
                        const double vq = v[0] * q[0] + v[1] * q[1] + v[2] * q[2];
                        for (int i = 0; i < 3; ++i) {
                            // column i of (I - R), dotted with q x v
                            const double ci[3] = {(i == 0) - R[i], (i == 1) - R[3 + i],
                                                  (i == 2) - R[6 + i]};
                            const double cqv = ci[0] * qv[0] + ci[1] * qv[1] + ci[2] * qv[2];
                            gv[i] = (v[i] * vq + cqv) / t2;
                        }
                    }
                    for (int i = 0; i < 3; ++i) ga[k * 3 + i] += gv[i];
                }
            }
            break;
        }
        case Op::concat: {
            if (c.attrs.axis == 0) {
                size_t off = 0;
                for (size_t i = 0; i < c.in.size(); ++i) {
                    const size_t n = c.in[i].values().size();
                    if (c.want(i)) {
                        auto& gi = c.gin(i);
                        for (size_t j = 0; j < n; ++j) gi[j] += c.g[off + j];
                    }
                    off += n;
                }
            } else {
                const i64 N = trows(c.in[0]);
                i64 C = 0;
                for (const auto& t : c.in) C += tcols(t);
                i64 off = 0;
                for (size_t i = 0; i < c.in.size(); ++i) {
                    const i64 tc = tcols(c.in[i]);
                    if (c.want(i)) {
                        auto& gi = c.gin(i);
                        for (i64 r = 0; r < N; ++r)
                            for (i64 ci = 0; ci < tc; ++ci) gi[r * tc + ci] += c.g[r * C + off + ci];
                    }
                    off += tc;
                }
            }
            break;
        }
        case Op::reshape: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                for (size_t i = 0; i < c.g.size(); ++i) ga[i] += c.g[i];
            }
            break;
        }
        case Op::rows_matvec3: {
            const i64 N = trows(c.in[0]);
            const auto& mv = c.in[0].values();
            const auto& vv = c.in[1].values();
            for (i64 r = 0; r < N; ++r) {
                const double* g = c.g.data() + r * 3;
                if (c.want(0)) {
                    auto& gm = c.gin(0);
                    const double* v = vv.data() + r * 3;
                    for (int i = 0; i < 3; ++i)
                        for (int j = 0; j < 3; ++j) gm[r * 9 + 3 * i + j] += g[i] * v[j];
                }
                if (c.want(1)) {
                    auto& gv = c.gin(1);
                    const double* m = mv.data() + r * 9;
                    for (int j = 0; j < 3; ++j)
                        gv[r * 3 + j] += m[j] * g[0] + m[3 + j] * g[1] + m[6 + j] * g[2];
                }
            }
            break;
        }
        case Op::rows_dot: {
            const i64 N = trows(c.in[0]), C = tcols(c.in[0]);
            const auto& av = c.in[0].values();
            const auto& bv = c.in[1].values();
            for (i64 r = 0; r < N; ++r) {
                const double gr = c.g[r];
                if (c.want(0)) {
                    auto& ga = c.gin(0);
                    for (i64 ci = 0; ci < C; ++ci) ga[r * C + ci] += gr * bv[r * C + ci];
                }
                if (c.want(1)) {
                    auto& gb = c.gin(1);
                    for (i64 ci = 0; ci < C; ++ci) gb[r * C + ci] += gr * av[r * C + ci];
                }
            }
            break;
        }
        case Op::spmv_rows: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& at = c.attrs.sparse->at;
                const i64 C = tcols(c.in[0]);
                for (i64 r = 0; r < at.rows; ++r)
                    for (i64 k = at.offsets[r]; k < at.offsets[r + 1]; ++k) {
                        const double w = at.vals[k];
                        const double* gp = c.g.data() + at.idx[k] * C;
                        double* gap = ga.data() + r * C;
                        for (i64 ci = 0; ci < C; ++ci) gap[ci] += w * gp[ci];
                    }
            }
            break;
        }
        case Op::joint_deltas: {
            if (!c.want(0)) break;
            auto& grot = c.gin(0);
            const auto& sk = *c.attrs.skeleton;
            const i64 K = sk.K;
            const auto& rv = c.in[0].values();
            const auto& sv = *c.saved;  // [dA | B] per joint
            std::vector<double> gdA(static_cast<size_t>(K * 9), 0.0);
            std::vector<double> gB(static_cast<size_t>(K * 3), 0.0);
            // out row k: [dA_k | B_k - dA_k J_k]
            for (i64 k = 0; k < K; ++k) {
                const double* g = c.g.data() + k * 12;
                const double* J = sk.rest_joints.data() + k * 3;
                for (int i = 0; i < 9; ++i) gdA[k * 9 + i] += g[i];
                for (int i = 0; i < 3; ++i) {
                    gB[k * 3 + i] += g[9 + i];
                    for (int j = 0; j < 3; ++j) gdA[k * 9 + 3 * i + j] -= g[9 + i] * J[j];
                }
            }
            for (i64 oi = K - 1; oi >= 0; --oi) {
                const i64 k = sk.order[oi];
                const i64 p = sk.parents[k];
                const double* rk = rv.data() + k * 9;
                const double* gk = gdA.data() + k * 9;
                if (p < 0) {
                    for (int i = 0; i < 9; ++i) grot[k * 9 + i] += gk[i];
                    continue;
                }
                const double* dAp = sv.data() + p * 12;
                // dA_k = dA_p R_k + (R_k - I)
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) {
                        double s = gk[3 * i + j];  // direct R_k term
                        for (int m = 0; m < 3; ++m) s += dAp[3 * m + i] * gk[3 * m + j];
                        grot[k * 9 + 3 * i + j] += s;
                    }
                for (int i = 0; i < 3; ++i)
                    for (int j = 0; j < 3; ++j) {
                        double s = 0.0;
                        for (int m = 0; m < 3; ++m) s += gk[3 * i + m] * rk[3 * j + m];
                        gdA[p * 9 + 3 * i + j] += s;
                    }
                // B_k = B_p + dA_p d_k
                const double* gbk = gB.data() + k * 3;
                double d[3];
                for (int i = 0; i < 3; ++i)
                    d[i] = sk.rest_joints[k * 3 + i] - sk.rest_joints[p * 3 + i];
                for (int i = 0; i < 3; ++i) {
                    gB[p * 3 + i] += gbk[i];
                    for (int j = 0; j < 3; ++j) gdA[p * 9 + 3 * i + j] += gbk[i] * d[j];
                }
            }
            break;
        }
        case Op::masked_softmax_rows: {
            if (c.want(0)) {
                auto& ga = c.gin(0);
                const auto& sp = *c.attrs.support;
                const auto& yv = c.out.values();
                for (i64 r = 0; r < sp.rows; ++r) {
                    double s = 0.0;
                    for (i64 k = sp.offsets[r]; k < sp.offsets[r + 1]; ++k) {
                        const i64 ci = sp.idx[k];
                        s += c.g[r * sp.cols + ci] * yv[r * sp.cols + ci];
                    }
                    for (i64 k = sp.offsets[r]; k < sp.offsets[r + 1]; ++k) {
                        const i64 ci = sp.idx[k];
                        ga[r * sp.cols + ci] += yv[r * sp.cols + ci] * (c.g[r * sp.cols + ci] - s);
                    }
                }
            }
            break;
        }
    }
}

}  // namespace

Tensor Tape::forward(Op op, const std::vector<Tensor>& inputs, OpAttrs attrs) {
    std::shared_ptr<std::vector<double>> saved;
    Tensor out = forward_values(op, inputs, attrs, saved);
    bool track = false;
    for (const auto& t : inputs) track |= t.requires_grad();
    if (track) {
        out.set_requires_grad(true);
        entries_.push_back({op, inputs, out, std::move(attrs), std::move(saved)});
    }
    return out;
}

Tensor Tape::eval(Op op, const std::vector<Tensor>& inputs, OpAttrs attrs) {
    std::shared_ptr<std::vector<double>> saved;
    return forward_values(op, inputs, attrs, saved);
}

void Tape::backward(const Tensor& root) {
    if (root.size() != 1) throw Error("backward: root must be a scalar tensor");
    if (!std::isfinite(root.value_at(0)))
        throw NumericError(strformat("backward: non-finite root value %g", root.value_at(0)));
    if (!root.requires_grad()) return;  // constant root, nothing recorded
    root.data_ptr()->grad.assign(1, 1.0);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->out.has_grad()) continue;  // not on the path to the root
        GradCtx ctx{it->in, it->out, it->attrs, it->saved.get(), it->out.grad()};
        backward_op(it->op, ctx);
    }
}

namespace ops {

Tensor add(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::add, {a, b}) : Tape::eval(Op::add, {a, b});
}
Tensor sub(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::sub, {a, b}) : Tape::eval(Op::sub, {a, b});
}
Tensor mul(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::mul, {a, b}) : Tape::eval(Op::mul, {a, b});
}
Tensor scalar_mul(Tape* t, const Tensor& a, double s) {
    OpAttrs at;
    at.scalar = s;
    return t ? t->forward(Op::scalar_mul, {a}, at) : Tape::eval(Op::scalar_mul, {a}, at);
}
Tensor matmul(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::matmul, {a, b}) : Tape::eval(Op::matmul, {a, b});
}
Tensor relu(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::relu, {a}) : Tape::eval(Op::relu, {a});
}
Tensor gather_rows(Tape* t, const Tensor& a, std::shared_ptr<const std::vector<i64>> idx) {
    OpAttrs at;
    at.indices = std::move(idx);
    return t ? t->forward(Op::gather_rows, {a}, at) : Tape::eval(Op::gather_rows, {a}, at);
}
Tensor gather_cols(Tape* t, const Tensor& a, std::shared_ptr<const std::vector<i64>> idx) {
    OpAttrs at;
    at.indices = std::move(idx);
    return t ? t->forward(Op::gather_cols, {a}, at) : Tape::eval(Op::gather_cols, {a}, at);
}
Tensor sum(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::sum, {a}) : Tape::eval(Op::sum, {a});
}
Tensor mean(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::mean, {a}) : Tape::eval(Op::mean, {a});
}
Tensor square(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::square, {a}) : Tape::eval(Op::square, {a});
}
Tensor sqrt(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::sqrt_op, {a}) : Tape::eval(Op::sqrt_op, {a});
}
Tensor norm_rows(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::norm_rows, {a}) : Tape::eval(Op::norm_rows, {a});
}
Tensor cross_rows(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::cross_rows, {a, b}) : Tape::eval(Op::cross_rows, {a, b});
}
Tensor normalize_rows(Tape* t, const Tensor& a, double eps) {
    OpAttrs at;
    at.eps = eps;
    return t ? t->forward(Op::normalize_rows, {a}, at) : Tape::eval(Op::normalize_rows, {a}, at);
}
Tensor clamp_max_zero(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::clamp_max_zero, {a}) : Tape::eval(Op::clamp_max_zero, {a});
}
Tensor batched_rodrigues(Tape* t, const Tensor& a) {
    return t ? t->forward(Op::batched_rodrigues, {a}) : Tape::eval(Op::batched_rodrigues, {a});
}
Tensor concat(Tape* t, const std::vector<Tensor>& parts, i64 axis) {
    OpAttrs at;
    at.axis = axis;
    return t ? t->forward(Op::concat, parts, at) : Tape::eval(Op::concat, parts, at);
}
Tensor reshape(Tape* t, const Tensor& a, std::vector<i64> shape) {
    OpAttrs at;
    at.out_shape = std::move(shape);
    return t ? t->forward(Op::reshape, {a}, at) : Tape::eval(Op::reshape, {a}, at);
}
Tensor rows_matvec3(Tape* t, const Tensor& m, const Tensor& v) {
    return t ? t->forward(Op::rows_matvec3, {m, v}) : Tape::eval(Op::rows_matvec3, {m, v});
}
Tensor rows_dot(Tape* t, const Tensor& a, const Tensor& b) {
    return t ? t->forward(Op::rows_dot, {a, b}) : Tape::eval(Op::rows_dot, {a, b});
}
Tensor spmv_rows(Tape* t, const Tensor& x, std::shared_ptr<const SparseOpData> sp) {
    OpAttrs at;
    at.sparse = std::move(sp);
    return t ? t->forward(Op::spmv_rows, {x}, at) : Tape::eval(Op::spmv_rows, {x}, at);
}
Tensor joint_deltas(Tape* t, const Tensor& rotations, std::shared_ptr<const SkeletonRef> skel) {
    OpAttrs at;
    at.skeleton = std::move(skel);
    return t ? t->forward(Op::joint_deltas, {rotations}, at) : Tape::eval(Op::joint_deltas, {rotations}, at);
}
Tensor masked_softmax_rows(Tape* t, const Tensor& logits, std::shared_ptr<const RowSupport> support) {
    OpAttrs at;
    at.support = std::move(support);
    return t ? t->forward(Op::masked_softmax_rows, {logits}, at)
             : Tape::eval(Op::masked_softmax_rows, {logits}, at);
}

}  // namespace ops

}  // namespace pbns
