#include "coot/tape.hpp"

#include <algorithm>
#include <cmath>

#define EIGEN_DONT_PARALLELIZE
#include <Eigen/Core>

namespace coot {

const char* op_name(Op op) {
    switch (op) {
        case Op::Const: return "const";
        case Op::Leaf: return "leaf";
        case Op::ParamLeaf: return "param";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::AddN: return "add_n";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::Relu: return "relu";
        case Op::Gelu: return "gelu";
        case Op::Sqrt: return "sqrt";
        case Op::Recip: return "recip";
        case Op::Softmax: return "softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::AddRow: return "add_row";
        case Op::AddCol: return "add_col";
        case Op::MulCol: return "mul_col";
        case Op::MulConst: return "mul_const";
        case Op::SumAll: return "sum_all";
        case Op::SumAxis0: return "sum_axis0";
        case Op::SumAxis1: return "sum_axis1";
        case Op::MaxAxis0: return "max_axis0";
        case Op::ConcatCols: return "concat_cols";
        case Op::ConcatRows: return "concat_rows";
        case Op::SliceCols: return "slice_cols";
        case Op::SliceRows: return "slice_rows";
        case Op::Diag: return "diag";
    }
    return "?";
}

namespace {

template <typename S>
struct View {
    const S* p = nullptr;
    std::size_t rows = 0, cols = 0;
    std::size_t size() const { return rows * cols; }
    S at(std::size_t r, std::size_t c) const { return p[r * cols + c]; }
};

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using EMap = Eigen::Map<EMat<S>>;
template <typename S>
using ECMap = Eigen::Map<const EMat<S>>;

template <typename S>
void forward_op(const Node& n, const std::vector<View<S>>& in, S* out,
                std::size_t orows, std::size_t ocols) {
    const std::size_t osize = orows * ocols;
    switch (n.op) {
        case Op::Const:
        case Op::Leaf:
        case Op::ParamLeaf:
            COOT_CHECK(false, "leaf nodes are not executed");
            break;
        case Op::MatMul: {
            ECMap<S> a(in[0].p, Eigen::Index(in[0].rows), Eigen::Index(in[0].cols));
            ECMap<S> b(in[1].p, Eigen::Index(in[1].rows), Eigen::Index(in[1].cols));
            EMap<S> c(out, Eigen::Index(orows), Eigen::Index(ocols));
            c.noalias() = a * b;
            break;
        }
        case Op::Transpose:
            for (std::size_t r = 0; r < in[0].rows; ++r)
                for (std::size_t c = 0; c < in[0].cols; ++c)
                    out[c * ocols + r] = in[0].at(r, c);
            break;
        case Op::Add:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] + in[1].p[i];
            break;
        case Op::Sub:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] - in[1].p[i];
            break;
        case Op::Mul:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] * in[1].p[i];
            break;
        case Op::Div:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] / in[1].p[i];
            break;
        case Op::AddN: {
            std::copy(in[0].p, in[0].p + osize, out);
            for (std::size_t k = 1; k < in.size(); ++k)
                for (std::size_t i = 0; i < osize; ++i) out[i] += in[k].p[i];
            break;
        }
        case Op::Scale:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] * S(n.f0);
            break;
        case Op::AddScalar:
            for (std::size_t i = 0; i < osize; ++i) out[i] = in[0].p[i] + S(n.f0);
            break;
        case Op::Relu:
            for (std::size_t i = 0; i < osize; ++i)
                out[i] = in[0].p[i] > S(0) ? in[0].p[i] : S(0);
            break;
        case Op::Gelu: {
            const S inv_sqrt2 = S(0.70710678118654752440L);
            for (std::size_t i = 0; i < osize; ++i) {
                S x = in[0].p[i];
                out[i] = S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2));
            }
            break;
        }
        case Op::Sqrt:
            for (std::size_t i = 0; i < osize; ++i) out[i] = std::sqrt(in[0].p[i]);
            break;
        case Op::Recip:
            for (std::size_t i = 0; i < osize; ++i) out[i] = S(1) / in[0].p[i];
            break;
        case Op::Softmax: {
            const std::size_t R = in[0].rows, C = in[0].cols;
            const std::uint8_t* mk = n.has_mask ? n.mask.valid.data() : nullptr;
            if (n.a0 == 1) {
                for (std::size_t r = 0; r < R; ++r) {
                    const S* x = in[0].p + r * C;
                    S* y = out + r * C;
                    S mx = -std::numeric_limits<S>::infinity();
                    for (std::size_t c = 0; c < C; ++c)
                        if (!mk || mk[c]) mx = std::max(mx, x[c]);
                    double sum = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        if (!mk || mk[c]) {
                            y[c] = std::exp(x[c] - mx);
                            sum += double(y[c]);
                        } else {
                            y[c] = S(0);
                        }
                    }
                    for (std::size_t c = 0; c < C; ++c) y[c] = S(double(y[c]) / sum);
                    if (mk)
                        for (std::size_t c = 0; c < C; ++c)
                            if (!mk[c]) y[c] = S(0);
                }
            } else {
                for (std::size_t c = 0; c < C; ++c) {
                    S mx = -std::numeric_limits<S>::infinity();
                    for (std::size_t r = 0; r < R; ++r)
                        if (!mk || mk[r]) mx = std::max(mx, in[0].at(r, c));
                    double sum = 0;
                    for (std::size_t r = 0; r < R; ++r) {
                        if (!mk || mk[r]) {
                            S e = std::exp(in[0].at(r, c) - mx);
                            out[r * C + c] = e;
                            sum += double(e);
                        } else {
                            out[r * C + c] = S(0);
                        }
                    }
                    for (std::size_t r = 0; r < R; ++r)
                        if (!mk || mk[r])
                            out[r * C + c] = S(double(out[r * C + c]) / sum);
                }
            }
            break;
        }
        case Op::LayerNorm: {
            const std::size_t R = in[0].rows, C = in[0].cols;
            const S eps = S(n.f0);
            for (std::size_t r = 0; r < R; ++r) {
                const S* x = in[0].p + r * C;
                S* y = out + r * C;
                double mean = 0;
                for (std::size_t c = 0; c < C; ++c) mean += double(x[c]);
                mean /= double(C);
                double var = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    double d = double(x[c]) - mean;
                    var += d * d;
                }
                var /= double(C);
                S inv = S(1.0 / std::sqrt(var + double(eps)));
                for (std::size_t c = 0; c < C; ++c)
                    y[c] = S(double(x[c]) - mean) * inv * in[1].p[c] + in[2].p[c];
            }
            break;
        }
        case Op::AddRow:
            for (std::size_t r = 0; r < orows; ++r)
                for (std::size_t c = 0; c < ocols; ++c)
                    out[r * ocols + c] = in[0].at(r, c) + in[1].p[c];
            break;
        case Op::AddCol:
            for (std::size_t r = 0; r < orows; ++r)
                for (std::size_t c = 0; c < ocols; ++c)
                    out[r * ocols + c] = in[0].at(r, c) + in[1].p[r];
            break;
        case Op::MulCol:
            for (std::size_t r = 0; r < orows; ++r)
                for (std::size_t c = 0; c < ocols; ++c)
                    out[r * ocols + c] = in[0].at(r, c) * in[1].p[r];
            break;
        case Op::MulConst:
            for (std::size_t i = 0; i < osize; ++i)
                out[i] = in[0].p[i] * S(n.cmat[i]);
            break;
        case Op::SumAll: {
            double sum = 0;
            for (std::size_t i = 0; i < in[0].size(); ++i) sum += double(in[0].p[i]);
            out[0] = S(sum);
            break;
        }
        case Op::SumAxis0:
            for (std::size_t c = 0; c < ocols; ++c) {
                double sum = 0;
                for (std::size_t r = 0; r < in[0].rows; ++r)
                    sum += double(in[0].at(r, c));
                out[c] = S(sum);
            }
            break;
        case Op::SumAxis1:
            for (std::size_t r = 0; r < orows; ++r) {
                double sum = 0;
                for (std::size_t c = 0; c < in[0].cols; ++c)
                    sum += double(in[0].at(r, c));
                out[r] = S(sum);
            }
            break;
        case Op::MaxAxis0: {
            const std::uint8_t* mk = n.has_mask ? n.mask.valid.data() : nullptr;
            for (std::size_t c = 0; c < ocols; ++c) {
                bool found = false;
                S mx = S(0);
                for (std::size_t r = 0; r < in[0].rows; ++r) {
                    if (mk && !mk[r]) continue;
                    S v = in[0].at(r, c);
                    if (!found || v > mx) {
                        mx = v;
                        found = true;
                    }
                }
                out[c] = mx;
            }
            break;
        }
        case Op::ConcatCols: {
            std::size_t off = 0;
            for (const auto& v : in) {
                for (std::size_t r = 0; r < v.rows; ++r)
                    for (std::size_t c = 0; c < v.cols; ++c)
                        out[r * ocols + off + c] = v.at(r, c);
                off += v.cols;
            }
            break;
        }
        case Op::ConcatRows: {
            std::size_t off = 0;
            for (const auto& v : in) {
                std::copy(v.p, v.p + v.size(), out + off * ocols);
                off += v.rows;
            }
            break;
        }
        case Op::SliceCols: {
            const std::size_t from = std::size_t(n.a0);
            for (std::size_t r = 0; r < orows; ++r)
                for (std::size_t c = 0; c < ocols; ++c)
                    out[r * ocols + c] = in[0].at(r, from + c);
            break;
        }
        case Op::SliceRows: {
            const std::size_t from = std::size_t(n.a0);
            std::copy(in[0].p + from * ocols, in[0].p + (from + orows) * ocols, out);
            break;
        }
        case Op::Diag:
            for (std::size_t r = 0; r < orows; ++r) out[r] = in[0].at(r, r);
            break;
    }
}

// Accumulates into in_grads (entries may be null when the input does not
// require a gradient). Loop order is fixed so accumulation is deterministic.
template <typename S>
void backward_op(const Node& n, const std::vector<View<S>>& in,
                 const S* out_val, const S* out_grad, std::size_t orows,
                 std::size_t ocols, const std::vector<S*>& gin) {
    const std::size_t osize = orows * ocols;
    switch (n.op) {
        case Op::Const:
        case Op::Leaf:
        case Op::ParamLeaf:
            break;
        case Op::MatMul: {
            ECMap<S> a(in[0].p, Eigen::Index(in[0].rows), Eigen::Index(in[0].cols));
            ECMap<S> b(in[1].p, Eigen::Index(in[1].rows), Eigen::Index(in[1].cols));
            ECMap<S> g(out_grad, Eigen::Index(orows), Eigen::Index(ocols));
            if (gin[0]) {
                EMap<S> da(gin[0], Eigen::Index(in[0].rows), Eigen::Index(in[0].cols));
                da.noalias() += g * b.transpose();
            }
            if (gin[1]) {
                EMap<S> db(gin[1], Eigen::Index(in[1].rows), Eigen::Index(in[1].cols));
                db.noalias() += a.transpose() * g;
            }
            break;
        }
        case Op::Transpose:
            if (gin[0])
                for (std::size_t r = 0; r < orows; ++r)
                    for (std::size_t c = 0; c < ocols; ++c)
                        gin[0][c * orows + r] += out_grad[r * ocols + c];
            break;
        case Op::Add:
            for (int k = 0; k < 2; ++k)
                if (gin[k])
                    for (std::size_t i = 0; i < osize; ++i) gin[k][i] += out_grad[i];
            break;
        case Op::Sub:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i) gin[0][i] += out_grad[i];
            if (gin[1])
                for (std::size_t i = 0; i < osize; ++i) gin[1][i] -= out_grad[i];
            break;
        case Op::Mul:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] += out_grad[i] * in[1].p[i];
            if (gin[1])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[1][i] += out_grad[i] * in[0].p[i];
            break;
        case Op::Div:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] += out_grad[i] / in[1].p[i];
            if (gin[1])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[1][i] -= out_grad[i] * in[0].p[i] / (in[1].p[i] * in[1].p[i]);
            break;
        case Op::AddN:
            for (std::size_t k = 0; k < in.size(); ++k)
                if (gin[k])
                    for (std::size_t i = 0; i < osize; ++i) gin[k][i] += out_grad[i];
            break;
        case Op::Scale:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] += out_grad[i] * S(n.f0);
            break;
        case Op::AddScalar:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i) gin[0][i] += out_grad[i];
            break;
        case Op::Relu:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    if (in[0].p[i] > S(0)) gin[0][i] += out_grad[i];
            break;
        case Op::Gelu: {
            if (!gin[0]) break;
            const S inv_sqrt2 = S(0.70710678118654752440L);
            const S inv_sqrt_2pi = S(0.39894228040143267794L);
            for (std::size_t i = 0; i < osize; ++i) {
                S x = in[0].p[i];
                S cdf = S(0.5) * (S(1) + std::erf(x * inv_sqrt2));
                S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
                gin[0][i] += out_grad[i] * (cdf + x * pdf);
            }
            break;
        }
        case Op::Sqrt:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] += out_grad[i] / (S(2) * out_val[i]);
            break;
        case Op::Recip:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] -= out_grad[i] * out_val[i] * out_val[i];
            break;
        case Op::Softmax: {
            if (!gin[0]) break;
            const std::size_t R = orows, C = ocols;
            const std::uint8_t* mk = n.has_mask ? n.mask.valid.data() : nullptr;
            if (n.a0 == 1) {
                for (std::size_t r = 0; r < R; ++r) {
                    const S* y = out_val + r * C;
                    const S* g = out_grad + r * C;
                    double dot = 0;
                    for (std::size_t c = 0; c < C; ++c)
                        if (!mk || mk[c]) dot += double(g[c]) * double(y[c]);
                    for (std::size_t c = 0; c < C; ++c)
                        if (!mk || mk[c])
                            gin[0][r * C + c] +=
                                S(double(y[c]) * (double(g[c]) - dot));
                }
            } else {
                for (std::size_t c = 0; c < C; ++c) {
                    double dot = 0;
                    for (std::size_t r = 0; r < R; ++r)
                        if (!mk || mk[r])
                            dot += double(out_grad[r * C + c]) *
                                   double(out_val[r * C + c]);
                    for (std::size_t r = 0; r < R; ++r)
                        if (!mk || mk[r])
                            gin[0][r * C + c] +=
                                S(double(out_val[r * C + c]) *
                                  (double(out_grad[r * C + c]) - dot));
                }
            }
            break;
        }
        case Op::LayerNorm: {
            const std::size_t R = in[0].rows, C = in[0].cols;
            const S eps = S(n.f0);
            for (std::size_t r = 0; r < R; ++r) {
                const S* x = in[0].p + r * C;
                const S* g = out_grad + r * C;
                double mean = 0;
                for (std::size_t c = 0; c < C; ++c) mean += double(x[c]);
                mean /= double(C);
                double var = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    double d = double(x[c]) - mean;
                    var += d * d;
                }
                var /= double(C);
                double inv = 1.0 / std::sqrt(var + double(eps));
                double sum1 = 0, sum2 = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    double xh = (double(x[c]) - mean) * inv;
                    double dxh = double(g[c]) * double(in[1].p[c]);
                    sum1 += dxh;
                    sum2 += dxh * xh;
                }
                for (std::size_t c = 0; c < C; ++c) {
                    double xh = (double(x[c]) - mean) * inv;
                    if (gin[0]) {
                        double dxh = double(g[c]) * double(in[1].p[c]);
                        gin[0][r * C + c] += S(
                            inv * (dxh - sum1 / double(C) - xh * sum2 / double(C)));
                    }
                    if (gin[1]) gin[1][c] += S(double(g[c]) * xh);
                    if (gin[2]) gin[2][c] += g[c];
                }
            }
            break;
        }
        case Op::AddRow:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i) gin[0][i] += out_grad[i];
            if (gin[1])
                for (std::size_t c = 0; c < ocols; ++c) {
                    double sum = 0;
                    for (std::size_t r = 0; r < orows; ++r)
                        sum += double(out_grad[r * ocols + c]);
                    gin[1][c] += S(sum);
                }
            break;
        case Op::AddCol:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i) gin[0][i] += out_grad[i];
            if (gin[1])
                for (std::size_t r = 0; r < orows; ++r) {
                    double sum = 0;
                    for (std::size_t c = 0; c < ocols; ++c)
                        sum += double(out_grad[r * ocols + c]);
                    gin[1][r] += S(sum);
                }
            break;
        case Op::MulCol:
            if (gin[0])
                for (std::size_t r = 0; r < orows; ++r)
                    for (std::size_t c = 0; c < ocols; ++c)
                        gin[0][r * ocols + c] += out_grad[r * ocols + c] * in[1].p[r];
            if (gin[1])
                for (std::size_t r = 0; r < orows; ++r) {
                    double sum = 0;
                    for (std::size_t c = 0; c < ocols; ++c)
                        sum += double(out_grad[r * ocols + c]) *
                               double(in[0].at(r, c));
                    gin[1][r] += S(sum);
                }
            break;
        case Op::MulConst:
            if (gin[0])
                for (std::size_t i = 0; i < osize; ++i)
                    gin[0][i] += out_grad[i] * S(n.cmat[i]);
            break;
        case Op::SumAll:
            if (gin[0])
                for (std::size_t i = 0; i < in[0].size(); ++i)
                    gin[0][i] += out_grad[0];
            break;
        case Op::SumAxis0:
            if (gin[0])
                for (std::size_t r = 0; r < in[0].rows; ++r)
                    for (std::size_t c = 0; c < ocols; ++c)
                        gin[0][r * ocols + c] += out_grad[c];
            break;
        case Op::SumAxis1:
            if (gin[0])
                for (std::size_t r = 0; r < orows; ++r)
                    for (std::size_t c = 0; c < in[0].cols; ++c)
                        gin[0][r * in[0].cols + c] += out_grad[r];
            break;
        case Op::MaxAxis0: {
            if (!gin[0]) break;
            const std::uint8_t* mk = n.has_mask ? n.mask.valid.data() : nullptr;
            for (std::size_t c = 0; c < ocols; ++c) {
                std::size_t arg = 0;
                bool found = false;
                S mx = S(0);
                for (std::size_t r = 0; r < in[0].rows; ++r) {
                    if (mk && !mk[r]) continue;
                    S v = in[0].at(r, c);
                    if (!found || v > mx) {
                        mx = v;
                        arg = r;
                        found = true;
                    }
                }
                gin[0][arg * ocols + c] += out_grad[c];
            }
            break;
        }
        case Op::ConcatCols: {
            std::size_t off = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (gin[k])
                    for (std::size_t r = 0; r < in[k].rows; ++r)
                        for (std::size_t c = 0; c < in[k].cols; ++c)
                            gin[k][r * in[k].cols + c] +=
                                out_grad[r * ocols + off + c];
                off += in[k].cols;
            }
            break;
        }
        case Op::ConcatRows: {
            std::size_t off = 0;
            for (std::size_t k = 0; k < in.size(); ++k) {
                if (gin[k])
                    for (std::size_t i = 0; i < in[k].size(); ++i)
                        gin[k][i] += out_grad[off * ocols + i];
                off += in[k].rows;
            }
            break;
        }
        case Op::SliceCols: {
            if (!gin[0]) break;
            const std::size_t from = std::size_t(n.a0), ic = in[0].cols;
            for (std::size_t r = 0; r < orows; ++r)
                for (std::size_t c = 0; c < ocols; ++c)
                    gin[0][r * ic + from + c] += out_grad[r * ocols + c];
            break;
        }
        case Op::SliceRows: {
            if (!gin[0]) break;
            const std::size_t from = std::size_t(n.a0);
            for (std::size_t i = 0; i < osize; ++i)
                gin[0][from * ocols + i] += out_grad[i];
            break;
        }
        case Op::Diag:
            if (gin[0])
                for (std::size_t r = 0; r < orows; ++r)
                    gin[0][r * in[0].cols + r] += out_grad[r];
            break;
    }
}

} // namespace

Var Tape::push(Node n) {
    if (n.op != Op::Const && n.op != Op::Leaf && n.op != Op::ParamLeaf) {
        std::vector<View<float>> in;
        in.reserve(n.inputs.size());
        for (auto id : n.inputs) {
            const Tensor& t = nodes_[std::size_t(id)].value;
            in.push_back({t.data(), t.rows(), t.cols()});
            n.requires_grad =
                n.requires_grad || nodes_[std::size_t(id)].requires_grad;
        }
        forward_op<float>(n, in, n.value.data(), n.value.rows(), n.value.cols());
        if (!n.value.all_finite())
            throw NumericError(str("non-finite values in ", op_name(n.op)));
    }
    nodes_.push_back(std::move(n));
    return Var{this, std::int32_t(nodes_.size() - 1)};
}

Var Tape::constant(Tensor v) {
    COOT_CHECK(v.all_finite(), "non-finite values in constant");
    Node n;
    n.op = Op::Const;
    n.value = std::move(v);
    return push(std::move(n));
}

Var Tape::leaf(Tensor v, bool requires_grad) {
    COOT_CHECK(v.all_finite(), "non-finite values in leaf");
    Node n;
    n.op = Op::Leaf;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    return push(std::move(n));
}

Var Tape::param(Param& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Var{this, it->second};
    COOT_CHECK(p.value.all_finite(), "non-finite values in param ", p.name);
    Node n;
    n.op = Op::ParamLeaf;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = true;
    Var v = push(std::move(n));
    param_nodes_[&p] = v.id;
    return v;
}

float Tape::scalar(Var v) const {
    const Tensor& t = value(v);
    COOT_CHECK(t.size() == 1, "scalar() on a non-scalar var");
    return t[0];
}

Var Tape::matmul(Var a, Var b) {
    const Tensor &ta = node(a).value, &tb = node(b).value;
    COOT_CHECK(ta.cols() == tb.rows(), "matmul: width mismatch (", ta.rows(), "x",
               ta.cols(), " * ", tb.rows(), "x", tb.cols(), ")");
    Node n;
    n.op = Op::MatMul;
    n.inputs = {a.id, b.id};
    n.value = Tensor(ta.rows(), tb.cols());
    return push(std::move(n));
}

Var Tape::transpose(Var a) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::Transpose;
    n.inputs = {a.id};
    n.value = Tensor(t.cols(), t.rows());
    return push(std::move(n));
}

Var Tape::binary_same_shape(Op op, Var a, Var b) {
    const Tensor &ta = node(a).value, &tb = node(b).value;
    COOT_CHECK(ta.same_shape(tb), op_name(op), ": shape mismatch (", ta.rows(),
               "x", ta.cols(), " vs ", tb.rows(), "x", tb.cols(), ")");
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.value = Tensor(ta.rows(), ta.cols());
    return push(std::move(n));
}

Var Tape::add(Var a, Var b) { return binary_same_shape(Op::Add, a, b); }
Var Tape::sub(Var a, Var b) { return binary_same_shape(Op::Sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary_same_shape(Op::Mul, a, b); }
Var Tape::div(Var a, Var b) { return binary_same_shape(Op::Div, a, b); }

Var Tape::add_n(const std::vector<Var>& xs) {
    COOT_CHECK(!xs.empty(), "add_n: empty input list");
    if (xs.size() == 1) return xs[0];
    Node n;
    n.op = Op::AddN;
    const Tensor& t0 = node(xs[0]).value;
    for (Var v : xs) {
        COOT_CHECK(node(v).value.same_shape(t0), "add_n: shape mismatch");
        n.inputs.push_back(v.id);
    }
    n.value = Tensor(t0.rows(), t0.cols());
    return push(std::move(n));
}

Var Tape::unary(Op op, Var a) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = op;
    n.inputs = {a.id};
    n.value = Tensor(t.rows(), t.cols());
    return push(std::move(n));
}

Var Tape::scale(Var a, float c) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::Scale;
    n.inputs = {a.id};
    n.f0 = c;
    n.value = Tensor(t.rows(), t.cols());
    return push(std::move(n));
}

Var Tape::add_scalar(Var a, float c) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::AddScalar;
    n.inputs = {a.id};
    n.f0 = c;
    n.value = Tensor(t.rows(), t.cols());
    return push(std::move(n));
}

Var Tape::relu(Var a) { return unary(Op::Relu, a); }
Var Tape::gelu(Var a) { return unary(Op::Gelu, a); }
Var Tape::sqrt(Var a) { return unary(Op::Sqrt, a); }
Var Tape::recip(Var a) { return unary(Op::Recip, a); }

Var Tape::softmax(Var a, int axis, const Mask* mask) {
    const Tensor& t = node(a).value;
    COOT_CHECK(axis == 0 || axis == 1, "softmax: invalid axis ", axis);
    Node n;
    n.op = Op::Softmax;
    n.inputs = {a.id};
    n.a0 = axis;
    if (mask != nullptr) {
        std::size_t extent = axis == 1 ? t.cols() : t.rows();
        COOT_CHECK(mask->size() == extent, "softmax: mask length ", mask->size(),
                   " != axis extent ", extent);
        COOT_CHECK(mask->count_valid() > 0, "softmax: empty sequence");
        if (!mask->all_valid()) {
            n.has_mask = true;
            n.mask = *mask;
        }
    }
    n.value = Tensor(t.rows(), t.cols());
    return push(std::move(n));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, float eps) {
    const Tensor& t = node(x).value;
    COOT_CHECK(eps > 0.0f, "layer_norm: eps must be positive");
    COOT_CHECK(node(gain).value.rows() == 1 && node(gain).value.cols() == t.cols(),
               "layer_norm: gain shape mismatch");
    COOT_CHECK(node(bias).value.rows() == 1 && node(bias).value.cols() == t.cols(),
               "layer_norm: bias shape mismatch");
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x.id, gain.id, bias.id};
    n.f0 = eps;
    n.value = Tensor(t.rows(), t.cols());
    return push(std::move(n));
}

Var Tape::add_row(Var m, Var row) {
    const Tensor &tm = node(m).value, &tr = node(row).value;
    COOT_CHECK(tr.rows() == 1 && tr.cols() == tm.cols(),
               "add_row: row shape mismatch");
    Node n;
    n.op = Op::AddRow;
    n.inputs = {m.id, row.id};
    n.value = Tensor(tm.rows(), tm.cols());
    return push(std::move(n));
}

Var Tape::add_col(Var m, Var col) {
    const Tensor &tm = node(m).value, &tc = node(col).value;
    COOT_CHECK(tc.cols() == 1 && tc.rows() == tm.rows(),
               "add_col: column shape mismatch");
    Node n;
    n.op = Op::AddCol;
    n.inputs = {m.id, col.id};
    n.value = Tensor(tm.rows(), tm.cols());
    return push(std::move(n));
}

Var Tape::mul_col(Var m, Var col) {
    const Tensor &tm = node(m).value, &tc = node(col).value;
    COOT_CHECK(tc.cols() == 1 && tc.rows() == tm.rows(),
               "mul_col: column shape mismatch");
    Node n;
    n.op = Op::MulCol;
    n.inputs = {m.id, col.id};
    n.value = Tensor(tm.rows(), tm.cols());
    return push(std::move(n));
}

Var Tape::mul_const(Var m, Tensor factor) {
    const Tensor& tm = node(m).value;
    COOT_CHECK(factor.same_shape(tm), "mul_const: shape mismatch");
    Node n;
    n.op = Op::MulConst;
    n.inputs = {m.id};
    n.cmat = std::move(factor);
    n.value = Tensor(tm.rows(), tm.cols());
    return push(std::move(n));
}

Var Tape::sum_all(Var a) {
    Node n;
    n.op = Op::SumAll;
    n.inputs = {a.id};
    n.value = Tensor(1, 1);
    return push(std::move(n));
}

Var Tape::sum_axis0(Var a) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::SumAxis0;
    n.inputs = {a.id};
    n.value = Tensor(1, t.cols());
    return push(std::move(n));
}

Var Tape::sum_axis1(Var a) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::SumAxis1;
    n.inputs = {a.id};
    n.value = Tensor(t.rows(), 1);
    return push(std::move(n));
}

Var Tape::max_axis0(Var a, const Mask* mask) {
    const Tensor& t = node(a).value;
    Node n;
    n.op = Op::MaxAxis0;
    n.inputs = {a.id};
    if (mask != nullptr) {
        COOT_CHECK(mask->size() == t.rows(), "max_axis0: mask length mismatch");
        COOT_CHECK(mask->count_valid() > 0, "max_axis0: empty sequence");
        if (!mask->all_valid()) {
            n.has_mask = true;
            n.mask = *mask;
        }
    }
    n.value = Tensor(1, t.cols());
    return push(std::move(n));
}

Var Tape::concat_cols(const std::vector<Var>& xs) {
    COOT_CHECK(!xs.empty(), "concat_cols: empty input list");
    if (xs.size() == 1) return xs[0];
    std::size_t rows = node(xs[0]).value.rows(), cols = 0;
    Node n;
    n.op = Op::ConcatCols;
    for (Var v : xs) {
        COOT_CHECK(node(v).value.rows() == rows, "concat_cols: row mismatch");
        cols += node(v).value.cols();
        n.inputs.push_back(v.id);
    }
    n.value = Tensor(rows, cols);
    return push(std::move(n));
}

Var Tape::concat_rows(const std::vector<Var>& xs) {
    COOT_CHECK(!xs.empty(), "concat_rows: empty input list");
    if (xs.size() == 1) return xs[0];
    std::size_t cols = node(xs[0]).value.cols(), rows = 0;
    Node n;
    n.op = Op::ConcatRows;
    for (Var v : xs) {
        COOT_CHECK(node(v).value.cols() == cols, "concat_rows: column mismatch");
        rows += node(v).value.rows();
        n.inputs.push_back(v.id);
    }
    n.value = Tensor(rows, cols);
    return push(std::move(n));
}

Var Tape::slice_cols(Var a, int from, int to) {
    const Tensor& t = node(a).value;
    COOT_CHECK(0 <= from && from < to && std::size_t(to) <= t.cols(),
               "slice_cols: bad range [", from, ", ", to, ")");
    Node n;
    n.op = Op::SliceCols;
    n.inputs = {a.id};
    n.a0 = from;
    n.a1 = to;
    n.value = Tensor(t.rows(), std::size_t(to - from));
    return push(std::move(n));
}

Var Tape::slice_rows(Var a, int from, int to) {
    const Tensor& t = node(a).value;
    COOT_CHECK(0 <= from && from < to && std::size_t(to) <= t.rows(),
               "slice_rows: bad range [", from, ", ", to, ")");
    Node n;
    n.op = Op::SliceRows;
    n.inputs = {a.id};
    n.a0 = from;
    n.a1 = to;
    n.value = Tensor(std::size_t(to - from), t.cols());
    return push(std::move(n));
}

Var Tape::diag(Var a) {
    const Tensor& t = node(a).value;
    COOT_CHECK(t.rows() == t.cols(), "diag: matrix must be square");
    Node n;
    n.op = Op::Diag;
    n.inputs = {a.id};
    n.value = Tensor(t.rows(), 1);
    return push(std::move(n));
}

void Tape::backward(Var out) {
    Node& on = node(out);
    COOT_CHECK(on.value.size() == 1, "backward: output must be scalar");
    COOT_CHECK(on.requires_grad, "backward: output does not require grad");
    for (std::size_t i = 0; i <= std::size_t(out.id); ++i) {
        Node& n = nodes_[i];
        if (n.requires_grad) {
            if (n.grad.empty()) n.grad = Tensor(n.value.rows(), n.value.cols());
            else n.grad.fill(0.0f);
        }
    }
    on.grad[0] = 1.0f;
    for (std::int32_t i = out.id; i >= 0; --i) {
        Node& n = nodes_[std::size_t(i)];
        if (!n.requires_grad || n.inputs.empty()) continue;
        std::vector<View<float>> in;
        std::vector<float*> gin;
        in.reserve(n.inputs.size());
        gin.reserve(n.inputs.size());
        for (auto id : n.inputs) {
            Node& m = nodes_[std::size_t(id)];
            in.push_back({m.value.data(), m.value.rows(), m.value.cols()});
            gin.push_back(m.requires_grad ? m.grad.data() : nullptr);
        }
        backward_op<float>(n, in, n.value.data(), n.grad.data(), n.value.rows(),
                           n.value.cols(), gin);
    }
    for (std::int32_t i = out.id; i >= 0; --i) {
        Node& n = nodes_[std::size_t(i)];
        if (n.requires_grad && !n.grad.all_finite())
            throw NumericError(str("non-finite gradient at ", op_name(n.op)));
    }
}

void Tape::accumulate_param_grads() {
    for (Node& n : nodes_) {
        if (n.op != Op::ParamLeaf || n.grad.empty()) continue;
        Tensor& g = n.param->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
}

std::vector<std::int32_t> Tape::grad_leaves() const {
    std::vector<std::int32_t> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if ((n.op == Op::ParamLeaf || n.op == Op::Leaf) && n.requires_grad)
            out.push_back(std::int32_t(i));
    }
    return out;
}

template <typename S>
void Tape::replay_forward(Buffers<S>& buf, std::int32_t override_node,
                          std::size_t elem, S delta) const {
    buf.val.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        auto& v = buf.val[i];
        v.resize(n.value.size());
        if (n.op == Op::Const || n.op == Op::Leaf || n.op == Op::ParamLeaf) {
            for (std::size_t j = 0; j < v.size(); ++j) v[j] = S(n.value[j]);
            if (std::int32_t(i) == override_node) v[elem] += delta;
            continue;
        }
        std::vector<View<S>> in;
        in.reserve(n.inputs.size());
        for (auto id : n.inputs) {
            const Node& m = nodes_[std::size_t(id)];
            in.push_back(
                {buf.val[std::size_t(id)].data(), m.value.rows(), m.value.cols()});
        }
        forward_op<S>(n, in, v.data(), n.value.rows(), n.value.cols());
    }
}

template <typename S>
void Tape::replay_backward(Buffers<S>& buf, std::int32_t out_node) const {
    COOT_CHECK(out_node >= 0 && std::size_t(out_node) < nodes_.size() &&
                   nodes_[std::size_t(out_node)].value.size() == 1,
               "replay_backward: output must be scalar");
    buf.grad.resize(nodes_.size());
    for (std::size_t i = 0; i <= std::size_t(out_node); ++i) {
        const Node& n = nodes_[i];
        auto& g = buf.grad[i];
        if (n.requires_grad) {
            g.assign(n.value.size(), S(0));
        } else {
            g.clear();
        }
    }
    buf.grad[std::size_t(out_node)][0] = S(1);
    for (std::int32_t i = out_node; i >= 0; --i) {
        const Node& n = nodes_[std::size_t(i)];
        if (!n.requires_grad || n.inputs.empty()) continue;
        std::vector<View<S>> in;
        std::vector<S*> gin;
        for (auto id : n.inputs) {
            const Node& m = nodes_[std::size_t(id)];
            in.push_back(
                {buf.val[std::size_t(id)].data(), m.value.rows(), m.value.cols()});
            gin.push_back(m.requires_grad ? buf.grad[std::size_t(id)].data()
                                          : nullptr);
        }
        backward_op<S>(n, in, buf.val[std::size_t(i)].data(),
                       buf.grad[std::size_t(i)].data(), n.value.rows(),
                       n.value.cols(), gin);
    }
}

template void Tape::replay_forward<float>(Buffers<float>&, std::int32_t,
                                          std::size_t, float) const;
template void Tape::replay_forward<double>(Buffers<double>&, std::int32_t,
                                           std::size_t, double) const;
template void Tape::replay_backward<float>(Buffers<float>&, std::int32_t) const;
template void Tape::replay_backward<double>(Buffers<double>&,
                                            std::int32_t) const;

float cosine_distance(const Tensor& x, const Tensor& y) {
    COOT_CHECK(x.rows() == 1 && y.rows() == 1 && x.cols() == y.cols(),
               "cosine_distance: expects two 1xN vectors of equal width");
    double nx = 0, ny = 0, dot = 0;
    for (std::size_t i = 0; i < x.cols(); ++i) {
        nx += double(x[i]) * double(x[i]);
        ny += double(y[i]) * double(y[i]);
        dot += double(x[i]) * double(y[i]);
    }
    COOT_CHECK(nx > 0 && ny > 0, "cosine_distance: degenerate vector");
    return float(1.0 - dot / (std::sqrt(nx) * std::sqrt(ny)));
}

} // namespace coot
