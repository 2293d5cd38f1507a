#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "coot/tensor.hpp"

namespace coot {

class Tape;

// Lightweight handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
    Const,
    Leaf,
    ParamLeaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    AddN,
    Scale,      // f0 = factor
    AddScalar,  // f0 = addend
    Relu,
    Gelu,       // exact erf form
    Sqrt,
    Recip,
    Softmax,    // a0 = axis, optional mask over the reduced axis
    LayerNorm,  // inputs (x, gain, bias), f0 = eps, over last axis
    AddRow,     // m[r x c] + row[1 x c]
    AddCol,     // m[r x c] + col[r x 1]
    MulCol,     // m[r x c] * col[r x 1]
    MulConst,   // elementwise multiply by a constant tensor (dropout, combination masks)
    SumAll,     // -> 1x1
    SumAxis0,   // -> 1 x c
    SumAxis1,   // -> r x 1
    MaxAxis0,   // per-column max over valid rows -> 1 x c
    ConcatCols,
    ConcatRows,
    SliceCols,  // a0 = from, a1 = to (exclusive)
    SliceRows,
    Diag,       // n x n -> n x 1
};

const char* op_name(Op op);

struct Node {
    Op op = Op::Const;
    std::vector<std::int32_t> inputs;
    std::int32_t a0 = 0, a1 = 0;
    float f0 = 0.0f;
    bool has_mask = false;
    Mask mask;
    Tensor cmat;  // constant factor for MulConst
    Tensor value;
    Tensor grad;  // allocated by backward()
    Param* param = nullptr;
    bool requires_grad = false;
};

// Define-by-run reverse-mode differentiation tape. Ops execute eagerly in
// float32 and record enough structure to (a) run a deterministic backward
// pass and (b) re-execute the whole forward computation at float or double
// precision with a single leaf scalar perturbed, which is what the
// finite-difference checker needs. A tape is confined to one thread.
class Tape {
public:
    template <typename S>
    struct Buffers {
        std::vector<std::vector<S>> val;
        std::vector<std::vector<S>> grad;
    };

    Var constant(Tensor v);
    Var leaf(Tensor v, bool requires_grad = true);
    Var param(Param& p);  // memoized: one node per Param per tape

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var add_n(const std::vector<Var>& xs);
    Var scale(Var a, float c);
    Var add_scalar(Var a, float c);
    Var relu(Var a);
    Var gelu(Var a);
    Var sqrt(Var a);
    Var recip(Var a);
    Var softmax(Var a, int axis, const Mask* mask = nullptr);
    Var layer_norm(Var x, Var gain, Var bias, float eps);
    Var add_row(Var m, Var row);
    Var add_col(Var m, Var col);
    Var mul_col(Var m, Var col);
    Var mul_const(Var m, Tensor factor);
    Var sum_all(Var a);
    Var sum_axis0(Var a);
    Var sum_axis1(Var a);
    Var max_axis0(Var a, const Mask* mask = nullptr);
    Var concat_cols(const std::vector<Var>& xs);
    Var concat_rows(const std::vector<Var>& xs);
    Var slice_cols(Var a, int from, int to);
    Var slice_rows(Var a, int from, int to);
    Var diag(Var a);

    const Tensor& value(Var v) const { return node(v).value; }
    const Tensor& grad(Var v) const { return node(v).grad; }
    float scalar(Var v) const;

    std::size_t size() const { return nodes_.size(); }
    const Node& node_at(std::size_t i) const { return nodes_[i]; }

    // Reverse pass from a 1x1 output; deterministic accumulation order.
    void backward(Var out);

    // Adds the gradients of all param-bound leaves into Param::grad,
    // in leaf creation order.
    void accumulate_param_grads();

    // Differentiable leaves (ParamLeaf and Leaf-with-grad) in creation order.
    std::vector<std::int32_t> grad_leaves() const;

    // Recompute every node value at precision S. If override_node >= 0, the
    // given leaf scalar is perturbed by delta before the run.
    template <typename S>
    void replay_forward(Buffers<S>& buf, std::int32_t override_node = -1,
                        std::size_t elem = 0, S delta = S(0)) const;

    // Reverse pass at precision S over previously replayed values.
    template <typename S>
    void replay_backward(Buffers<S>& buf, std::int32_t out_node) const;

private:
    Node& node(Var v) {
        COOT_CHECK(v.tape == this && v.id >= 0 &&
                       std::size_t(v.id) < nodes_.size(),
                   "var does not belong to this tape");
        return nodes_[std::size_t(v.id)];
    }
    const Node& node(Var v) const {
        return const_cast<Tape*>(this)->node(v);
    }

    Var push(Node n);
    Var unary(Op op, Var a);
    Var binary_same_shape(Op op, Var a, Var b);

    std::vector<Node> nodes_;
    std::unordered_map<const Param*, std::int32_t> param_nodes_;
};

} // namespace coot
