#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "visteer/tensor.hpp"

namespace visteer {

enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Gelu,
    SoftmaxLastDim,
    LayerNormLastDim,
    Sum,
    Mean,
    L2Norm,
    EmbedLookup,
    Concat,
    Slice,
    Transpose,
    Reshape,
    Attention,
    Patchify,
    Dct2d,
    Idct2d,
    ResizeBilinear,
};

std::string_view op_name(OpKind kind);

inline constexpr double kLayerNormEps = 1e-5;

// Per-op parameters. Only the fields an op reads are meaningful.
struct OpAttrs {
    double scalar = 0.0;
    std::size_t a = 0;  // slice begin / heads / patch size / target height
    std::size_t b = 0;  // slice end / query offset / target width
    bool flag = false;  // attention: causal
    std::vector<std::size_t> ids;
    Shape shape;
};

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const;
    bool requires_grad() const;
};

// Define-by-run tape. Nodes are appended in execution order, so node ids are a
// topological order and backward is a single reverse sweep.
class Graph {
public:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<int> inputs;
        OpAttrs attrs;
        Tensor value;
        Tensor aux;  // saved forward state (attention probabilities)
        Tensor grad;
        const Tensor* ref = nullptr;
        bool requires_grad = false;

        const Tensor& val() const { return ref ? *ref : value; }
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = true);
    Var constant(Tensor value) { return leaf(std::move(value), false); }
    // Non-owning constant; `value` must outlive the graph.
    Var constant_ref(const Tensor& value);

    Var apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs = {});

    // Reverse sweep from a scalar loss. Every requires_grad leaf ends up with a
    // grad; leaves the loss does not depend on get zeros.
    void backward(Var loss);

    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return nodes_.size(); }

private:
    Tensor forward(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs, Tensor& aux) const;
    void propagate(const Node& n);
    Tensor& grad_slot(int id);

    std::vector<Node> nodes_;
};

// Primitive wrappers. All inputs must live on the same graph.
Var matmul(Var a, Var b);
// Elementwise; `b` may also be a suffix of `a`'s shape (broadcast over leading dims).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var gelu(Var a);
Var softmax(Var a);
Var layer_norm(Var a);
Var sum(Var a);
Var mean(Var a);
Var l2_norm(Var a);
Var embed(Var table, std::vector<std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var transpose(Var a);
Var reshape(Var a, Shape shape);
// Multi-head scaled dot-product attention. q is [Tq, D]; k, v are [Tk, D].
// When causal, query i sits at absolute position offset + i and sees keys 0..offset+i.
Var attention(Var q, Var k, Var v, std::size_t heads, bool causal, std::size_t offset = 0);
// [H, W, C] -> [(H/p)*(W/p), p*p*C], patches in raster order, (dy, dx, c) inside a patch.
Var patchify(Var image, std::size_t patch);
Var dct2d(Var image);
Var idct2d(Var spectrum);
Var resize_bilinear(Var image, std::size_t height, std::size_t width);

inline Var sum_squares(Var a) { return sum(mul(a, a)); }

}  // namespace visteer
