#include "visteer/graph.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "visteer/image_ops.hpp"

namespace visteer {

std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Leaf: return "leaf";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Gelu: return "gelu";
        case OpKind::SoftmaxLastDim: return "softmax-lastdim";
        case OpKind::LayerNormLastDim: return "layer-norm-lastdim";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::L2Norm: return "l2-norm";
        case OpKind::EmbedLookup: return "embed-lookup";
        case OpKind::Concat: return "concat";
        case OpKind::Slice: return "slice";
        case OpKind::Transpose: return "transpose";
        case OpKind::Reshape: return "reshape";
        case OpKind::Attention: return "attention";
        case OpKind::Patchify: return "patchify";
        case OpKind::Dct2d: return "dct2d";
        case OpKind::Idct2d: return "idct2d";
        case OpKind::ResizeBilinear: return "resize-bilinear";
    }
    return "?";
}

const Tensor& Var::value() const { return graph->node(id).val(); }
const Tensor& Var::grad() const { return graph->node(id).grad; }
const Shape& Var::shape() const { return graph->node(id).val().shape(); }
bool Var::requires_grad() const { return graph->node(id).requires_grad; }

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
    throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

void require_rank(OpKind kind, const Tensor& t, std::size_t rank, const char* which) {
    if (t.rank() != rank) {
        shape_fail(kind, std::string(which) + " must have rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
    }
}

// True when b's shape is a suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) return false;
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (a[a.size() - b.size() + i] != b[i]) return false;
    }
    return true;
}

// c[m, n] += a[m, k] * b[k, n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m, k] += a[m, n] * b[k, n]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        double* ci = c + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
            ci[p] += s;
        }
    }
}

// c[k, n] += a[m, k]^T * b[m, n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_deriv(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

bool attention_visible(bool causal, std::size_t offset, std::size_t i, std::size_t j) {
    return !causal || j <= offset + i;
}

}  // namespace

Var Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant_ref(const Tensor& value) {
    Node n;
    n.kind = OpKind::Leaf;
    n.ref = &value;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::apply(OpKind kind, std::span<const Var> inputs, OpAttrs attrs) {
    if (kind == OpKind::Leaf) throw std::invalid_argument("apply: leaf is not a primitive");
    Node n;
    n.kind = kind;
    for (const Var& v : inputs) {
        if (v.graph != this) shape_fail(kind, "input belongs to a different graph");
        n.inputs.push_back(v.id);
        n.requires_grad = n.requires_grad || node(v.id).requires_grad;
    }
    n.value = forward(kind, inputs, attrs, n.aux);
    n.attrs = std::move(attrs);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor Graph::forward(OpKind kind, std::span<const Var> in, const OpAttrs& at, Tensor& aux) const {
    auto arity = [&](std::size_t n) {
        if (in.size() != n) {
            shape_fail(kind, "expected " + std::to_string(n) + " inputs, got " + std::to_string(in.size()));
        }
    };
    switch (kind) {
        case OpKind::MatMul: {
            arity(2);
            const Tensor& a = in[0].value();
            const Tensor& b = in[1].value();
            require_rank(kind, a, 2, "left operand");
            require_rank(kind, b, 2, "right operand");
            if (a.dim(1) != b.dim(0)) {
                shape_fail(kind, "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                                     shape_str(b.shape()));
            }
            Tensor c({a.dim(0), b.dim(1)});
            gemm_nn(a.data().data(), b.data().data(), c.data().data(), a.dim(0), a.dim(1), b.dim(1));
            return c;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            arity(2);
            const Tensor& a = in[0].value();
            const Tensor& b = in[1].value();
            if (!is_suffix(a.shape(), b.shape())) {
                shape_fail(kind, "shapes do not conform: " + shape_str(a.shape()) + " vs " +
                                     shape_str(b.shape()));
            }
            Tensor c = a;
            const std::size_t nb = b.size();
            auto& cv = c.values();
            const auto& bv = b.values();
            for (std::size_t i = 0; i < cv.size(); ++i) {
                const double y = bv[i % nb];
                if (kind == OpKind::Add) cv[i] += y;
                else if (kind == OpKind::Sub) cv[i] -= y;
                else cv[i] *= y;
            }
            return c;
        }
        case OpKind::Scale: {
            arity(1);
            return in[0].value() * at.scalar;
        }
        case OpKind::Gelu: {
            arity(1);
            Tensor c = in[0].value();
            for (double& v : c.values()) v = gelu_value(v);
            return c;
        }
        case OpKind::SoftmaxLastDim: {
            arity(1);
            Tensor c = in[0].value();
            if (c.rank() == 0) shape_fail(kind, "scalar input");
            const std::size_t n = c.shape().back();
            for (std::size_t r = 0; r < c.size() / n; ++r) {
                double* x = c.data().data() + r * n;
                double mx = x[0];
                for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += (x[j] = std::exp(x[j] - mx));
                for (std::size_t j = 0; j < n; ++j) x[j] /= s;
            }
            return c;
        }
        case OpKind::LayerNormLastDim: {
            arity(1);
            Tensor c = in[0].value();
            if (c.rank() == 0) shape_fail(kind, "scalar input");
            const std::size_t n = c.shape().back();
            const double nd = static_cast<double>(n);
            for (std::size_t r = 0; r < c.size() / n; ++r) {
                double* x = c.data().data() + r * n;
                double mu = 0.0;
                for (std::size_t j = 0; j < n; ++j) mu += x[j];
                mu /= nd;
                double var = 0.0;
                for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
                var /= nd;
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                for (std::size_t j = 0; j < n; ++j) x[j] = (x[j] - mu) * inv;
            }
            return c;
        }
        case OpKind::Sum:
        case OpKind::Mean: {
            arity(1);
            const Tensor& a = in[0].value();
            double s = 0.0;
            for (double v : a.values()) s += v;
            if (kind == OpKind::Mean) {
                if (a.size() == 0) shape_fail(kind, "empty input");
                s /= static_cast<double>(a.size());
            }
            return Tensor::scalar(s);
        }
        case OpKind::L2Norm: {
            arity(1);
            return Tensor::scalar(visteer::l2_norm(in[0].value().data()));
        }
        case OpKind::EmbedLookup: {
            arity(1);
            const Tensor& table = in[0].value();
            require_rank(kind, table, 2, "table");
            const std::size_t d = table.dim(1);
            Tensor c({at.ids.size(), d});
            for (std::size_t t = 0; t < at.ids.size(); ++t) {
                if (at.ids[t] >= table.dim(0)) {
                    shape_fail(kind, "id " + std::to_string(at.ids[t]) + " out of range for table " +
                                         shape_str(table.shape()));
                }
                std::copy_n(table.data().data() + at.ids[t] * d, d, c.data().data() + t * d);
            }
            return c;
        }
        case OpKind::Concat: {
            if (in.empty()) shape_fail(kind, "no inputs");
            const Tensor& first = in[0].value();
            require_rank(kind, first, 2, "input 0");
            const std::size_t cols = first.dim(1);
            std::size_t rows = 0;
            for (std::size_t i = 0; i < in.size(); ++i) {
                const Tensor& t = in[i].value();
                if (t.rank() != 2 || t.dim(1) != cols) {
                    shape_fail(kind, "input " + std::to_string(i) + " has shape " +
                                         shape_str(t.shape()) + ", expected [*, " +
                                         std::to_string(cols) + "]");
                }
                rows += t.dim(0);
            }
            std::vector<double> v;
            v.reserve(rows * cols);
            for (const Var& x : in) v.insert(v.end(), x.value().values().begin(), x.value().values().end());
            return Tensor({rows, cols}, std::move(v));
        }
        case OpKind::Slice: {
            arity(1);
            const Tensor& a = in[0].value();
            require_rank(kind, a, 2, "input");
            if (at.a > at.b || at.b > a.dim(0)) {
                shape_fail(kind, "rows [" + std::to_string(at.a) + ", " + std::to_string(at.b) +
                                     ") out of range for " + shape_str(a.shape()));
            }
            return a.rows(at.a, at.b);
        }
        case OpKind::Transpose: {
            arity(1);
            const Tensor& a = in[0].value();
            require_rank(kind, a, 2, "input");
            Tensor c({a.dim(1), a.dim(0)});
            for (std::size_t i = 0; i < a.dim(0); ++i)
                for (std::size_t j = 0; j < a.dim(1); ++j) c.at(j, i) = a.at(i, j);
            return c;
        }
        case OpKind::Reshape: {
            arity(1);
            if (numel(at.shape) != in[0].value().size()) {
                shape_fail(kind, "cannot view " + shape_str(in[0].shape()) + " as " + shape_str(at.shape));
            }
            return in[0].value().reshaped(at.shape);
        }
        case OpKind::Attention: {
            arity(3);
            const Tensor& q = in[0].value();
            const Tensor& k = in[1].value();
            const Tensor& v = in[2].value();
            require_rank(kind, q, 2, "query");
            require_rank(kind, k, 2, "key");
            require_rank(kind, v, 2, "value");
            const std::size_t heads = at.a;
            const std::size_t d = q.dim(1);
            if (heads == 0 || d % heads != 0) {
                shape_fail(kind, "width " + std::to_string(d) + " not divisible by " +
                                     std::to_string(heads) + " heads");
            }
            if (k.dim(1) != d || v.dim(1) != d || k.dim(0) != v.dim(0)) {
                shape_fail(kind, "query " + shape_str(q.shape()) + ", key " + shape_str(k.shape()) +
                                     ", value " + shape_str(v.shape()) + " do not conform");
            }
            const std::size_t tq = q.dim(0);
            const std::size_t tk = k.dim(0);
            const std::size_t dh = d / heads;
            const bool causal = at.flag;
            const std::size_t off = at.b;
            if (causal && tq > 0 && off + tq > tk) {
                shape_fail(kind, "causal offset " + std::to_string(off) + " + " + std::to_string(tq) +
                                     " queries exceeds " + std::to_string(tk) + " keys");
            }
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            aux = Tensor({heads, tq, tk});
            Tensor out({tq, d});
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < tq; ++i) {
                    double* p = &aux.at(h, i, 0);
                    double mx = -INFINITY;
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (!attention_visible(causal, off, i, j)) continue;
                        double s = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) s += q.at(i, c0 + c) * k.at(j, c0 + c);
                        p[j] = s * sc;
                        mx = std::max(mx, p[j]);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (!attention_visible(causal, off, i, j)) continue;
                        z += (p[j] = std::exp(p[j] - mx));
                    }
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (!attention_visible(causal, off, i, j)) continue;
                        p[j] /= z;
                        const double w = p[j];
                        for (std::size_t c = 0; c < dh; ++c) out.at(i, c0 + c) += w * v.at(j, c0 + c);
                    }
                }
            }
            return out;
        }
        case OpKind::Patchify: {
            arity(1);
            const Tensor& x = in[0].value();
            require_rank(kind, x, 3, "image");
            const std::size_t p = at.a;
            const std::size_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
            if (p == 0 || H % p != 0 || W % p != 0) {
                shape_fail(kind, "patch " + std::to_string(p) + " does not tile " + shape_str(x.shape()));
            }
            const std::size_t gh = H / p, gw = W / p;
            Tensor out({gh * gw, p * p * C});
            for (std::size_t r = 0; r < gh; ++r)
                for (std::size_t s = 0; s < gw; ++s)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx)
                            for (std::size_t c = 0; c < C; ++c)
                                out.at(r * gw + s, (dy * p + dx) * C + c) = x.at(r * p + dy, s * p + dx, c);
            return out;
        }
        case OpKind::Dct2d: {
            arity(1);
            return dct2d_values(in[0].value());
        }
        case OpKind::Idct2d: {
            arity(1);
            return idct2d_values(in[0].value());
        }
        case OpKind::ResizeBilinear: {
            arity(1);
            return resize_bilinear_values(in[0].value(), at.a, at.b);
        }
        case OpKind::Leaf: break;
    }
    shape_fail(kind, "unsupported");
}

Tensor& Graph::grad_slot(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.shape() != n.val().shape() || n.grad.size() != n.val().size()) {
        n.grad = Tensor(n.val().shape());
    }
    return n.grad;
}

void Graph::backward(Var loss) {
    if (loss.graph != this) throw std::invalid_argument("backward: loss belongs to a different graph");
    const Tensor& lv = node(loss.id).val();
    if (lv.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(lv.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    grad_slot(loss.id)[0] = 1.0;
    for (int id = loss.id; id >= 0; --id) {
        const Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.kind == OpKind::Leaf || !n.requires_grad || n.grad.size() == 0) continue;
        propagate(n);
    }
    for (Node& n : nodes_) {
        if (n.kind == OpKind::Leaf && n.requires_grad && n.grad.size() != n.val().size()) {
            n.grad = Tensor(n.val().shape());
        }
    }
}

void Graph::propagate(const Node& n) {
    const Tensor& g = n.grad;
    auto in_val = [&](std::size_t i) -> const Tensor& { return nodes_[static_cast<std::size_t>(n.inputs[i])].val(); };
    auto wants = [&](std::size_t i) { return nodes_[static_cast<std::size_t>(n.inputs[i])].requires_grad; };
    auto slot = [&](std::size_t i) -> Tensor& { return grad_slot(n.inputs[i]); };

    switch (n.kind) {
        case OpKind::MatMul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
            if (wants(0)) gemm_nt(g.data().data(), b.data().data(), slot(0).data().data(), m, p, k);
            if (wants(1)) gemm_tn(a.data().data(), g.data().data(), slot(1).data().data(), m, k, p);
            break;
        }
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor& a = in_val(0);
            const Tensor& b = in_val(1);
            const std::size_t nb = b.size();
            if (wants(0)) {
                auto& ga = slot(0).values();
                for (std::size_t i = 0; i < ga.size(); ++i)
                    ga[i] += n.kind == OpKind::Mul ? g[i] * b[i % nb] : g[i];
            }
            if (wants(1)) {
                auto& gb = slot(1).values();
                for (std::size_t i = 0; i < g.size(); ++i) {
                    double d = g[i];
                    if (n.kind == OpKind::Sub) d = -d;
                    else if (n.kind == OpKind::Mul) d *= a[i];
                    gb[i % nb] += d;
                }
            }
            break;
        }
        case OpKind::Scale: {
            if (wants(0)) {
                auto& ga = slot(0).values();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * n.attrs.scalar;
            }
            break;
        }
        case OpKind::Gelu: {
            if (wants(0)) {
                const Tensor& a = in_val(0);
                auto& ga = slot(0).values();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * gelu_deriv(a[i]);
            }
            break;
        }
        case OpKind::SoftmaxLastDim: {
            if (!wants(0)) break;
            const Tensor& y = n.value;
            auto& ga = slot(0).values();
            const std::size_t w = y.shape().back();
            for (std::size_t r = 0; r < y.size() / w; ++r) {
                const std::size_t o = r * w;
                double s = 0.0;
                for (std::size_t j = 0; j < w; ++j) s += g[o + j] * y[o + j];
                for (std::size_t j = 0; j < w; ++j) ga[o + j] += y[o + j] * (g[o + j] - s);
            }
            break;
        }
        case OpKind::LayerNormLastDim: {
            if (!wants(0)) break;
            const Tensor& x = in_val(0);
            const Tensor& y = n.value;
            auto& ga = slot(0).values();
            const std::size_t w = y.shape().back();
            const double wd = static_cast<double>(w);
            for (std::size_t r = 0; r < y.size() / w; ++r) {
                const std::size_t o = r * w;
                double mu = 0.0;
                for (std::size_t j = 0; j < w; ++j) mu += x[o + j];
                mu /= wd;
                double var = 0.0;
                for (std::size_t j = 0; j < w; ++j) var += (x[o + j] - mu) * (x[o + j] - mu);
                var /= wd;
                const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
                double mg = 0.0, mgy = 0.0;
                for (std::size_t j = 0; j < w; ++j) {
                    mg += g[o + j];
                    mgy += g[o + j] * y[o + j];
                }
                mg /= wd;
                mgy /= wd;
                for (std::size_t j = 0; j < w; ++j) ga[o + j] += inv * (g[o + j] - mg - y[o + j] * mgy);
            }
            break;
        }
        case OpKind::Sum:
        case OpKind::Mean: {
            if (!wants(0)) break;
            auto& ga = slot(0).values();
            double d = g[0];
            if (n.kind == OpKind::Mean) d /= static_cast<double>(ga.size());
            for (double& v : ga) v += d;
            break;
        }
        case OpKind::L2Norm: {
            if (!wants(0)) break;
            const Tensor& x = in_val(0);
            const double nrm = n.value[0];
            if (nrm == 0.0) break;
            auto& ga = slot(0).values();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * x[i] / nrm;
            break;
        }
        case OpKind::EmbedLookup: {
            if (!wants(0)) break;
            Tensor& gt = slot(0);
            const std::size_t d = gt.dim(1);
            for (std::size_t t = 0; t < n.attrs.ids.size(); ++t) {
                double* dst = gt.data().data() + n.attrs.ids[t] * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += g[t * d + j];
            }
            break;
        }
        case OpKind::Concat: {
            std::size_t off = 0;
            for (std::size_t i = 0; i < n.inputs.size(); ++i) {
                const std::size_t len = in_val(i).size();
                if (wants(i)) {
                    auto& gi = slot(i).values();
                    for (std::size_t j = 0; j < len; ++j) gi[j] += g[off + j];
                }
                off += len;
            }
            break;
        }
        case OpKind::Slice: {
            if (!wants(0)) break;
            Tensor& ga = slot(0);
            const std::size_t cols = ga.dim(1);
            double* dst = ga.data().data() + n.attrs.a * cols;
            for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
            break;
        }
        case OpKind::Transpose: {
            if (!wants(0)) break;
            Tensor& ga = slot(0);
            for (std::size_t i = 0; i < ga.dim(0); ++i)
                for (std::size_t j = 0; j < ga.dim(1); ++j) ga.at(i, j) += g.at(j, i);
            break;
        }
        case OpKind::Reshape: {
            if (!wants(0)) break;
            auto& ga = slot(0).values();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
            break;
        }
        case OpKind::Attention: {
            const Tensor& q = in_val(0);
            const Tensor& k = in_val(1);
            const Tensor& v = in_val(2);
            const Tensor& prob = n.aux;
            const std::size_t heads = n.attrs.a;
            const bool causal = n.attrs.flag;
            const std::size_t off = n.attrs.b;
            const std::size_t tq = q.dim(0), tk = k.dim(0), d = q.dim(1), dh = d / heads;
            const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
            Tensor gq({tq, d}), gk({tk, d}), gv({tk, d});
            std::vector<double> dp(tk);
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t c0 = h * dh;
                for (std::size_t i = 0; i < tq; ++i) {
                    const double* p = prob.data().data() + (h * tq + i) * tk;
                    double s = 0.0;
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (!attention_visible(causal, off, i, j)) {
                            dp[j] = 0.0;
                            continue;
                        }
                        double t = 0.0;
                        for (std::size_t c = 0; c < dh; ++c) {
                            t += g.at(i, c0 + c) * v.at(j, c0 + c);
                            gv.at(j, c0 + c) += p[j] * g.at(i, c0 + c);
                        }
                        dp[j] = t;
                        s += t * p[j];
                    }
                    for (std::size_t j = 0; j < tk; ++j) {
                        if (!attention_visible(causal, off, i, j)) continue;
                        const double ds = p[j] * (dp[j] - s) * sc;
                        if (ds == 0.0) continue;
                        for (std::size_t c = 0; c < dh; ++c) {
                            gq.at(i, c0 + c) += ds * k.at(j, c0 + c);
                            gk.at(j, c0 + c) += ds * q.at(i, c0 + c);
                        }
                    }
                }
            }
            if (wants(0)) slot(0) += gq;
            if (wants(1)) slot(1) += gk;
            if (wants(2)) slot(2) += gv;
            break;
        }
        case OpKind::Patchify: {
            if (!wants(0)) break;
            Tensor& gx = slot(0);
            const std::size_t p = n.attrs.a;
            const std::size_t W = gx.dim(1), C = gx.dim(2);
            const std::size_t gh = gx.dim(0) / p, gw = W / p;
            for (std::size_t r = 0; r < gh; ++r)
                for (std::size_t s = 0; s < gw; ++s)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx)
                            for (std::size_t c = 0; c < C; ++c)
                                gx.at(r * p + dy, s * p + dx, c) += g.at(r * gw + s, (dy * p + dx) * C + c);
            break;
        }
        case OpKind::Dct2d: {
            if (wants(0)) slot(0) += idct2d_values(g);
            break;
        }
        case OpKind::Idct2d: {
            if (wants(0)) slot(0) += dct2d_values(g);
            break;
        }
        case OpKind::ResizeBilinear: {
            if (!wants(0)) break;
            const Tensor& x = in_val(0);
            slot(0) += resize_bilinear_adjoint(g, x.dim(0), x.dim(1));
            break;
        }
        case OpKind::Leaf: break;
    }
}

namespace {

Graph& graph_of(std::span<const Var> vars, OpKind kind) {
    if (vars.empty() || vars[0].graph == nullptr) {
        throw std::invalid_argument(std::string(op_name(kind)) + ": unbound input");
    }
    return *vars[0].graph;
}

Var unary(OpKind kind, Var a, OpAttrs attrs = {}) {
    const Var in[] = {a};
    return graph_of(in, kind).apply(kind, in, std::move(attrs));
}

Var binary(OpKind kind, Var a, Var b) {
    const Var in[] = {a, b};
    return graph_of(in, kind).apply(kind, in);
}

}  // namespace

Var matmul(Var a, Var b) { return binary(OpKind::MatMul, a, b); }
Var add(Var a, Var b) { return binary(OpKind::Add, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::Sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::Mul, a, b); }

Var scale(Var a, double s) {
    OpAttrs at;
    at.scalar = s;
    return unary(OpKind::Scale, a, std::move(at));
}

Var gelu(Var a) { return unary(OpKind::Gelu, a); }
Var softmax(Var a) { return unary(OpKind::SoftmaxLastDim, a); }
Var layer_norm(Var a) { return unary(OpKind::LayerNormLastDim, a); }
Var sum(Var a) { return unary(OpKind::Sum, a); }
Var mean(Var a) { return unary(OpKind::Mean, a); }
Var l2_norm(Var a) { return unary(OpKind::L2Norm, a); }

Var embed(Var table, std::vector<std::size_t> ids) {
    OpAttrs at;
    at.ids = std::move(ids);
    return unary(OpKind::EmbedLookup, table, std::move(at));
}

Var concat_rows(std::span<const Var> parts) {
    return graph_of(parts, OpKind::Concat).apply(OpKind::Concat, parts);
}

Var concat_rows(std::initializer_list<Var> parts) {
    return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
    OpAttrs at;
    at.a = begin;
    at.b = end;
    return unary(OpKind::Slice, a, std::move(at));
}

Var transpose(Var a) { return unary(OpKind::Transpose, a); }

Var reshape(Var a, Shape shape) {
    OpAttrs at;
    at.shape = std::move(shape);
    return unary(OpKind::Reshape, a, std::move(at));
}

Var attention(Var q, Var k, Var v, std::size_t heads, bool causal, std::size_t offset) {
    OpAttrs at;
    at.a = heads;
    at.b = offset;
    at.flag = causal;
    const Var in[] = {q, k, v};
    return graph_of(in, OpKind::Attention).apply(OpKind::Attention, in, std::move(at));
}

Var patchify(Var image, std::size_t patch) {
    OpAttrs at;
    at.a = patch;
    return unary(OpKind::Patchify, image, std::move(at));
}

Var dct2d(Var image) { return unary(OpKind::Dct2d, image); }
Var idct2d(Var spectrum) { return unary(OpKind::Idct2d, spectrum); }

Var resize_bilinear(Var image, std::size_t height, std::size_t width) {
    OpAttrs at;
    at.a = height;
    at.b = width;
    return unary(OpKind::ResizeBilinear, image, std::move(at));
}

}  // namespace visteer
