#include "ptbn/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <sstream>
#include <utility>

#include "ptbn/error.hpp"

namespace ptbn {

using detail::TensorNode;

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > 4) {
        throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    }
    for (auto d : shape) {
        if (d == 0) throw ShapeError("tensor extents must be positive: " + shape_string(shape));
    }
}

void check_finite(const char* op, const std::vector<Scalar>& data) {
    constexpr std::uint64_t exponent = 0x7ff0000000000000ULL;
    bool bad = false;
    for (Scalar v : data) bad |= (std::bit_cast<std::uint64_t>(v) & exponent) == exponent;
    if (bad) {
        throw NumericalError(std::string("non-finite value produced by ") + op);
    }
}

GradTape* common_tape(std::initializer_list<const Tensor*> inputs) {
    GradTape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (!t->tracked()) continue;
        if (tape && tape != t->tape()) throw ShapeError("inputs recorded on different tapes");
        tape = t->tape();
    }
    return tape;
}

// Builds the result node and, when any input is tracked, records it together
// with the closure produced by `make_backward(out)`.
template <typename F>
Tensor emit(const char* name, Shape shape, std::vector<Scalar> data,
            std::initializer_list<const Tensor*> inputs, F&& make_backward) {
    check_finite(name, data);
    auto out = std::make_shared<TensorNode>();
    out->shape = std::move(shape);
    out->data = std::move(data);
    GradTape* tape = common_tape(inputs);
    if (!tape) return Tensor::from_node(std::move(out));
    std::vector<std::shared_ptr<TensorNode>> nodes;
    for (const Tensor* t : inputs) nodes.push_back(t->node());
    GradTape::BackwardFn fn = make_backward(out.get());
    return tape->record(name, std::move(nodes), std::move(out), std::move(fn));
}

// Gradient buffer of `n` if it participates in the current sweep.
Scalar* grad_of(TensorNode* n) { return (n->tape && !n->grad.empty()) ? n->grad.data() : nullptr; }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

struct ChannelLayout {
    std::size_t outer, channels, inner;
};

ChannelLayout channel_layout(const char* op, const Tensor& x, const Tensor* v) {
    if (x.rank() < 2) throw ShapeError(std::string(op) + ": need rank >= 2, got " + shape_string(x.shape()));
    ChannelLayout l{x.dim(0), x.dim(1), 1};
    for (std::size_t i = 2; i < x.rank(); ++i) l.inner *= x.dim(i);
    if (v && v->numel() != l.channels) {
        throw ShapeError(std::string(op) + ": per-channel vector has " + std::to_string(v->numel()) +
                         " entries for " + std::to_string(l.channels) + " channels");
    }
    return l;
}

void require_rows(const char* op, const Tensor& x, const Tensor* v) {
    if (x.rank() != 2) throw ShapeError(std::string(op) + ": need rank 2, got " + shape_string(x.shape()));
    if (v && v->numel() != x.dim(0)) throw ShapeError(std::string(op) + ": per-row vector size mismatch");
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) {
    node_->shape = Shape{1};
    node_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, Scalar fill) : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    node_->data.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data) : node_(std::make_shared<TensorNode>()) {
    validate_shape(shape);
    if (shape_numel(shape) != data.size()) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
}

Tensor Tensor::from_rows(const std::vector<std::vector<Scalar>>& rows) {
    if (rows.empty() || rows.front().empty()) throw ShapeError("from_rows: empty input");
    const std::size_t cols = rows.front().size();
    std::vector<Scalar> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw ShapeError("from_rows: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor(Shape{rows.size(), cols}, std::move(data));
}

std::span<Scalar> Tensor::mutable_data() {
    if (tracked()) throw ShapeError("cannot mutate a tracked tensor");
    return node_->data;
}

Scalar Tensor::at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("at(r, c) needs a rank-2 tensor");
    return node_->data.at(r * dim(1) + c);
}

Scalar Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape()));
    return node_->data[0];
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->data); }

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > dim(0)) throw ShapeError("slice_rows: bad range");
    const std::size_t row = numel() / dim(0);
    Shape s = shape();
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<Scalar>(node_->data.begin() + begin * row,
                                                    node_->data.begin() + end * row));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> index) const {
    if (index.empty()) throw ShapeError("gather_rows: empty index");
    const std::size_t row = numel() / dim(0);
    std::vector<Scalar> out;
    out.reserve(index.size() * row);
    for (auto i : index) {
        if (i >= dim(0)) throw ShapeError("gather_rows: index out of range");
        out.insert(out.end(), node_->data.begin() + i * row, node_->data.begin() + (i + 1) * row);
    }
    Shape s = shape();
    s[0] = index.size();
    return Tensor(std::move(s), std::move(out));
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    Shape s = parts.front().shape();
    std::size_t rows = 0;
    std::vector<Scalar> out;
    for (const auto& p : parts) {
        if (p.rank() != s.size() || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
            throw ShapeError("concat_rows: trailing shapes differ");
        }
        rows += p.dim(0);
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    s[0] = rows;
    return Tensor(std::move(s), std::move(out));
}

// ---------------------------------------------------------------------------

GradTape::~GradTape() {
    for (auto& e : entries_) {
        e.output->tape = nullptr;
        for (auto& in : e.inputs) {
            if (in->tape == this) in->tape = nullptr;
        }
    }
}

Tensor GradTape::watch(const Tensor& value) {
    auto leaf = std::make_shared<TensorNode>();
    leaf->shape = value.shape();
    leaf->data = value.values();
    leaf->tape = this;
    entries_.push_back(Entry{"leaf", {}, leaf, nullptr});
    return Tensor::from_node(std::move(leaf));
}

Tensor GradTape::record(std::string name, std::vector<std::shared_ptr<TensorNode>> inputs,
                        std::shared_ptr<TensorNode> output, BackwardFn fn) {
    output->tape = this;
    entries_.push_back(Entry{std::move(name), std::move(inputs), output, std::move(fn)});
    return Tensor::from_node(std::move(output));
}

void GradTape::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_string(loss.shape()));
    if (loss.tape() != this) throw ShapeError("backward: loss is not on this tape");
    for (auto& e : entries_) e.output->grad.assign(e.output->data.size(), 0.0);
    loss.node()->grad[0] = 1.0;
    visit_order_.clear();
    visit_order_.reserve(entries_.size());
    for (std::size_t i = entries_.size(); i-- > 0;) {
        visit_order_.push_back(i);
        if (entries_[i].backward) entries_[i].backward();
    }
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<Scalar> c(m * n, 0.0);
    const Scalar* pa = a.data().data();
    const Scalar* pb = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        Scalar* ci = c.data() + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const Scalar av = pa[i * k + kk];
            const Scalar* bk = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
    auto an = a.node().get();
    auto bn = b.node().get();
    return emit("matmul", Shape{m, n}, std::move(c), {&a, &b}, [=](TensorNode* out) {
        return [=] {
            const Scalar* gc = out->grad.data();
            if (Scalar* ga = grad_of(an)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        Scalar s = 0.0;
                        const Scalar* bk = bn->data.data() + kk * n;
                        for (std::size_t j = 0; j < n; ++j) s += gc[i * n + j] * bk[j];
                        ga[i * k + kk] += s;
                    }
            }
            if (Scalar* gb = grad_of(bn)) {
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        const Scalar av = an->data[i * k + kk];
                        Scalar* gbk = gb + kk * n;
                        for (std::size_t j = 0; j < n; ++j) gbk[j] += av * gc[i * n + j];
                    }
            }
        };
    });
}

Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding) {
    if (x.rank() != 4 || w.rank() != 4 || x.dim(1) != w.dim(1)) {
        throw ShapeError("conv2d: incompatible shapes " + shape_string(x.shape()) + " and " +
                         shape_string(w.shape()));
    }
    if (stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t F = w.dim(0), KH = w.dim(2), KW = w.dim(3);
    if (KH > H + 2 * padding || KW > W + 2 * padding) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    const std::size_t OH = (H + 2 * padding - KH) / stride + 1;
    const std::size_t OW = (W + 2 * padding - KW) / stride + 1;
    const auto pad = static_cast<std::ptrdiff_t>(padding);

    // Output positions whose input row/column index stays in bounds, per tap.
    const std::size_t P = OH * OW;          // output positions per image
    const std::size_t Kc = C * KH * KW;     // taps per filter

    // Column matrix [Kc, P] of one image; padded taps stay zero.
    auto im2col = [=](const Scalar* xn, Scalar* col) {
        std::fill(col, col + Kc * P, 0.0);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ki = 0; ki < KH; ++ki)
                for (std::size_t kj = 0; kj < KW; ++kj) {
                    Scalar* crow = col + ((c * KH + ki) * KW + kj) * P;
                    for (std::size_t oh = 0; oh < OH; ++oh) {
                        const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        const Scalar* xr = xn + (c * H + static_cast<std::size_t>(ih)) * W;
                        for (std::size_t ow = 0; ow < OW; ++ow) {
                            const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - pad;
                            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) {
                                crow[oh * OW + ow] = xr[static_cast<std::size_t>(iw)];
                            }
                        }
                    }
                }
    };

    std::vector<Scalar> out(N * F * P, 0.0);
    std::vector<Scalar> col(Kc * P);
    const Scalar* px = x.data().data();
    const Scalar* pw = w.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        im2col(px + n * C * H * W, col.data());
        for (std::size_t f = 0; f < F; ++f) {
            Scalar* __restrict o = out.data() + (n * F + f) * P;
            for (std::size_t k = 0; k < Kc; ++k) {
                const Scalar wv = pw[f * Kc + k];
                const Scalar* __restrict cr = col.data() + k * P;
                for (std::size_t q = 0; q < P; ++q) o[q] += wv * cr[q];
            }
        }
    }

    auto xn = x.node().get();
    auto wn = w.node().get();
    return emit("conv2d", Shape{N, F, OH, OW}, std::move(out), {&x, &w}, [=](TensorNode* outn) {
        return [=] {
            const Scalar* g = outn->grad.data();
            Scalar* gx = grad_of(xn);
            Scalar* gw = grad_of(wn);
            const Scalar* pw2 = wn->data.data();
            std::vector<Scalar> col2(Kc * P), dcol(gx ? Kc * P : 0);
            for (std::size_t n = 0; n < N; ++n) {
                const Scalar* gn = g + n * F * P;
                if (gw) {
                    im2col(xn->data.data() + n * C * H * W, col2.data());
                    for (std::size_t f = 0; f < F; ++f)
                        for (std::size_t k = 0; k < Kc; ++k) {
                            const Scalar* cr = col2.data() + k * P;
                            const Scalar* gr = gn + f * P;
                            Scalar acc = 0.0;
                            for (std::size_t q = 0; q < P; ++q) acc += cr[q] * gr[q];
                            gw[f * Kc + k] += acc;
                        }
                }
                if (gx) {
                    std::fill(dcol.begin(), dcol.end(), 0.0);
                    for (std::size_t f = 0; f < F; ++f)
                        for (std::size_t k = 0; k < Kc; ++k) {
                            const Scalar wv = pw2[f * Kc + k];
                            Scalar* __restrict dr = dcol.data() + k * P;
                            const Scalar* __restrict gr = gn + f * P;
                            for (std::size_t q = 0; q < P; ++q) dr[q] += wv * gr[q];
                        }
                    // col2im
                    Scalar* gxn = gx + n * C * H * W;
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ki = 0; ki < KH; ++ki)
                            for (std::size_t kj = 0; kj < KW; ++kj) {
                                const Scalar* dr = dcol.data() + ((c * KH + ki) * KW + kj) * P;
                                for (std::size_t oh = 0; oh < OH; ++oh) {
                                    const auto ih = static_cast<std::ptrdiff_t>(oh * stride + ki) - pad;
                                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                    for (std::size_t ow = 0; ow < OW; ++ow) {
                                        const auto iw = static_cast<std::ptrdiff_t>(ow * stride + kj) - pad;
                                        if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(W)) {
                                            gxn[(c * H + static_cast<std::size_t>(ih)) * W +
                                                static_cast<std::size_t>(iw)] += dr[oh * OW + ow];
                                        }
                                    }
                                }
                            }
                }
            }
        };
    });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
    require_same_shape(name, a, b);
    std::vector<Scalar> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
    auto an = a.node().get();
    auto bn = b.node().get();
    return emit(name, a.shape(), std::move(out), {&a, &b}, [=](TensorNode* o) {
        return [=] {
            Scalar* ga = grad_of(an);
            Scalar* gb = grad_of(bn);
            for (std::size_t i = 0; i < o->data.size(); ++i) {
                const auto [da, db] = bwd(an->data[i], bn->data[i]);
                if (ga) ga[i] += o->grad[i] * da;
                if (gb) gb[i] += o->grad[i] * db;
            }
        };
    });
}

// `bwd(x, y)` returns dy/dx given input x and output y.
template <typename Fwd, typename Bwd>
Tensor elementwise_unary(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
    std::vector<Scalar> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
    auto xn = x.node().get();
    return emit(name, x.shape(), std::move(out), {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t i = 0; i < o->data.size(); ++i) gx[i] += o->grad[i] * bwd(xn->data[i], o->data[i]);
            }
        };
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "add", a, b, [](Scalar x, Scalar y) { return x + y; },
        [](Scalar, Scalar) { return std::pair<Scalar, Scalar>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "sub", a, b, [](Scalar x, Scalar y) { return x - y; },
        [](Scalar, Scalar) { return std::pair<Scalar, Scalar>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return elementwise_binary(
        "mul", a, b, [](Scalar x, Scalar y) { return x * y; },
        [](Scalar x, Scalar y) { return std::pair<Scalar, Scalar>{y, x}; });
}

Tensor square(const Tensor& x) {
    return elementwise_unary(
        "square", x, [](Scalar v) { return v * v; }, [](Scalar v, Scalar) { return 2.0 * v; });
}

Tensor scale(const Tensor& x, Scalar c) {
    return elementwise_unary(
        "scale", x, [c](Scalar v) { return c * v; }, [c](Scalar, Scalar) { return c; });
}

Tensor add_scalar(const Tensor& x, Scalar c) {
    return elementwise_unary(
        "add_scalar", x, [c](Scalar v) { return v + c; }, [](Scalar, Scalar) { return 1.0; });
}

Tensor rsqrt(const Tensor& x) {
    for (Scalar v : x.data()) {
        if (!(v > 0.0)) throw NumericalError("rsqrt: non-positive input");
    }
    return elementwise_unary(
        "rsqrt", x, [](Scalar v) { return 1.0 / std::sqrt(v); },
        [](Scalar v, Scalar y) { return -0.5 * y / v; });
}

Tensor relu(const Tensor& x) {
    return elementwise_unary(
        "relu", x, [](Scalar v) { return v > 0.0 ? v : 0.0; },
        [](Scalar v, Scalar) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
    }
    validate_shape(shape);
    auto xn = x.node().get();
    return emit("reshape", std::move(shape), x.values(), {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t i = 0; i < o->grad.size(); ++i) gx[i] += o->grad[i];
            }
        };
    });
}

// ---------------------------------------------------------------------------

Tensor add_channel(const Tensor& x, const Tensor& v) {
    const auto l = channel_layout("add_channel", x, &v);
    std::vector<Scalar> out(x.numel());
    for (std::size_t n = 0, i = 0; n < l.outer; ++n)
        for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t s = 0; s < l.inner; ++s, ++i) out[i] = x[i] + v[c];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return emit("add_channel", x.shape(), std::move(out), {&x, &v}, [=](TensorNode* o) {
        return [=] {
            Scalar* gx = grad_of(xn);
            Scalar* gv = grad_of(vn);
            for (std::size_t n = 0, i = 0; n < l.outer; ++n)
                for (std::size_t c = 0; c < l.channels; ++c)
                    for (std::size_t s = 0; s < l.inner; ++s, ++i) {
                        if (gx) gx[i] += o->grad[i];
                        if (gv) gv[c] += o->grad[i];
                    }
        };
    });
}

Tensor sub_channel(const Tensor& x, const Tensor& v) {
    const auto l = channel_layout("sub_channel", x, &v);
    std::vector<Scalar> out(x.numel());
    for (std::size_t n = 0, i = 0; n < l.outer; ++n)
        for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t s = 0; s < l.inner; ++s, ++i) out[i] = x[i] - v[c];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return emit("sub_channel", x.shape(), std::move(out), {&x, &v}, [=](TensorNode* o) {
        return [=] {
            Scalar* gx = grad_of(xn);
            Scalar* gv = grad_of(vn);
            for (std::size_t n = 0, i = 0; n < l.outer; ++n)
                for (std::size_t c = 0; c < l.channels; ++c)
                    for (std::size_t s = 0; s < l.inner; ++s, ++i) {
                        if (gx) gx[i] += o->grad[i];
                        if (gv) gv[c] -= o->grad[i];
                    }
        };
    });
}

Tensor mul_channel(const Tensor& x, const Tensor& v) {
    const auto l = channel_layout("mul_channel", x, &v);
    std::vector<Scalar> out(x.numel());
    for (std::size_t n = 0, i = 0; n < l.outer; ++n)
        for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t s = 0; s < l.inner; ++s, ++i) out[i] = x[i] * v[c];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return emit("mul_channel", x.shape(), std::move(out), {&x, &v}, [=](TensorNode* o) {
        return [=] {
            Scalar* gx = grad_of(xn);
            Scalar* gv = grad_of(vn);
            for (std::size_t n = 0, i = 0; n < l.outer; ++n)
                for (std::size_t c = 0; c < l.channels; ++c)
                    for (std::size_t s = 0; s < l.inner; ++s, ++i) {
                        if (gx) gx[i] += o->grad[i] * vn->data[c];
                        if (gv) gv[c] += o->grad[i] * xn->data[i];
                    }
        };
    });
}

Tensor channel_mean(const Tensor& x) {
    const auto l = channel_layout("channel_mean", x, nullptr);
    const Scalar count = static_cast<Scalar>(l.outer * l.inner);
    std::vector<Scalar> sums(l.channels, 0.0);
    for (std::size_t n = 0, i = 0; n < l.outer; ++n)
        for (std::size_t c = 0; c < l.channels; ++c)
            for (std::size_t s = 0; s < l.inner; ++s, ++i) sums[c] += x[i];
    for (auto& s : sums) s /= count;
    auto xn = x.node().get();
    return emit("channel_mean", Shape{l.channels}, std::move(sums), {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t n = 0, i = 0; n < l.outer; ++n)
                    for (std::size_t c = 0; c < l.channels; ++c)
                        for (std::size_t s = 0; s < l.inner; ++s, ++i) gx[i] += o->grad[c] / count;
            }
        };
    });
}

Tensor sub_row(const Tensor& x, const Tensor& v) {
    require_rows("sub_row", x, &v);
    const std::size_t R = x.dim(0), L = x.dim(1);
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < L; ++j) out[r * L + j] = x[r * L + j] - v[r];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return emit("sub_row", x.shape(), std::move(out), {&x, &v}, [=](TensorNode* o) {
        return [=] {
            Scalar* gx = grad_of(xn);
            Scalar* gv = grad_of(vn);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t j = 0; j < L; ++j) {
                    if (gx) gx[r * L + j] += o->grad[r * L + j];
                    if (gv) gv[r] -= o->grad[r * L + j];
                }
        };
    });
}

Tensor mul_row(const Tensor& x, const Tensor& v) {
    require_rows("mul_row", x, &v);
    const std::size_t R = x.dim(0), L = x.dim(1);
    std::vector<Scalar> out(x.numel());
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < L; ++j) out[r * L + j] = x[r * L + j] * v[r];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return emit("mul_row", x.shape(), std::move(out), {&x, &v}, [=](TensorNode* o) {
        return [=] {
            Scalar* gx = grad_of(xn);
            Scalar* gv = grad_of(vn);
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t j = 0; j < L; ++j) {
                    if (gx) gx[r * L + j] += o->grad[r * L + j] * vn->data[r];
                    if (gv) gv[r] += o->grad[r * L + j] * xn->data[r * L + j];
                }
        };
    });
}

Tensor row_mean(const Tensor& x) {
    require_rows("row_mean", x, nullptr);
    const std::size_t R = x.dim(0), L = x.dim(1);
    std::vector<Scalar> out(R, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t j = 0; j < L; ++j) out[r] += x[r * L + j];
        out[r] /= static_cast<Scalar>(L);
    }
    auto xn = x.node().get();
    return emit("row_mean", Shape{R}, std::move(out), {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t j = 0; j < L; ++j) gx[r * L + j] += o->grad[r] / static_cast<Scalar>(L);
            }
        };
    });
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: need rank 4, got " + shape_string(x.shape()));
    const std::size_t N = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
    std::vector<Scalar> out(N * C, 0.0);
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        for (std::size_t s = 0; s < S; ++s) out[nc] += x[nc * S + s];
        out[nc] /= static_cast<Scalar>(S);
    }
    auto xn = x.node().get();
    return emit("global_avg_pool", Shape{N, C}, std::move(out), {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t nc = 0; nc < N * C; ++nc)
                    for (std::size_t s = 0; s < S; ++s) gx[nc * S + s] += o->grad[nc] / static_cast<Scalar>(S);
            }
        };
    });
}

Tensor sum(const Tensor& x) {
    Scalar s = 0.0;
    for (Scalar v : x.data()) s += v;
    auto xn = x.node().get();
    return emit("sum", Shape{1}, {s}, {&x}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gx = grad_of(xn)) {
                for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += o->grad[0];
            }
        };
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<Scalar>(x.numel())); }

namespace {

void require_logits(const char* op, const Tensor& z) {
    if (z.rank() != 2) throw ShapeError(std::string(op) + ": need rank 2, got " + shape_string(z.shape()));
}

}  // namespace

Tensor softmax(const Tensor& z) {
    require_logits("softmax", z);
    const std::size_t N = z.dim(0), K = z.dim(1);
    std::vector<Scalar> out(N * K);
    for (std::size_t i = 0; i < N; ++i) {
        const Scalar* zi = z.data().data() + i * K;
        const Scalar mx = *std::max_element(zi, zi + K);
        Scalar total = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            out[i * K + k] = std::exp(zi[k] - mx);
            total += out[i * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) out[i * K + k] /= total;
    }
    auto zn = z.node().get();
    return emit("softmax", z.shape(), std::move(out), {&z}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gz = grad_of(zn)) {
                for (std::size_t i = 0; i < N; ++i) {
                    Scalar dot = 0.0;
                    for (std::size_t k = 0; k < K; ++k) dot += o->grad[i * K + k] * o->data[i * K + k];
                    for (std::size_t k = 0; k < K; ++k)
                        gz[i * K + k] += o->data[i * K + k] * (o->grad[i * K + k] - dot);
                }
            }
        };
    });
}

Tensor log_softmax(const Tensor& z) {
    require_logits("log_softmax", z);
    const std::size_t N = z.dim(0), K = z.dim(1);
    std::vector<Scalar> out(N * K);
    for (std::size_t i = 0; i < N; ++i) {
        const Scalar* zi = z.data().data() + i * K;
        const Scalar mx = *std::max_element(zi, zi + K);
        Scalar total = 0.0;
        for (std::size_t k = 0; k < K; ++k) total += std::exp(zi[k] - mx);
        const Scalar lse = mx + std::log(total);
        for (std::size_t k = 0; k < K; ++k) out[i * K + k] = zi[k] - lse;
    }
    auto zn = z.node().get();
    return emit("log_softmax", z.shape(), std::move(out), {&z}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* gz = grad_of(zn)) {
                for (std::size_t i = 0; i < N; ++i) {
                    Scalar gsum = 0.0;
                    for (std::size_t k = 0; k < K; ++k) gsum += o->grad[i * K + k];
                    for (std::size_t k = 0; k < K; ++k)
                        gz[i * K + k] += o->grad[i * K + k] - std::exp(o->data[i * K + k]) * gsum;
                }
            }
        };
    });
}

Tensor nll_loss(const Tensor& logp, std::span<const int> labels) {
    require_logits("nll_loss", logp);
    const std::size_t N = logp.dim(0), K = logp.dim(1);
    if (labels.size() != N) throw ShapeError("nll_loss: label count does not match batch");
    std::vector<std::size_t> idx(N);
    Scalar total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= K) {
            throw ShapeError("nll_loss: label " + std::to_string(labels[i]) + " out of range");
        }
        idx[i] = i * K + static_cast<std::size_t>(labels[i]);
        total -= logp[idx[i]];
    }
    auto ln = logp.node().get();
    return emit("nll_loss", Shape{1}, {total / static_cast<Scalar>(N)}, {&logp}, [=](TensorNode* o) {
        return [=] {
            if (Scalar* g = grad_of(ln)) {
                for (auto j : idx) g[j] -= o->grad[0] / static_cast<Scalar>(N);
            }
        };
    });
}

}  // namespace ptbn
