#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ptbn {

/// Element type used everywhere in the library.
using Scalar = double;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

class GradTape;

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;
    GradTape* tape = nullptr;
};

}  // namespace detail

/// Dense row-major array (batch x channel x height x width, or batch x feature).
///
/// Copies of a Tensor share storage. A tensor produced by an op whose inputs
/// live on a GradTape is itself recorded on that tape; tracked tensors must
/// not be used after their tape is destroyed.
class Tensor {
   public:
    Tensor();
    explicit Tensor(Shape shape, Scalar fill = 0.0);
    Tensor(Shape shape, std::vector<Scalar> data);

    static Tensor scalar(Scalar v) { return Tensor(Shape{1}, std::vector<Scalar>{v}); }
    static Tensor from_rows(const std::vector<std::vector<Scalar>>& rows);

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const Scalar> data() const { return node_->data; }
    /// Writable view. Only valid on untracked tensors.
    std::span<Scalar> mutable_data();
    const std::vector<Scalar>& values() const { return node_->data; }

    Scalar operator[](std::size_t i) const { return node_->data[i]; }
    Scalar at(std::size_t r, std::size_t c) const;
    Scalar item() const;

    bool tracked() const { return node_->tape != nullptr; }
    GradTape* tape() const { return node_->tape; }

    /// Gradient accumulated by the last GradTape::backward; empty if none.
    std::span<const Scalar> grad() const { return node_->grad; }

    /// Untracked deep copy.
    Tensor detach() const;

    /// Rows [begin, end) along axis 0, untracked.
    Tensor slice_rows(std::size_t begin, std::size_t end) const;
    /// Rows selected by index along axis 0, untracked.
    Tensor gather_rows(std::span<const std::size_t> index) const;

    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::TensorNode> node) { return Tensor(std::move(node)); }

   private:
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<detail::TensorNode> node_;
};

/// Concatenate along axis 0. Untracked.
Tensor concat_rows(std::span<const Tensor> parts);

/// Ordered record of differentiable operations.
///
/// Ops are appended as they execute; backward() replays the record in reverse,
/// visiting each entry once. A tape is single-threaded; independent tapes share
/// nothing.
class GradTape {
   public:
    using BackwardFn = std::function<void()>;

    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;
    ~GradTape();

    /// Registers a tracked leaf holding a copy of `value`.
    Tensor watch(const Tensor& value);

    /// Reverse-mode sweep from a scalar loss. Resets all gradients first, so
    /// leaves unreachable from `loss` end with zero gradient.
    void backward(const Tensor& loss);

    std::size_t size() const { return entries_.size(); }
    const std::string& op_name(std::size_t i) const { return entries_.at(i).name; }

    /// Entry indices in the order the most recent backward() visited them.
    const std::vector<std::size_t>& last_visit_order() const { return visit_order_; }

    // Used by op implementations.
    Tensor record(std::string name, std::vector<std::shared_ptr<detail::TensorNode>> inputs,
                  std::shared_ptr<detail::TensorNode> output, BackwardFn fn);

   private:
    struct Entry {
        std::string name;
        std::vector<std::shared_ptr<detail::TensorNode>> inputs;
        std::shared_ptr<detail::TensorNode> output;
        BackwardFn backward;
    };
    std::vector<Entry> entries_;
    std::vector<std::size_t> visit_order_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Each throws ShapeError on shape mismatch and
// NumericalError if it produces a non-finite value.

/// a[m,k] x b[k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);

/// Cross-correlation of x[N,C,H,W] with w[F,C,kh,kw].
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t padding);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);
Tensor scale(const Tensor& x, Scalar c);
Tensor add_scalar(const Tensor& x, Scalar c);
/// 1/sqrt(x); requires x > 0.
Tensor rsqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);

// Per-channel broadcasts: v has one entry per index of axis 1 (rank 2 or 4).
Tensor add_channel(const Tensor& x, const Tensor& v);
Tensor sub_channel(const Tensor& x, const Tensor& v);
Tensor mul_channel(const Tensor& x, const Tensor& v);
/// Mean over every axis except axis 1 -> [C].
Tensor channel_mean(const Tensor& x);

// Per-row broadcasts on a rank-2 x[R,L]: v has R entries.
Tensor sub_row(const Tensor& x, const Tensor& v);
Tensor mul_row(const Tensor& x, const Tensor& v);
/// Mean along axis 1 of x[R,L] -> [R].
Tensor row_mean(const Tensor& x);

/// [N,C,H,W] -> [N,C], averaging over H,W.
Tensor global_avg_pool(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Row-wise softmax of z[N,K] with max subtraction.
Tensor softmax(const Tensor& z);
Tensor log_softmax(const Tensor& z);
/// -mean_i logp[i, labels[i]] -> scalar.
Tensor nll_loss(const Tensor& logp, std::span<const int> labels);

}  // namespace ptbn
