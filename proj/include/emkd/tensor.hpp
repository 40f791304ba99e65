#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "emkd/rng.hpp"

namespace emkd {

namespace detail {
struct Node;
}

/// Dense row-major tensor of 64-bit floats, rank 1..4, with reverse-mode
/// automatic differentiation. A Tensor is a cheap handle onto a tape node;
/// copies alias the same node. Values are immutable once an op has consumed
/// them (only grad buffers accumulate).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int extent(int axis) const;
    std::size_t numel() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;

    bool requires_grad() const;
    /// Gradient accumulated by backward(); zeros if backward never reached
    /// this tensor.
    const std::vector<double>& grad() const;
    void zero_grad();

    /// Value of a single-element tensor.
    double item() const;

    /// Copy of the values with no tape history and requires_grad = false.
    Tensor detach() const;

    /// Reverse-mode sweep from a single-element root. Accumulates d(root)/d(leaf)
    /// into every requires_grad leaf reachable from the root. Repeated calls
    /// without zero_grad() keep accumulating.
    void backward() const;

    detail::Node* node() const { return node_.get(); }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

/// Uniform values in [lo, hi) drawn from rng.
Tensor rand_uniform(std::vector<int> shape, double lo, double hi, Rng& rng, bool requires_grad = false);

// Elementwise (operands must have identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);
/// |x|^p elementwise. d/dx = p * |x|^(p-1) * sign(x), taken as 0 at x = 0.
Tensor abs_pow(const Tensor& a, double p);
/// 1 / (x + eps) elementwise.
Tensor recip(const Tensor& a, double eps = 0.0);

/// Sum of all elements -> single-element tensor.
Tensor sum(const Tensor& a);
/// sqrt(sum x^2) -> single-element tensor. Gradient x / max(norm, 1e-300):
/// finite (zero) at the origin where the true derivative is unbounded.
Tensor l2_norm(const Tensor& a);
/// x * s where s is a single-element tensor; differentiable in both.
Tensor scale(const Tensor& x, const Tensor& s);

/// Slice index i of the leading axis; result drops that axis.
Tensor batch_item(const Tensor& x, int index);
/// Concatenate two [N,C,H,W] tensors along the channel axis.
Tensor concat_channels(const Tensor& a, const Tensor& b);
/// Pack k single-element tensors into one rank-1 tensor of extent k.
Tensor stack_scalars(const std::vector<Tensor>& xs);
/// Sum a [N,C,H,W] tensor over channels -> [N,H,W].
Tensor sum_channels(const Tensor& x);
/// Per-channel mean of a [C,h,w] tensor over the pixels selected by a
/// constant 0/1 mask plane of h*w entries -> [C]. count must equal the
/// number of selected pixels and be > 0.
Tensor masked_channel_mean(const Tensor& feat, const std::vector<double>& mask_plane, int count);

/// input [N,Cin,H,W] (*) kernel [Cout,Cin,kh,kw] -> [N,Cout,H',W'] with
/// H' = (H + 2*padding - kh)/stride + 1. bias may be default-constructed.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride = 1, int padding = 0);
/// Mean over non-overlapping k x k windows; H and W must be divisible by k.
Tensor avg_pool2d(const Tensor& x, int k);
/// Max over non-overlapping k x k windows; ties route the gradient to the
/// first element in row-major order.
Tensor max_pool2d(const Tensor& x, int k);
/// Replicate each pixel into a k x k block.
Tensor upsample_nearest(const Tensor& x, int k);

/// Softmax over the channel axis of [N,C,H,W], max-subtracted per pixel.
Tensor channel_softmax(const Tensor& logits);
Tensor channel_log_softmax(const Tensor& logits);

/// Max over elements of |analytic - central difference| /
/// max(|analytic|, |central|, 1e-12) for a scalar-valued f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step);

/// Worker threads for batched kernels: min(EMKD_THREADS, hardware). Results
/// never depend on the thread count.
int thread_count();
/// Invokes fn(begin, end) over a partition of [0, n); chunk boundaries are
/// aligned so each output element is written by exactly one thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace emkd
