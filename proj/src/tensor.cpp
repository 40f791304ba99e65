#include "emkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>
#include <thread>
#include <unordered_set>

#include "emkd/error.hpp"

namespace emkd {

namespace detail {

struct Node {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), 0.0);
        }
    }
};

}  // namespace detail

using detail::Node;

namespace {

std::size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 4) {
        throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
    }
    std::size_t n = 1;
    for (int e : shape) {
        if (e < 1) {
            throw ShapeError("tensor extents must be >= 1");
        }
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

std::shared_ptr<Node> make_node(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    if (data.size() != n) {
        throw ShapeError("data length does not match shape product");
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    return node;
}

bool tracked(const Tensor& t) { return t.node()->requires_grad; }

// Result node for an op: requires_grad and parent links only when some input
// is tracked, so forward-only passes (frozen teacher) never build a tape.
std::shared_ptr<Node> op_node(const char* op, std::vector<int> shape, std::vector<double> data,
                              std::vector<std::shared_ptr<Node>> parents,
                              std::function<void(Node&)> backward) {
    bool any = false;
    for (const auto& p : parents) {
        any = any || p->requires_grad;
    }
    auto node = make_node(std::move(shape), std::move(data), any);
    node->op = op;
    if (any) {
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return node;
}

void require_defined(const Tensor& t, const char* what) {
    if (!t.defined()) {
        throw ValueError(std::string(what) + ": undefined tensor");
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": operand shapes differ");
    }
}

void require_rank4(const Tensor& t, const char* op) {
    if (t.rank() != 4) {
        throw ShapeError(std::string(op) + ": expected a rank-4 tensor");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    return Tensor(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_node({1}, {value}, requires_grad));
}

const std::vector<int>& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }

int Tensor::extent(int axis) const {
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("extent: axis out of range");
    }
    return node_->shape[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::numel() const { return node_->data.size(); }
std::vector<double>& Tensor::data() { return node_->data; }
const std::vector<double>& Tensor::data() const { return node_->data; }
bool Tensor::requires_grad() const { return node_->requires_grad; }

const std::vector<double>& Tensor::grad() const {
    node_->ensure_grad();
    return node_->grad;
}

void Tensor::zero_grad() {
    node_->ensure_grad();
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (numel() != 1) {
        throw ShapeError("item: tensor has more than one element");
    }
    return node_->data[0];
}

Tensor Tensor::detach() const {
    require_defined(*this, "detach");
    return from_data(node_->shape, node_->data, false);
}

void Tensor::backward() const {
    require_defined(*this, "backward");
    if (numel() != 1) {
        throw ShapeError("backward: root must be a single-element tensor");
    }

    // Topological order over the tape, leaves first.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::function<void(Node*)> visit = [&](Node* n) {
        if (!visited.insert(n).second) {
            return;
        }
        for (const auto& p : n->parents) {
            visit(p.get());
        }
        order.push_back(n);
    };
    visit(node_.get());

    // Intermediate gradients are flow storage for this sweep only; leaves
    // keep accumulating across sweeps.
    for (Node* n : order) {
        if (n->backward) {
            n->grad.assign(n->data.size(), 0.0);
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) {
            n->backward(*n);
        }
    }
}

Tensor rand_uniform(std::vector<int> shape, double lo, double hi, Rng& rng, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    std::vector<double> data(n);
    for (auto& v : data) {
        v = rng.uniform(lo, hi);
    }
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

// ---------------------------------------------------------------------------
// Threading

namespace {

int resolve_thread_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) {
        n = 1;
    }
    if (const char* env = std::getenv("EMKD_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) {
            n = std::min(n, cap);
        }
    }
    return std::min(n, 16);
}

}  // namespace

int thread_count() {
    static const int n = resolve_thread_count();
    return n;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const int workers = thread_count();
    if (workers <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
    const std::size_t base = n / chunks;
    const std::size_t rem = n % chunks;
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    std::size_t begin = 0;
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t len = base + (c < rem ? 1 : 0);
        const std::size_t end = begin + len;
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
        begin = end;
    }
    for (auto& t : pool) {
        t.join();
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] + bv[i];
    }
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor(op_node("add", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        for (auto& p : {pa, pb}) {
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    p->grad[i] += self.grad[i];
                }
            }
        }
    }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] - bv[i];
    }
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor(op_node("sub", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pa->grad[i] += self.grad[i];
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pb->grad[i] -= self.grad[i];
            }
        }
    }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = av[i] * bv[i];
    }
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor(op_node("mul", a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pa->grad[i] += pb->data[i] * self.grad[i];
            }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pb->grad[i] += pa->data[i] * self.grad[i];
            }
        }
    }));
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out = a.data();
    for (auto& v : out) {
        v += c;
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("add_scalar", a.shape(), std::move(out), {pa}, [pa](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pa->grad[i] += self.grad[i];
            }
        }
    }));
}

Tensor mul_scalar(const Tensor& a, double c) {
    std::vector<double> out = a.data();
    for (auto& v : out) {
        v *= c;
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("mul_scalar", a.shape(), std::move(out), {pa}, [pa, c](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                pa->grad[i] += c * self.grad[i];
            }
        }
    }));
}

Tensor relu(const Tensor& a) {
    std::vector<double> out = a.data();
    for (auto& v : out) {
        v = v > 0.0 ? v : 0.0;
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("relu", a.shape(), std::move(out), {pa}, [pa](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (pa->data[i] > 0.0) {
                    pa->grad[i] += self.grad[i];
                }
            }
        }
    }));
}

Tensor abs_pow(const Tensor& a, double p) {
    if (p <= 0.0) {
        throw ValueError("abs_pow: exponent must be > 0");
    }
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::pow(std::abs(av[i]), p);
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("abs_pow", a.shape(), std::move(out), {pa}, [pa, p](Node& self) {
        if (!pa->requires_grad) {
            return;
        }
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double x = pa->data[i];
            if (x == 0.0) {
                continue;
            }
            const double sign = x > 0.0 ? 1.0 : -1.0;
            pa->grad[i] += p * std::pow(std::abs(x), p - 1.0) * sign * self.grad[i];
        }
    }));
}

Tensor recip(const Tensor& a, double eps) {
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 1.0 / (av[i] + eps);
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("recip", a.shape(), std::move(out), {pa}, [pa, eps](Node& self) {
        if (!pa->requires_grad) {
            return;
        }
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double d = pa->data[i] + eps;
            pa->grad[i] += -self.grad[i] / (d * d);
        }
    }));
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) {
        s += v;
    }
    auto pa = a.node_ptr();
    return Tensor(op_node("sum", {1}, {s}, {pa}, [pa](Node& self) {
        if (pa->requires_grad) {
            pa->ensure_grad();
            const double g = self.grad[0];
            for (auto& gv : pa->grad) {
                gv += g;
            }
        }
    }));
}

Tensor l2_norm(const Tensor& a) {
    double sq = 0.0;
    for (double v : a.data()) {
        sq += v * v;
    }
    const double n = std::sqrt(sq);
    auto pa = a.node_ptr();
    return Tensor(op_node("l2_norm", {1}, {n}, {pa}, [pa, n](Node& self) {
        if (!pa->requires_grad) {
            return;
        }
        pa->ensure_grad();
        const double denom = std::max(n, 1e-300);
        const double g = self.grad[0];
        for (std::size_t i = 0; i < pa->data.size(); ++i) {
            pa->grad[i] += g * pa->data[i] / denom;
        }
    }));
}

Tensor scale(const Tensor& x, const Tensor& s) {
    if (s.numel() != 1) {
        throw ShapeError("scale: scale factor must be a single-element tensor");
    }
    const double sv = s.data()[0];
    std::vector<double> out = x.data();
    for (auto& v : out) {
        v *= sv;
    }
    auto px = x.node_ptr();
    auto ps = s.node_ptr();
    return Tensor(op_node("scale", x.shape(), std::move(out), {px, ps}, [px, ps, sv](Node& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                px->grad[i] += sv * self.grad[i];
            }
        }
        if (ps->requires_grad) {
            ps->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                acc += px->data[i] * self.grad[i];
            }
            ps->grad[0] += acc;
        }
    }));
}

Tensor batch_item(const Tensor& x, int index) {
    if (x.rank() < 2) {
        throw ShapeError("batch_item: tensor must have rank >= 2");
    }
    const int n = x.extent(0);
    if (index < 0 || index >= n) {
        throw ShapeError("batch_item: index out of range");
    }
    std::vector<int> out_shape(x.shape().begin() + 1, x.shape().end());
    std::size_t item = 1;
    for (int e : out_shape) {
        item *= static_cast<std::size_t>(e);
    }
    const std::size_t offset = static_cast<std::size_t>(index) * item;
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(offset),
                            x.data().begin() + static_cast<std::ptrdiff_t>(offset + item));
    auto px = x.node_ptr();
    return Tensor(op_node("batch_item", std::move(out_shape), std::move(out), {px}, [px, offset](Node& self) {
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                px->grad[offset + i] += self.grad[i];
            }
        }
    }));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require_rank4(a, "concat_channels");
    require_rank4(b, "concat_channels");
    const int n = a.extent(0), ca = a.extent(1), h = a.extent(2), w = a.extent(3);
    if (b.extent(0) != n || b.extent(2) != h || b.extent(3) != w) {
        throw ShapeError("concat_channels: batch/spatial extents differ");
    }
    const int cb = b.extent(1);
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    const std::size_t ablock = static_cast<std::size_t>(ca) * plane;
    const std::size_t bblock = static_cast<std::size_t>(cb) * plane;
    std::vector<double> out(static_cast<std::size_t>(n) * (ablock + bblock));
    for (int i = 0; i < n; ++i) {
        const std::size_t oi = static_cast<std::size_t>(i) * (ablock + bblock);
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(i * ablock), ablock, out.begin() + static_cast<std::ptrdiff_t>(oi));
        std::copy_n(b.data().begin() + static_cast<std::ptrdiff_t>(i * bblock), bblock, out.begin() + static_cast<std::ptrdiff_t>(oi + ablock));
    }
    auto pa = a.node_ptr();
    auto pb = b.node_ptr();
    return Tensor(op_node("concat_channels", {n, ca + cb, h, w}, std::move(out), {pa, pb},
                          [pa, pb, n, ablock, bblock](Node& self) {
        for (int i = 0; i < n; ++i) {
            const std::size_t oi = static_cast<std::size_t>(i) * (ablock + bblock);
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t j = 0; j < ablock; ++j) {
                    pa->grad[static_cast<std::size_t>(i) * ablock + j] += self.grad[oi + j];
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t j = 0; j < bblock; ++j) {
                    pb->grad[static_cast<std::size_t>(i) * bblock + j] += self.grad[oi + ablock + j];
                }
            }
        }
    }));
}

Tensor stack_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) {
        throw ValueError("stack_scalars: empty input");
    }
    std::vector<double> out(xs.size());
    std::vector<std::shared_ptr<Node>> parents(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i].numel() != 1) {
            throw ShapeError("stack_scalars: inputs must be single-element tensors");
        }
        out[i] = xs[i].data()[0];
        parents[i] = xs[i].node_ptr();
    }
    auto caps = parents;
    return Tensor(op_node("stack_scalars", {static_cast<int>(xs.size())}, std::move(out), std::move(parents),
                          [caps](Node& self) {
        for (std::size_t i = 0; i < caps.size(); ++i) {
            if (caps[i]->requires_grad) {
                caps[i]->ensure_grad();
                caps[i]->grad[0] += self.grad[i];
            }
        }
    }));
}

Tensor sum_channels(const Tensor& x) {
    require_rank4(x, "sum_channels");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const std::size_t plane = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    std::vector<double> out(static_cast<std::size_t>(n) * plane, 0.0);
    const auto& xv = x.data();
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t src = (static_cast<std::size_t>(i) * c + static_cast<std::size_t>(ch)) * plane;
            const std::size_t dst = static_cast<std::size_t>(i) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                out[dst + j] += xv[src + j];
            }
        }
    }
    auto px = x.node_ptr();
    return Tensor(op_node("sum_channels", {n, h, w}, std::move(out), {px}, [px, n, c, plane](Node& self) {
        if (!px->requires_grad) {
            return;
        }
        px->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const std::size_t src = static_cast<std::size_t>(i) * plane;
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t dst = (static_cast<std::size_t>(i) * c + static_cast<std::size_t>(ch)) * plane;
                for (std::size_t j = 0; j < plane; ++j) {
                    px->grad[dst + j] += self.grad[src + j];
                }
            }
        }
    }));
}

Tensor masked_channel_mean(const Tensor& feat, const std::vector<double>& mask_plane, int count) {
    if (feat.rank() != 3) {
        throw ShapeError("masked_channel_mean: expected a [C,h,w] tensor");
    }
    const int c = feat.extent(0);
    const std::size_t plane = static_cast<std::size_t>(feat.extent(1)) * feat.extent(2);
    if (mask_plane.size() != plane) {
        throw ShapeError("masked_channel_mean: mask size does not match feature plane");
    }
    if (count <= 0) {
        throw ValueError("masked_channel_mean: count must be > 0");
    }
    const double inv = 1.0 / count;
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    const auto& fv = feat.data();
    for (int ch = 0; ch < c; ++ch) {
        const double* src = fv.data() + static_cast<std::size_t>(ch) * plane;
        double acc = 0.0;
        for (std::size_t j = 0; j < plane; ++j) {
            acc += src[j] * mask_plane[j];
        }
        out[static_cast<std::size_t>(ch)] = acc * inv;
    }
    auto pf = feat.node_ptr();
    auto mask = std::make_shared<std::vector<double>>(mask_plane);
    return Tensor(op_node("masked_channel_mean", {c}, std::move(out), {pf}, [pf, mask, c, plane, inv](Node& self) {
        if (!pf->requires_grad) {
            return;
        }
        pf->ensure_grad();
        for (int ch = 0; ch < c; ++ch) {
            const double g = self.grad[static_cast<std::size_t>(ch)] * inv;
            double* dst = pf->grad.data() + static_cast<std::size_t>(ch) * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                dst[j] += g * (*mask)[j];
            }
        }
    }));
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvDims {
    int n, cin, h, w, cout, kh, kw, stride, pad, hout, wout;
};

ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
    require_rank4(input, "conv2d input");
    require_rank4(kernel, "conv2d kernel");
    ConvDims d{};
    d.n = input.extent(0);
    d.cin = input.extent(1);
    d.h = input.extent(2);
    d.w = input.extent(3);
    d.cout = kernel.extent(0);
    d.kh = kernel.extent(2);
    d.kw = kernel.extent(3);
    d.stride = stride;
    d.pad = padding;
    if (kernel.extent(1) != d.cin) {
        throw ShapeError("conv2d: kernel input channels do not match input");
    }
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != d.cout)) {
        throw ShapeError("conv2d: bias extent must equal output channels");
    }
    if (stride < 1 || padding < 0) {
        throw ValueError("conv2d: stride must be >= 1 and padding >= 0");
    }
    if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding) {
        throw ShapeError("conv2d: kernel larger than padded input");
    }
    d.hout = (d.h + 2 * padding - d.kh) / stride + 1;
    d.wout = (d.w + 2 * padding - d.kw) / stride + 1;
    return d;
}

// Zero-padded copy of one image, [Cin, H+2p, W+2p] contiguous.
void pad_image(const double* src, const ConvDims& d, std::vector<double>& dst) {
    const int hp = d.h + 2 * d.pad;
    const int wp = d.w + 2 * d.pad;
    dst.assign(static_cast<std::size_t>(d.cin) * hp * wp, 0.0);
    for (int c = 0; c < d.cin; ++c) {
        for (int y = 0; y < d.h; ++y) {
            const double* s = src + (static_cast<std::size_t>(c) * d.h + y) * d.w;
            double* t = dst.data() + (static_cast<std::size_t>(c) * hp + y + d.pad) * wp + d.pad;
            std::copy_n(s, d.w, t);
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
    const ConvDims d = conv_dims(input, kernel, bias, stride, padding);
    const int hp = d.h + 2 * d.pad;
    const int wp = d.w + 2 * d.pad;
    const std::size_t in_img = static_cast<std::size_t>(d.cin) * d.h * d.w;
    const std::size_t out_img = static_cast<std::size_t>(d.cout) * d.hout * d.wout;
    std::vector<double> out(static_cast<std::size_t>(d.n) * out_img);

    const double* kdat = kernel.data().data();
    const double* bdat = bias.defined() ? bias.data().data() : nullptr;
    const double* xdat = input.data().data();

    parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t nb, std::size_t ne) {
        std::vector<double> padded;
        for (std::size_t ni = nb; ni < ne; ++ni) {
            const double* ximg = xdat + ni * in_img;
            const double* xsrc = ximg;
            int eh = d.h, ew = d.w;
            if (d.pad > 0) {
                pad_image(ximg, d, padded);
                xsrc = padded.data();
                eh = hp;
                ew = wp;
            }
            double* oimg = out.data() + ni * out_img;
            for (int co = 0; co < d.cout; ++co) {
                const double bias_v = bdat ? bdat[co] : 0.0;
                double* oplane = oimg + static_cast<std::size_t>(co) * d.hout * d.wout;
                for (int ho = 0; ho < d.hout; ++ho) {
                    for (int wo = 0; wo < d.wout; ++wo) {
                        double acc = bias_v;
                        const int y0 = ho * d.stride;
                        const int x0 = wo * d.stride;
                        for (int ci = 0; ci < d.cin; ++ci) {
                            const double* xbase = xsrc + (static_cast<std::size_t>(ci) * eh + y0) * ew + x0;
                            const double* wbase = kdat + ((static_cast<std::size_t>(co) * d.cin + ci) * d.kh) * d.kw;
                            for (int ky = 0; ky < d.kh; ++ky) {
                                const double* xrow = xbase + static_cast<std::size_t>(ky) * ew;
                                const double* wrow = wbase + static_cast<std::size_t>(ky) * d.kw;
                                for (int kx = 0; kx < d.kw; ++kx) {
                                    acc += xrow[kx] * wrow[kx];
                                }
                            }
                        }
                        oplane[static_cast<std::size_t>(ho) * d.wout + wo] = acc;
                    }
                }
            }
        }
    });

    auto px = input.node_ptr();
    auto pk = kernel.node_ptr();
    std::vector<std::shared_ptr<Node>> parents{px, pk};
    std::shared_ptr<Node> pb;
    if (bias.defined()) {
        pb = bias.node_ptr();
        parents.push_back(pb);
    }

    auto backward = [px, pk, pb, d, hp, wp, in_img, out_img](Node& self) {
        const double* go = self.grad.data();
        const double* kdat = pk->data.data();
        const double* xdat = px->data.data();

        if (px->requires_grad) {
            px->ensure_grad();
            // Each thread owns a batch range of dx, so accumulation is race-free.
            parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t nb, std::size_t ne) {
                std::vector<double> dpad(static_cast<std::size_t>(d.cin) * hp * wp);
                for (std::size_t ni = nb; ni < ne; ++ni) {
                    std::fill(dpad.begin(), dpad.end(), 0.0);
                    const double* gimg = go + ni * out_img;
                    for (int co = 0; co < d.cout; ++co) {
                        const double* gplane = gimg + static_cast<std::size_t>(co) * d.hout * d.wout;
                        for (int ho = 0; ho < d.hout; ++ho) {
                            for (int wo = 0; wo < d.wout; ++wo) {
                                const double g = gplane[static_cast<std::size_t>(ho) * d.wout + wo];
                                if (g == 0.0) {
                                    continue;
                                }
                                const int y0 = ho * d.stride;
                                const int x0 = wo * d.stride;
                                for (int ci = 0; ci < d.cin; ++ci) {
                                    double* dbase = dpad.data() + (static_cast<std::size_t>(ci) * hp + y0) * wp + x0;
                                    const double* wbase = kdat + ((static_cast<std::size_t>(co) * d.cin + ci) * d.kh) * d.kw;
                                    for (int ky = 0; ky < d.kh; ++ky) {
                                        double* drow = dbase + static_cast<std::size_t>(ky) * wp;
                                        const double* wrow = wbase + static_cast<std::size_t>(ky) * d.kw;
                                        for (int kx = 0; kx < d.kw; ++kx) {
                                            drow[kx] += wrow[kx] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    double* dst = px->grad.data() + ni * in_img;
                    for (int ci = 0; ci < d.cin; ++ci) {
                        for (int y = 0; y < d.h; ++y) {
                            const double* s = dpad.data() + (static_cast<std::size_t>(ci) * hp + y + d.pad) * wp + d.pad;
                            double* t = dst + (static_cast<std::size_t>(ci) * d.h + y) * d.w;
                            for (int x = 0; x < d.w; ++x) {
                                t[x] += s[x];
                            }
                        }
                    }
                }
            });
        }

        if (pk->requires_grad) {
            pk->ensure_grad();
            // Threads split output channels; each dk slice has one writer.
            parallel_for(static_cast<std::size_t>(d.cout), [&](std::size_t cb, std::size_t ce) {
                std::vector<double> padded;
                for (std::size_t ni = 0; ni < static_cast<std::size_t>(d.n); ++ni) {
                    const double* ximg = xdat + ni * in_img;
                    const double* xsrc = ximg;
                    int eh = d.h, ew = d.w;
                    if (d.pad > 0) {
                        pad_image(ximg, d, padded);
                        xsrc = padded.data();
                        eh = hp;
                        ew = wp;
                    }
                    const double* gimg = go + ni * out_img;
                    for (std::size_t co = cb; co < ce; ++co) {
                        const double* gplane = gimg + co * static_cast<std::size_t>(d.hout) * d.wout;
                        for (int ho = 0; ho < d.hout; ++ho) {
                            for (int wo = 0; wo < d.wout; ++wo) {
                                const double g = gplane[static_cast<std::size_t>(ho) * d.wout + wo];
                                if (g == 0.0) {
                                    continue;
                                }
                                const int y0 = ho * d.stride;
                                const int x0 = wo * d.stride;
                                for (int ci = 0; ci < d.cin; ++ci) {
                                    const double* xbase = xsrc + (static_cast<std::size_t>(ci) * eh + y0) * ew + x0;
                                    double* dwbase = pk->grad.data() + ((co * d.cin + ci) * d.kh) * d.kw;
                                    for (int ky = 0; ky < d.kh; ++ky) {
                                        const double* xrow = xbase + static_cast<std::size_t>(ky) * ew;
                                        double* dwrow = dwbase + static_cast<std::size_t>(ky) * d.kw;
                                        for (int kx = 0; kx < d.kw; ++kx) {
                                            dwrow[kx] += xrow[kx] * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }

        if (pb && pb->requires_grad) {
            pb->ensure_grad();
            for (int ni = 0; ni < d.n; ++ni) {
                const double* gimg = go + static_cast<std::size_t>(ni) * out_img;
                for (int co = 0; co < d.cout; ++co) {
                    const double* gplane = gimg + static_cast<std::size_t>(co) * d.hout * d.wout;
                    double acc = 0.0;
                    for (int j = 0; j < d.hout * d.wout; ++j) {
                        acc += gplane[j];
                    }
                    pb->grad[co] += acc;
                }
            }
        }
    };

    return Tensor(op_node("conv2d", {d.n, d.cout, d.hout, d.wout}, std::move(out), std::move(parents), backward));
}

// ---------------------------------------------------------------------------
// Pooling / upsampling

namespace {

void check_pool_args(const Tensor& x, int k, const char* op) {
    require_rank4(x, op);
    if (k < 1) {
        throw ValueError(std::string(op) + ": window size must be >= 1");
    }
    if (x.extent(2) % k != 0 || x.extent(3) % k != 0) {
        throw ValueError(std::string(op) + ": spatial extents must be divisible by the window size");
    }
}

}  // namespace

Tensor avg_pool2d(const Tensor& x, int k) {
    check_pool_args(x, k, "avg_pool2d");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const int ho = h / k, wo = w / k;
    const double inv = 1.0 / (static_cast<double>(k) * k);
    std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
    const auto& xv = x.data();
    for (int img = 0; img < n * c; ++img) {
        const double* src = xv.data() + static_cast<std::size_t>(img) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(img) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            for (int xo = 0; xo < wo; ++xo) {
                const double first = src[static_cast<std::size_t>(y) * k * w + static_cast<std::size_t>(xo) * k];
                double acc = 0.0;
                bool uniform = true;
                for (int dy = 0; dy < k; ++dy) {
                    const double* row = src + (static_cast<std::size_t>(y) * k + dy) * w + static_cast<std::size_t>(xo) * k;
                    for (int dx = 0; dx < k; ++dx) {
                        acc += row[dx];
                        uniform = uniform && row[dx] == first;
                    }
                }
                // The mean of an all-equal window is that value exactly;
                // keeps avg_pool2d(upsample_nearest(x, k), k) == x bit for bit.
                dst[static_cast<std::size_t>(y) * wo + xo] = uniform ? first : acc * inv;
            }
        }
    }
    auto px = x.node_ptr();
    return Tensor(op_node("avg_pool2d", {n, c, ho, wo}, std::move(out), {px}, [px, n, c, h, w, ho, wo, k, inv](Node& self) {
        if (!px->requires_grad) {
            return;
        }
        px->ensure_grad();
        for (int img = 0; img < n * c; ++img) {
            const double* g = self.grad.data() + static_cast<std::size_t>(img) * ho * wo;
            double* dx = px->grad.data() + static_cast<std::size_t>(img) * h * w;
            for (int y = 0; y < ho; ++y) {
                for (int xo = 0; xo < wo; ++xo) {
                    const double gv = g[static_cast<std::size_t>(y) * wo + xo] * inv;
                    for (int dy = 0; dy < k; ++dy) {
                        double* row = dx + (static_cast<std::size_t>(y) * k + dy) * w + static_cast<std::size_t>(xo) * k;
                        for (int dxk = 0; dxk < k; ++dxk) {
                            row[dxk] += gv;
                        }
                    }
                }
            }
        }
    }));
}

Tensor max_pool2d(const Tensor& x, int k) {
    check_pool_args(x, k, "max_pool2d");
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const int ho = h / k, wo = w / k;
    std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const auto& xv = x.data();
    for (int img = 0; img < n * c; ++img) {
        const double* src = xv.data() + static_cast<std::size_t>(img) * h * w;
        const std::size_t ibase = static_cast<std::size_t>(img) * h * w;
        for (int y = 0; y < ho; ++y) {
            for (int xo = 0; xo < wo; ++xo) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = 0;
                for (int dy = 0; dy < k; ++dy) {
                    const std::size_t row = (static_cast<std::size_t>(y) * k + dy) * w + static_cast<std::size_t>(xo) * k;
                    for (int dx = 0; dx < k; ++dx) {
                        const double v = src[row + dx];
                        if (v > best) {  // strict: first max in row-major order wins
                            best = v;
                            best_idx = ibase + row + dx;
                        }
                    }
                }
                const std::size_t o = static_cast<std::size_t>(img) * ho * wo + static_cast<std::size_t>(y) * wo + xo;
                out[o] = best;
                (*argmax)[o] = best_idx;
            }
        }
    }
    auto px = x.node_ptr();
    return Tensor(op_node("max_pool2d", {n, c, ho, wo}, std::move(out), {px}, [px, argmax](Node& self) {
        if (!px->requires_grad) {
            return;
        }
        px->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            px->grad[(*argmax)[i]] += self.grad[i];
        }
    }));
}

Tensor upsample_nearest(const Tensor& x, int k) {
    require_rank4(x, "upsample_nearest");
    if (k < 1) {
        throw ValueError("upsample_nearest: factor must be >= 1");
    }
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const int ho = h * k, wo = w * k;
    std::vector<double> out(static_cast<std::size_t>(n) * c * ho * wo);
    const auto& xv = x.data();
    for (int img = 0; img < n * c; ++img) {
        const double* src = xv.data() + static_cast<std::size_t>(img) * h * w;
        double* dst = out.data() + static_cast<std::size_t>(img) * ho * wo;
        for (int y = 0; y < ho; ++y) {
            const double* srow = src + static_cast<std::size_t>(y / k) * w;
            double* drow = dst + static_cast<std::size_t>(y) * wo;
            for (int xo = 0; xo < wo; ++xo) {
                drow[xo] = srow[xo / k];
            }
        }
    }
    auto px = x.node_ptr();
    return Tensor(op_node("upsample_nearest", {n, c, ho, wo}, std::move(out), {px}, [px, n, c, h, w, ho, wo, k](Node& self) {
        if (!px->requires_grad) {
            return;
        }
        px->ensure_grad();
        for (int img = 0; img < n * c; ++img) {
            const double* g = self.grad.data() + static_cast<std::size_t>(img) * ho * wo;
            double* dx = px->grad.data() + static_cast<std::size_t>(img) * h * w;
            for (int y = 0; y < ho; ++y) {
                const double* grow = g + static_cast<std::size_t>(y) * wo;
                double* drow = dx + static_cast<std::size_t>(y / k) * w;
                for (int xo = 0; xo < wo; ++xo) {
                    drow[xo / k] += grow[xo];
                }
            }
        }
    }));
}

// ---------------------------------------------------------------------------
// Softmax over channels

namespace {

void check_softmax(const Tensor& logits, const char* op) {
    require_rank4(logits, op);
    if (logits.extent(1) < 2) {
        throw ShapeError(std::string(op) + ": needs at least two channels");
    }
}

}  // namespace

Tensor channel_softmax(const Tensor& logits) {
    check_softmax(logits, "channel_softmax");
    const int n = logits.extent(0), c = logits.extent(1), h = logits.extent(2), w = logits.extent(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> out(logits.numel());
    const auto& z = logits.data();
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c * plane;
        for (std::size_t j = 0; j < plane; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int ch = 0; ch < c; ++ch) {
                mx = std::max(mx, z[base + static_cast<std::size_t>(ch) * plane + j]);
            }
            double denom = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t idx = base + static_cast<std::size_t>(ch) * plane + j;
                out[idx] = std::exp(z[idx] - mx);
                denom += out[idx];
            }
            for (int ch = 0; ch < c; ++ch) {
                out[base + static_cast<std::size_t>(ch) * plane + j] /= denom;
            }
        }
    }
    auto pz = logits.node_ptr();
    return Tensor(op_node("channel_softmax", logits.shape(), std::move(out), {pz}, [pz, n, c, plane](Node& self) {
        if (!pz->requires_grad) {
            return;
        }
        pz->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                double dot = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t idx = base + static_cast<std::size_t>(ch) * plane + j;
                    dot += self.grad[idx] * self.data[idx];
                }
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t idx = base + static_cast<std::size_t>(ch) * plane + j;
                    pz->grad[idx] += self.data[idx] * (self.grad[idx] - dot);
                }
            }
        }
    }));
}

Tensor channel_log_softmax(const Tensor& logits) {
    check_softmax(logits, "channel_log_softmax");
    const int n = logits.extent(0), c = logits.extent(1), h = logits.extent(2), w = logits.extent(3);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<double> out(logits.numel());
    const auto& z = logits.data();
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i) * c * plane;
        for (std::size_t j = 0; j < plane; ++j) {
            double mx = -std::numeric_limits<double>::infinity();
            for (int ch = 0; ch < c; ++ch) {
                mx = std::max(mx, z[base + static_cast<std::size_t>(ch) * plane + j]);
            }
            double denom = 0.0;
            for (int ch = 0; ch < c; ++ch) {
                denom += std::exp(z[base + static_cast<std::size_t>(ch) * plane + j] - mx);
            }
            const double log_denom = std::log(denom);
            for (int ch = 0; ch < c; ++ch) {
                const std::size_t idx = base + static_cast<std::size_t>(ch) * plane + j;
                out[idx] = z[idx] - mx - log_denom;
            }
        }
    }
    auto pz = logits.node_ptr();
    return Tensor(op_node("channel_log_softmax", logits.shape(), std::move(out), {pz}, [pz, n, c, plane](Node& self) {
        if (!pz->requires_grad) {
            return;
        }
        pz->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c * plane;
            for (std::size_t j = 0; j < plane; ++j) {
                double gsum = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    gsum += self.grad[base + static_cast<std::size_t>(ch) * plane + j];
                }
                for (int ch = 0; ch < c; ++ch) {
                    const std::size_t idx = base + static_cast<std::size_t>(ch) * plane + j;
                    pz->grad[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
                }
            }
        }
    }));
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
    if (step <= 0.0) {
        throw ValueError("grad_check: step must be > 0");
    }
    Tensor leaf = Tensor::from_data(x.shape(), x.data(), true);
    Tensor y = f(leaf);
    if (y.numel() != 1) {
        throw ShapeError("grad_check: f must produce a single-element tensor");
    }
    y.backward();
    const std::vector<double> analytic = leaf.grad();

    std::vector<double> probe = x.data();
    double max_rel = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + step;
        const double fp = f(Tensor::from_data(x.shape(), probe, false)).item();
        probe[i] = saved - step;
        const double fm = f(Tensor::from_data(x.shape(), probe, false)).item();
        probe[i] = saved;
        const double numeric = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-12});
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

}  // namespace emkd
