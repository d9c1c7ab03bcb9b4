#pragma once

// Dense 64-bit float tensors with reverse-mode automatic differentiation.
//
// Design notes:
//  * A Tensor is a cheap handle onto a shared node. Nodes are immutable after
//    construction except through ops; the optimizer mutates parameter storage
//    between steps via gradient_step()/mutable_data(), never mid-graph.
//  * Every op that consumes a tensor with requires_grad records itself on the
//    implicit tape (parent links + a backward closure). The tape is rebuilt
//    on every forward pass; backward() replays it exactly once in reverse
//    topological order.
//  * Shapes are row-major, dimensions must be positive. There is no implicit
//    broadcasting except scalar-with-tensor in add/sub/mul/div.
//  * Reductions that sum over an axis whose element order can change under a
//    node permutation (matmul inner products, softmax denominators) sort
//    their summands by value first, so permuting graph nodes reproduces
//    results bitwise.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace pgnn {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;   // allocated on first accumulation
    bool backward_done = false; // set on a node used as a backward() root
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn; // pulls this node's grad into parents

    std::size_t size() const { return data.size(); }
    void accumulate(const std::vector<double>& g);
    void accumulate_at(std::size_t flat, double g);
    bool has_grad() const { return !grad.empty(); }
};

} // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor ones(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);
    static Tensor uniform(Shape shape, double lo, double hi,
                          std::mt19937_64& rng, bool requires_grad = false);
    static Tensor normal(Shape shape, double mean, double stddev,
                         std::mt19937_64& rng, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t size() const;
    bool requires_grad() const;

    const std::vector<double>& data() const;
    // For optimizer steps and finite-difference probes between tapes only.
    std::vector<double>& mutable_data();

    double item() const;                    // requires size() == 1
    double at(std::size_t i) const;         // flat index
    double at(std::size_t i, std::size_t j) const;
    double at(std::size_t i, std::size_t j, std::size_t k) const;

    const std::vector<double>& grad() const; // errors if no gradient present
    bool has_grad() const;
    void zero_grad();
    // data -= lr * grad, then clears the gradient. Call between tapes.
    void gradient_step(double lr);

    Tensor detach() const; // same values, no history, no grad requirement

    // internal
    explicit Tensor(std::shared_ptr<detail::TensorNode> node)
        : node_(std::move(node)) {}
    const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of the executed differentiable ops reachable from a root.
// replay_backward() visits the record in reverse, invoking each node's
// backward closure exactly once, which is what makes gradient accumulation
// per leaf exactly-once.
class Tape {
public:
    static Tape record(const Tensor& root);
    void replay_backward();
    std::size_t size() const { return order_.size(); }

private:
    std::vector<std::shared_ptr<detail::TensorNode>> order_;
};

// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
// loss must be a scalar attached to the tape; calling twice on the same
// root without rebuilding the graph is an error.
void backward(const Tensor& loss);

// Central finite differences: grad[i] = (f(x+eps*e_i) - f(x-eps*e_i)) / (2 eps).
// x is restored afterwards. Used as the independent gradient oracle.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps = 1e-5);

// --- elementwise / scalar ---
Tensor add(const Tensor& a, const Tensor& b); // same shape, or one scalar
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b); // same shape or scalar divisor
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log(const Tensor& a);  // pre: all values > 0
Tensor sqrt(const Tensor& a); // pre: all values >= 0
Tensor maximum(const Tensor& a, const Tensor& b); // ties take a's gradient

// --- linear algebra (2-D) ---
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// --- neural-net ops ---
// Slices along `axis` are softmax-normalized with max subtraction; each
// output slice sums to 1 within 1e-9 and is strictly positive.
Tensor softmax(const Tensor& a, std::size_t axis);
// Each slice along `axis` is shifted/scaled to mean 0, variance 1 (population
// variance, eps inside the square root). Slice length must be >= 2.
Tensor layernorm(const Tensor& a, std::size_t axis, double eps = 1e-5);
// input [c_in,h,w], kernel [c_out,c_in,kh,kw] with odd kh/kw, stride 1,
// zero padding to keep h,w.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);
Tensor conv2d(const Tensor& input, const Tensor& kernel);
// window x window mean pooling with stride = window; trailing remainder
// rows/cols are dropped.
Tensor avgpool2d(const Tensor& input, std::size_t window);

// --- shape ---
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len);

// --- reductions ---
Tensor sum(const Tensor& a);  // scalar
Tensor mean(const Tensor& a); // scalar
Tensor reduce_max(const Tensor& a); // scalar; gradient to first arg max
Tensor reduce_min(const Tensor& a); // scalar; gradient to first arg min
Tensor spatial_mean(const Tensor& a); // [c,h,w] -> [c]

// --- broadcast helpers (explicit, no implicit broadcasting elsewhere) ---
Tensor channel_add(const Tensor& a, const Tensor& bias); // [c,...] + bias[c]
Tensor channel_mul(const Tensor& a, const Tensor& gain); // [c,...] * gain[c]
// [c,h,w] (or [h,w]) multiplied per pixel by plane [h,w].
Tensor plane_mul(const Tensor& a, const Tensor& plane);
// out = a - a*plane, fused per element so that
// plane_mul(a,m) + plane_mul_complement(a,m) == a bit-exactly.
Tensor plane_mul_complement(const Tensor& a, const Tensor& plane);

// Bilinear interpolation with half-pixel centers; identity (same handle)
// when the size is unchanged. Input [h,w] or [c,h,w].
Tensor bilinear_resize(const Tensor& a, std::size_t out_h, std::size_t out_w);

} // namespace pgnn
