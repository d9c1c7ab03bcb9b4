#include "pgnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace pgnn {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

std::string shape_str(const Shape& s) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out << " x ";
        out << s[i];
    }
    out << "]";
    return out.str();
}

namespace {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

void validate_shape(const char* op, const Shape& s) {
    for (std::size_t d : s) {
        if (d == 0) {
            throw std::invalid_argument(std::string(op) +
                                        ": dimensions must be positive, got " +
                                        shape_str(s));
        }
    }
}

void require_defined(const char* op, const Tensor& t) {
    if (!t.defined())
        throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

// Builds the output node of an op. parents are recorded for the tape walk;
// the backward closure is attached afterwards by the caller when any parent
// requires a gradient.
NodePtr make_result(Shape shape, std::vector<double> data,
                    std::vector<NodePtr> parents) {
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    auto n = make_node(std::move(shape), std::move(data), rg);
    if (rg) n->parents = std::move(parents);
    return n;
}

// Sums with the terms sorted by value first. Used wherever the summand order
// would otherwise depend on graph-node order, so that permuting nodes keeps
// results bitwise identical.
double sorted_sum(std::vector<double>& terms) {
    std::sort(terms.begin(), terms.end());
    double s = 0.0;
    for (double t : terms) s += t;
    return s;
}

bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

} // namespace

namespace detail {

void TensorNode::accumulate(const std::vector<double>& g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

void TensorNode::accumulate_at(std::size_t flat, double g) {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    grad[flat] += g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    validate_shape("zeros", shape);
    std::size_t n = shape_size(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0),
                            requires_grad));
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
    return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    validate_shape("full", shape);
    std::size_t n = shape_size(shape);
    return Tensor(make_node(std::move(shape), std::vector<double>(n, value),
                            requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
    validate_shape("from_data", shape);
    if (shape_size(shape) != values.size()) {
        throw std::invalid_argument(
            "from_data: shape " + shape_str(shape) + " wants " +
            std::to_string(shape_size(shape)) + " values, got " +
            std::to_string(values.size()));
    }
    return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_node({}, {value}, requires_grad));
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng,
                       bool requires_grad) {
    validate_shape("uniform", shape);
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(make_node(std::move(shape), std::move(v), requires_grad));
}

Tensor Tensor::normal(Shape shape, double mean, double stddev,
                      std::mt19937_64& rng, bool requires_grad) {
    validate_shape("normal", shape);
    std::normal_distribution<double> dist(mean, stddev);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = dist(rng);
    return Tensor(make_node(std::move(shape), std::move(v), requires_grad));
}

const Shape& Tensor::shape() const {
    require_defined("shape", *this);
    return node_->shape;
}

std::size_t Tensor::size() const {
    require_defined("size", *this);
    return node_->data.size();
}

bool Tensor::requires_grad() const {
    require_defined("requires_grad", *this);
    return node_->requires_grad;
}

const std::vector<double>& Tensor::data() const {
    require_defined("data", *this);
    return node_->data;
}

std::vector<double>& Tensor::mutable_data() {
    require_defined("mutable_data", *this);
    return node_->data;
}

double Tensor::item() const {
    if (size() != 1)
        throw std::invalid_argument("item: tensor has shape " +
                                    shape_str(shape()) + ", expected a scalar");
    return node_->data[0];
}

double Tensor::at(std::size_t i) const {
    if (i >= size()) throw std::out_of_range("at: flat index out of range");
    return node_->data[i];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw std::invalid_argument("at(i,j): tensor is not 2-D");
    const Shape& s = node_->shape;
    if (i >= s[0] || j >= s[1]) throw std::out_of_range("at(i,j): out of range");
    return node_->data[i * s[1] + j];
}

double Tensor::at(std::size_t i, std::size_t j, std::size_t k) const {
    if (rank() != 3) throw std::invalid_argument("at(i,j,k): tensor is not 3-D");
    const Shape& s = node_->shape;
    if (i >= s[0] || j >= s[1] || k >= s[2])
        throw std::out_of_range("at(i,j,k): out of range");
    return node_->data[(i * s[1] + j) * s[2] + k];
}

const std::vector<double>& Tensor::grad() const {
    require_defined("grad", *this);
    if (!node_->requires_grad)
        throw std::runtime_error("grad: tensor does not require gradients");
    if (node_->grad.empty())
        throw std::runtime_error("grad: no gradient present; run backward first");
    return node_->grad;
}

bool Tensor::has_grad() const {
    require_defined("has_grad", *this);
    return node_->has_grad();
}

void Tensor::zero_grad() {
    require_defined("zero_grad", *this);
    node_->grad.clear();
}

void Tensor::gradient_step(double lr) {
    const std::vector<double>& g = grad();
    for (std::size_t i = 0; i < g.size(); ++i) node_->data[i] -= lr * g[i];
    node_->grad.clear();
}

Tensor Tensor::detach() const {
    require_defined("detach", *this);
    return Tensor(make_node(node_->shape, node_->data, false));
}

// ---------------------------------------------------------------------------
// Tape / backward
// ---------------------------------------------------------------------------

Tape Tape::record(const Tensor& root) {
    Tape tape;
    // Iterative post-order DFS over requires_grad nodes.
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<NodePtr, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            NodePtr parent = node->parents[next++];
            if (parent->requires_grad && !visited.count(parent.get())) {
                visited.insert(parent.get());
                stack.emplace_back(std::move(parent), 0);
            }
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::replay_backward() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        TensorNode* n = it->get();
        if (n->backward_fn && n->has_grad()) n->backward_fn();
    }
}

void backward(const Tensor& loss) {
    require_defined("backward", loss);
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                    shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw std::runtime_error(
            "backward: tensor is detached; nothing on the tape depends on it");
    TensorNode* root = loss.node().get();
    if (root->backward_done)
        throw std::runtime_error(
            "backward: already called for this root; rebuild the graph first");
    root->backward_done = true;
    Tape tape = Tape::record(loss);
    root->accumulate_at(0, 1.0);
    tape.replay_backward();
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                        const Tensor& x, double eps) {
    require_defined("finite_diff_grad", x);
    if (!(eps > 0.0))
        throw std::invalid_argument("finite_diff_grad: eps must be positive");
    Tensor probe = x; // shares storage; perturbed in place and restored
    std::vector<double>& v = probe.mutable_data();
    std::vector<double> g(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + eps;
        const double hi = f(probe);
        v[i] = saved - eps;
        const double lo = f(probe);
        v[i] = saved;
        if (!std::isfinite(hi) || !std::isfinite(lo))
            throw std::runtime_error(
                "finite_diff_grad: objective returned a non-finite value");
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return Tensor::from_data(x.shape(), std::move(g));
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

enum class BinKind { Same, ScalarLeft, ScalarRight };

BinKind classify_binary(const char* op, const Tensor& a, const Tensor& b) {
    require_defined(op, a);
    require_defined(op, b);
    if (a.shape() == b.shape()) return BinKind::Same;
    if (is_scalar_like(b)) return BinKind::ScalarRight;
    if (is_scalar_like(a)) return BinKind::ScalarLeft;
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    BinKind kind = classify_binary("add", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out;
    if (kind == BinKind::Same) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
    } else if (kind == BinKind::ScalarRight) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[0];
    } else {
        out.resize(bv.size());
        for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] + bv[i];
    }
    const Shape& shape = (kind == BinKind::ScalarLeft) ? b.shape() : a.shape();
    auto node = make_result(shape, std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, kind]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (kind == BinKind::ScalarLeft) {
                    double s = 0.0;
                    for (double x : g) s += x;
                    an->accumulate_at(0, s);
                } else {
                    an->accumulate(g);
                }
            }
            if (bn->requires_grad) {
                if (kind == BinKind::ScalarRight) {
                    double s = 0.0;
                    for (double x : g) s += x;
                    bn->accumulate_at(0, s);
                } else {
                    bn->accumulate(g);
                }
            }
        };
    }
    return Tensor(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    BinKind kind = classify_binary("sub", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out;
    if (kind == BinKind::Same) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
    } else if (kind == BinKind::ScalarRight) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[0];
    } else {
        out.resize(bv.size());
        for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] - bv[i];
    }
    const Shape& shape = (kind == BinKind::ScalarLeft) ? b.shape() : a.shape();
    auto node = make_result(shape, std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, kind]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (kind == BinKind::ScalarLeft) {
                    double s = 0.0;
                    for (double x : g) s += x;
                    an->accumulate_at(0, s);
                } else {
                    an->accumulate(g);
                }
            }
            if (bn->requires_grad) {
                if (kind == BinKind::ScalarRight) {
                    double s = 0.0;
                    for (double x : g) s += x;
                    bn->accumulate_at(0, -s);
                } else {
                    if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn->grad[i] -= g[i];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    BinKind kind = classify_binary("mul", a, b);
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out;
    if (kind == BinKind::Same) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
    } else if (kind == BinKind::ScalarRight) {
        out.resize(av.size());
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[0];
    } else {
        out.resize(bv.size());
        for (std::size_t i = 0; i < bv.size(); ++i) out[i] = av[0] * bv[i];
    }
    const Shape& shape = (kind == BinKind::ScalarLeft) ? b.shape() : a.shape();
    auto node = make_result(shape, std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, kind]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (kind == BinKind::ScalarLeft) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        s += g[i] * bn->data[i];
                    an->accumulate_at(0, s);
                } else if (kind == BinKind::ScalarRight) {
                    if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        an->grad[i] += g[i] * bn->data[0];
                } else {
                    if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        an->grad[i] += g[i] * bn->data[i];
                }
            }
            if (bn->requires_grad) {
                if (kind == BinKind::ScalarRight) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        s += g[i] * an->data[i];
                    bn->accumulate_at(0, s);
                } else if (kind == BinKind::ScalarLeft) {
                    if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn->grad[i] += g[i] * an->data[0];
                } else {
                    if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn->grad[i] += g[i] * an->data[i];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_defined("div", a);
    require_defined("div", b);
    const bool scalar_divisor = is_scalar_like(b) && a.shape() != b.shape();
    if (!scalar_divisor && a.shape() != b.shape())
        throw std::invalid_argument("div: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    if (scalar_divisor) {
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[0];
    } else {
        for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
    }
    auto node = make_result(a.shape(), std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, scalar_divisor]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double d = scalar_divisor ? bn->data[0] : bn->data[i];
                    an->grad[i] += g[i] / d;
                }
            }
            if (bn->requires_grad) {
                if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double d = scalar_divisor ? bn->data[0] : bn->data[i];
                    const double db = -g[i] * an->data[i] / (d * d);
                    bn->grad[scalar_divisor ? 0 : i] += db;
                }
            }
        };
    }
    return Tensor(node);
}

Tensor scale(const Tensor& a, double c) {
    require_defined("scale", a);
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    auto node = make_result(a.shape(), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, c]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                an->grad[i] += self->grad[i] * c;
        };
    }
    return Tensor(node);
}

Tensor add_scalar(const Tensor& a, double c) {
    require_defined("add_scalar", a);
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    auto node = make_result(a.shape(), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self]() { an->accumulate(self->grad); };
    }
    return Tensor(node);
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
    require_defined(name, a);
    const auto& av = a.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    auto node = make_result(a.shape(), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, bwd]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (std::size_t i = 0; i < self->grad.size(); ++i)
                an->grad[i] += self->grad[i] * bwd(an->data[i], self->data[i]);
        };
    }
    return Tensor(node);
}

} // namespace

Tensor relu(const Tensor& a) {
    return unary_op(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        "sigmoid", a,
        [](double x) {
            // Split by sign to avoid overflow in exp.
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& a) {
    require_defined("log", a);
    for (double v : a.data())
        if (!(v > 0.0))
            throw std::invalid_argument("log: values must be positive, got " +
                                        std::to_string(v));
    return unary_op(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
    require_defined("sqrt", a);
    for (double v : a.data())
        if (v < 0.0)
            throw std::invalid_argument("sqrt: values must be non-negative, got " +
                                        std::to_string(v));
    return unary_op(
        "sqrt", a, [](double x) { return std::sqrt(x); },
        // Subgradient 0 at x == 0 keeps the backward pass finite there.
        [](double x, double y) { return x > 0.0 ? 0.5 / y : 0.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    require_defined("maximum", a);
    require_defined("maximum", b);
    if (a.shape() != b.shape())
        throw std::invalid_argument("maximum: shape mismatch " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i)
        out[i] = av[i] >= bv[i] ? av[i] : bv[i];
    auto node = make_result(a.shape(), std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self]() {
            const auto& g = self->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const bool a_wins = an->data[i] >= bn->data[i];
                if (a_wins && an->requires_grad) an->accumulate_at(i, g[i]);
                if (!a_wins && bn->requires_grad) bn->accumulate_at(i, g[i]);
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined("matmul", a);
    require_defined("matmul", b);
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: expects 2-D operands, got " +
                                    shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw std::invalid_argument("matmul: inner dimensions differ: " +
                                    shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<double> out(m * n);
    std::vector<double> terms(k);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t p = 0; p < k; ++p)
                terms[p] = av[i * k + p] * bv[p * n + j];
            out[i * n + j] = sorted_sum(terms);
        }
    }
    auto node = make_result({m, n}, std::move(out), {a.node(), b.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = b.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, m, k, n]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            s += g[i * n + j] * bn->data[p * n + j];
                        an->grad[i * k + p] += s;
                    }
            }
            if (bn->requires_grad) {
                if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            s += an->data[i * k + p] * g[i * n + j];
                        bn->grad[p * n + j] += s;
                    }
            }
        };
    }
    return Tensor(node);
}

Tensor transpose(const Tensor& a) {
    require_defined("transpose", a);
    if (a.rank() != 2)
        throw std::invalid_argument("transpose: expects 2-D, got " +
                                    shape_str(a.shape()));
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    const auto& av = a.data();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
    auto node = make_result({c, r}, std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, r, c]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    an->grad[i * c + j] += self->grad[j * r + i];
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Axis-sliced ops (softmax, layernorm)
// ---------------------------------------------------------------------------

namespace {

struct AxisView {
    std::size_t outer, len, inner;
    std::size_t flat(std::size_t o, std::size_t k, std::size_t i) const {
        return (o * len + k) * inner + i;
    }
};

AxisView axis_view(const char* op, const Shape& s, std::size_t axis) {
    if (axis >= s.size())
        throw std::invalid_argument(std::string(op) + ": axis " +
                                    std::to_string(axis) +
                                    " out of range for shape " + shape_str(s));
    AxisView v{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

} // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
    require_defined("softmax", a);
    const AxisView v = axis_view("softmax", a.shape(), axis);
    const auto& av = a.data();
    std::vector<double> out(av.size());
    std::vector<double> exps(v.len);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            double mx = av[v.flat(o, 0, i)];
            for (std::size_t k = 1; k < v.len; ++k)
                mx = std::max(mx, av[v.flat(o, k, i)]);
            for (std::size_t k = 0; k < v.len; ++k)
                exps[k] = std::exp(av[v.flat(o, k, i)] - mx);
            std::vector<double> terms = exps;
            const double denom = sorted_sum(terms);
            for (std::size_t k = 0; k < v.len; ++k)
                out[v.flat(o, k, i)] = exps[k] / denom;
        }
    }
    auto node = make_result(a.shape(), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, v]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            const auto& y = self->data;
            const auto& g = self->grad;
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t f = v.flat(o, k, i);
                        dot += y[f] * g[f];
                    }
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t f = v.flat(o, k, i);
                        an->grad[f] += y[f] * (g[f] - dot);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

Tensor layernorm(const Tensor& a, std::size_t axis, double eps) {
    require_defined("layernorm", a);
    const AxisView v = axis_view("layernorm", a.shape(), axis);
    if (v.len < 2)
        throw std::invalid_argument(
            "layernorm: normalized slice needs at least 2 elements, axis " +
            std::to_string(axis) + " of " + shape_str(a.shape()) + " has " +
            std::to_string(v.len));
    const auto& av = a.data();
    std::vector<double> out(av.size());
    const double n = static_cast<double>(v.len);
    for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t i = 0; i < v.inner; ++i) {
            double mu = 0.0;
            for (std::size_t k = 0; k < v.len; ++k) mu += av[v.flat(o, k, i)];
            mu /= n;
            double var = 0.0;
            for (std::size_t k = 0; k < v.len; ++k) {
                const double d = av[v.flat(o, k, i)] - mu;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::size_t k = 0; k < v.len; ++k) {
                const std::size_t f = v.flat(o, k, i);
                out[f] = (av[f] - mu) * inv;
            }
        }
    }
    auto node = make_result(a.shape(), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, v, eps, n]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            const auto& x = an->data;
            const auto& y = self->data; // normalized values
            const auto& g = self->grad;
            for (std::size_t o = 0; o < v.outer; ++o) {
                for (std::size_t i = 0; i < v.inner; ++i) {
                    double mu = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k)
                        mu += x[v.flat(o, k, i)];
                    mu /= n;
                    double var = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const double d = x[v.flat(o, k, i)] - mu;
                        var += d * d;
                    }
                    var /= n;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double gmean = 0.0, gymean = 0.0;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t f = v.flat(o, k, i);
                        gmean += g[f];
                        gymean += g[f] * y[f];
                    }
                    gmean /= n;
                    gymean /= n;
                    for (std::size_t k = 0; k < v.len; ++k) {
                        const std::size_t f = v.flat(o, k, i);
                        an->grad[f] += inv * (g[f] - gmean - y[f] * gymean);
                    }
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Convolution / pooling
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
    require_defined("conv2d", input);
    require_defined("conv2d", kernel);
    if (input.rank() != 3)
        throw std::invalid_argument("conv2d: input must be [c,h,w], got " +
                                    shape_str(input.shape()));
    if (kernel.rank() != 4)
        throw std::invalid_argument(
            "conv2d: kernel must be [c_out,c_in,kh,kw], got " +
            shape_str(kernel.shape()));
    const std::size_t cin = input.shape()[0], h = input.shape()[1],
                      w = input.shape()[2];
    const std::size_t cout = kernel.shape()[0], kci = kernel.shape()[1],
                      kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (kci != cin)
        throw std::invalid_argument("conv2d: channel mismatch, input " +
                                    shape_str(input.shape()) + " vs kernel " +
                                    shape_str(kernel.shape()));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument(
            "conv2d: kernel sides must be odd for same-padding, got " +
            shape_str(kernel.shape()));
    if (bias.defined() &&
        (bias.rank() != 1 || bias.shape()[0] != cout))
        throw std::invalid_argument("conv2d: bias must be [c_out] = [" +
                                    std::to_string(cout) + "], got " +
                                    shape_str(bias.shape()));
    const std::size_t ph = kh / 2, pw = kw / 2;
    const auto& in = input.data();
    const auto& kv = kernel.data();
    std::vector<double> out(cout * h * w, 0.0);
    for (std::size_t co = 0; co < cout; ++co) {
        const double b = bias.defined() ? bias.data()[co] : 0.0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = b;
                for (std::size_t ci = 0; ci < cin; ++ci) {
                    for (std::size_t dy = 0; dy < kh; ++dy) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(y + dy) -
                            static_cast<std::ptrdiff_t>(ph);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                            continue;
                        for (std::size_t dx = 0; dx < kw; ++dx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(x + dx) -
                                static_cast<std::ptrdiff_t>(pw);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                continue;
                            acc += in[(ci * h + iy) * w + ix] *
                                   kv[((co * cin + ci) * kh + dy) * kw + dx];
                        }
                    }
                }
                out[(co * h + y) * w + x] = acc;
            }
        }
    }
    std::vector<NodePtr> parents{input.node(), kernel.node()};
    if (bias.defined()) parents.push_back(bias.node());
    auto node = make_result({cout, h, w}, std::move(out), std::move(parents));
    if (node->requires_grad) {
        auto in_n = input.node(), k_n = kernel.node();
        NodePtr b_n = bias.defined() ? bias.node() : nullptr;
        TensorNode* self = node.get();
        node->backward_fn = [in_n, k_n, b_n, self, cin, cout, h, w, kh, kw, ph,
                             pw]() {
            const auto& g = self->grad;
            if (in_n->requires_grad && in_n->grad.empty())
                in_n->grad.assign(in_n->data.size(), 0.0);
            if (k_n->requires_grad && k_n->grad.empty())
                k_n->grad.assign(k_n->data.size(), 0.0);
            if (b_n && b_n->requires_grad && b_n->grad.empty())
                b_n->grad.assign(b_n->data.size(), 0.0);
            for (std::size_t co = 0; co < cout; ++co) {
                for (std::size_t y = 0; y < h; ++y) {
                    for (std::size_t x = 0; x < w; ++x) {
                        const double gv = g[(co * h + y) * w + x];
                        if (gv == 0.0) continue;
                        if (b_n && b_n->requires_grad) b_n->grad[co] += gv;
                        for (std::size_t ci = 0; ci < cin; ++ci) {
                            for (std::size_t dy = 0; dy < kh; ++dy) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(y + dy) -
                                    static_cast<std::ptrdiff_t>(ph);
                                if (iy < 0 ||
                                    iy >= static_cast<std::ptrdiff_t>(h))
                                    continue;
                                for (std::size_t dx = 0; dx < kw; ++dx) {
                                    const std::ptrdiff_t ix =
                                        static_cast<std::ptrdiff_t>(x + dx) -
                                        static_cast<std::ptrdiff_t>(pw);
                                    if (ix < 0 ||
                                        ix >= static_cast<std::ptrdiff_t>(w))
                                        continue;
                                    const std::size_t ii =
                                        (ci * h + iy) * w + ix;
                                    const std::size_t ki =
                                        ((co * cin + ci) * kh + dy) * kw + dx;
                                    if (in_n->requires_grad)
                                        in_n->grad[ii] += gv * k_n->data[ki];
                                    if (k_n->requires_grad)
                                        k_n->grad[ki] += gv * in_n->data[ii];
                                }
                            }
                        }
                    }
                }
            }
        };
    }
    return Tensor(node);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel) {
    return conv2d(input, kernel, Tensor());
}

Tensor avgpool2d(const Tensor& input, std::size_t window) {
    require_defined("avgpool2d", input);
    if (input.rank() != 3)
        throw std::invalid_argument("avgpool2d: input must be [c,h,w], got " +
                                    shape_str(input.shape()));
    if (window == 0)
        throw std::invalid_argument("avgpool2d: window must be positive");
    const std::size_t c = input.shape()[0], h = input.shape()[1],
                      w = input.shape()[2];
    const std::size_t oh = h / window, ow = w / window;
    if (oh == 0 || ow == 0)
        throw std::invalid_argument("avgpool2d: window " +
                                    std::to_string(window) +
                                    " larger than input " +
                                    shape_str(input.shape()));
    const auto& in = input.data();
    const double inv = 1.0 / static_cast<double>(window * window);
    std::vector<double> out(c * oh * ow);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < window; ++dy)
                    for (std::size_t dx = 0; dx < window; ++dx)
                        acc += in[(ch * h + oy * window + dy) * w + ox * window +
                                  dx];
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
    auto node = make_result({c, oh, ow}, std::move(out), {input.node()});
    if (node->requires_grad) {
        auto in_n = input.node();
        TensorNode* self = node.get();
        node->backward_fn = [in_n, self, c, h, w, oh, ow, window, inv]() {
            if (in_n->grad.empty()) in_n->grad.assign(in_n->data.size(), 0.0);
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t oy = 0; oy < oh; ++oy)
                    for (std::size_t ox = 0; ox < ow; ++ox) {
                        const double gv =
                            self->grad[(ch * oh + oy) * ow + ox] * inv;
                        for (std::size_t dy = 0; dy < window; ++dy)
                            for (std::size_t dx = 0; dx < window; ++dx)
                                in_n->grad[(ch * h + oy * window + dy) * w +
                                           ox * window + dx] += gv;
                    }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined("reshape", a);
    validate_shape("reshape", shape);
    if (shape_size(shape) != a.size())
        throw std::invalid_argument("reshape: cannot view " +
                                    shape_str(a.shape()) + " as " +
                                    shape_str(shape));
    auto node = make_result(std::move(shape), a.data(), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self]() { an->accumulate(self->grad); };
    }
    return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty())
        throw std::invalid_argument("concat: needs at least one part");
    for (const Tensor& p : parts) require_defined("concat", p);
    const Shape& first = parts[0].shape();
    if (axis >= first.size())
        throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(first));
    Shape out_shape = first;
    std::size_t axis_total = 0;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size())
            throw std::invalid_argument("concat: rank mismatch " +
                                        shape_str(first) + " vs " +
                                        shape_str(s));
        for (std::size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != first[d])
                throw std::invalid_argument(
                    "concat: non-axis dimensions differ: " + shape_str(first) +
                    " vs " + shape_str(s));
        axis_total += s[axis];
    }
    out_shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
    for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

    std::vector<double> out(shape_size(out_shape));
    std::vector<std::size_t> offsets(parts.size());
    {
        std::size_t off = 0;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            offsets[p] = off;
            const std::size_t plen = parts[p].shape()[axis];
            const auto& pv = parts[p].data();
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t src = o * plen * inner;
                const std::size_t dst = (o * axis_total + off) * inner;
                std::copy(pv.begin() + src, pv.begin() + src + plen * inner,
                          out.begin() + dst);
            }
            off += plen;
        }
    }
    std::vector<NodePtr> parents;
    parents.reserve(parts.size());
    for (const Tensor& p : parts) parents.push_back(p.node());
    auto node = make_result(out_shape, std::move(out), std::move(parents));
    if (node->requires_grad) {
        std::vector<NodePtr> ps = node->parents;
        std::vector<std::size_t> lens(parts.size());
        for (std::size_t p = 0; p < parts.size(); ++p)
            lens[p] = parts[p].shape()[axis];
        TensorNode* self = node.get();
        node->backward_fn = [ps, offsets, lens, self, outer, inner,
                             axis_total]() {
            const auto& g = self->grad;
            for (std::size_t p = 0; p < ps.size(); ++p) {
                if (!ps[p]->requires_grad) continue;
                if (ps[p]->grad.empty())
                    ps[p]->grad.assign(ps[p]->data.size(), 0.0);
                for (std::size_t o = 0; o < outer; ++o) {
                    const std::size_t src =
                        (o * axis_total + offsets[p]) * inner;
                    const std::size_t dst = o * lens[p] * inner;
                    for (std::size_t i = 0; i < lens[p] * inner; ++i)
                        ps[p]->grad[dst + i] += g[src + i];
                }
            }
        };
    }
    return Tensor(node);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start,
             std::size_t len) {
    require_defined("slice", a);
    const Shape& s = a.shape();
    if (axis >= s.size())
        throw std::invalid_argument("slice: axis " + std::to_string(axis) +
                                    " out of range for " + shape_str(s));
    if (len == 0 || start + len > s[axis])
        throw std::invalid_argument(
            "slice: range [" + std::to_string(start) + ", " +
            std::to_string(start + len) + ") invalid for axis " +
            std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t alen = s[axis];
    Shape out_shape = s;
    out_shape[axis] = len;
    const auto& av = a.data();
    std::vector<double> out(outer * len * inner);
    for (std::size_t o = 0; o < outer; ++o) {
        const std::size_t src = (o * alen + start) * inner;
        std::copy(av.begin() + src, av.begin() + src + len * inner,
                  out.begin() + o * len * inner);
    }
    auto node = make_result(std::move(out_shape), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, outer, inner, alen, start, len]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            const auto& g = self->grad;
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t dst = (o * alen + start) * inner;
                for (std::size_t i = 0; i < len * inner; ++i)
                    an->grad[dst + i] += g[o * len * inner + i];
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& a) {
    require_defined("sum", a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto node = make_result({}, {s}, {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (double& g : an->grad) g += self->grad[0];
        };
    }
    return Tensor(node);
}

Tensor mean(const Tensor& a) {
    require_defined("mean", a);
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    auto node = make_result({}, {s * inv}, {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, inv]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (double& g : an->grad) g += self->grad[0] * inv;
        };
    }
    return Tensor(node);
}

namespace {

Tensor extremum(const char* name, const Tensor& a, bool want_max) {
    require_defined(name, a);
    const auto& av = a.data();
    std::size_t best = 0;
    for (std::size_t i = 1; i < av.size(); ++i) {
        if (want_max ? av[i] > av[best] : av[i] < av[best]) best = i;
    }
    auto node = make_result({}, {av[best]}, {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, best]() {
            an->accumulate_at(best, self->grad[0]);
        };
    }
    return Tensor(node);
}

} // namespace

Tensor reduce_max(const Tensor& a) { return extremum("reduce_max", a, true); }
Tensor reduce_min(const Tensor& a) { return extremum("reduce_min", a, false); }

Tensor spatial_mean(const Tensor& a) {
    require_defined("spatial_mean", a);
    if (a.rank() != 3)
        throw std::invalid_argument("spatial_mean: expects [c,h,w], got " +
                                    shape_str(a.shape()));
    const std::size_t c = a.shape()[0];
    const std::size_t hw = a.shape()[1] * a.shape()[2];
    const double inv = 1.0 / static_cast<double>(hw);
    const auto& av = a.data();
    std::vector<double> out(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < hw; ++i) s += av[ch * hw + i];
        out[ch] = s * inv;
    }
    auto node = make_result({c}, std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, c, hw, inv]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const double gv = self->grad[ch] * inv;
                for (std::size_t i = 0; i < hw; ++i)
                    an->grad[ch * hw + i] += gv;
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

namespace {

std::size_t channel_block(const char* op, const Tensor& a, const Tensor& vec) {
    require_defined(op, a);
    require_defined(op, vec);
    if (a.rank() < 1 || vec.rank() != 1 || a.shape()[0] != vec.shape()[0])
        throw std::invalid_argument(std::string(op) + ": tensor " +
                                    shape_str(a.shape()) +
                                    " incompatible with channel vector " +
                                    shape_str(vec.shape()));
    return a.size() / a.shape()[0];
}

} // namespace

Tensor channel_add(const Tensor& a, const Tensor& bias) {
    const std::size_t block = channel_block("channel_add", a, bias);
    const std::size_t c = a.shape()[0];
    const auto& av = a.data();
    const auto& bv = bias.data();
    std::vector<double> out(av.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < block; ++i)
            out[ch * block + i] = av[ch * block + i] + bv[ch];
    auto node = make_result(a.shape(), std::move(out), {a.node(), bias.node()});
    if (node->requires_grad) {
        auto an = a.node(), bn = bias.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, bn, self, c, block]() {
            const auto& g = self->grad;
            if (an->requires_grad) an->accumulate(g);
            if (bn->requires_grad) {
                if (bn->grad.empty()) bn->grad.assign(bn->data.size(), 0.0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < block; ++i)
                        s += g[ch * block + i];
                    bn->grad[ch] += s;
                }
            }
        };
    }
    return Tensor(node);
}

Tensor channel_mul(const Tensor& a, const Tensor& gain) {
    const std::size_t block = channel_block("channel_mul", a, gain);
    const std::size_t c = a.shape()[0];
    const auto& av = a.data();
    const auto& gv = gain.data();
    std::vector<double> out(av.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < block; ++i)
            out[ch * block + i] = av[ch * block + i] * gv[ch];
    auto node = make_result(a.shape(), std::move(out), {a.node(), gain.node()});
    if (node->requires_grad) {
        auto an = a.node(), gn = gain.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, gn, self, c, block]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < block; ++i)
                        an->grad[ch * block + i] +=
                            g[ch * block + i] * gn->data[ch];
            }
            if (gn->requires_grad) {
                if (gn->grad.empty()) gn->grad.assign(gn->data.size(), 0.0);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < block; ++i)
                        s += g[ch * block + i] * an->data[ch * block + i];
                    gn->grad[ch] += s;
                }
            }
        };
    }
    return Tensor(node);
}

namespace {

// Splits v into (v*m, v - v*m) such that the two parts re-add to exactly v.
// A plain product plus remainder can land the re-add on a rounding tie; the
// Fast2Sum error term of the subtraction (exact while |v*m| <= |v|) is folded
// back into the kept part, with a bounded ulp walk as a last resort. Each
// part stays within one ulp of the untouched value.
std::pair<double, double> exact_mask_split(double v, double m) {
    const double kept = v * m;
    double rem = v - kept;
    if (kept + rem == v) return {kept, rem};
    const double z = rem - v;
    const double e = -kept - z; // v - kept - rem
    double k2 = kept + e;
    double r2 = v - k2;
    for (int guard = 0; guard < 64; ++guard) {
        if (k2 + r2 == v) return {k2, r2};
        k2 = std::nextafter(
            k2, k2 + r2 < v ? std::numeric_limits<double>::infinity()
                            : -std::numeric_limits<double>::infinity());
        r2 = v - k2;
    }
    throw std::runtime_error("plane_mul: could not form an exact mask split");
}

void check_plane(const char* op, const Tensor& a, const Tensor& plane,
                 std::size_t& channels, std::size_t& hw) {
    require_defined(op, a);
    require_defined(op, plane);
    if (plane.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": plane must be [h,w], got " +
                                    shape_str(plane.shape()));
    if (a.rank() == 2) {
        if (a.shape() != plane.shape())
            throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " +
                                        shape_str(plane.shape()));
        channels = 1;
    } else if (a.rank() == 3) {
        if (a.shape()[1] != plane.shape()[0] || a.shape()[2] != plane.shape()[1])
            throw std::invalid_argument(std::string(op) + ": spatial mismatch " +
                                        shape_str(a.shape()) + " vs " +
                                        shape_str(plane.shape()));
        channels = a.shape()[0];
    } else {
        throw std::invalid_argument(std::string(op) +
                                    ": tensor must be [h,w] or [c,h,w], got " +
                                    shape_str(a.shape()));
    }
    hw = plane.size();
}

} // namespace

Tensor plane_mul(const Tensor& a, const Tensor& plane) {
    std::size_t c = 0, hw = 0;
    check_plane("plane_mul", a, plane, c, hw);
    const auto& av = a.data();
    const auto& mv = plane.data();
    std::vector<double> out(av.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i)
            out[ch * hw + i] = exact_mask_split(av[ch * hw + i], mv[i]).first;
    auto node = make_result(a.shape(), std::move(out), {a.node(), plane.node()});
    if (node->requires_grad) {
        auto an = a.node(), mn = plane.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, mn, self, c, hw]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i)
                        an->grad[ch * hw + i] += g[ch * hw + i] * mn->data[i];
            }
            if (mn->requires_grad) {
                if (mn->grad.empty()) mn->grad.assign(mn->data.size(), 0.0);
                for (std::size_t i = 0; i < hw; ++i) {
                    double s = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        s += g[ch * hw + i] * an->data[ch * hw + i];
                    mn->grad[i] += s;
                }
            }
        };
    }
    return Tensor(node);
}

Tensor plane_mul_complement(const Tensor& a, const Tensor& plane) {
    std::size_t c = 0, hw = 0;
    check_plane("plane_mul_complement", a, plane, c, hw);
    const auto& av = a.data();
    const auto& mv = plane.data();
    // The complement is the remainder half of the exact split, so that
    // plane_mul(a,m) + plane_mul_complement(a,m) == a holds per element.
    std::vector<double> out(av.size());
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < hw; ++i)
            out[ch * hw + i] = exact_mask_split(av[ch * hw + i], mv[i]).second;
    auto node = make_result(a.shape(), std::move(out), {a.node(), plane.node()});
    if (node->requires_grad) {
        auto an = a.node(), mn = plane.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, mn, self, c, hw]() {
            const auto& g = self->grad;
            if (an->requires_grad) {
                if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t i = 0; i < hw; ++i)
                        an->grad[ch * hw + i] +=
                            g[ch * hw + i] * (1.0 - mn->data[i]);
            }
            if (mn->requires_grad) {
                if (mn->grad.empty()) mn->grad.assign(mn->data.size(), 0.0);
                for (std::size_t i = 0; i < hw; ++i) {
                    double s = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch)
                        s += g[ch * hw + i] * an->data[ch * hw + i];
                    mn->grad[i] -= s;
                }
            }
        };
    }
    return Tensor(node);
}

// ---------------------------------------------------------------------------
// Bilinear resize
// ---------------------------------------------------------------------------

namespace {

struct LerpIndex {
    std::size_t lo, hi;
    double frac;
};

std::vector<LerpIndex> lerp_table(std::size_t src, std::size_t dst) {
    std::vector<LerpIndex> t(dst);
    const double scale = static_cast<double>(src) / static_cast<double>(dst);
    for (std::size_t d = 0; d < dst; ++d) {
        double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
        if (s < 0.0) s = 0.0;
        const double max_s = static_cast<double>(src - 1);
        if (s > max_s) s = max_s;
        const std::size_t lo = static_cast<std::size_t>(s);
        t[d].lo = lo;
        t[d].hi = std::min(lo + 1, src - 1);
        t[d].frac = s - static_cast<double>(lo);
    }
    return t;
}

} // namespace

Tensor bilinear_resize(const Tensor& a, std::size_t out_h, std::size_t out_w) {
    require_defined("bilinear_resize", a);
    if (a.rank() != 2 && a.rank() != 3)
        throw std::invalid_argument(
            "bilinear_resize: expects [h,w] or [c,h,w], got " +
            shape_str(a.shape()));
    if (out_h == 0 || out_w == 0)
        throw std::invalid_argument("bilinear_resize: output size must be positive");
    const bool has_c = a.rank() == 3;
    const std::size_t c = has_c ? a.shape()[0] : 1;
    const std::size_t h = a.shape()[has_c ? 1 : 0];
    const std::size_t w = a.shape()[has_c ? 2 : 1];
    if (h == out_h && w == out_w) return a; // exact no-op, same handle

    const auto ys = lerp_table(h, out_h);
    const auto xs = lerp_table(w, out_w);
    const auto& av = a.data();
    std::vector<double> out(c * out_h * out_w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t base = ch * h * w;
        for (std::size_t y = 0; y < out_h; ++y) {
            for (std::size_t x = 0; x < out_w; ++x) {
                const auto& ly = ys[y];
                const auto& lx = xs[x];
                const double v00 = av[base + ly.lo * w + lx.lo];
                const double v01 = av[base + ly.lo * w + lx.hi];
                const double v10 = av[base + ly.hi * w + lx.lo];
                const double v11 = av[base + ly.hi * w + lx.hi];
                const double top = v00 * (1.0 - lx.frac) + v01 * lx.frac;
                const double bot = v10 * (1.0 - lx.frac) + v11 * lx.frac;
                out[(ch * out_h + y) * out_w + x] =
                    top * (1.0 - ly.frac) + bot * ly.frac;
            }
        }
    }
    Shape out_shape = has_c ? Shape{c, out_h, out_w} : Shape{out_h, out_w};
    auto node = make_result(std::move(out_shape), std::move(out), {a.node()});
    if (node->requires_grad) {
        auto an = a.node();
        TensorNode* self = node.get();
        node->backward_fn = [an, self, ys, xs, c, h, w, out_h, out_w]() {
            if (an->grad.empty()) an->grad.assign(an->data.size(), 0.0);
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t base = ch * h * w;
                for (std::size_t y = 0; y < out_h; ++y) {
                    for (std::size_t x = 0; x < out_w; ++x) {
                        const auto& ly = ys[y];
                        const auto& lx = xs[x];
                        const double g =
                            self->grad[(ch * out_h + y) * out_w + x];
                        an->grad[base + ly.lo * w + lx.lo] +=
                            g * (1.0 - ly.frac) * (1.0 - lx.frac);
                        an->grad[base + ly.lo * w + lx.hi] +=
                            g * (1.0 - ly.frac) * lx.frac;
                        an->grad[base + ly.hi * w + lx.lo] +=
                            g * ly.frac * (1.0 - lx.frac);
                        an->grad[base + ly.hi * w + lx.hi] +=
                            g * ly.frac * lx.frac;
                    }
                }
            }
        };
    }
    return Tensor(node);
}

} // namespace pgnn
