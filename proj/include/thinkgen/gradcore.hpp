#pragma once

// Dense 2-D tensors, a tape-based reverse-mode autodiff graph, Adam, and the
// parameter checkpoint format.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "thinkgen/common.hpp"

namespace thinkgen::grad {

/// Placeholder for entries outside a masked distribution's support. Finite so
/// downstream arithmetic stays clean; exp() of it is exactly zero.
inline constexpr double kMasked = -1e30;

/// A named parameter tensor (rows x cols, row-major) and its gradient buffer.
struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;
    std::vector<double> values;
    std::vector<double> grad;

    Tensor() = default;
    Tensor(std::string n, int r, int c, double fill = 0.0)
        : name(std::move(n)), rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill),
          grad(static_cast<std::size_t>(r) * c, 0.0) {}

    std::size_t size() const { return values.size(); }
    double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

/// Ordered collection of parameter tensors.
class ParamSet {
   public:
    Tensor& add(std::string name, int rows, int cols, double fill = 0.0) {
        if (find(name)) throw config_error("DuplicateTensor", name);
        tensors_.emplace_back(std::move(name), rows, cols, fill);
        return tensors_.back();
    }
    Tensor* find(const std::string& name) {
        for (auto& t : tensors_)
            if (t.name == name) return &t;
        return nullptr;
    }
    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors_)
            if (t.name == name) return &t;
        return nullptr;
    }
    Tensor& get(const std::string& name) {
        if (auto* t = find(name)) return *t;
        throw config_error("MissingTensor", name);
    }
    const Tensor& get(const std::string& name) const {
        if (const auto* t = find(name)) return *t;
        throw config_error("MissingTensor", name);
    }
    std::vector<Tensor>& tensors() { return tensors_; }
    const std::vector<Tensor>& tensors() const { return tensors_; }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }
    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }
    bool all_finite() const {
        for (const auto& t : tensors_)
            for (double v : t.values)
                if (!std::isfinite(v)) return false;
        return true;
    }

   private:
    // deque-like stability is not needed: callers take references after construction.
    std::vector<Tensor> tensors_;
};

/// Gradient buffers laid out like a ParamSet, for accumulating outside the
/// parameters themselves (one per worker).
struct GradBuffer {
    std::vector<std::vector<double>> grads;

    explicit GradBuffer(const ParamSet& params) {
        for (const auto& t : params.tensors()) grads.emplace_back(t.size(), 0.0);
    }
    void zero() {
        for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
    }
    void add_to(ParamSet& params) const {
        auto& ts = params.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i)
            for (std::size_t j = 0; j < grads[i].size(); ++j) ts[i].grad[j] += grads[i][j];
    }
    void accumulate(const GradBuffer& other) {
        for (std::size_t i = 0; i < grads.size(); ++i)
            for (std::size_t j = 0; j < grads[i].size(); ++j) grads[i][j] += other.grads[i][j];
    }
};

class Graph;

/// Handle to a node on a Graph.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    int rows() const;
    int cols() const;
    std::size_t size() const { return static_cast<std::size_t>(rows()) * cols(); }
    const std::vector<double>& value() const;
    double item() const;
    double at(int r, int c) const { return value()[static_cast<std::size_t>(r) * cols() + c]; }
};

class Graph {
   public:
    struct Node {
        int rows = 0;
        int cols = 0;
        std::vector<double> value;
        std::vector<double> grad;
        bool requires_grad = false;
        double* sink = nullptr;  // parameter leaves: where gradients land
        std::function<void(Graph&, Node&)> backward;
        const char* op = "";
    };

    Graph() { nodes_.reserve(256); }
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var param(const Tensor& t, std::span<double> sink) {
        if (!sink.empty() && sink.size() != t.size()) throw numeric_error("ShapeMismatch", "gradient sink for " + t.name);
        Node n;
        n.rows = t.rows;
        n.cols = t.cols;
        n.value = t.values;
        n.requires_grad = !sink.empty();
        n.sink = sink.empty() ? nullptr : sink.data();
        n.op = "param";
        return push(std::move(n));
    }
    /// Leaf bound to the tensor's own gradient buffer.
    Var param(Tensor& t) {
        if (t.grad.size() != t.size()) t.grad.assign(t.size(), 0.0);
        return param(t, std::span<double>(t.grad));
    }
    Var constant(int rows, int cols, std::vector<double> values) {
        if (values.size() != static_cast<std::size_t>(rows) * cols)
            throw numeric_error("ShapeMismatch", "constant size");
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.value = std::move(values);
        n.op = "constant";
        return push(std::move(n));
    }
    Var scalar(double v) { return constant(1, 1, {v}); }

    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    /// Smallest distance of any clip/min input to its kink seen so far.
    double kink_gap() const { return kink_gap_; }
    void note_kink(double gap) { kink_gap_ = std::min(kink_gap_, gap); }

    /// Appends a computed node; checks finiteness. Used by the op functions.
    Var emit(const char* op, int rows, int cols, std::vector<double> value, bool requires_grad,
             std::function<void(Graph&, Node&)> backward) {
        for (double v : value)
            if (!std::isfinite(v)) throw numeric_error("NonFinite", std::string("output of ") + op);
        Node n;
        n.rows = rows;
        n.cols = cols;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        n.op = op;
        return push(std::move(n));
    }

    /// Gradient buffer of a node, allocated on first touch.
    std::vector<double>& grad_of(int id) {
        auto& n = node(id);
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    /// Reverse sweep from a scalar root. Parameter sinks accumulate, so calling
    /// this twice adds the gradient twice.
    void backward(Var root) {
        const auto& r = node(root.id);
        if (r.rows != 1 || r.cols != 1) throw numeric_error("NonScalarRoot", std::to_string(r.rows) + "x" + std::to_string(r.cols));
        for (auto& n : nodes_) n.grad.clear();
        grad_of(root.id)[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            auto& n = node(i);
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.sink) {
                for (std::size_t j = 0; j < n.grad.size(); ++j) n.sink[j] += n.grad[j];
            } else if (n.backward) {
                n.backward(*this, n);
            }
        }
    }

   private:
    Var push(Node n) {
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    double kink_gap_ = std::numeric_limits<double>::infinity();
};

inline int Var::rows() const { return graph->node(id).rows; }
inline int Var::cols() const { return graph->node(id).cols; }
inline const std::vector<double>& Var::value() const { return graph->node(id).value; }
inline double Var::item() const { return value().at(0); }

namespace detail {

inline void require_same(Var a, Var b, const char* op) {
    if (a.graph != b.graph) throw numeric_error("ShapeMismatch", std::string(op) + ": different graphs");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw numeric_error("ShapeMismatch", std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                                                 std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                                 std::to_string(b.cols()));
}

inline bool needs(Var v) { return v.graph->node(v.id).requires_grad; }

// C[r x c] += A[r x k] * B[k x c]
inline void gemm_nn(const double* a, const double* b, double* c, int r, int k, int cc) {
    for (int i = 0; i < r; ++i) {
        double* ci = c + static_cast<std::size_t>(i) * cc;
        const double* ai = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + static_cast<std::size_t>(p) * cc;
            for (int j = 0; j < cc; ++j) ci[j] += av * bp[j];
        }
    }
}

// C[r x k] += A[r x c] * B[k x c]^T
inline void gemm_nt(const double* a, const double* b, double* c, int r, int cc, int k) {
    for (int i = 0; i < r; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * cc;
        double* ci = c + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* bp = b + static_cast<std::size_t>(p) * cc;
            double s = 0.0;
            for (int j = 0; j < cc; ++j) s += ai[j] * bp[j];
            ci[p] += s;
        }
    }
}

// C[k x c] += A[r x k]^T * B[r x c]
inline void gemm_tn(const double* a, const double* b, double* c, int r, int k, int cc) {
    for (int i = 0; i < r; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        const double* bi = b + static_cast<std::size_t>(i) * cc;
        for (int p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* cp = c + static_cast<std::size_t>(p) * cc;
            for (int j = 0; j < cc; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
    if (a.cols() != b.rows())
        throw numeric_error("ShapeMismatch", "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                                 " * " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    const int r = a.rows(), k = a.cols(), c = b.cols();
    std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
    detail::gemm_nn(a.value().data(), b.value().data(), out.data(), r, k, c);
    return a.graph->emit("matmul", r, c, std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b, r, k, c](Graph& g, Graph::Node& n) {
                             if (detail::needs(a))
                                 detail::gemm_nt(n.grad.data(), b.value().data(), g.grad_of(a.id).data(), r, c, k);
                             if (detail::needs(b))
                                 detail::gemm_tn(a.value().data(), n.grad.data(), g.grad_of(b.id).data(), r, k, c);
                         });
}

inline Var add(Var a, Var b) {
    detail::require_same(a, b, "add");
    std::vector<double> out(a.value());
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.graph->emit("add", a.rows(), a.cols(), std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b](Graph& g, Graph::Node& n) {
                             for (Var v : {a, b}) {
                                 if (!detail::needs(v)) continue;
                                 auto& gv = g.grad_of(v.id);
                                 for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += n.grad[i];
                             }
                         });
}

inline Var sub(Var a, Var b) {
    detail::require_same(a, b, "sub");
    std::vector<double> out(a.value());
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.graph->emit("sub", a.rows(), a.cols(), std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b](Graph& g, Graph::Node& n) {
                             if (detail::needs(a)) {
                                 auto& ga = g.grad_of(a.id);
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
                             }
                             if (detail::needs(b)) {
                                 auto& gb = g.grad_of(b.id);
                                 for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
                             }
                         });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    detail::require_same(a, b, "mul");
    std::vector<double> out(a.value());
    const auto& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return a.graph->emit("mul", a.rows(), a.cols(), std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b](Graph& g, Graph::Node& n) {
                             if (detail::needs(a)) {
                                 auto& ga = g.grad_of(a.id);
                                 const auto& bv = b.value();
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * bv[i];
                             }
                             if (detail::needs(b)) {
                                 auto& gb = g.grad_of(b.id);
                                 const auto& av = a.value();
                                 for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * av[i];
                             }
                         });
}

inline Var scale(Var a, double s) {
    std::vector<double> out(a.value());
    for (double& v : out) v *= s;
    return a.graph->emit("scale", a.rows(), a.cols(), std::move(out), detail::needs(a), [a, s](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * n.grad[i];
    });
}

/// Adds a 1 x cols bias to every row (the only broadcast supported).
inline Var add_row(Var a, Var bias) {
    if (bias.rows() != 1 || bias.cols() != a.cols()) throw numeric_error("ShapeMismatch", "add_row bias");
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.value());
    const auto& bv = bias.value();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] += bv[static_cast<std::size_t>(j)];
    return a.graph->emit("add_row", r, c, std::move(out), detail::needs(a) || detail::needs(bias),
                         [a, bias, r, c](Graph& g, Graph::Node& n) {
                             if (detail::needs(a)) {
                                 auto& ga = g.grad_of(a.id);
                                 for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
                             }
                             if (detail::needs(bias)) {
                                 auto& gb = g.grad_of(bias.id);
                                 for (int i = 0; i < r; ++i)
                                     for (int j = 0; j < c; ++j)
                                         gb[static_cast<std::size_t>(j)] += n.grad[static_cast<std::size_t>(i) * c + j];
                             }
                         });
}

inline Var square(Var a) {
    std::vector<double> out(a.value());
    for (double& v : out) v *= v;
    return a.graph->emit("square", a.rows(), a.cols(), std::move(out), detail::needs(a), [a](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        const auto& av = a.value();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += 2.0 * av[i] * n.grad[i];
    });
}

inline Var exp(Var a) {
    std::vector<double> out(a.value());
    for (double& v : out) v = std::exp(v);
    return a.graph->emit("exp", a.rows(), a.cols(), std::move(out), detail::needs(a), [a](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.value[i] * n.grad[i];
    });
}

inline Var log(Var a) {
    std::vector<double> out(a.value());
    for (double& v : out) v = std::log(v);
    return a.graph->emit("log", a.rows(), a.cols(), std::move(out), detail::needs(a), [a](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        const auto& av = a.value();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] / av[i];
    });
}

/// tanh-approximated GELU.
inline Var gelu(Var a) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        const double x = av[i];
        out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
    }
    return a.graph->emit("gelu", a.rows(), a.cols(), std::move(out), detail::needs(a), [a](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        const auto& av = a.value();
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double x = av[i];
            const double u = k * (x + 0.044715 * x * x * x);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * x * x);
            ga[i] += n.grad[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
        }
    });
}

/// Row-wise softmax. Entries at kMasked contribute exactly zero probability.
inline Var softmax_rows(Var a) {
    const int r = a.rows(), c = a.cols();
    const auto& av = a.value();
    std::vector<double> out(av.size());
    for (int i = 0; i < r; ++i) {
        const double* x = av.data() + static_cast<std::size_t>(i) * c;
        double* y = out.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(x, x + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += (y[j] = std::exp(x[j] - mx));
        for (int j = 0; j < c; ++j) y[j] /= s;
    }
    return a.graph->emit("softmax_rows", r, c, std::move(out), detail::needs(a), [a, r, c](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        for (int i = 0; i < r; ++i) {
            const std::size_t o = static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += n.grad[o + j] * n.value[o + j];
            for (int j = 0; j < c; ++j) ga[o + j] += n.value[o + j] * (n.grad[o + j] - dot);
        }
    });
}

namespace detail {

// Per-row log-softmax restricted to mask==1 entries (all entries when mask is empty).
inline std::vector<double> masked_log_softmax(const std::vector<double>& av, int r, int c,
                                              const std::vector<std::uint8_t>& mask) {
    std::vector<double> out(av.size(), kMasked);
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            if (mask.empty() || mask[o + j]) mx = std::max(mx, av[o + j]);
        if (!std::isfinite(mx)) throw numeric_error("NonFinite", "log_softmax_rows: empty support");
        double s = 0.0;
        for (int j = 0; j < c; ++j)
            if (mask.empty() || mask[o + j]) s += std::exp(av[o + j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j)
            if (mask.empty() || mask[o + j]) out[o + j] = av[o + j] - lse;
    }
    return out;
}

}  // namespace detail

/// Row-wise log-softmax over the entries with mask==1 (every entry when the
/// mask is empty). Excluded entries read kMasked and receive no gradient.
inline Var log_softmax_rows(Var a, std::vector<std::uint8_t> mask = {}) {
    const int r = a.rows(), c = a.cols();
    if (!mask.empty() && mask.size() != a.size()) throw numeric_error("ShapeMismatch", "log_softmax_rows mask");
    auto out = detail::masked_log_softmax(a.value(), r, c, mask);
    return a.graph->emit("log_softmax_rows", r, c, std::move(out), detail::needs(a),
                         [a, r, c, mask = std::move(mask)](Graph& g, Graph::Node& n) {
                             auto& ga = g.grad_of(a.id);
                             for (int i = 0; i < r; ++i) {
                                 const std::size_t o = static_cast<std::size_t>(i) * c;
                                 double gs = 0.0;
                                 for (int j = 0; j < c; ++j)
                                     if (mask.empty() || mask[o + j]) gs += n.grad[o + j];
                                 for (int j = 0; j < c; ++j)
                                     if (mask.empty() || mask[o + j]) ga[o + j] += n.grad[o + j] - std::exp(n.value[o + j]) * gs;
                             }
                         });
}

/// Shannon entropy (nats) of each row's masked softmax; rows x 1.
inline Var entropy_rows(Var a, std::vector<std::uint8_t> mask = {}) {
    const int r = a.rows(), c = a.cols();
    if (!mask.empty() && mask.size() != a.size()) throw numeric_error("ShapeMismatch", "entropy_rows mask");
    auto logp = detail::masked_log_softmax(a.value(), r, c, mask);
    std::vector<double> out(static_cast<std::size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double h = 0.0;
        for (int j = 0; j < c; ++j)
            if (mask.empty() || mask[o + j]) h -= std::exp(logp[o + j]) * logp[o + j];
        out[static_cast<std::size_t>(i)] = h;
    }
    return a.graph->emit("entropy_rows", r, 1, std::move(out), detail::needs(a),
                         [a, r, c, mask = std::move(mask), logp = std::move(logp)](Graph& g, Graph::Node& n) {
                             auto& ga = g.grad_of(a.id);
                             for (int i = 0; i < r; ++i) {
                                 const std::size_t o = static_cast<std::size_t>(i) * c;
                                 const double h = n.value[static_cast<std::size_t>(i)];
                                 const double up = n.grad[static_cast<std::size_t>(i)];
                                 for (int j = 0; j < c; ++j)
                                     if (mask.empty() || mask[o + j])
                                         ga[o + j] -= up * std::exp(logp[o + j]) * (logp[o + j] + h);
                             }
                         });
}

/// out[i] = a[i, index[i]]; rows x 1.
inline Var pick(Var a, std::vector<int> index) {
    const int r = a.rows(), c = a.cols();
    if (static_cast<int>(index.size()) != r) throw numeric_error("ShapeMismatch", "pick index count");
    std::vector<double> out(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        if (index[static_cast<std::size_t>(i)] < 0 || index[static_cast<std::size_t>(i)] >= c)
            throw numeric_error("ShapeMismatch", "pick index out of range");
        out[static_cast<std::size_t>(i)] = a.at(i, index[static_cast<std::size_t>(i)]);
    }
    return a.graph->emit("pick", r, 1, std::move(out), detail::needs(a),
                         [a, c, index = std::move(index)](Graph& g, Graph::Node& n) {
                             auto& ga = g.grad_of(a.id);
                             for (std::size_t i = 0; i < index.size(); ++i)
                                 ga[i * static_cast<std::size_t>(c) + static_cast<std::size_t>(index[i])] += n.grad[i];
                         });
}

/// Row lookup: out[i] = table[index[i], :].
inline Var gather_rows(Var table, std::vector<int> index) {
    const int c = table.cols();
    const int r = static_cast<int>(index.size());
    std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
    const auto& tv = table.value();
    for (int i = 0; i < r; ++i) {
        const int k = index[static_cast<std::size_t>(i)];
        if (k < -1 || k >= table.rows()) throw numeric_error("ShapeMismatch", "gather_rows index " + std::to_string(k));
        if (k >= 0) std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(k) * c, c, out.begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    return table.graph->emit("gather_rows", r, c, std::move(out), detail::needs(table),
                             [table, c, index = std::move(index)](Graph& g, Graph::Node& n) {
                                 auto& gt = g.grad_of(table.id);
                                 for (std::size_t i = 0; i < index.size(); ++i)
                                     if (index[i] >= 0)
                                         for (int j = 0; j < c; ++j)
                                             gt[static_cast<std::size_t>(index[i]) * c + j] += n.grad[i * c + j];
                             });
}

/// Column j of the result is column index[j] of `a`; -1 yields zeros.
inline Var gather_cols(Var a, std::vector<int> index) {
    const int r = a.rows(), ac = a.cols();
    const int c = static_cast<int>(index.size());
    std::vector<double> out(static_cast<std::size_t>(r) * c, 0.0);
    const auto& av = a.value();
    for (int j = 0; j < c; ++j) {
        const int k = index[static_cast<std::size_t>(j)];
        if (k < -1 || k >= ac) throw numeric_error("ShapeMismatch", "gather_cols index " + std::to_string(k));
        if (k >= 0)
            for (int i = 0; i < r; ++i) out[static_cast<std::size_t>(i) * c + j] = av[static_cast<std::size_t>(i) * ac + k];
    }
    return a.graph->emit("gather_cols", r, c, std::move(out), detail::needs(a),
                         [a, r, ac, c, index = std::move(index)](Graph& g, Graph::Node& n) {
                             auto& ga = g.grad_of(a.id);
                             for (int j = 0; j < c; ++j) {
                                 const int k = index[static_cast<std::size_t>(j)];
                                 if (k < 0) continue;
                                 for (int i = 0; i < r; ++i)
                                     ga[static_cast<std::size_t>(i) * ac + k] += n.grad[static_cast<std::size_t>(i) * c + j];
                             }
                         });
}

/// Per-row normalization followed by elementwise gain and bias (both 1 x cols).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    const int r = x.rows(), c = x.cols();
    if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c)
        throw numeric_error("ShapeMismatch", "layer_norm gain/bias");
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    std::vector<double> xhat(xv.size()), inv_std(static_cast<std::size_t>(r)), out(xv.size());
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xv[o + j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (xv[o + j] - mean) * (xv[o + j] - mean);
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            xhat[o + j] = (xv[o + j] - mean) * is;
            out[o + j] = xhat[o + j] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    const bool rg = detail::needs(x) || detail::needs(gain) || detail::needs(bias);
    return x.graph->emit("layer_norm", r, c, std::move(out), rg,
                         [x, gain, bias, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, Graph::Node& n) {
                             const auto& gv = gain.value();
                             if (detail::needs(gain) || detail::needs(bias)) {
                                 auto* gg = detail::needs(gain) ? &g.grad_of(gain.id) : nullptr;
                                 auto* gb = detail::needs(bias) ? &g.grad_of(bias.id) : nullptr;
                                 for (int i = 0; i < r; ++i)
                                     for (int j = 0; j < c; ++j) {
                                         const std::size_t o = static_cast<std::size_t>(i) * c + j;
                                         if (gg) (*gg)[static_cast<std::size_t>(j)] += n.grad[o] * xhat[o];
                                         if (gb) (*gb)[static_cast<std::size_t>(j)] += n.grad[o];
                                     }
                             }
                             if (!detail::needs(x)) return;
                             auto& gx = g.grad_of(x.id);
                             std::vector<double> dxhat(static_cast<std::size_t>(c));
                             for (int i = 0; i < r; ++i) {
                                 const std::size_t o = static_cast<std::size_t>(i) * c;
                                 double m1 = 0.0, m2 = 0.0;
                                 for (int j = 0; j < c; ++j) {
                                     dxhat[static_cast<std::size_t>(j)] = n.grad[o + j] * gv[static_cast<std::size_t>(j)];
                                     m1 += dxhat[static_cast<std::size_t>(j)];
                                     m2 += dxhat[static_cast<std::size_t>(j)] * xhat[o + j];
                                 }
                                 m1 /= c;
                                 m2 /= c;
                                 const double is = inv_std[static_cast<std::size_t>(i)];
                                 for (int j = 0; j < c; ++j)
                                     gx[o + j] += is * (dxhat[static_cast<std::size_t>(j)] - m1 - xhat[o + j] * m2);
                             }
                         });
}

/// Causally masked attention scores: out[i, j] = scale * <q_i, k_j> for j <= i,
/// kMasked above the diagonal.
inline Var causal_scores(Var q, Var k, double scale) {
    if (q.cols() != k.cols() || q.rows() != k.rows()) throw numeric_error("ShapeMismatch", "causal_scores");
    const int t = q.rows(), d = q.cols();
    const auto& qv = q.value();
    const auto& kv = k.value();
    std::vector<double> out(static_cast<std::size_t>(t) * t, kMasked);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j <= i; ++j) {
            double s = 0.0;
            for (int p = 0; p < d; ++p) s += qv[static_cast<std::size_t>(i) * d + p] * kv[static_cast<std::size_t>(j) * d + p];
            out[static_cast<std::size_t>(i) * t + j] = scale * s;
        }
    return q.graph->emit("causal_scores", t, t, std::move(out), detail::needs(q) || detail::needs(k),
                         [q, k, t, d, scale](Graph& g, Graph::Node& n) {
                             const auto& qv = q.value();
                             const auto& kv = k.value();
                             auto* gq = detail::needs(q) ? &g.grad_of(q.id) : nullptr;
                             auto* gk = detail::needs(k) ? &g.grad_of(k.id) : nullptr;
                             for (int i = 0; i < t; ++i)
                                 for (int j = 0; j <= i; ++j) {
                                     const double up = scale * n.grad[static_cast<std::size_t>(i) * t + j];
                                     if (up == 0.0) continue;
                                     for (int p = 0; p < d; ++p) {
                                         if (gq) (*gq)[static_cast<std::size_t>(i) * d + p] += up * kv[static_cast<std::size_t>(j) * d + p];
                                         if (gk) (*gk)[static_cast<std::size_t>(j) * d + p] += up * qv[static_cast<std::size_t>(i) * d + p];
                                     }
                                 }
                         });
}

inline Var slice_cols(Var a, int start, int width) {
    const int r = a.rows(), c = a.cols();
    if (start < 0 || width < 0 || start + width > c) throw numeric_error("ShapeMismatch", "slice_cols");
    std::vector<double> out(static_cast<std::size_t>(r) * width);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < width; ++j) out[static_cast<std::size_t>(i) * width + j] = a.at(i, start + j);
    return a.graph->emit("slice_cols", r, width, std::move(out), detail::needs(a),
                         [a, r, c, start, width](Graph& g, Graph::Node& n) {
                             auto& ga = g.grad_of(a.id);
                             for (int i = 0; i < r; ++i)
                                 for (int j = 0; j < width; ++j)
                                     ga[static_cast<std::size_t>(i) * c + start + j] += n.grad[static_cast<std::size_t>(i) * width + j];
                         });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw numeric_error("ShapeMismatch", "concat_cols of nothing");
    const int r = parts[0].rows();
    int c = 0;
    bool rg = false;
    for (Var p : parts) {
        if (p.rows() != r) throw numeric_error("ShapeMismatch", "concat_cols rows");
        c += p.cols();
        rg = rg || detail::needs(p);
    }
    std::vector<double> out(static_cast<std::size_t>(r) * c);
    int off = 0;
    for (Var p : parts) {
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < p.cols(); ++j) out[static_cast<std::size_t>(i) * c + off + j] = p.at(i, j);
        off += p.cols();
    }
    return parts[0].graph->emit("concat_cols", r, c, std::move(out), rg, [parts, r, c](Graph& g, Graph::Node& n) {
        int off = 0;
        for (Var p : parts) {
            if (detail::needs(p)) {
                auto& gp = g.grad_of(p.id);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < p.cols(); ++j)
                        gp[static_cast<std::size_t>(i) * p.cols() + j] += n.grad[static_cast<std::size_t>(i) * c + off + j];
            }
            off += p.cols();
        }
    });
}

inline Var slice_rows(Var a, int start, int count) {
    const int c = a.cols();
    if (start < 0 || count < 0 || start + count > a.rows()) throw numeric_error("ShapeMismatch", "slice_rows");
    const auto& av = a.value();
    std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(start) * c,
                            av.begin() + static_cast<std::ptrdiff_t>(start + count) * c);
    return a.graph->emit("slice_rows", count, c, std::move(out), detail::needs(a), [a, start, c](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[static_cast<std::size_t>(start) * c + i] += n.grad[i];
    });
}

inline Var concat_rows(Var a, Var b) {
    if (a.cols() != b.cols()) throw numeric_error("ShapeMismatch", "concat_rows cols");
    std::vector<double> out(a.value());
    out.insert(out.end(), b.value().begin(), b.value().end());
    const std::size_t na = a.size();
    return a.graph->emit("concat_rows", a.rows() + b.rows(), a.cols(), std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b, na](Graph& g, Graph::Node& n) {
                             if (detail::needs(a)) {
                                 auto& ga = g.grad_of(a.id);
                                 for (std::size_t i = 0; i < na; ++i) ga[i] += n.grad[i];
                             }
                             if (detail::needs(b)) {
                                 auto& gb = g.grad_of(b.id);
                                 for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[na + i];
                             }
                         });
}

/// clip(x, lo, hi). Gradient passes through where lo <= x <= hi and is zero
/// where the bound was taken.
inline Var clip(Var a, double lo, double hi) {
    std::vector<double> out(a.value());
    for (double& v : out) {
        a.graph->note_kink(std::min(std::abs(v - lo), std::abs(v - hi)));
        v = std::clamp(v, lo, hi);
    }
    return a.graph->emit("clip", a.rows(), a.cols(), std::move(out), detail::needs(a), [a, lo, hi](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        const auto& av = a.value();
        for (std::size_t i = 0; i < ga.size(); ++i)
            if (av[i] >= lo && av[i] <= hi) ga[i] += n.grad[i];
    });
}

/// Elementwise min; the gradient follows the branch that was selected (a on ties).
inline Var minimum(Var a, Var b) {
    detail::require_same(a, b, "minimum");
    const auto& av = a.value();
    const auto& bv = b.value();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) {
        a.graph->note_kink(std::abs(av[i] - bv[i]));
        out[i] = av[i] <= bv[i] ? av[i] : bv[i];
    }
    return a.graph->emit("minimum", a.rows(), a.cols(), std::move(out), detail::needs(a) || detail::needs(b),
                         [a, b](Graph& g, Graph::Node& n) {
                             const auto& av = a.value();
                             const auto& bv = b.value();
                             auto* ga = detail::needs(a) ? &g.grad_of(a.id) : nullptr;
                             auto* gb = detail::needs(b) ? &g.grad_of(b.id) : nullptr;
                             for (std::size_t i = 0; i < av.size(); ++i) {
                                 if (av[i] <= bv[i]) {
                                     if (ga) (*ga)[i] += n.grad[i];
                                 } else if (gb) {
                                     (*gb)[i] += n.grad[i];
                                 }
                             }
                         });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value()) s += v;
    return a.graph->emit("sum", 1, 1, {s}, detail::needs(a), [a](Graph& g, Graph::Node& n) {
        auto& ga = g.grad_of(a.id);
        for (double& v : ga) v += n.grad[0];
    });
}

inline Var mean(Var a) {
    if (a.size() == 0) throw numeric_error("ShapeMismatch", "mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

struct AdamState {
    AdamConfig config;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;

    AdamState() = default;
    AdamState(const ParamSet& params, AdamConfig cfg) : config(cfg) {
        for (const auto& t : params.tensors()) {
            m.emplace_back(t.size(), 0.0);
            v.emplace_back(t.size(), 0.0);
        }
    }
};

/// One bias-corrected Adam update using each tensor's grad; `lr_scale`
/// multiplies the configured learning rate (warmup schedules).
inline void adam_step(ParamSet& params, AdamState& state, double lr_scale = 1.0) {
    auto& ts = params.tensors();
    if (state.m.size() != ts.size()) throw numeric_error("ShapeMismatch", "adam state tensor count");
    for (std::size_t i = 0; i < ts.size(); ++i)
        if (state.m[i].size() != ts[i].size() || ts[i].grad.size() != ts[i].size())
            throw numeric_error("ShapeMismatch", "adam state for " + ts[i].name);
    const auto& c = state.config;
    state.step += 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const double lr = c.lr * lr_scale;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        auto& p = ts[i].values;
        const auto& g = ts[i].grad;
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= lr * (mhat / (std::sqrt(vhat) + c.eps) + c.weight_decay * p[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one line of JSON header, then little-endian float64 payload in
// header order.

struct Checkpoint {
    std::vector<Tensor> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {
inline std::uint64_t to_le(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) return v;
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
    return r;
}
}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    nlohmann::json header;
    header["format"] = "thinkgen-checkpoint";
    header["version"] = 1;
    header["dtype"] = "float64-le";
    header["tensors"] = nlohmann::json::array();
    for (const auto& t : ck.tensors) header["tensors"].push_back({{"name", t.name}, {"shape", {t.rows, t.cols}}});
    header["meta"] = ck.meta;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw data_error("IOError", "cannot write " + path);
        out << header.dump() << '\n';
        for (const auto& t : ck.tensors)
            for (double v : t.values) {
                const std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
                out.write(reinterpret_cast<const char*>(&bits), sizeof bits);
            }
        if (!out) throw data_error("IOError", "short write " + path);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw data_error("IOError", "cannot move checkpoint into place at " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("IOError", "cannot open checkpoint " + path);
    std::string line;
    std::getline(in, line);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
        throw data_error("BadCheckpoint", path + ": header: " + e.what());
    }
    if (header.value("format", "") != "thinkgen-checkpoint") throw data_error("BadCheckpoint", path + ": wrong format tag");
    Checkpoint ck;
    ck.meta = header.value("meta", nlohmann::json::object());
    for (const auto& th : header.at("tensors")) {
        Tensor t(th.at("name").get<std::string>(), th.at("shape").at(0).get<int>(), th.at("shape").at(1).get<int>());
        for (double& v : t.values) {
            std::uint64_t bits = 0;
            in.read(reinterpret_cast<char*>(&bits), sizeof bits);
            if (!in) throw data_error("BadCheckpoint", path + ": truncated payload in " + t.name);
            v = std::bit_cast<double>(detail::to_le(bits));
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

/// Copies matching tensors from a checkpoint into `params`; every parameter must be present.
inline void restore_params(const Checkpoint& ck, ParamSet& params, const std::string& prefix = "") {
    for (auto& t : params.tensors()) {
        const Tensor* src = ck.find(prefix + t.name);
        if (!src) throw data_error("BadCheckpoint", "missing tensor " + prefix + t.name);
        if (src->rows != t.rows || src->cols != t.cols) throw data_error("BadCheckpoint", "shape mismatch for " + t.name);
        t.values = src->values;
    }
}

inline void append_params(Checkpoint& ck, const ParamSet& params, const std::string& prefix = "") {
    for (const auto& t : params.tensors()) {
        Tensor c(prefix + t.name, t.rows, t.cols);
        c.values = t.values;
        ck.tensors.push_back(std::move(c));
    }
}

inline void append_adam(Checkpoint& ck, const ParamSet& params, const AdamState& st, const std::string& prefix) {
    const auto& ts = params.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        Tensor m(prefix + "m/" + ts[i].name, ts[i].rows, ts[i].cols);
        m.values = st.m[i];
        Tensor v(prefix + "v/" + ts[i].name, ts[i].rows, ts[i].cols);
        v.values = st.v[i];
        ck.tensors.push_back(std::move(m));
        ck.tensors.push_back(std::move(v));
    }
    ck.meta[prefix + "step"] = st.step;
}

inline void restore_adam(const Checkpoint& ck, const ParamSet& params, AdamState& st, const std::string& prefix) {
    const auto& ts = params.tensors();
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const Tensor* m = ck.find(prefix + "m/" + ts[i].name);
        const Tensor* v = ck.find(prefix + "v/" + ts[i].name);
        if (!m || !v) throw data_error("BadCheckpoint", "missing optimizer state for " + ts[i].name);
        st.m[i] = m->values;
        st.v[i] = v->values;
    }
    st.step = ck.meta.value(prefix + "step", 0L);
}

}  // namespace thinkgen::grad
