#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "strode/errors.hpp"

// Reverse-mode tape over dense f64 arrays (vectors and matrices, row-major),
// with an optional forward-mode tangent carried alongside every value.
//
// The tangent is what makes time densities cheap: seeding d/dt on one input
// coordinate and reading the output tangent gives net'(t) in a single pass.
// Because tangent propagation is itself recorded on the tape, reverse mode
// through a tangent-derived value yields the mixed second derivatives
// d2/(dtheta dt) that the KL-bound training objective needs.
//
// Graphs are built per loss evaluation and freed when the root goes out of
// scope. Parameter leaves are shared between graphs; when several graphs are
// evaluated concurrently, backward() redirects parameter gradients into a
// caller-owned GradStore so the shared nodes are never written.

namespace strode::ad {

class GradStore;
struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    std::vector<double> data;
    std::vector<double> tangent;       // empty = no tangent tracked
    std::vector<double> grad;          // adjoint of data, lazily allocated
    std::vector<double> grad_tangent;  // adjoint of tangent, lazily allocated
    int rows = 0;
    int cols = 0;
    int param_index = -1;              // >= 0 for registered parameters
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<NodePtr> parents;
    std::function<void(Node&, GradStore*)> backward_fn;
    std::uint64_t id = 0;              // creation order on the tape

    std::size_t size() const { return data.size(); }
    bool has_tangent() const { return !tangent.empty(); }
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// Per-evaluation sink for parameter gradients, indexed by Node::param_index.
// Lets concurrent backward passes share parameter nodes read-only.
class GradStore {
  public:
    double* slot_ptr(int index, std::size_t n) {
        if (static_cast<std::size_t>(index) >= slots_.size()) {
            slots_.resize(index + 1);
        }
        auto& s = slots_[index];
        if (s.empty()) s.assign(n, 0.0);
        return s.data();
    }

    const std::vector<double>* slot(int index) const {
        if (static_cast<std::size_t>(index) >= slots_.size()) return nullptr;
        if (slots_[index].empty()) return nullptr;
        return &slots_[index];
    }

    std::size_t capacity() const { return slots_.size(); }
    void clear() { slots_.clear(); }

  private:
    std::vector<std::vector<double>> slots_;
};

class DiffValue {
  public:
    DiffValue() = default;
    explicit DiffValue(NodePtr node) : node_(std::move(node)) {}

    const NodePtr& node() const { return node_; }
    bool defined() const { return node_ != nullptr; }

    int rows() const { return node_->rows; }
    int cols() const { return node_->cols; }
    std::size_t size() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    bool has_tangent() const { return node_->has_tangent(); }
    std::span<const double> tangent() const { return node_->tangent; }
    std::span<const double> grad() const { return node_->grad; }

    // Scalar accessors; shape-checked because most glue code works on 1x1.
    double value() const {
        if (size() != 1) throw ContractError("DiffValue::value: node is not scalar");
        return node_->data[0];
    }
    double tangent_value() const {
        if (size() != 1 || !has_tangent()) {
            throw ContractError("DiffValue::tangent_value: scalar tangent required");
        }
        return node_->tangent[0];
    }

  private:
    NodePtr node_;
};

// -------------------------------------------------------- accum helpers --

inline double* grad_sink(Node& p, std::size_t n, GradStore* gs) {
    if (!p.requires_grad) return nullptr;
    if (gs != nullptr && p.param_index >= 0) return gs->slot_ptr(p.param_index, n);
    if (p.grad.empty()) p.grad.assign(n, 0.0);
    return p.grad.data();
}

inline double* tangent_grad_sink(Node& p, std::size_t n) {
    if (!p.requires_grad || !p.has_tangent()) return nullptr;
    if (p.grad_tangent.empty()) p.grad_tangent.assign(n, 0.0);
    return p.grad_tangent.data();
}

inline const double* grad_or_null(const Node& n) {
    return n.grad.empty() ? nullptr : n.grad.data();
}

inline const double* grad_tangent_or_null(const Node& n) {
    return n.grad_tangent.empty() ? nullptr : n.grad_tangent.data();
}

// ---------------------------------------------------------------- leaves --

inline DiffValue make_leaf(std::vector<double> data, int rows, int cols,
                           bool requires_grad, const char* op) {
    if (static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) != data.size()) {
        throw DimensionError("make_leaf: data size does not match shape");
    }
    auto n = std::make_shared<Node>();
    n->data = std::move(data);
    n->rows = rows;
    n->cols = cols;
    n->requires_grad = requires_grad;
    n->op = op;
    n->id = next_node_id();
    return DiffValue(std::move(n));
}

inline DiffValue constant(std::vector<double> data, int rows, int cols) {
    return make_leaf(std::move(data), rows, cols, false, "const");
}

inline DiffValue constant_vector(std::vector<double> data) {
    const int n = static_cast<int>(data.size());
    return make_leaf(std::move(data), n, 1, false, "const");
}

inline DiffValue scalar_constant(double v) {
    return make_leaf({v}, 1, 1, false, "const");
}

inline DiffValue parameter(std::vector<double> data, int rows, int cols) {
    return make_leaf(std::move(data), rows, cols, true, "param");
}

inline DiffValue input(std::vector<double> data, bool requires_grad = false) {
    const int n = static_cast<int>(data.size());
    return make_leaf(std::move(data), n, 1, requires_grad, "input");
}

namespace detail {

inline NodePtr make_op_node(int rows, int cols, const char* op,
                            std::vector<NodePtr> parents, bool with_tangent) {
    auto n = std::make_shared<Node>();
    n->rows = rows;
    n->cols = cols;
    n->data.resize(static_cast<std::size_t>(rows) * cols);
    if (with_tangent) n->tangent.assign(n->data.size(), 0.0);
    n->op = op;
    n->id = next_node_id();
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    n->requires_grad = rg;
    n->parents = std::move(parents);
    return n;
}

inline void check_same_shape(const DiffValue& a, const DiffValue& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch (" +
                             std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                             " vs " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()) + ")");
    }
}

}  // namespace detail

// Copy of x carrying a unit tangent on coordinate k (a d/dx_k seed).
inline DiffValue seed_tangent(const DiffValue& x, int k) {
    if (k < 0 || static_cast<std::size_t>(k) >= x.size()) {
        throw DimensionError("seed_tangent: coordinate out of range");
    }
    auto n = detail::make_op_node(x.rows(), x.cols(), "seed_tangent", {x.node()}, true);
    std::copy(x.data().begin(), x.data().end(), n->data.begin());
    n->tangent[k] = 1.0;
    NodePtr xp = x.node();
    n->backward_fn = [xp](Node& out, GradStore* gs) {
        // The tangent is a fresh seed: its adjoint has nowhere to flow.
        const double* g = grad_or_null(out);
        if (g == nullptr) return;
        const std::size_t m = out.size();
        if (double* dst = grad_sink(*xp, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) dst[i] += g[i];
        }
    };
    return DiffValue(std::move(n));
}

// -------------------------------------------------------- elementwise ops --

inline DiffValue add(const DiffValue& a, const DiffValue& b) {
    detail::check_same_shape(a, b, "add");
    const std::size_t m = a.size();
    const bool tan = a.has_tangent() || b.has_tangent();
    auto n = detail::make_op_node(a.rows(), a.cols(), "add", {a.node(), b.node()}, tan);
    const double* at = a.has_tangent() ? a.tangent().data() : nullptr;
    const double* bt = b.has_tangent() ? b.tangent().data() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = a.data()[i] + b.data()[i];
        if (tan) n->tangent[i] = (at ? at[i] : 0.0) + (bt ? bt[i] : 0.0);
    }
    NodePtr ap = a.node(), bp = b.node();
    n->backward_fn = [ap, bp](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        if (const double* g = grad_or_null(out)) {
            if (double* da = grad_sink(*ap, m, gs))
                for (std::size_t i = 0; i < m; ++i) da[i] += g[i];
            if (double* db = grad_sink(*bp, m, gs))
                for (std::size_t i = 0; i < m; ++i) db[i] += g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* da = tangent_grad_sink(*ap, m))
                for (std::size_t i = 0; i < m; ++i) da[i] += gt[i];
            if (double* db = tangent_grad_sink(*bp, m))
                for (std::size_t i = 0; i < m; ++i) db[i] += gt[i];
        }
    };
    return DiffValue(std::move(n));
}

inline DiffValue sub(const DiffValue& a, const DiffValue& b) {
    detail::check_same_shape(a, b, "sub");
    const std::size_t m = a.size();
    const bool tan = a.has_tangent() || b.has_tangent();
    auto n = detail::make_op_node(a.rows(), a.cols(), "sub", {a.node(), b.node()}, tan);
    const double* at = a.has_tangent() ? a.tangent().data() : nullptr;
    const double* bt = b.has_tangent() ? b.tangent().data() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = a.data()[i] - b.data()[i];
        if (tan) n->tangent[i] = (at ? at[i] : 0.0) - (bt ? bt[i] : 0.0);
    }
    NodePtr ap = a.node(), bp = b.node();
    n->backward_fn = [ap, bp](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        if (const double* g = grad_or_null(out)) {
            if (double* da = grad_sink(*ap, m, gs))
                for (std::size_t i = 0; i < m; ++i) da[i] += g[i];
            if (double* db = grad_sink(*bp, m, gs))
                for (std::size_t i = 0; i < m; ++i) db[i] -= g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* da = tangent_grad_sink(*ap, m))
                for (std::size_t i = 0; i < m; ++i) da[i] += gt[i];
            if (double* db = tangent_grad_sink(*bp, m))
                for (std::size_t i = 0; i < m; ++i) db[i] -= gt[i];
        }
    };
    return DiffValue(std::move(n));
}

// Elementwise product. Handles a == b (the adjoint accumulates twice).
inline DiffValue mul(const DiffValue& a, const DiffValue& b) {
    detail::check_same_shape(a, b, "mul");
    const std::size_t m = a.size();
    const bool tan = a.has_tangent() || b.has_tangent();
    auto n = detail::make_op_node(a.rows(), a.cols(), "mul", {a.node(), b.node()}, tan);
    const double* at = a.has_tangent() ? a.tangent().data() : nullptr;
    const double* bt = b.has_tangent() ? b.tangent().data() : nullptr;
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = a.data()[i] * b.data()[i];
        if (tan) {
            n->tangent[i] = (at ? at[i] * b.data()[i] : 0.0) +
                            (bt ? a.data()[i] * bt[i] : 0.0);
        }
    }
    NodePtr ap = a.node(), bp = b.node();
    n->backward_fn = [ap, bp](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        const double* g = grad_or_null(out);
        const double* gt = grad_tangent_or_null(out);
        const double* av = ap->data.data();
        const double* bv = bp->data.data();
        const double* at = ap->has_tangent() ? ap->tangent.data() : nullptr;
        const double* bt = bp->has_tangent() ? bp->tangent.data() : nullptr;
        if (double* da = grad_sink(*ap, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                if (g) acc += g[i] * bv[i];
                if (gt && bt) acc += gt[i] * bt[i];
                da[i] += acc;
            }
        }
        if (double* db = grad_sink(*bp, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                if (g) acc += g[i] * av[i];
                if (gt && at) acc += gt[i] * at[i];
                db[i] += acc;
            }
        }
        if (gt) {
            if (double* da = tangent_grad_sink(*ap, m))
                for (std::size_t i = 0; i < m; ++i) da[i] += gt[i] * bv[i];
            if (double* db = tangent_grad_sink(*bp, m))
                for (std::size_t i = 0; i < m; ++i) db[i] += gt[i] * av[i];
        }
    };
    return DiffValue(std::move(n));
}

// x * c for a compile-time-known constant c.
inline DiffValue scale(const DiffValue& x, double c) {
    const std::size_t m = x.size();
    auto n = detail::make_op_node(x.rows(), x.cols(), "scale", {x.node()}, x.has_tangent());
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = x.data()[i] * c;
        if (x.has_tangent()) n->tangent[i] = x.tangent()[i] * c;
    }
    NodePtr xp = x.node();
    n->backward_fn = [xp, c](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        if (const double* g = grad_or_null(out)) {
            if (double* dx = grad_sink(*xp, m, gs))
                for (std::size_t i = 0; i < m; ++i) dx[i] += c * g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += c * gt[i];
        }
    };
    return DiffValue(std::move(n));
}

inline DiffValue neg(const DiffValue& x) { return scale(x, -1.0); }

// x + c elementwise for a constant c.
inline DiffValue offset(const DiffValue& x, double c) {
    const std::size_t m = x.size();
    auto n = detail::make_op_node(x.rows(), x.cols(), "offset", {x.node()}, x.has_tangent());
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = x.data()[i] + c;
        if (x.has_tangent()) n->tangent[i] = x.tangent()[i];
    }
    NodePtr xp = x.node();
    n->backward_fn = [xp](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        if (const double* g = grad_or_null(out)) {
            if (double* dx = grad_sink(*xp, m, gs))
                for (std::size_t i = 0; i < m; ++i) dx[i] += g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += gt[i];
        }
    };
    return DiffValue(std::move(n));
}

// Elementwise product with a fixed mask (dropout); the mask is not a node.
inline DiffValue maskmul(const DiffValue& x, std::vector<double> mask) {
    if (mask.size() != x.size()) throw DimensionError("maskmul: mask size mismatch");
    const std::size_t m = x.size();
    auto n = detail::make_op_node(x.rows(), x.cols(), "maskmul", {x.node()}, x.has_tangent());
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = x.data()[i] * mask[i];
        if (x.has_tangent()) n->tangent[i] = x.tangent()[i] * mask[i];
    }
    NodePtr xp = x.node();
    auto mk = std::make_shared<std::vector<double>>(std::move(mask));
    n->backward_fn = [xp, mk](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        const double* w = mk->data();
        if (const double* g = grad_or_null(out)) {
            if (double* dx = grad_sink(*xp, m, gs))
                for (std::size_t i = 0; i < m; ++i) dx[i] += w[i] * g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += w[i] * gt[i];
        }
    };
    return DiffValue(std::move(n));
}

// x * s where s is a scalar node (e.g. a step length that lives on the tape).
inline DiffValue scale_node(const DiffValue& x, const DiffValue& s) {
    if (s.size() != 1) throw DimensionError("scale_node: scale must be scalar");
    const std::size_t m = x.size();
    const bool tan = x.has_tangent() || s.has_tangent();
    auto n = detail::make_op_node(x.rows(), x.cols(), "scale_node", {x.node(), s.node()}, tan);
    const double sv = s.data()[0];
    const double st = s.has_tangent() ? s.tangent()[0] : 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = x.data()[i] * sv;
        if (tan) {
            n->tangent[i] = (x.has_tangent() ? x.tangent()[i] * sv : 0.0) +
                            st * x.data()[i];
        }
    }
    NodePtr xp = x.node(), sp = s.node();
    n->backward_fn = [xp, sp](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        const double* g = grad_or_null(out);
        const double* gt = grad_tangent_or_null(out);
        const double sv = sp->data[0];
        const double st = sp->has_tangent() ? sp->tangent[0] : 0.0;
        const double* xv = xp->data.data();
        const double* xt = xp->has_tangent() ? xp->tangent.data() : nullptr;
        if (double* dx = grad_sink(*xp, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                if (g) acc += g[i] * sv;
                if (gt) acc += gt[i] * st;
                dx[i] += acc;
            }
        }
        if (double* ds = grad_sink(*sp, 1, gs)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                if (g) acc += g[i] * xv[i];
                if (gt && xt) acc += gt[i] * xt[i];
            }
            ds[0] += acc;
        }
        if (gt) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += gt[i] * sv;
            if (double* ds = tangent_grad_sink(*sp, 1)) {
                double acc = 0.0;
                for (std::size_t i = 0; i < m; ++i) acc += gt[i] * xv[i];
                ds[0] += acc;
            }
        }
    };
    return DiffValue(std::move(n));
}

// ------------------------------------------------------------ unary ops --

// Generic elementwise y = f(x). df and ddf are the first and second
// derivatives; ddf feeds the mixed term  dx += ddf(x) * xdot * gtangent.
template <class F, class DF, class DDF>
DiffValue unary(const DiffValue& x, const char* op, F f, DF df, DDF ddf) {
    const std::size_t m = x.size();
    auto n = detail::make_op_node(x.rows(), x.cols(), op, {x.node()}, x.has_tangent());
    for (std::size_t i = 0; i < m; ++i) {
        n->data[i] = f(x.data()[i]);
        if (x.has_tangent()) n->tangent[i] = df(x.data()[i]) * x.tangent()[i];
    }
    NodePtr xp = x.node();
    n->backward_fn = [xp, df, ddf](Node& out, GradStore* gs) {
        const std::size_t m = out.size();
        const double* g = grad_or_null(out);
        const double* gt = grad_tangent_or_null(out);
        const double* xv = xp->data.data();
        const double* xt = xp->has_tangent() ? xp->tangent.data() : nullptr;
        if (double* dx = grad_sink(*xp, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) {
                double acc = 0.0;
                if (g) acc += g[i] * df(xv[i]);
                if (gt && xt) acc += gt[i] * ddf(xv[i]) * xt[i];
                dx[i] += acc;
            }
        }
        if (gt) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += gt[i] * df(xv[i]);
        }
    };
    return DiffValue(std::move(n));
}

inline DiffValue exp_(const DiffValue& x) {
    auto e = [](double v) { return std::exp(v); };
    return unary(x, "exp", e, e, e);
}

inline DiffValue log_(const DiffValue& x) {
    return unary(
        x, "log", [](double v) { return std::log(v); },
        [](double v) { return 1.0 / v; },
        [](double v) { return -1.0 / (v * v); });
}

inline DiffValue recip(const DiffValue& x) {
    return unary(
        x, "recip", [](double v) { return 1.0 / v; },
        [](double v) { return -1.0 / (v * v); },
        [](double v) { return 2.0 / (v * v * v); });
}

inline DiffValue clamp_min(const DiffValue& x, double floor) {
    return unary(
        x, "clamp_min", [floor](double v) { return v < floor ? floor : v; },
        [floor](double v) { return v < floor ? 0.0 : 1.0; },
        [](double) { return 0.0; });
}

inline DiffValue abs_(const DiffValue& x) {
    return unary(
        x, "abs", [](double v) { return std::fabs(v); },
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); },
        [](double) { return 0.0; });
}

// ---------------------------------------------------------- linear algebra --

// y = W x with W (m x n) and x a column vector (n x 1).
inline DiffValue matvec(const DiffValue& W, const DiffValue& x) {
    if (x.cols() != 1) throw DimensionError("matvec: x must be a column vector");
    if (W.cols() != x.rows()) {
        throw DimensionError("matvec: inner dimensions disagree (" +
                             std::to_string(W.rows()) + "x" + std::to_string(W.cols()) +
                             " * " + std::to_string(x.rows()) + "x1)");
    }
    const int mr = W.rows(), nc = W.cols();
    const bool tan = W.has_tangent() || x.has_tangent();
    auto n = detail::make_op_node(mr, 1, "matvec", {W.node(), x.node()}, tan);
    const double* wv = W.data().data();
    const double* xv = x.data().data();
    const double* wt = W.has_tangent() ? W.tangent().data() : nullptr;
    const double* xt = x.has_tangent() ? x.tangent().data() : nullptr;
    for (int r = 0; r < mr; ++r) {
        double acc = 0.0, tacc = 0.0;
        const double* wrow = wv + static_cast<std::size_t>(r) * nc;
        for (int c = 0; c < nc; ++c) {
            acc += wrow[c] * xv[c];
            if (tan) {
                if (wt) tacc += wt[static_cast<std::size_t>(r) * nc + c] * xv[c];
                if (xt) tacc += wrow[c] * xt[c];
            }
        }
        n->data[r] = acc;
        if (tan) n->tangent[r] = tacc;
    }
    NodePtr Wp = W.node(), xp = x.node();
    n->backward_fn = [Wp, xp](Node& out, GradStore* gs) {
        const int mr = Wp->rows, nc = Wp->cols;
        const double* g = grad_or_null(out);
        const double* gt = grad_tangent_or_null(out);
        const double* wv = Wp->data.data();
        const double* xv = xp->data.data();
        const double* wt = Wp->has_tangent() ? Wp->tangent.data() : nullptr;
        const double* xt = xp->has_tangent() ? xp->tangent.data() : nullptr;
        const std::size_t wn = static_cast<std::size_t>(mr) * nc;
        if (double* dW = grad_sink(*Wp, wn, gs)) {
            for (int r = 0; r < mr; ++r) {
                for (int c = 0; c < nc; ++c) {
                    double acc = 0.0;
                    if (g) acc += g[r] * xv[c];
                    if (gt && xt) acc += gt[r] * xt[c];
                    dW[static_cast<std::size_t>(r) * nc + c] += acc;
                }
            }
        }
        if (double* dx = grad_sink(*xp, static_cast<std::size_t>(nc), gs)) {
            for (int c = 0; c < nc; ++c) {
                double acc = 0.0;
                for (int r = 0; r < mr; ++r) {
                    if (g) acc += wv[static_cast<std::size_t>(r) * nc + c] * g[r];
                    if (gt && wt) acc += wt[static_cast<std::size_t>(r) * nc + c] * gt[r];
                }
                dx[c] += acc;
            }
        }
        if (gt) {
            if (double* dW = tangent_grad_sink(*Wp, wn)) {
                for (int r = 0; r < mr; ++r)
                    for (int c = 0; c < nc; ++c)
                        dW[static_cast<std::size_t>(r) * nc + c] += gt[r] * xv[c];
            }
            if (double* dx = tangent_grad_sink(*xp, static_cast<std::size_t>(nc))) {
                for (int c = 0; c < nc; ++c) {
                    double acc = 0.0;
                    for (int r = 0; r < mr; ++r)
                        acc += wv[static_cast<std::size_t>(r) * nc + c] * gt[r];
                    dx[c] += acc;
                }
            }
        }
    };
    return DiffValue(std::move(n));
}

// ------------------------------------------------------- shape/reduce ops --

// [a; b] stacked as one column vector. A missing tangent side contributes
// zeros, so the result carries a tangent if either input does.
inline DiffValue concat(const DiffValue& a, const DiffValue& b) {
    if (a.cols() != 1 || b.cols() != 1) {
        throw DimensionError("concat: both operands must be column vectors");
    }
    const int na = a.rows(), nb = b.rows();
    const bool tan = a.has_tangent() || b.has_tangent();
    auto n = detail::make_op_node(na + nb, 1, "concat", {a.node(), b.node()}, tan);
    std::copy(a.data().begin(), a.data().end(), n->data.begin());
    std::copy(b.data().begin(), b.data().end(), n->data.begin() + na);
    if (tan) {
        if (a.has_tangent())
            std::copy(a.tangent().begin(), a.tangent().end(), n->tangent.begin());
        if (b.has_tangent())
            std::copy(b.tangent().begin(), b.tangent().end(), n->tangent.begin() + na);
    }
    NodePtr ap = a.node(), bp = b.node();
    n->backward_fn = [ap, bp, na, nb](Node& out, GradStore* gs) {
        if (const double* g = grad_or_null(out)) {
            if (double* da = grad_sink(*ap, static_cast<std::size_t>(na), gs))
                for (int i = 0; i < na; ++i) da[i] += g[i];
            if (double* db = grad_sink(*bp, static_cast<std::size_t>(nb), gs))
                for (int i = 0; i < nb; ++i) db[i] += g[na + i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* da = tangent_grad_sink(*ap, static_cast<std::size_t>(na)))
                for (int i = 0; i < na; ++i) da[i] += gt[i];
            if (double* db = tangent_grad_sink(*bp, static_cast<std::size_t>(nb)))
                for (int i = 0; i < nb; ++i) db[i] += gt[na + i];
        }
    };
    return DiffValue(std::move(n));
}

inline DiffValue slice(const DiffValue& x, int first, int len) {
    if (x.cols() != 1) throw DimensionError("slice: operand must be a column vector");
    if (first < 0 || len <= 0 || first + len > x.rows()) {
        throw DimensionError("slice: range out of bounds");
    }
    auto n = detail::make_op_node(len, 1, "slice", {x.node()}, x.has_tangent());
    std::copy(x.data().begin() + first, x.data().begin() + first + len, n->data.begin());
    if (x.has_tangent()) {
        std::copy(x.tangent().begin() + first, x.tangent().begin() + first + len,
                  n->tangent.begin());
    }
    NodePtr xp = x.node();
    const std::size_t xn = x.size();
    n->backward_fn = [xp, first, len, xn](Node& out, GradStore* gs) {
        if (const double* g = grad_or_null(out)) {
            if (double* dx = grad_sink(*xp, xn, gs))
                for (int i = 0; i < len; ++i) dx[first + i] += g[i];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* dx = tangent_grad_sink(*xp, xn))
                for (int i = 0; i < len; ++i) dx[first + i] += gt[i];
        }
    };
    return DiffValue(std::move(n));
}

inline DiffValue pick(const DiffValue& x, int index) { return slice(x, index, 1); }

inline DiffValue sum(const DiffValue& x) {
    const std::size_t m = x.size();
    auto n = detail::make_op_node(1, 1, "sum", {x.node()}, x.has_tangent());
    double acc = 0.0, tacc = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        acc += x.data()[i];
        if (x.has_tangent()) tacc += x.tangent()[i];
    }
    n->data[0] = acc;
    if (x.has_tangent()) n->tangent[0] = tacc;
    NodePtr xp = x.node();
    n->backward_fn = [xp](Node& out, GradStore* gs) {
        const std::size_t m = xp->size();
        if (const double* g = grad_or_null(out)) {
            if (double* dx = grad_sink(*xp, m, gs))
                for (std::size_t i = 0; i < m; ++i) dx[i] += g[0];
        }
        if (const double* gt = grad_tangent_or_null(out)) {
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += gt[0];
        }
    };
    return DiffValue(std::move(n));
}

// log(sum_i exp(x_i)), stabilized by the max trick.
inline DiffValue logsumexp(const DiffValue& x) {
    if (x.cols() != 1 || x.rows() < 1) {
        throw DimensionError("logsumexp: operand must be a nonempty column vector");
    }
    const std::size_t m = x.size();
    auto n = detail::make_op_node(1, 1, "logsumexp", {x.node()}, x.has_tangent());
    double mx = x.data()[0];
    for (std::size_t i = 1; i < m; ++i) mx = std::max(mx, x.data()[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < m; ++i) z += std::exp(x.data()[i] - mx);
    n->data[0] = mx + std::log(z);
    if (x.has_tangent()) {
        double tacc = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            tacc += std::exp(x.data()[i] - mx) / z * x.tangent()[i];
        }
        n->tangent[0] = tacc;
    }
    NodePtr xp = x.node();
    n->backward_fn = [xp](Node& out, GradStore* gs) {
        const std::size_t m = xp->size();
        const double* g = grad_or_null(out);
        const double* gt = grad_tangent_or_null(out);
        const double lse = out.data[0];
        const double* xv = xp->data.data();
        const double* xt = xp->has_tangent() ? xp->tangent.data() : nullptr;
        // Softmax weights s_i and T = sum_j s_j xdot_j for the Hessian term.
        double T = 0.0;
        if (gt && xt) {
            for (std::size_t i = 0; i < m; ++i) T += std::exp(xv[i] - lse) * xt[i];
        }
        if (double* dx = grad_sink(*xp, m, gs)) {
            for (std::size_t i = 0; i < m; ++i) {
                const double si = std::exp(xv[i] - lse);
                double acc = 0.0;
                if (g) acc += g[0] * si;
                if (gt && xt) acc += gt[0] * si * (xt[i] - T);
                dx[i] += acc;
            }
        }
        if (gt) {
            if (double* dx = tangent_grad_sink(*xp, m)) {
                for (std::size_t i = 0; i < m; ++i) dx[i] += gt[0] * std::exp(xv[i] - lse);
            }
        }
    };
    return DiffValue(std::move(n));
}

// Promotes the tangent of x to a value: out = dx/dseed. The adjoint of out
// flows into x's tangent adjoint, which is how reverse-over-forward second
// derivatives are triggered. The result carries no tangent of its own.
inline DiffValue tangent_view(const DiffValue& x) {
    if (!x.has_tangent()) throw ContractError("tangent_view: operand has no tangent");
    auto n = detail::make_op_node(x.rows(), x.cols(), "tangent_view", {x.node()}, false);
    std::copy(x.tangent().begin(), x.tangent().end(), n->data.begin());
    NodePtr xp = x.node();
    n->backward_fn = [xp](Node& out, GradStore* gs) {
        (void)gs;
        if (const double* g = grad_or_null(out)) {
            const std::size_t m = out.size();
            if (double* dx = tangent_grad_sink(*xp, m))
                for (std::size_t i = 0; i < m; ++i) dx[i] += g[i];
        }
    };
    return DiffValue(std::move(n));
}

// ------------------------------------------------------------- operators --

inline DiffValue operator+(const DiffValue& a, const DiffValue& b) { return add(a, b); }
inline DiffValue operator-(const DiffValue& a, const DiffValue& b) { return sub(a, b); }
inline DiffValue operator*(const DiffValue& a, const DiffValue& b) { return mul(a, b); }

// --------------------------------------------------------------- backward --

namespace detail {

// Reverse-topological order: every consumer precedes its producers.
// Traversal is pruned at nodes that cannot influence any gradient.
inline std::vector<Node*> reverse_topo(Node* root) {
    std::vector<Node*> post;
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& top = stack.back();
        Node* n = top.first;
        if (top.second < n->parents.size()) {
            Node* p = n->parents[top.second++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            post.push_back(n);
            stack.pop_back();
        }
    }
    std::reverse(post.begin(), post.end());
    return post;
}

}  // namespace detail

// Populates d(root)/d(ancestor) for every differentiable ancestor. The root
// must be scalar. Interior nodes start from a clean slate each call; leaf
// gradients accumulate (call zero_grad between uses). With a GradStore,
// parameter gradients go to the store and parameter nodes stay untouched.
inline void backward(const DiffValue& root, GradStore* store = nullptr) {
    if (!root.defined()) throw ContractError("backward: undefined root");
    if (root.size() != 1) {
        throw ContractError("backward: root must be scalar, got " +
                            std::to_string(root.rows()) + "x" +
                            std::to_string(root.cols()));
    }
    Node* r = root.node().get();
    auto order = detail::reverse_topo(r);
    for (Node* n : order) {
        if (n->backward_fn) {
            n->grad.clear();
            n->grad_tangent.clear();
        }
    }
    if (r->backward_fn) {
        r->grad.assign(1, 1.0);
    } else if (double* g = grad_sink(*r, 1, store)) {
        g[0] += 1.0;
    }
    for (Node* n : order) {
        if (!n->requires_grad || !n->backward_fn) continue;
        if (n->grad.empty() && n->grad_tangent.empty()) continue;
        n->backward_fn(*n, store);
    }
}

inline void zero_grad(const DiffValue& v) {
    v.node()->grad.clear();
    v.node()->grad_tangent.clear();
}

}  // namespace strode::ad
