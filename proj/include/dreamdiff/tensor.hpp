#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "dreamdiff/rng.hpp"

namespace dreamdiff {

#ifdef DREAMDIFF_SCALAR_F32
using scalar = float;
#else
using scalar = double;
#endif

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << s[i] << (i + 1 < s.size() ? "," : "");
    os << ")";
    return os.str();
}

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor dims must be positive, got " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

// One node of the reverse-mode graph. Leaves own their grad buffers across
// steps; op nodes are transient and die with the graph.
struct TensorNode {
    Shape shape;
    std::vector<scalar> value;
    std::vector<scalar> grad;  // same length as value when tracked
    bool track = false;
    bool grad_valid = false;  // set by backward(), consumed by the optimizer
    std::string label;        // parameter name, empty for op nodes
    std::vector<NodePtr> parents;
    std::function<void(TensorNode&)> backprop;  // accumulates into parents' grad
};

namespace detail {
inline int& no_grad_depth() {
    thread_local int depth = 0;
    return depth;
}
}  // namespace detail

// RAII guard: ops built inside do not record the graph.
struct NoGrad {
    NoGrad() { ++detail::no_grad_depth(); }
    ~NoGrad() { --detail::no_grad_depth(); }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth() == 0; }

class Tensor {
   public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor leaf(Shape shape, std::vector<scalar> data, bool track = false, std::string label = "") {
        if (numel(shape) != data.size())
            throw std::invalid_argument("leaf: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->track = track;
        n->label = std::move(label);
        if (track) n->grad.assign(n->value.size(), 0);
        return Tensor(n);
    }

    static Tensor zeros(Shape shape, bool track = false) {
        size_t n = numel(shape);
        return leaf(std::move(shape), std::vector<scalar>(n, 0), track);
    }

    static Tensor full(Shape shape, scalar v) {
        size_t n = numel(shape);
        return leaf(std::move(shape), std::vector<scalar>(n, v));
    }

    static Tensor scalar_of(scalar v) { return leaf({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    size_t size() const { return node_->value.size(); }
    bool tracked() const { return node_->track; }
    const std::string& label() const { return node_->label; }

    std::vector<scalar>& data() { return node_->value; }
    const std::vector<scalar>& data() const { return node_->value; }
    std::vector<scalar>& grad() { return node_->grad; }
    const std::vector<scalar>& grad() const { return node_->grad; }
    bool grad_valid() const { return node_->grad_valid; }

    scalar item() const {
        if (size() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size()) + " elements");
        return node_->value[0];
    }

    scalar at(size_t i) const { return node_->value[i]; }

    NodePtr node() const { return node_; }

    // value copy detached from the graph
    Tensor detach() const { return leaf(node_->shape, node_->value); }

   private:
    NodePtr node_;
};

namespace detail {

inline NodePtr make_op(Shape shape, std::vector<Tensor> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value.resize(numel(n->shape));
    if (grad_enabled()) {
        for (const Tensor& p : parents)
            if (p.tracked()) {
                n->track = true;
                break;
            }
    }
    if (n->track) {
        n->parents.reserve(parents.size());
        for (Tensor& p : parents) n->parents.push_back(p.node());
    }
    return n;
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// grad buffer of a parent, allocating on demand
inline std::vector<scalar>& pgrad(const NodePtr& p) {
    if (p->grad.size() != p->value.size()) p->grad.assign(p->value.size(), 0);
    return p->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_op(a.shape(), {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        n->backprop = [ta, tb](TensorNode& self) {
            if (ta) {
                auto& g = detail::pgrad(self.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (tb) {
                auto& g = detail::pgrad(self.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_op(a.shape(), {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] - bv[i];
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        n->backprop = [ta, tb](TensorNode& self) {
            if (ta) {
                auto& g = detail::pgrad(self.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (tb) {
                auto& g = detail::pgrad(self.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_op(a.shape(), {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * bv[i];
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        n->backprop = [ta, tb](TensorNode& self) {
            const auto& av2 = self.parents[0]->value;
            const auto& bv2 = self.parents[1]->value;
            if (ta) {
                auto& g = detail::pgrad(self.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv2[i];
            }
            if (tb) {
                auto& g = detail::pgrad(self.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av2[i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor scale(const Tensor& a, scalar c) {
    auto n = detail::make_op(a.shape(), {a});
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * c;
    if (n->track) {
        n->backprop = [c](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
        };
    }
    return Tensor(n);
}

inline Tensor silu(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a});
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) {
        scalar s = scalar(1) / (scalar(1) + std::exp(-av[i]));
        n->value[i] = av[i] * s;
    }
    if (n->track) {
        n->backprop = [](TensorNode& self) {
            const auto& x = self.parents[0]->value;
            auto& g = detail::pgrad(self.parents[0]);
            for (size_t i = 0; i < g.size(); ++i) {
                scalar s = scalar(1) / (scalar(1) + std::exp(-x[i]));
                g[i] += self.grad[i] * (s * (scalar(1) + x[i] * (scalar(1) - s)));
            }
        };
    }
    return Tensor(n);
}

inline Tensor sum_all(const Tensor& a) {
    auto n = detail::make_op({1}, {a});
    scalar acc = 0;
    for (scalar v : a.data()) acc += v;
    n->value[0] = acc;
    if (n->track) {
        n->backprop = [](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            scalar up = self.grad[0];
            for (size_t i = 0; i < g.size(); ++i) g[i] += up;
        };
    }
    return Tensor(n);
}

inline Tensor mean_all(const Tensor& a) {
    auto n = detail::make_op({1}, {a});
    scalar acc = 0;
    for (scalar v : a.data()) acc += v;
    scalar inv = scalar(1) / static_cast<scalar>(a.size());
    n->value[0] = acc * inv;
    if (n->track) {
        n->backprop = [inv](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            scalar up = self.grad[0] * inv;
            for (size_t i = 0; i < g.size(); ++i) g[i] += up;
        };
    }
    return Tensor(n);
}

// mean over elements of (a - b)^2; the loss workhorse
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "mse: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto n = detail::make_op({1}, {a, b});
    const auto& av = a.data();
    const auto& bv = b.data();
    scalar acc = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        scalar d = av[i] - bv[i];
        acc += d * d;
    }
    scalar inv = scalar(1) / static_cast<scalar>(av.size());
    n->value[0] = acc * inv;
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        n->backprop = [inv, ta, tb](TensorNode& self) {
            const auto& av2 = self.parents[0]->value;
            const auto& bv2 = self.parents[1]->value;
            scalar up = self.grad[0] * 2 * inv;
            if (ta) {
                auto& g = detail::pgrad(self.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += up * (av2[i] - bv2[i]);
            }
            if (tb) {
                auto& g = detail::pgrad(self.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) g[i] -= up * (av2[i] - bv2[i]);
            }
        };
    }
    return Tensor(n);
}

// max over rows of a (P,D) matrix -> (D). Gradient routes to the argmax row
// per column; ties go to the lowest row index.
inline Tensor max_over_rows(const Tensor& a) {
    detail::require(a.rank() == 2, "max_over_rows: expected rank-2 input, got " + shape_str(a.shape()));
    int P = a.dim(0), D = a.dim(1);
    auto n = detail::make_op({D}, {a});
    const auto& av = a.data();
    std::vector<int> argmax(static_cast<size_t>(D), 0);
    for (int d = 0; d < D; ++d) {
        scalar best = av[static_cast<size_t>(d)];
        int bi = 0;
        for (int p = 1; p < P; ++p) {
            scalar v = av[static_cast<size_t>(p) * D + d];
            if (v > best) {
                best = v;
                bi = p;
            }
        }
        n->value[static_cast<size_t>(d)] = best;
        argmax[static_cast<size_t>(d)] = bi;
    }
    if (n->track) {
        n->backprop = [argmax, D](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (int d = 0; d < D; ++d)
                g[static_cast<size_t>(argmax[static_cast<size_t>(d)]) * D + d] += self.grad[static_cast<size_t>(d)];
        };
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    detail::require(numel(shape) == a.size(),
                    "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto n = detail::make_op(shape, {a});
    n->value = a.data();
    if (n->track) {
        n->backprop = [](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    }
    return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
    detail::require(a.rank() == 2, "transpose: expected rank-2 input, got " + shape_str(a.shape()));
    int m = a.dim(0), k = a.dim(1);
    auto n = detail::make_op({k, m}, {a});
    const auto& av = a.data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j) n->value[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * k + j];
    if (n->track) {
        n->backprop = [m, k](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < k; ++j)
                    g[static_cast<size_t>(i) * k + j] += self.grad[static_cast<size_t>(j) * m + i];
        };
    }
    return Tensor(n);
}

inline Tensor concat_vec(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_vec: empty input");
    int total = 0;
    for (const Tensor& p : parts) {
        detail::require(p.rank() == 1, "concat_vec: expected rank-1 parts, got " + shape_str(p.shape()));
        total += p.dim(0);
    }
    auto n = detail::make_op({total}, parts);
    size_t off = 0;
    std::vector<size_t> offsets;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        std::copy(p.data().begin(), p.data().end(), n->value.begin() + static_cast<long>(off));
        off += p.size();
    }
    if (n->track) {
        std::vector<size_t> sizes;
        for (const Tensor& p : parts) sizes.push_back(p.size());
        n->backprop = [offsets, sizes](TensorNode& self) {
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                if (!self.parents[pi]->track) continue;
                auto& g = detail::pgrad(self.parents[pi]);
                for (size_t i = 0; i < sizes[pi]; ++i) g[i] += self.grad[offsets[pi] + i];
            }
        };
    }
    return Tensor(n);
}

inline Tensor slice_vec(const Tensor& a, int begin, int len) {
    detail::require(a.rank() == 1, "slice_vec: expected rank-1 input, got " + shape_str(a.shape()));
    detail::require(begin >= 0 && len > 0 && begin + len <= a.dim(0),
                    "slice_vec: range [" + std::to_string(begin) + "," + std::to_string(begin + len) +
                        ") out of bounds for " + shape_str(a.shape()));
    auto n = detail::make_op({len}, {a});
    const auto& av = a.data();
    for (int i = 0; i < len; ++i) n->value[static_cast<size_t>(i)] = av[static_cast<size_t>(begin + i)];
    if (n->track) {
        n->backprop = [begin, len](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (int i = 0; i < len; ++i) g[static_cast<size_t>(begin + i)] += self.grad[static_cast<size_t>(i)];
        };
    }
    return Tensor(n);
}

// stack rank-1 tensors of width D into an (N,D) matrix
inline Tensor stack_rows(const std::vector<Tensor>& rows) {
    detail::require(!rows.empty(), "stack_rows: empty input");
    int D = rows[0].dim(0);
    for (const Tensor& r : rows)
        detail::require(r.rank() == 1 && r.dim(0) == D,
                        "stack_rows: row shape " + shape_str(r.shape()) + " does not match width " + std::to_string(D));
    int N = static_cast<int>(rows.size());
    auto n = detail::make_op({N, D}, rows);
    for (int i = 0; i < N; ++i)
        std::copy(rows[static_cast<size_t>(i)].data().begin(), rows[static_cast<size_t>(i)].data().end(),
                  n->value.begin() + static_cast<long>(i) * D);
    if (n->track) {
        n->backprop = [D](TensorNode& self) {
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                if (!self.parents[pi]->track) continue;
                auto& g = detail::pgrad(self.parents[pi]);
                for (int i = 0; i < D; ++i)
                    g[static_cast<size_t>(i)] += self.grad[pi * static_cast<size_t>(D) + static_cast<size_t>(i)];
            }
        };
    }
    return Tensor(n);
}

// concatenate two (C,T) blocks along the channel axis
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
                    "concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int Ca = a.dim(0), Cb = b.dim(0), T = a.dim(1);
    auto n = detail::make_op({Ca + Cb, T}, {a, b});
    std::copy(a.data().begin(), a.data().end(), n->value.begin());
    std::copy(b.data().begin(), b.data().end(), n->value.begin() + static_cast<long>(a.size()));
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        size_t na = a.size();
        n->backprop = [ta, tb, na](TensorNode& self) {
            if (ta) {
                auto& g = detail::pgrad(self.parents[0]);
                for (size_t i = 0; i < na; ++i) g[i] += self.grad[i];
            }
            if (tb) {
                auto& g = detail::pgrad(self.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
            }
        };
    }
    return Tensor(n);
}

// repeat a (C) vector as every column of a (C,T) block
inline Tensor repeat_cols(const Tensor& v, int T) {
    detail::require(v.rank() == 1, "repeat_cols: expected rank-1 input, got " + shape_str(v.shape()));
    detail::require(T > 0, "repeat_cols: T must be positive");
    int C = v.dim(0);
    auto n = detail::make_op({C, T}, {v});
    const auto& vv = v.data();
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t) n->value[static_cast<size_t>(c) * T + t] = vv[static_cast<size_t>(c)];
    if (n->track) {
        n->backprop = [C, T](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (int c = 0; c < C; ++c) {
                scalar acc = 0;
                for (int t = 0; t < T; ++t) acc += self.grad[static_cast<size_t>(c) * T + t];
                g[static_cast<size_t>(c)] += acc;
            }
        };
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                    "matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), p = b.dim(1);
    auto n = detail::make_op({m, p}, {a, b});
    const scalar* A = a.data().data();
    const scalar* B = b.data().data();
    scalar* O = n->value.data();
    std::fill(n->value.begin(), n->value.end(), scalar(0));
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            scalar av = A[static_cast<size_t>(i) * k + kk];
            const scalar* Br = B + static_cast<size_t>(kk) * p;
            scalar* Or = O + static_cast<size_t>(i) * p;
            for (int j = 0; j < p; ++j) Or[j] += av * Br[j];
        }
    if (n->track) {
        bool ta = a.tracked(), tb = b.tracked();
        n->backprop = [m, k, p, ta, tb](TensorNode& self) {
            const scalar* A2 = self.parents[0]->value.data();
            const scalar* B2 = self.parents[1]->value.data();
            const scalar* G = self.grad.data();
            if (ta) {  // dA = G * B^T
                auto& ga = detail::pgrad(self.parents[0]);
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        scalar acc = 0;
                        const scalar* Gr = G + static_cast<size_t>(i) * p;
                        const scalar* Br = B2 + static_cast<size_t>(kk) * p;
                        for (int j = 0; j < p; ++j) acc += Gr[j] * Br[j];
                        ga[static_cast<size_t>(i) * k + kk] += acc;
                    }
            }
            if (tb) {  // dB = A^T * G
                auto& gb = detail::pgrad(self.parents[1]);
                for (int kk = 0; kk < k; ++kk)
                    for (int i = 0; i < m; ++i) {
                        scalar av = A2[static_cast<size_t>(i) * k + kk];
                        const scalar* Gr = G + static_cast<size_t>(i) * p;
                        scalar* gr = gb.data() + static_cast<size_t>(kk) * p;
                        for (int j = 0; j < p; ++j) gr[j] += av * Gr[j];
                    }
            }
        };
    }
    return Tensor(n);
}

// rows of X (P,n) through the affine map W (m,n), b (m): X W^T + 1 b^T
inline Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1 && x.dim(1) == w.dim(1) && w.dim(0) == b.dim(0),
                    "linear_rows: shape mismatch x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                        shape_str(b.shape()));
    int P = x.dim(0), in = x.dim(1), out = w.dim(0);
    auto n = detail::make_op({P, out}, {x, w, b});
    const scalar* X = x.data().data();
    const scalar* W = w.data().data();
    const scalar* B = b.data().data();
    for (int p = 0; p < P; ++p) {
        const scalar* xr = X + static_cast<size_t>(p) * in;
        scalar* orow = n->value.data() + static_cast<size_t>(p) * out;
        for (int o = 0; o < out; ++o) {
            const scalar* wr = W + static_cast<size_t>(o) * in;
            scalar acc = B[o];
            for (int i = 0; i < in; ++i) acc += wr[i] * xr[i];
            orow[o] = acc;
        }
    }
    if (n->track) {
        bool tx = x.tracked(), tw = w.tracked(), tb = b.tracked();
        n->backprop = [P, in, out, tx, tw, tb](TensorNode& self) {
            const scalar* X2 = self.parents[0]->value.data();
            const scalar* W2 = self.parents[1]->value.data();
            const scalar* G = self.grad.data();
            if (tx) {
                auto& gx = detail::pgrad(self.parents[0]);
                for (int p = 0; p < P; ++p) {
                    const scalar* gr = G + static_cast<size_t>(p) * out;
                    scalar* gxr = gx.data() + static_cast<size_t>(p) * in;
                    for (int o = 0; o < out; ++o) {
                        scalar gv = gr[o];
                        const scalar* wr = W2 + static_cast<size_t>(o) * in;
                        for (int i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                    }
                }
            }
            if (tw) {
                auto& gw = detail::pgrad(self.parents[1]);
                for (int p = 0; p < P; ++p) {
                    const scalar* gr = G + static_cast<size_t>(p) * out;
                    const scalar* xr = X2 + static_cast<size_t>(p) * in;
                    for (int o = 0; o < out; ++o) {
                        scalar gv = gr[o];
                        scalar* gwr = gw.data() + static_cast<size_t>(o) * in;
                        for (int i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                    }
                }
            }
            if (tb) {
                auto& gb = detail::pgrad(self.parents[2]);
                for (int p = 0; p < P; ++p) {
                    const scalar* gr = G + static_cast<size_t>(p) * out;
                    for (int o = 0; o < out; ++o) gb[static_cast<size_t>(o)] += gr[o];
                }
            }
        };
    }
    return Tensor(n);
}

inline Tensor linear_vec(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require(x.rank() == 1, "linear_vec: expected rank-1 input, got " + shape_str(x.shape()));
    Tensor row = reshape(x, {1, x.dim(0)});
    return reshape(linear_rows(row, w, b), {w.dim(0)});
}

// ---------------------------------------------------------------------------
// temporal primitives on (C,T) blocks
// ---------------------------------------------------------------------------

// 1-D convolution over the temporal axis with zero padding.
// x: (Cin,T), w: (Cout,Cin,K), b: (Cout) -> (Cout, (T + 2*pad - K)/stride + 1)
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride = 1, int pad = 0) {
    detail::require(x.rank() == 2 && w.rank() == 3 && b.rank() == 1 && x.dim(0) == w.dim(1) && w.dim(0) == b.dim(0),
                    "conv1d: shape mismatch x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                        shape_str(b.shape()));
    detail::require(stride >= 1 && pad >= 0, "conv1d: bad stride/pad");
    int Cin = x.dim(0), T = x.dim(1), Cout = w.dim(0), K = w.dim(2);
    int Tout = (T + 2 * pad - K) / stride + 1;
    detail::require(Tout >= 1, "conv1d: kernel " + std::to_string(K) + " too large for length " + std::to_string(T));
    auto n = detail::make_op({Cout, Tout}, {x, w, b});
    const scalar* X = x.data().data();
    const scalar* W = w.data().data();
    const scalar* B = b.data().data();
    // per-tap valid output range keeps the inner loops branch-free
    auto tap_range = [stride, pad, Tout, T](int k, int& t_lo, int& t_hi) {
        t_lo = std::max(0, (pad - k + stride - 1) / stride);
        t_hi = std::min(Tout - 1, (T - 1 + pad - k) / stride);
    };
    for (int co = 0; co < Cout; ++co) {
        scalar* orow = n->value.data() + static_cast<size_t>(co) * Tout;
        for (int t = 0; t < Tout; ++t) orow[t] = B[co];
        for (int ci = 0; ci < Cin; ++ci) {
            const scalar* xr = X + static_cast<size_t>(ci) * T;
            const scalar* wr = W + (static_cast<size_t>(co) * Cin + ci) * K;
            for (int k = 0; k < K; ++k) {
                int t_lo, t_hi;
                tap_range(k, t_lo, t_hi);
                scalar wv = wr[k];
                const scalar* xs = xr + (-pad + k);
                if (stride == 1) {
                    for (int t = t_lo; t <= t_hi; ++t) orow[t] += wv * xs[t];
                } else {
                    for (int t = t_lo; t <= t_hi; ++t) orow[t] += wv * xr[t * stride - pad + k];
                }
            }
        }
    }
    if (n->track) {
        bool tx = x.tracked(), tw = w.tracked(), tb = b.tracked();
        n->backprop = [Cin, T, Cout, K, Tout, stride, pad, tap_range, tx, tw, tb](TensorNode& self) {
            const scalar* X2 = self.parents[0]->value.data();
            const scalar* W2 = self.parents[1]->value.data();
            const scalar* G = self.grad.data();
            if (tx) {
                auto& gx = detail::pgrad(self.parents[0]);
                for (int co = 0; co < Cout; ++co) {
                    const scalar* gr = G + static_cast<size_t>(co) * Tout;
                    for (int ci = 0; ci < Cin; ++ci) {
                        scalar* gxr = gx.data() + static_cast<size_t>(ci) * T;
                        const scalar* wr = W2 + (static_cast<size_t>(co) * Cin + ci) * K;
                        for (int k = 0; k < K; ++k) {
                            int t_lo, t_hi;
                            tap_range(k, t_lo, t_hi);
                            scalar wv = wr[k];
                            scalar* gxs = gxr + (-pad + k);
                            if (stride == 1) {
                                for (int t = t_lo; t <= t_hi; ++t) gxs[t] += wv * gr[t];
                            } else {
                                for (int t = t_lo; t <= t_hi; ++t) gxr[t * stride - pad + k] += wv * gr[t];
                            }
                        }
                    }
                }
            }
            if (tw) {
                auto& gw = detail::pgrad(self.parents[1]);
                for (int co = 0; co < Cout; ++co) {
                    const scalar* gr = G + static_cast<size_t>(co) * Tout;
                    for (int ci = 0; ci < Cin; ++ci) {
                        const scalar* xr = X2 + static_cast<size_t>(ci) * T;
                        scalar* gwr = gw.data() + (static_cast<size_t>(co) * Cin + ci) * K;
                        for (int k = 0; k < K; ++k) {
                            int t_lo, t_hi;
                            tap_range(k, t_lo, t_hi);
                            const scalar* xs = xr + (-pad + k);
                            scalar acc = 0;
                            if (stride == 1) {
                                for (int t = t_lo; t <= t_hi; ++t) acc += gr[t] * xs[t];
                            } else {
                                for (int t = t_lo; t <= t_hi; ++t) acc += gr[t] * xr[t * stride - pad + k];
                            }
                            gwr[k] += acc;
                        }
                    }
                }
            }
            if (tb) {
                auto& gb = detail::pgrad(self.parents[2]);
                for (int co = 0; co < Cout; ++co) {
                    const scalar* gr = G + static_cast<size_t>(co) * Tout;
                    scalar acc = 0;
                    for (int t = 0; t < Tout; ++t) acc += gr[t];
                    gb[static_cast<size_t>(co)] += acc;
                }
            }
        };
    }
    return Tensor(n);
}

// nearest-neighbour temporal upsampling by 2: (C,T) -> (C,2T)
inline Tensor upsample2(const Tensor& x) {
    detail::require(x.rank() == 2, "upsample2: expected rank-2 input, got " + shape_str(x.shape()));
    int C = x.dim(0), T = x.dim(1);
    auto n = detail::make_op({C, 2 * T}, {x});
    const auto& xv = x.data();
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t) {
            scalar v = xv[static_cast<size_t>(c) * T + t];
            n->value[static_cast<size_t>(c) * 2 * T + 2 * t] = v;
            n->value[static_cast<size_t>(c) * 2 * T + 2 * t + 1] = v;
        }
    if (n->track) {
        n->backprop = [C, T](TensorNode& self) {
            auto& g = detail::pgrad(self.parents[0]);
            for (int c = 0; c < C; ++c)
                for (int t = 0; t < T; ++t)
                    g[static_cast<size_t>(c) * T + t] += self.grad[static_cast<size_t>(c) * 2 * T + 2 * t] +
                                                         self.grad[static_cast<size_t>(c) * 2 * T + 2 * t + 1];
        };
    }
    return Tensor(n);
}

// FiLM modulation on a (C,T) block: y[c,t] = (1 + s[c]) * x[c,t] + h[c]
inline Tensor film_mod(const Tensor& x, const Tensor& s, const Tensor& h) {
    detail::require(x.rank() == 2 && s.rank() == 1 && h.rank() == 1 && s.dim(0) == x.dim(0) && h.dim(0) == x.dim(0),
                    "film_mod: shape mismatch x" + shape_str(x.shape()) + " s" + shape_str(s.shape()) + " h" +
                        shape_str(h.shape()));
    int C = x.dim(0), T = x.dim(1);
    auto n = detail::make_op({C, T}, {x, s, h});
    const auto& xv = x.data();
    const auto& sv = s.data();
    const auto& hv = h.data();
    for (int c = 0; c < C; ++c) {
        scalar sc = scalar(1) + sv[static_cast<size_t>(c)];
        scalar hc = hv[static_cast<size_t>(c)];
        for (int t = 0; t < T; ++t)
            n->value[static_cast<size_t>(c) * T + t] = sc * xv[static_cast<size_t>(c) * T + t] + hc;
    }
    if (n->track) {
        bool tx = x.tracked(), ts = s.tracked(), th = h.tracked();
        n->backprop = [C, T, tx, ts, th](TensorNode& self) {
            const auto& xv2 = self.parents[0]->value;
            const auto& sv2 = self.parents[1]->value;
            if (tx) {
                auto& g = detail::pgrad(self.parents[0]);
                for (int c = 0; c < C; ++c) {
                    scalar sc = scalar(1) + sv2[static_cast<size_t>(c)];
                    for (int t = 0; t < T; ++t)
                        g[static_cast<size_t>(c) * T + t] += self.grad[static_cast<size_t>(c) * T + t] * sc;
                }
            }
            if (ts) {
                auto& g = detail::pgrad(self.parents[1]);
                for (int c = 0; c < C; ++c) {
                    scalar acc = 0;
                    for (int t = 0; t < T; ++t)
                        acc += self.grad[static_cast<size_t>(c) * T + t] * xv2[static_cast<size_t>(c) * T + t];
                    g[static_cast<size_t>(c)] += acc;
                }
            }
            if (th) {
                auto& g = detail::pgrad(self.parents[2]);
                for (int c = 0; c < C; ++c) {
                    scalar acc = 0;
                    for (int t = 0; t < T; ++t) acc += self.grad[static_cast<size_t>(c) * T + t];
                    g[static_cast<size_t>(c)] += acc;
                }
            }
        };
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

namespace detail {
// shared kernel: normalize contiguous groups of `span` elements laid out as
// `rep` panels (group norm flattens (C/G,T) panels; layer norm is one panel)
inline void norm_groups_backward(const std::vector<scalar>& x, const std::vector<scalar>& gout,
                                 std::vector<scalar>& gx, const std::vector<scalar>& gamma_per_elem,
                                 const std::vector<scalar>& mu, const std::vector<scalar>& istd, int groups,
                                 int span) {
    for (int g = 0; g < groups; ++g) {
        size_t base = static_cast<size_t>(g) * span;
        scalar inv = istd[static_cast<size_t>(g)];
        scalar m = mu[static_cast<size_t>(g)];
        scalar sum_dy = 0, sum_dyy = 0;
        for (int i = 0; i < span; ++i) {
            scalar yv = (x[base + i] - m) * inv;
            scalar dy = gout[base + i] * gamma_per_elem[base + i];
            sum_dy += dy;
            sum_dyy += dy * yv;
        }
        scalar ninv = scalar(1) / static_cast<scalar>(span);
        for (int i = 0; i < span; ++i) {
            scalar yv = (x[base + i] - m) * inv;
            scalar dy = gout[base + i] * gamma_per_elem[base + i];
            gx[base + i] += inv * (dy - ninv * sum_dy - yv * ninv * sum_dyy);
        }
    }
}
}  // namespace detail

// group normalization over (C,T): channels split into `groups`, statistics
// over each (C/groups, T) panel, learnable per-channel gamma/beta
inline Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                         scalar eps = scalar(1e-5)) {
    detail::require(x.rank() == 2 && gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == x.dim(0) &&
                        beta.dim(0) == x.dim(0),
                    "group_norm: shape mismatch x" + shape_str(x.shape()) + " gamma" + shape_str(gamma.shape()) +
                        " beta" + shape_str(beta.shape()));
    int C = x.dim(0), T = x.dim(1);
    detail::require(groups >= 1 && C % groups == 0,
                    "group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    int cpg = C / groups, span = cpg * T;
    auto n = detail::make_op({C, T}, {x, gamma, beta});
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<scalar> mu(static_cast<size_t>(groups)), istd(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        size_t base = static_cast<size_t>(g) * span;
        scalar m = 0;
        for (int i = 0; i < span; ++i) m += xv[base + i];
        m /= static_cast<scalar>(span);
        scalar var = 0;
        for (int i = 0; i < span; ++i) {
            scalar d = xv[base + i] - m;
            var += d * d;
        }
        var /= static_cast<scalar>(span);
        mu[static_cast<size_t>(g)] = m;
        istd[static_cast<size_t>(g)] = scalar(1) / std::sqrt(var + eps);
    }
    for (int c = 0; c < C; ++c) {
        int g = c / cpg;
        scalar m = mu[static_cast<size_t>(g)], inv = istd[static_cast<size_t>(g)];
        for (int t = 0; t < T; ++t) {
            size_t i = static_cast<size_t>(c) * T + t;
            n->value[i] = gv[static_cast<size_t>(c)] * ((xv[i] - m) * inv) + bv[static_cast<size_t>(c)];
        }
    }
    if (n->track) {
        bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
        n->backprop = [C, T, groups, cpg, span, mu, istd, tx, tg, tb](TensorNode& self) {
            const auto& xv2 = self.parents[0]->value;
            const auto& gv2 = self.parents[1]->value;
            if (tg) {
                auto& gg = detail::pgrad(self.parents[1]);
                for (int c = 0; c < C; ++c) {
                    int g = c / cpg;
                    scalar m = mu[static_cast<size_t>(g)], inv = istd[static_cast<size_t>(g)];
                    scalar acc = 0;
                    for (int t = 0; t < T; ++t) {
                        size_t i = static_cast<size_t>(c) * T + t;
                        acc += self.grad[i] * ((xv2[i] - m) * inv);
                    }
                    gg[static_cast<size_t>(c)] += acc;
                }
            }
            if (tb) {
                auto& gb = detail::pgrad(self.parents[2]);
                for (int c = 0; c < C; ++c) {
                    scalar acc = 0;
                    for (int t = 0; t < T; ++t) acc += self.grad[static_cast<size_t>(c) * T + t];
                    gb[static_cast<size_t>(c)] += acc;
                }
            }
            if (tx) {
                auto& gx = detail::pgrad(self.parents[0]);
                std::vector<scalar> gamma_per_elem(static_cast<size_t>(C) * T);
                for (int c = 0; c < C; ++c)
                    for (int t = 0; t < T; ++t)
                        gamma_per_elem[static_cast<size_t>(c) * T + t] = gv2[static_cast<size_t>(c)];
                detail::norm_groups_backward(xv2, self.grad, gx, gamma_per_elem, mu, istd, groups, span);
            }
        };
    }
    return Tensor(n);
}

// layer normalization over a rank-1 vector with learnable affine
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, scalar eps = scalar(1e-5)) {
    detail::require(x.rank() == 1 && gamma.shape() == x.shape() && beta.shape() == x.shape(),
                    "layer_norm: shape mismatch x" + shape_str(x.shape()) + " gamma" + shape_str(gamma.shape()) +
                        " beta" + shape_str(beta.shape()));
    int nlen = x.dim(0);
    auto n = detail::make_op({nlen}, {x, gamma, beta});
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    scalar m = 0;
    for (scalar v : xv) m += v;
    m /= static_cast<scalar>(nlen);
    scalar var = 0;
    for (scalar v : xv) {
        scalar d = v - m;
        var += d * d;
    }
    var /= static_cast<scalar>(nlen);
    scalar inv = scalar(1) / std::sqrt(var + eps);
    for (int i = 0; i < nlen; ++i)
        n->value[static_cast<size_t>(i)] = gv[static_cast<size_t>(i)] * ((xv[static_cast<size_t>(i)] - m) * inv) +
                                           bv[static_cast<size_t>(i)];
    if (n->track) {
        bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
        n->backprop = [nlen, m, inv, tx, tg, tb](TensorNode& self) {
            const auto& xv2 = self.parents[0]->value;
            const auto& gv2 = self.parents[1]->value;
            if (tg) {
                auto& gg = detail::pgrad(self.parents[1]);
                for (int i = 0; i < nlen; ++i)
                    gg[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)] *
                                                  ((xv2[static_cast<size_t>(i)] - m) * inv);
            }
            if (tb) {
                auto& gb = detail::pgrad(self.parents[2]);
                for (int i = 0; i < nlen; ++i) gb[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(i)];
            }
            if (tx) {
                auto& gx = detail::pgrad(self.parents[0]);
                std::vector<scalar> gamma_per_elem(gv2.begin(), gv2.end());
                std::vector<scalar> mu{m}, istd{inv};
                detail::norm_groups_backward(xv2, self.grad, gx, gamma_per_elem, mu, istd, 1, nlen);
            }
        };
    }
    return Tensor(n);
}

// layer normalization applied to every row of an (P,n) matrix independently,
// with shared per-feature gamma/beta of width n
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gamma, const Tensor& beta, scalar eps = scalar(1e-5)) {
    detail::require(x.rank() == 2 && gamma.rank() == 1 && beta.rank() == 1 && gamma.dim(0) == x.dim(1) &&
                        beta.dim(0) == x.dim(1),
                    "layer_norm_rows: shape mismatch x" + shape_str(x.shape()) + " gamma" + shape_str(gamma.shape()) +
                        " beta" + shape_str(beta.shape()));
    int P = x.dim(0), n_feat = x.dim(1);
    auto n = detail::make_op({P, n_feat}, {x, gamma, beta});
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<scalar> mu(static_cast<size_t>(P)), istd(static_cast<size_t>(P));
    for (int p = 0; p < P; ++p) {
        size_t base = static_cast<size_t>(p) * n_feat;
        scalar m = 0;
        for (int i = 0; i < n_feat; ++i) m += xv[base + i];
        m /= static_cast<scalar>(n_feat);
        scalar var = 0;
        for (int i = 0; i < n_feat; ++i) {
            scalar d = xv[base + i] - m;
            var += d * d;
        }
        var /= static_cast<scalar>(n_feat);
        mu[static_cast<size_t>(p)] = m;
        istd[static_cast<size_t>(p)] = scalar(1) / std::sqrt(var + eps);
        for (int i = 0; i < n_feat; ++i)
            n->value[base + i] = gv[static_cast<size_t>(i)] * ((xv[base + i] - m) * istd[static_cast<size_t>(p)]) +
                                 bv[static_cast<size_t>(i)];
    }
    if (n->track) {
        bool tx = x.tracked(), tg = gamma.tracked(), tb = beta.tracked();
        n->backprop = [P, n_feat, mu, istd, tx, tg, tb](TensorNode& self) {
            const auto& xv2 = self.parents[0]->value;
            const auto& gv2 = self.parents[1]->value;
            if (tg) {
                auto& gg = detail::pgrad(self.parents[1]);
                for (int p = 0; p < P; ++p) {
                    size_t base = static_cast<size_t>(p) * n_feat;
                    for (int i = 0; i < n_feat; ++i)
                        gg[static_cast<size_t>(i)] +=
                            self.grad[base + i] * ((xv2[base + i] - mu[static_cast<size_t>(p)]) *
                                                   istd[static_cast<size_t>(p)]);
                }
            }
            if (tb) {
                auto& gb = detail::pgrad(self.parents[2]);
                for (int p = 0; p < P; ++p)
                    for (int i = 0; i < n_feat; ++i)
                        gb[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(p) * n_feat + i];
            }
            if (tx) {
                auto& gx = detail::pgrad(self.parents[0]);
                std::vector<scalar> gamma_per_elem(static_cast<size_t>(P) * n_feat);
                for (int p = 0; p < P; ++p)
                    for (int i = 0; i < n_feat; ++i)
                        gamma_per_elem[static_cast<size_t>(p) * n_feat + i] = gv2[static_cast<size_t>(i)];
                detail::norm_groups_backward(xv2, self.grad, gx, gamma_per_elem, mu, istd, P, n_feat);
            }
        };
    }
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace detail {
inline void topo_collect(const NodePtr& root, std::vector<TensorNode*>& order) {
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx].get();
            ++idx;
            if (p->track && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}
}  // namespace detail

// Reverse-mode sweep from a scalar loss. Gradients accumulate into the grad
// buffers of every tracked node reachable from `loss`. Buffers of nodes in
// the graph are zeroed first, so repeated calls do not accumulate.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.tracked()) return;
    std::vector<TensorNode*> order;  // post-order: parents before children
    detail::topo_collect(loss.node(), order);
    for (TensorNode* n : order) {
        n->grad.assign(n->value.size(), 0);
        n->grad_valid = true;
    }
    loss.node()->grad[0] = 1;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// finite-difference gradient of f at x (central, step h) — test oracle helper
inline std::vector<scalar> central_difference(const std::function<scalar(const std::vector<scalar>&)>& f,
                                              std::vector<scalar> x, scalar h = scalar(1e-4)) {
    std::vector<scalar> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        scalar keep = x[i];
        x[i] = keep + h;
        scalar fp = f(x);
        x[i] = keep - h;
        scalar fm = f(x);
        x[i] = keep;
        g[i] = (fp - fm) / (2 * h);
    }
    return g;
}

}  // namespace dreamdiff
