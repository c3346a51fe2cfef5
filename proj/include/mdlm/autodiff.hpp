#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "mdlm/error.hpp"
#include "mdlm/tensor.hpp"

// Reverse-mode automatic differentiation over BasicTensor<T>.
//
// A Tape owns every intermediate value of one computation. Ops append a node
// holding the forward value and, when any input requires a gradient and the
// tape is recording, a closure that pushes the output gradient back into the
// inputs. backward() walks node ids from the root down to 0, which is a valid
// reverse topological order because inputs always precede their outputs.
namespace mdlm {

template <class T>
class Tape;

template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::uint32_t id = 0;

    const BasicTensor<T>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape; }
};

template <class T>
class Tape {
public:
    using Backprop = std::function<void(Tape&, const BasicTensor<T>&)>;

    explicit Tape(bool record = true) : record_(record) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return record_; }

    Var<T> constant(BasicTensor<T> v) { return push(std::move(v), false, {}); }

    // Owned leaf that collects a gradient.
    Var<T> input(BasicTensor<T> v) { return push(std::move(v), true, {}); }

    // Borrowed leaf: the tensor must outlive the tape. Avoids copying weights
    // for every forward pass.
    Var<T> parameter(const BasicTensor<T>& ref) {
        Node n;
        n.external = &ref;
        n.requires_grad = record_;
        nodes_.push_back(std::move(n));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    const BasicTensor<T>& value(Var<T> v) const { return value(v.id); }
    const BasicTensor<T>& value(std::uint32_t id) const {
        const Node& n = nodes_[id];
        return n.external ? *n.external : n.value;
    }

    bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
    bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    bool has_grad(Var<T> v) const { return !nodes_[v.id].grad.data.empty() || value(v).numel() == 0; }

    // Gradient of the last backward() root w.r.t. v; zeros if v was unreached.
    BasicTensor<T> grad(Var<T> v) const {
        const Node& n = nodes_[v.id];
        if (n.grad.data.empty()) {
            return BasicTensor<T>(value(v).shape);
        }
        return n.grad;
    }

    // Mutable gradient accumulator for op authors; zero-initialised on first use.
    BasicTensor<T>& grad_buffer(std::uint32_t id) {
        Node& n = nodes_[id];
        if (n.grad.data.empty()) {
            n.grad = BasicTensor<T>(value(id).shape);
        }
        return n.grad;
    }

    Var<T> push(BasicTensor<T> value, bool requires_grad, Backprop fn) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = record_ && requires_grad;
        if (n.requires_grad) {
            n.backprop = std::move(fn);
        }
        nodes_.push_back(std::move(n));
        return {this, static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    void backward(Var<T> root) {
        if (!record_) {
            throw PreconditionError("backward() on a non-recording tape");
        }
        if (value(root).numel() != 1) {
            throw DimensionError("backward() root must be a scalar, got " + shape_str(value(root).shape));
        }
        for (Node& n : nodes_) {
            n.grad = BasicTensor<T>();
        }
        if (!nodes_[root.id].requires_grad) {
            return;
        }
        grad_buffer(root.id).data[0] = T{1};
        for (std::int64_t i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backprop && !n.grad.data.empty()) {
                n.backprop(*this, n.grad);
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        BasicTensor<T> value;
        const BasicTensor<T>* external = nullptr;
        BasicTensor<T> grad;
        bool requires_grad = false;
        Backprop backprop;
    };

    bool record_;
    std::vector<Node> nodes_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
MapMat<T> mat(T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return MapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                     Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

template <class T>
ConstMapMat<T> cmat(const T* p, std::size_t rows, std::size_t cols, std::size_t ld) {
    return ConstMapMat<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                          Eigen::OuterStride<>(static_cast<Eigen::Index>(ld)));
}

inline void require_rank2(const Shape& s, const char* what) {
    if (s.size() != 2) {
        throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(s));
    }
}

inline void require_same(const Shape& a, const Shape& b, const char* what) {
    if (a != b) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

// In-place numerically stable softmax of one row; sums in double.
template <class T>
void softmax_inplace(std::span<T> row) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : row) {
        mx = std::max(mx, v);
    }
    double total = 0.0;
    for (T& v : row) {
        v = std::exp(v - mx);
        total += static_cast<double>(v);
    }
    const double inv = 1.0 / total;
    for (T& v : row) {
        v = static_cast<T>(static_cast<double>(v) * inv);
    }
}

template <class T>
double log_sum_exp(std::span<const T> row) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : row) {
        mx = std::max(mx, v);
    }
    double total = 0.0;
    for (T v : row) {
        total += std::exp(static_cast<double>(v - mx));
    }
    return static_cast<double>(mx) + std::log(total);
}

template <class T>
void accumulate(BasicTensor<T>& dst, const BasicTensor<T>& src) {
    for (std::size_t i = 0; i < dst.data.size(); ++i) {
        dst.data[i] += src.data[i];
    }
}

} // namespace detail

namespace ad {

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& tape = *a.tape;
    const auto& av = a.value();
    const auto& bv = b.value();
    detail::require_rank2(av.shape, "matmul");
    detail::require_rank2(bv.shape, "matmul");
    const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    if (bv.shape[0] != k) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(av.shape) + " x " +
                             shape_str(bv.shape));
    }
    BasicTensor<T> out(Shape{m, n});
    detail::mat(out.data.data(), m, n, n).noalias() =
        detail::cmat(av.data.data(), m, k, k) * detail::cmat(bv.data.data(), k, n, n);
    const std::uint32_t ia = a.id, ib = b.id;
    return tape.push(std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [ia, ib, m, k, n](Tape<T>& t, const BasicTensor<T>& g) {
                         auto gm = detail::cmat(g.data.data(), m, n, n);
                         if (t.requires_grad(ia)) {
                             const auto& bv = t.value(ib);
                             auto& ga = t.grad_buffer(ia);
                             detail::mat(ga.data.data(), m, k, k).noalias() +=
                                 gm * detail::cmat(bv.data.data(), k, n, n).transpose();
                         }
                         if (t.requires_grad(ib)) {
                             const auto& av = t.value(ia);
                             auto& gb = t.grad_buffer(ib);
                             detail::mat(gb.data.data(), k, n, n).noalias() +=
                                 detail::cmat(av.data.data(), m, k, k).transpose() * gm;
                         }
                     });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& tape = *a.tape;
    detail::require_same(a.shape(), b.shape(), "add");
    BasicTensor<T> out = a.value();
    out.requires_grad = false;
    detail::accumulate(out, b.value());
    const std::uint32_t ia = a.id, ib = b.id;
    return tape.push(std::move(out), tape.requires_grad(a) || tape.requires_grad(b),
                     [ia, ib](Tape<T>& t, const BasicTensor<T>& g) {
                         if (t.requires_grad(ia)) {
                             detail::accumulate(t.grad_buffer(ia), g);
                         }
                         if (t.requires_grad(ib)) {
                             detail::accumulate(t.grad_buffer(ib), g);
                         }
                     });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
    Tape<T>& tape = *a.tape;
    BasicTensor<T> out(a.shape());
    const auto& av = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        out.data[i] = av.data[i] * factor;
    }
    const std::uint32_t ia = a.id;
    return tape.push(std::move(out), tape.requires_grad(a), [ia, factor](Tape<T>& t, const BasicTensor<T>& g) {
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            ga.data[i] += g.data[i] * factor;
        }
    });
}

// Scalar <x, w> against a fixed weight tensor. Handy as a probe loss.
template <class T>
Var<T> weighted_sum(Var<T> x, const BasicTensor<T>& w) {
    Tape<T>& tape = *x.tape;
    detail::require_same(x.shape(), w.shape, "weighted_sum");
    double acc = 0.0;
    const auto& xv = x.value();
    for (std::size_t i = 0; i < xv.numel(); ++i) {
        acc += static_cast<double>(xv.data[i]) * static_cast<double>(w.data[i]);
    }
    const std::uint32_t ix = x.id;
    return tape.push(BasicTensor<T>::scalar(static_cast<T>(acc)), tape.requires_grad(x),
                     [ix, w](Tape<T>& t, const BasicTensor<T>& g) {
                         auto& gx = t.grad_buffer(ix);
                         for (std::size_t i = 0; i < gx.numel(); ++i) {
                             gx.data[i] += g.data[0] * w.data[i];
                         }
                     });
}

// Row gather from an embedding table [V x d].
template <class T>
Var<T> embedding(Var<T> table, std::span<const std::int32_t> ids) {
    Tape<T>& tape = *table.tape;
    const auto& tv = table.value();
    detail::require_rank2(tv.shape, "embedding");
    const std::size_t vocab = tv.shape[0], d = tv.shape[1];
    BasicTensor<T> out(Shape{ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
            throw IndexError("embedding: token id " + std::to_string(ids[r]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(ids[r] * d), d,
                    out.data.begin() + static_cast<std::ptrdiff_t>(r * d));
    }
    const std::uint32_t it = table.id;
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return tape.push(std::move(out), tape.requires_grad(table),
                     [it, d, saved = std::move(saved)](Tape<T>& t, const BasicTensor<T>& g) {
                         auto& gt = t.grad_buffer(it);
                         for (std::size_t r = 0; r < saved.size(); ++r) {
                             T* dst = gt.data.data() + static_cast<std::size_t>(saved[r]) * d;
                             const T* src = g.data.data() + r * d;
                             for (std::size_t c = 0; c < d; ++c) {
                                 dst[c] += src[c];
                             }
                         }
                     });
}

template <class T>
Var<T> rms_norm(Var<T> x, Var<T> gain, double eps) {
    Tape<T>& tape = *x.tape;
    const auto& xv = x.value();
    const auto& gv = gain.value();
    if (xv.rank() == 0 || xv.cols() == 0) {
        throw DimensionError("rms_norm: feature dimension must be at least 1");
    }
    const std::size_t d = xv.cols(), rows = xv.rows();
    if (gv.numel() != d) {
        throw DimensionError("rms_norm: gain length " + std::to_string(gv.numel()) + " != feature dim " +
                             std::to_string(d));
    }
    BasicTensor<T> out(xv.shape);
    std::vector<double> inv_rms(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data.data() + r * d;
        double ss = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            ss += static_cast<double>(xr[c]) * static_cast<double>(xr[c]);
        }
        inv_rms[r] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        T* orow = out.data.data() + r * d;
        for (std::size_t c = 0; c < d; ++c) {
            orow[c] = static_cast<T>(static_cast<double>(xr[c]) * inv_rms[r]) * gv.data[c];
        }
    }
    const std::uint32_t ix = x.id, ig = gain.id;
    return tape.push(std::move(out), tape.requires_grad(x) || tape.requires_grad(gain),
                     [ix, ig, d, rows, inv_rms = std::move(inv_rms)](Tape<T>& t, const BasicTensor<T>& g) {
                         const auto& xv = t.value(ix);
                         const auto& gv = t.value(ig);
                         const bool want_x = t.requires_grad(ix);
                         const bool want_g = t.requires_grad(ig);
                         BasicTensor<T>* gx = want_x ? &t.grad_buffer(ix) : nullptr;
                         std::vector<double> dgain(want_g ? d : 0, 0.0);
                         for (std::size_t r = 0; r < rows; ++r) {
                             const T* xr = xv.data.data() + r * d;
                             const T* gr = g.data.data() + r * d;
                             const double ir = inv_rms[r];
                             double dot = 0.0;
                             for (std::size_t c = 0; c < d; ++c) {
                                 const double xhat = static_cast<double>(xr[c]) * ir;
                                 const double dxhat = static_cast<double>(gr[c]) * static_cast<double>(gv.data[c]);
                                 dot += dxhat * xhat;
                                 if (want_g) {
                                     dgain[c] += static_cast<double>(gr[c]) * xhat;
                                 }
                             }
                             if (want_x) {
                                 const double mean_dot = dot / static_cast<double>(d);
                                 T* dst = gx->data.data() + r * d;
                                 for (std::size_t c = 0; c < d; ++c) {
                                     const double xhat = static_cast<double>(xr[c]) * ir;
                                     const double dxhat =
                                         static_cast<double>(gr[c]) * static_cast<double>(gv.data[c]);
                                     dst[c] += static_cast<T>(ir * (dxhat - xhat * mean_dot));
                                 }
                             }
                         }
                         if (want_g) {
                             auto& gg = t.grad_buffer(ig);
                             for (std::size_t c = 0; c < d; ++c) {
                                 gg.data[c] += static_cast<T>(dgain[c]);
                             }
                         }
                     });
}

// Input [rows x 2f] holds the gate half followed by the value half.
template <class T>
Var<T> swiglu(Var<T> x) {
    Tape<T>& tape = *x.tape;
    const auto& xv = x.value();
    const std::size_t width = xv.cols();
    if (xv.rank() == 0 || width % 2 != 0) {
        throw DimensionError("swiglu: combined width " + std::to_string(width) + " is not even");
    }
    const std::size_t f = width / 2, rows = xv.rows();
    Shape shape = xv.shape;
    shape.back() = f;
    BasicTensor<T> out(shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* gate = xv.data.data() + r * width;
        const T* val = gate + f;
        T* o = out.data.data() + r * f;
        for (std::size_t c = 0; c < f; ++c) {
            const T sig = T{1} / (T{1} + std::exp(-gate[c]));
            o[c] = gate[c] * sig * val[c];
        }
    }
    const std::uint32_t ix = x.id;
    return tape.push(std::move(out), tape.requires_grad(x), [ix, f, rows](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& xv = t.value(ix);
        auto& gx = t.grad_buffer(ix);
        const std::size_t width = 2 * f;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* gate = xv.data.data() + r * width;
            const T* val = gate + f;
            const T* go = g.data.data() + r * f;
            T* dgate = gx.data.data() + r * width;
            T* dval = dgate + f;
            for (std::size_t c = 0; c < f; ++c) {
                const T sig = T{1} / (T{1} + std::exp(-gate[c]));
                const T silu = gate[c] * sig;
                dval[c] += go[c] * silu;
                dgate[c] += go[c] * val[c] * sig * (T{1} + gate[c] * (T{1} - sig));
            }
        }
    });
}

template <class T>
Var<T> softmax_rows(Var<T> x) {
    Tape<T>& tape = *x.tape;
    BasicTensor<T> out = x.value();
    out.requires_grad = false;
    const std::size_t rows = out.rows();
    for (std::size_t r = 0; r < rows; ++r) {
        detail::softmax_inplace(out.row(r));
    }
    const std::uint32_t ix = x.id;
    const std::uint32_t iout = static_cast<std::uint32_t>(tape.size());
    return tape.push(std::move(out), tape.requires_grad(x), [ix, iout](Tape<T>& t, const BasicTensor<T>& g) {
        const auto& y = t.value(iout);
        auto& gx = t.grad_buffer(ix);
        const std::size_t rows = y.rows(), cols = y.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* yr = y.data.data() + r * cols;
            const T* gr = g.data.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                dot += static_cast<double>(yr[c]) * static_cast<double>(gr[c]);
            }
            T* dst = gx.data.data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) {
                dst[c] += static_cast<T>(static_cast<double>(yr[c]) * (static_cast<double>(gr[c]) - dot));
            }
        }
    });
}

// Rotary position embedding on [rows x (n_heads * head_dim)], rotating
// interleaved pairs (2i, 2i+1) of each head by positions[r] * base^(-2i/head_dim).
template <class T>
struct RopeTable {
    std::vector<T> cos, sin; // [rows x head_dim/2]
    std::size_t half = 0;
};

template <class T>
RopeTable<T> make_rope_table(std::span<const std::size_t> positions, std::size_t head_dim, double base) {
    if (head_dim % 2 != 0) {
        throw DimensionError("rope: head dimension " + std::to_string(head_dim) + " is odd");
    }
    RopeTable<T> table;
    table.half = head_dim / 2;
    table.cos.resize(positions.size() * table.half);
    table.sin.resize(positions.size() * table.half);
    for (std::size_t r = 0; r < positions.size(); ++r) {
        for (std::size_t i = 0; i < table.half; ++i) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[r]) * freq;
            table.cos[r * table.half + i] = static_cast<T>(std::cos(angle));
            table.sin[r * table.half + i] = static_cast<T>(std::sin(angle));
        }
    }
    return table;
}

template <class T>
Var<T> rope(Var<T> x, std::span<const std::size_t> positions, std::size_t n_heads, double base) {
    Tape<T>& tape = *x.tape;
    const auto& xv = x.value();
    const std::size_t d = xv.cols(), rows = xv.rows();
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("rope: width " + std::to_string(d) + " not divisible into " + std::to_string(n_heads) +
                             " heads");
    }
    if (positions.size() != rows) {
        throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " + std::to_string(rows) +
                             " rows");
    }
    const std::size_t hd = d / n_heads;
    RopeTable<T> table = make_rope_table<T>(positions, hd, base);
    BasicTensor<T> out(xv.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* cs = table.cos.data() + r * table.half;
        const T* sn = table.sin.data() + r * table.half;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const T* src = xv.data.data() + r * d + h * hd;
            T* dst = out.data.data() + r * d + h * hd;
            for (std::size_t i = 0; i < table.half; ++i) {
                const T a = src[2 * i], b = src[2 * i + 1];
                dst[2 * i] = a * cs[i] - b * sn[i];
                dst[2 * i + 1] = a * sn[i] + b * cs[i];
            }
        }
    }
    const std::uint32_t ix = x.id;
    return tape.push(std::move(out), tape.requires_grad(x),
                     [ix, d, rows, hd, n_heads, table = std::move(table)](Tape<T>& t, const BasicTensor<T>& g) {
                         auto& gx = t.grad_buffer(ix);
                         for (std::size_t r = 0; r < rows; ++r) {
                             const T* cs = table.cos.data() + r * table.half;
                             const T* sn = table.sin.data() + r * table.half;
                             for (std::size_t h = 0; h < n_heads; ++h) {
                                 const T* src = g.data.data() + r * d + h * hd;
                                 T* dst = gx.data.data() + r * d + h * hd;
                                 for (std::size_t i = 0; i < table.half; ++i) {
                                     const T a = src[2 * i], b = src[2 * i + 1];
                                     dst[2 * i] += a * cs[i] + b * sn[i];
                                     dst[2 * i + 1] += -a * sn[i] + b * cs[i];
                                 }
                             }
                         }
                     });
}

// Multi-head scaled dot-product attention over packed sequences. Rows
// [offsets[s], offsets[s+1]) form sequence s; no attention crosses sequences.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::span<const std::size_t> offsets, std::size_t n_heads,
                 bool causal) {
    Tape<T>& tape = *q.tape;
    const auto& qv = q.value();
    detail::require_rank2(qv.shape, "attention");
    detail::require_same(qv.shape, k.shape(), "attention");
    detail::require_same(qv.shape, v.shape(), "attention");
    const std::size_t rows = qv.shape[0], d = qv.shape[1];
    if (n_heads == 0 || d % n_heads != 0) {
        throw DimensionError("attention: width not divisible by head count");
    }
    if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
        throw DimensionError("attention: segment offsets do not cover the rows");
    }
    const std::size_t hd = d / n_heads;
    const T scale_factor = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    const auto& kv = k.value();
    const auto& vv = v.value();

    // Saved probabilities, one [n x n] block per (segment, head).
    std::vector<std::size_t> prob_offsets;
    std::size_t total = 0;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const std::size_t n = offsets[s + 1] - offsets[s];
        prob_offsets.push_back(total);
        total += n * n * n_heads;
    }
    std::vector<T> probs(total);
    BasicTensor<T> out(Shape{rows, d});

    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
        const std::size_t off = offsets[s], n = offsets[s + 1] - offsets[s];
        if (n == 0) {
            continue;
        }
        for (std::size_t h = 0; h < n_heads; ++h) {
            T* p = probs.data() + prob_offsets[s] + h * n * n;
            auto pm = detail::mat(p, n, n, n);
            auto qh = detail::cmat(qv.data.data() + off * d + h * hd, n, hd, d);
            auto kh = detail::cmat(kv.data.data() + off * d + h * hd, n, hd, d);
            pm.noalias() = (qh * kh.transpose()) * scale_factor;
            for (std::size_t i = 0; i < n; ++i) {
                std::span<T> row(p + i * n, n);
                if (causal) {
                    std::fill(row.begin() + static_cast<std::ptrdiff_t>(i + 1), row.end(),
                              -std::numeric_limits<T>::infinity());
                }
                detail::softmax_inplace(row);
            }
            auto vh = detail::cmat(vv.data.data() + off * d + h * hd, n, hd, d);
            detail::mat(out.data.data() + off * d + h * hd, n, hd, d).noalias() = pm * vh;
        }
    }

    const std::uint32_t iq = q.id, ik = k.id, iv = v.id;
    std::vector<std::size_t> segs(offsets.begin(), offsets.end());
    const bool needs = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
    return tape.push(
        std::move(out), needs,
        [iq, ik, iv, d, hd, n_heads, scale_factor, segs = std::move(segs), prob_offsets = std::move(prob_offsets),
         probs = std::move(probs)](Tape<T>& t, const BasicTensor<T>& g) {
            const auto& qv = t.value(iq);
            const auto& kv = t.value(ik);
            const auto& vv = t.value(iv);
            T* gq = t.requires_grad(iq) ? t.grad_buffer(iq).data.data() : nullptr;
            T* gk = t.requires_grad(ik) ? t.grad_buffer(ik).data.data() : nullptr;
            T* gv = t.requires_grad(iv) ? t.grad_buffer(iv).data.data() : nullptr;
            std::vector<T> dp;
            for (std::size_t s = 0; s + 1 < segs.size(); ++s) {
                const std::size_t off = segs[s], n = segs[s + 1] - segs[s];
                if (n == 0) {
                    continue;
                }
                dp.resize(n * n);
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const T* p = probs.data() + prob_offsets[s] + h * n * n;
                    auto pm = detail::cmat(p, n, n, n);
                    auto go = detail::cmat(g.data.data() + off * d + h * hd, n, hd, d);
                    auto qh = detail::cmat(qv.data.data() + off * d + h * hd, n, hd, d);
                    auto kh = detail::cmat(kv.data.data() + off * d + h * hd, n, hd, d);
                    auto vh = detail::cmat(vv.data.data() + off * d + h * hd, n, hd, d);
                    if (gv) {
                        detail::mat(gv + off * d + h * hd, n, hd, d).noalias() += pm.transpose() * go;
                    }
                    if (!gq && !gk) {
                        continue;
                    }
                    auto dpm = detail::mat(dp.data(), n, n, n);
                    dpm.noalias() = go * vh.transpose();
                    for (std::size_t i = 0; i < n; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            dot += static_cast<double>(p[i * n + j]) * static_cast<double>(dp[i * n + j]);
                        }
                        for (std::size_t j = 0; j < n; ++j) {
                            dp[i * n + j] = static_cast<T>(static_cast<double>(p[i * n + j]) *
                                                           (static_cast<double>(dp[i * n + j]) - dot)) *
                                            scale_factor;
                        }
                    }
                    if (gq) {
                        detail::mat(gq + off * d + h * hd, n, hd, d).noalias() += dpm * kh;
                    }
                    if (gk) {
                        detail::mat(gk + off * d + h * hd, n, hd, d).noalias() += dpm.transpose() * qh;
                    }
                }
            }
        });
}

// sum_r weights[r] * (-log softmax(logits[r])[targets[r]]). Rows with zero
// weight are skipped entirely, so they contribute exactly 0.
template <class T>
Var<T> weighted_cross_entropy(Var<T> logits, std::span<const std::int32_t> targets, std::span<const double> weights) {
    Tape<T>& tape = *logits.tape;
    const auto& lv = logits.value();
    detail::require_rank2(lv.shape, "cross_entropy");
    const std::size_t rows = lv.shape[0], vocab = lv.shape[1];
    if (targets.size() != rows || weights.size() != rows) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                             std::to_string(weights.size()) + " weights for " + std::to_string(rows) + " rows");
    }
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (weights[r] == 0.0) {
            continue;
        }
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw IndexError("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        const double nll = detail::log_sum_exp(lv.row(r)) - static_cast<double>(lv.at(r, targets[r]));
        total += weights[r] * nll;
    }
    const std::uint32_t il = logits.id;
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    return tape.push(BasicTensor<T>::scalar(static_cast<T>(total)), tape.requires_grad(logits),
                     [il, vocab, tgt = std::move(tgt), w = std::move(w)](Tape<T>& t, const BasicTensor<T>& g) {
                         const auto& lv = t.value(il);
                         auto& gl = t.grad_buffer(il);
                         const double up = static_cast<double>(g.data[0]);
                         std::vector<T> row(vocab);
                         for (std::size_t r = 0; r < tgt.size(); ++r) {
                             if (w[r] == 0.0) {
                                 continue;
                             }
                             auto src = lv.row(r);
                             std::copy(src.begin(), src.end(), row.begin());
                             detail::softmax_inplace(std::span<T>(row));
                             const double coef = up * w[r];
                             T* dst = gl.data.data() + r * vocab;
                             for (std::size_t c = 0; c < vocab; ++c) {
                                 const double onehot = static_cast<std::int32_t>(c) == tgt[r] ? 1.0 : 0.0;
                                 dst[c] += static_cast<T>(coef * (static_cast<double>(row[c]) - onehot));
                             }
                         }
                     });
}

} // namespace ad
} // namespace mdlm
