#pragma once

// Dense row-major tensors in double precision and a dynamically recorded
// reverse-mode tape. Every layer of the attention models is expressed with the
// ops in this header; see layers.hpp for the assembled blocks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kneeattn/error.hpp"

namespace kneeattn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        check_extents();
        data_.assign(shape_size(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        require(shape_size(shape_) == data_.size(),
                "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                    shape_str(shape_));
    }

    /// Row-major 2-D literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        std::vector<double> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            require(row.size() == cols, "ragged matrix literal");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor({rows.size(), cols}, std::move(data));
    }

    static Tensor row(std::vector<double> values) {
        std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rows() const { return rank() >= 1 ? shape_[0] : 1; }
    std::size_t cols() const { return rank() >= 2 ? shape_[1] : 1; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double item() const {
        require(data_.size() == 1, "item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        require(shape_size(shape) == data_.size(),
                "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void check_extents() const {
        for (std::size_t e : shape_) require(e > 0, "tensor extents must be positive, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

class Tape;

/// Handle to a node recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Tensor& value() const;
    const Tensor& grad() const;
    const Shape& shape() const { return value().shape(); }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = true) {
        nodes_.push_back(Node{std::move(value), Tensor{}, {}, nullptr, requires_grad});
        return {this, nodes_.size() - 1};
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records an op output. The node needs a gradient iff any parent does.
    Var record(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
        bool needs = false;
        for (std::size_t p : parents) needs = needs || nodes_.at(p).requires_grad;
        nodes_.push_back(Node{std::move(value), Tensor{}, std::move(parents),
                              needs ? std::move(backward) : nullptr, needs});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    const Tensor& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        ensure_grad(n);
        return n.grad;
    }

    /// Mutable gradient buffer of a parent; used by backward rules.
    Tensor& grad_mut(std::size_t id) {
        Node& n = nodes_.at(id);
        ensure_grad(n);
        return n.grad;
    }

    void zero_grad() {
        for (Node& n : nodes_)
            if (n.grad.size()) n.grad.fill(0.0);
    }

    /// Seeds d loss / d loss = 1 and runs every recorded rule once, newest
    /// first. Node ids are assigned in creation order, so that is a reverse
    /// topological order. Leaf gradients accumulate across calls; interior
    /// buffers are reset first.
    void backward(Var loss) {
        require(loss.valid() && &loss.tape() == this, "backward: loss is not on this tape");
        require(value(loss.id()).size() == 1,
                "backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
        for (Node& n : nodes_)
            if (n.backward && n.grad.size()) n.grad.fill(0.0);
        grad_mut(loss.id())[0] += 1.0;
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.size() == 0) continue;
            n.backward(*this, i);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    static void ensure_grad(Node& n) {
        if (n.grad.size() == 0) n.grad = Tensor(n.value.shape(), 0.0);
    }

    std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

namespace detail {

inline void same_tape(const Var& a, const Var& b) {
    require(a.valid() && b.valid() && &a.tape() == &b.tape(), "operands live on different tapes");
}

inline void require_matrix(const Tensor& t, const char* op) {
    require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

// c[m×n] += a[m×k] · b[k×n] with optional transposes of a and b.
inline void gemm_acc(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c) {
    std::size_t m = ta ? a.cols() : a.rows();
    std::size_t k = ta ? a.rows() : a.cols();
    std::size_t n = tb ? b.rows() : b.cols();
    const std::size_t as = a.cols(), bs = b.cols();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            double av = ta ? a[p * as + i] : a[i * as + p];
            if (av == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * (tb ? b[j * bs + p] : b[p * bs + j]);
        }
    }
}

inline void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(Var a, Var b) {
    detail::same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix(av, "matmul");
    detail::require_matrix(bv, "matmul");
    require(av.cols() == bv.rows(),
            "matmul: inner extents differ " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    Tensor out({av.rows(), bv.cols()});
    detail::gemm_acc(av, false, bv, false, out);
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) detail::gemm_acc(g, false, t.value(ib), true, t.grad_mut(ia));
        if (t.requires_grad(ib)) detail::gemm_acc(t.value(ia), true, g, false, t.grad_mut(ib));
    });
}

inline Var transpose(Var x) {
    const Tensor& v = x.value();
    detail::require_matrix(v, "transpose");
    std::size_t r = v.rows(), c = v.cols();
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(j, i) = v(i, j);
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, r, c](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
    });
}

inline Var reshape(Var x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix](Tape& t, std::size_t self) {
        detail::accumulate(t.grad_mut(ix), t.grad(self));
    });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <class Fwd, class Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
    const Tensor& v = x.value();
    Tensor out(v.shape());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = fwd(v[i]);
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, deriv](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        const Tensor& xv = t.value(ix);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xv[i], y[i]);
    });
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
    same_tape(a, b);
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
}

}  // namespace detail

inline Var tanh(Var x) {
    return detail::unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
    return detail::unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

inline Var sqrt(Var x) {
    return detail::unary(
        x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

inline Var square(Var x) {
    return detail::unary(
        x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// a * x + b elementwise.
inline Var affine(Var x, double a, double b = 0.0) {
    return detail::unary(
        x, [a, b](double v) { return a * v + b; }, [a](double, double) { return a; });
}

inline Var scale(Var x, double s) { return affine(x, s, 0.0); }

inline Var add(Var a, Var b) {
    detail::same_shape(a, b, "add");
    Tensor out = a.value();
    detail::accumulate(out, b.value());
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) detail::accumulate(t.grad_mut(ia), g);
        if (t.requires_grad(ib)) detail::accumulate(t.grad_mut(ib), g);
    });
}

inline Var sub(Var a, Var b) {
    detail::same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) detail::accumulate(t.grad_mut(ia), g);
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_mut(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

/// Hadamard product.
inline Var mul(Var a, Var b) {
    detail::same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    std::size_t ia = a.id(), ib = b.id();
    return a.tape().record(std::move(out), {ia, ib}, [ia, ib](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) {
            Tensor& ga = t.grad_mut(ia);
            const Tensor& bv = t.value(ib);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_mut(ib);
            const Tensor& av = t.value(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

/// x[m×n] + bias[1×n], bias broadcast over rows.
inline Var add_row_bias(Var x, Var bias) {
    detail::same_tape(x, bias);
    const Tensor& xv = x.value();
    detail::require_matrix(xv, "add_row_bias");
    require(bias.value().size() == xv.cols(), "add_row_bias: bias length must equal column count");
    Tensor out = xv;
    std::size_t m = xv.rows(), n = xv.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += bias.value()[j];
    std::size_t ix = x.id(), ib = bias.id();
    return x.tape().record(std::move(out), {ix, ib}, [ix, ib, m, n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ix)) detail::accumulate(t.grad_mut(ix), g);
        if (t.requires_grad(ib)) {
            Tensor& gb = t.grad_mut(ib);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and restructuring

inline Var sum(Var x) {
    const Tensor& v = x.value();
    double s = 0.0;
    for (double e : v.data()) s += e;
    std::size_t ix = x.id();
    return x.tape().record(Tensor::scalar(s), {ix}, [ix](Tape& t, std::size_t self) {
        double g = t.grad(self)[0];
        for (double& e : t.grad_mut(ix).data()) e += g;
    });
}

inline Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

inline Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols: no operands");
    std::size_t m = parts.front().value().rows();
    std::size_t total = 0;
    std::vector<std::size_t> ids, widths;
    for (const Var& p : parts) {
        detail::same_tape(parts.front(), p);
        detail::require_matrix(p.value(), "concat_cols");
        require(p.value().rows() == m, "concat_cols: row counts differ");
        ids.push_back(p.id());
        widths.push_back(p.value().cols());
        total += p.value().cols();
    }
    Tensor out({m, total});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < v.cols(); ++j) out(i, off + j) = v(i, j);
        off += v.cols();
    }
    return parts.front().tape().record(std::move(out), ids, [ids, widths, m, total](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                Tensor& gp = t.grad_mut(ids[k]);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += g[i * total + off + j];
            }
            off += widths[k];
        }
    });
}

/// Columns [begin, begin+count) of a matrix.
inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& v = x.value();
    detail::require_matrix(v, "slice_cols");
    require(count > 0 && begin + count <= v.cols(), "slice_cols: range out of bounds");
    std::size_t m = v.rows(), n = v.cols();
    Tensor out({m, count});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = v(i, begin + j);
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, m, n, begin, count](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) gx[i * n + begin + j] += g[i * count + j];
    });
}

/// Picks rows by index (repeats allowed); out[r] = x[index[r]].
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
    const Tensor& v = x.value();
    detail::require_matrix(v, "gather_rows");
    require(!index.empty(), "gather_rows: empty index");
    std::size_t n = v.cols();
    Tensor out({index.size(), n});
    for (std::size_t r = 0; r < index.size(); ++r) {
        require(index[r] < v.rows(), "gather_rows: index out of range");
        for (std::size_t j = 0; j < n; ++j) out(r, j) = v(index[r], j);
    }
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, index = std::move(index), n](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t r = 0; r < index.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) gx[index[r] * n + j] += g[r * n + j];
    });
}

inline Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    std::vector<std::size_t> index(count);
    std::iota(index.begin(), index.end(), begin);
    return gather_rows(x, std::move(index));
}

// ---------------------------------------------------------------------------
// Attention building blocks

/// Row-wise softmax of x / scale, stabilised by subtracting each row's max.
inline Var softmax_rows(Var x, double scale = 1.0) {
    require(scale > 0.0, "softmax_rows: scale must be positive");
    const Tensor& v = x.value();
    detail::require_matrix(v, "softmax_rows");
    std::size_t m = v.rows(), n = v.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        double mx = v(i, 0);
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, v(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += out(i, j) = std::exp((v(i, j) - mx) / scale);
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= z;
    }
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, m, n, scale](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - dot) / scale;
        }
    });
}

/// For weights w[s×L] and stacked rows h[(s·L)×d]: out[s] = Σ_i w[s,i]·h[s·L+i].
inline Var segment_weighted_sum(Var weights, Var h) {
    detail::same_tape(weights, h);
    const Tensor& w = weights.value();
    const Tensor& hv = h.value();
    detail::require_matrix(w, "segment_weighted_sum");
    detail::require_matrix(hv, "segment_weighted_sum");
    std::size_t s = w.rows(), len = w.cols(), d = hv.cols();
    require(hv.rows() == s * len, "segment_weighted_sum: row count must equal segments*length");
    Tensor out({s, d});
    for (std::size_t k = 0; k < s; ++k)
        for (std::size_t i = 0; i < len; ++i) {
            double a = w(k, i);
            for (std::size_t j = 0; j < d; ++j) out(k, j) += a * hv(k * len + i, j);
        }
    std::size_t iw = weights.id(), ih = h.id();
    return h.tape().record(std::move(out), {iw, ih}, [iw, ih, s, len, d](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        const Tensor& wv = t.value(iw);
        const Tensor& hv = t.value(ih);
        bool gw = t.requires_grad(iw), gh = t.requires_grad(ih);
        for (std::size_t k = 0; k < s; ++k)
            for (std::size_t i = 0; i < len; ++i) {
                std::size_t row = k * len + i;
                if (gw) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < d; ++j) acc += g[k * d + j] * hv[row * d + j];
                    t.grad_mut(iw)[k * len + i] += acc;
                }
                if (gh) {
                    Tensor& ghv = t.grad_mut(ih);
                    for (std::size_t j = 0; j < d; ++j) ghv[row * d + j] += wv[k * len + i] * g[k * d + j];
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

/// Valid cross-correlation: x[c_in×L], kernels[c_out×c_in×k] -> [c_out×L'],
/// L' = floor((L-k)/stride)+1. `bias` (c_out) is optional.
inline Var conv1d(Var x, Var kernels, const Var* bias = nullptr, std::size_t stride = 1) {
    detail::same_tape(x, kernels);
    const Tensor& xv = x.value();
    const Tensor& kv = kernels.value();
    detail::require_matrix(xv, "conv1d");
    require(kv.rank() == 3, "conv1d: kernels must be c_out x c_in x k, got " + shape_str(kv.shape()));
    require(stride >= 1, "conv1d: stride must be >= 1");
    std::size_t cin = xv.rows(), len = xv.cols();
    std::size_t cout = kv.dim(0), k = kv.dim(2);
    require(kv.dim(1) == cin, "conv1d: kernel input channels " + std::to_string(kv.dim(1)) +
                                  " != input channels " + std::to_string(cin));
    require(len >= k, "conv1d: input length " + std::to_string(len) + " shorter than kernel " + std::to_string(k));
    if (bias) {
        detail::same_tape(x, *bias);
        require(bias->value().size() == cout, "conv1d: bias length must equal output channels");
    }
    std::size_t out_len = (len - k) / stride + 1;
    Tensor out({cout, out_len});
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t p = 0; p < out_len; ++p) {
            double acc = bias ? bias->value()[o] : 0.0;
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t q = 0; q < k; ++q) acc += kv[(o * cin + c) * k + q] * xv(c, p * stride + q);
            out(o, p) = acc;
        }
    std::size_t ix = x.id(), ik = kernels.id();
    std::vector<std::size_t> parents{ix, ik};
    std::size_t ib = bias ? bias->id() : ix;
    if (bias) parents.push_back(ib);
    bool has_bias = bias != nullptr;
    return x.tape().record(
        std::move(out), parents,
        [=](Tape& t, std::size_t self) {
            const Tensor& g = t.grad(self);
            const Tensor& xv = t.value(ix);
            const Tensor& kv = t.value(ik);
            bool gx = t.requires_grad(ix), gk = t.requires_grad(ik);
            for (std::size_t o = 0; o < cout; ++o)
                for (std::size_t p = 0; p < out_len; ++p) {
                    double go = g[o * out_len + p];
                    if (go == 0.0) continue;
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t q = 0; q < k; ++q) {
                            std::size_t xi = c * len + p * stride + q;
                            std::size_t ki = (o * cin + c) * k + q;
                            if (gx) t.grad_mut(ix)[xi] += go * kv[ki];
                            if (gk) t.grad_mut(ik)[ki] += go * xv[xi];
                        }
                }
            if (has_bias && t.requires_grad(ib)) {
                Tensor& gb = t.grad_mut(ib);
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t p = 0; p < out_len; ++p) gb[o] += g[o * out_len + p];
            }
        });
}

inline Var conv1d(Var x, Var kernels, std::size_t stride) { return conv1d(x, kernels, nullptr, stride); }

/// Non-overlapping window maxima along columns; trailing remainder dropped.
/// Gradient goes to the first maximal element of each window.
inline Var max_pool1d(Var x, std::size_t window) {
    require(window >= 1, "max_pool1d: window must be >= 1");
    const Tensor& v = x.value();
    detail::require_matrix(v, "max_pool1d");
    std::size_t c = v.rows(), len = v.cols(), out_len = len / window;
    require(out_len >= 1, "max_pool1d: input length " + std::to_string(len) + " shorter than window");
    Tensor out({c, out_len});
    std::vector<std::size_t> argmax(c * out_len);
    for (std::size_t r = 0; r < c; ++r)
        for (std::size_t p = 0; p < out_len; ++p) {
            std::size_t best = p * window;
            for (std::size_t q = 1; q < window; ++q)
                if (v(r, p * window + q) > v(r, best)) best = p * window + q;
            out(r, p) = v(r, best);
            argmax[r * out_len + p] = r * len + best;
        }
    std::size_t ix = x.id();
    return x.tape().record(std::move(out), {ix}, [ix, argmax = std::move(argmax)](Tape& t, std::size_t self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad_mut(ix);
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += g[i];
    });
}

// ---------------------------------------------------------------------------
// Fused GRU

struct GruWeights {
    Var input_weights;   // n_in × 3h, gate blocks [reset | update | candidate]
    Var hidden_weights;  // h × 3h
    Var input_bias;      // 1 × 3h
    Var hidden_bias;     // 1 × 3h
};

/// Runs `n_seq` independent GRU sequences of length L = rows(x)/n_seq, each
/// starting from a zero state. x is (n_seq·L)×n_in with each sequence's rows
/// contiguous; the result stacks the hidden states the same way.
///
///   r = σ(x Wx_r + bx_r + h Wh_r + bh_r)
///   z = σ(x Wx_z + bx_z + h Wh_z + bh_z)
///   n = tanh(x Wx_n + bx_n + r ∘ (h Wh_n + bh_n))
///   h ← (1 − z) ∘ n + z ∘ h
inline Var gru_sequence(Var x, const GruWeights& w, std::size_t n_seq) {
    const Tensor& xv = x.value();
    const Tensor& wx = w.input_weights.value();
    const Tensor& wh = w.hidden_weights.value();
    detail::require_matrix(xv, "gru_sequence");
    require(n_seq >= 1 && xv.rows() % n_seq == 0, "gru_sequence: rows must be a multiple of n_seq");
    std::size_t nin = xv.cols(), len = xv.rows() / n_seq;
    std::size_t h = wh.rows();
    require(wx.rank() == 2 && wx.rows() == nin && wx.cols() == 3 * h, "gru_sequence: input weights must be n_in x 3h");
    require(wh.rank() == 2 && wh.cols() == 3 * h, "gru_sequence: hidden weights must be h x 3h");
    require(w.input_bias.value().size() == 3 * h && w.hidden_bias.value().size() == 3 * h,
            "gru_sequence: biases must have 3h entries");

    std::size_t steps = n_seq * len;
    // Per-step cache for the backward rule: r, z, n, (h Wh_n + bh_n).
    std::vector<double> cache(steps * 4 * h);
    Tensor out({steps, h});
    std::vector<double> gx(3 * h), gh(3 * h), prev(h);
    const Tensor& bx = w.input_bias.value();
    const Tensor& bh = w.hidden_bias.value();
    for (std::size_t s = 0; s < n_seq; ++s) {
        std::fill(prev.begin(), prev.end(), 0.0);
        for (std::size_t t = 0; t < len; ++t) {
            std::size_t row = s * len + t;
            for (std::size_t j = 0; j < 3 * h; ++j) {
                double a = bx[j], b = bh[j];
                for (std::size_t i = 0; i < nin; ++i) a += xv(row, i) * wx(i, j);
                for (std::size_t i = 0; i < h; ++i) b += prev[i] * wh(i, j);
                gx[j] = a;
                gh[j] = b;
            }
            double* c = &cache[row * 4 * h];
            for (std::size_t j = 0; j < h; ++j) {
                double r = 1.0 / (1.0 + std::exp(-(gx[j] + gh[j])));
                double z = 1.0 / (1.0 + std::exp(-(gx[h + j] + gh[h + j])));
                double n = std::tanh(gx[2 * h + j] + r * gh[2 * h + j]);
                c[j] = r;
                c[h + j] = z;
                c[2 * h + j] = n;
                c[3 * h + j] = gh[2 * h + j];
                out(row, j) = (1.0 - z) * n + z * prev[j];
            }
            for (std::size_t j = 0; j < h; ++j) prev[j] = out(row, j);
        }
    }

    std::size_t ix = x.id(), iwx = w.input_weights.id(), iwh = w.hidden_weights.id();
    std::size_t ibx = w.input_bias.id(), ibh = w.hidden_bias.id();
    return x.tape().record(
        std::move(out), {ix, iwx, iwh, ibx, ibh},
        [=, cache = std::move(cache)](Tape& t, std::size_t self) {
            const Tensor& g = t.grad(self);
            const Tensor& hs = t.value(self);
            const Tensor& xv = t.value(ix);
            const Tensor& wx = t.value(iwx);
            const Tensor& wh = t.value(iwh);
            bool need_x = t.requires_grad(ix), need_wx = t.requires_grad(iwx), need_wh = t.requires_grad(iwh);
            bool need_bx = t.requires_grad(ibx), need_bh = t.requires_grad(ibh);
            std::vector<double> dh(h), carry(h), dgx(3 * h), dgh(3 * h);
            for (std::size_t s = 0; s < n_seq; ++s) {
                std::fill(carry.begin(), carry.end(), 0.0);
                for (std::size_t t_ = len; t_-- > 0;) {
                    std::size_t row = s * len + t_;
                    const double* c = &cache[row * 4 * h];
                    for (std::size_t j = 0; j < h; ++j) dh[j] = g[row * h + j] + carry[j];
                    for (std::size_t j = 0; j < h; ++j) {
                        double r = c[j], z = c[h + j], n = c[2 * h + j], ghn = c[3 * h + j];
                        double hp = t_ ? hs[(row - 1) * h + j] : 0.0;
                        double dn = dh[j] * (1.0 - z);
                        double dz = dh[j] * (hp - n);
                        double dan = dn * (1.0 - n * n);
                        double dr = dan * ghn;
                        dgx[j] = dgh[j] = dr * r * (1.0 - r);
                        dgx[h + j] = dgh[h + j] = dz * z * (1.0 - z);
                        dgx[2 * h + j] = dan;
                        dgh[2 * h + j] = dan * r;
                        carry[j] = dh[j] * z;
                    }
                    for (std::size_t i = 0; i < h; ++i) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < 3 * h; ++j) acc += dgh[j] * wh(i, j);
                        carry[i] += acc;
                    }
                    if (need_x) {
                        Tensor& gxv = t.grad_mut(ix);
                        for (std::size_t i = 0; i < nin; ++i) {
                            double acc = 0.0;
                            for (std::size_t j = 0; j < 3 * h; ++j) acc += dgx[j] * wx(i, j);
                            gxv[row * nin + i] += acc;
                        }
                    }
                    if (need_wx) {
                        Tensor& gw = t.grad_mut(iwx);
                        for (std::size_t i = 0; i < nin; ++i) {
                            double xi = xv[row * nin + i];
                            if (xi == 0.0) continue;
                            for (std::size_t j = 0; j < 3 * h; ++j) gw[i * 3 * h + j] += xi * dgx[j];
                        }
                    }
                    if (need_wh && t_ > 0) {
                        Tensor& gw = t.grad_mut(iwh);
                        for (std::size_t i = 0; i < h; ++i) {
                            double hp = hs[(row - 1) * h + i];
                            for (std::size_t j = 0; j < 3 * h; ++j) gw[i * 3 * h + j] += hp * dgh[j];
                        }
                    }
                    if (need_bx) {
                        Tensor& gb = t.grad_mut(ibx);
                        for (std::size_t j = 0; j < 3 * h; ++j) gb[j] += dgx[j];
                    }
                    if (need_bh) {
                        Tensor& gb = t.grad_mut(ibh);
                        for (std::size_t j = 0; j < 3 * h; ++j) gb[j] += dgh[j];
                    }
                }
            }
        });
}

}  // namespace kneeattn
