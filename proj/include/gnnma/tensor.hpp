// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double tensors with reverse-mode automatic differentiation.
// Ops compute eagerly; when a GradientTape is supplied and any input is
// grad-tracked, a backward closure is recorded. Tensors are immutable once
// produced by an op; the tape is single-writer.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "gnnma/common.hpp"
#include "gnnma/rng.hpp"

namespace gnnma {

namespace detail {
inline uint64_t next_tensor_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
} // namespace detail

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(checked_size(shape_), fill) {}

    Tensor(std::vector<int> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_size(shape_) != static_cast<int64_t>(data_.size())) {
            throw ValidationError("tensor data length does not match shape");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    /// A trainable leaf: grad-tracked with a fresh identity.
    static Tensor param(std::vector<int> shape, std::vector<double> data) {
        Tensor t(std::move(shape), std::move(data));
        t.requires_grad_ = true;
        t.id_ = detail::next_tensor_id();
        return t;
    }

    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rows() const { return shape_.at(0); }
    int cols() const { return shape_.at(1); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }

    const std::vector<double>& data() const { return data_; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// Direct write access for optimizer updates on leaves. Must not be called
    /// on a tensor referenced by a live tape.
    std::vector<double>& mutable_data() { return data_; }

    bool requires_grad() const { return requires_grad_; }
    uint64_t id() const { return id_; }

    bool is_scalar() const { return data_.size() == 1; }
    double item() const {
        if (!is_scalar()) throw ValidationError("item() on non-scalar tensor");
        return data_[0];
    }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    static int64_t checked_size(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ValidationError("negative tensor dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    uint64_t id_ = 0;

    friend class GradientTape;
};

// Records the forward computation and replays it in exact reverse order on
// backward(). Gradients accumulate in a map keyed by tensor identity and
// always match the shape of the tensor they belong to.
class GradientTape {
public:
    using BackwardFn = std::function<void(const Tensor& out_grad, GradientTape& tape)>;

    /// Marks `out` as grad-tracked (fresh identity) and records its backward rule.
    void record(Tensor& out, BackwardFn fn) {
        if (consumed_) throw ValidationError("gradient tape already consumed");
        out.requires_grad_ = true;
        out.id_ = detail::next_tensor_id();
        records_.push_back(Record{out.id_, std::move(fn)});
    }

    void accumulate(const Tensor& target, std::vector<double> grad) {
        if (grad.size() != static_cast<size_t>(target.size())) {
            throw ValidationError("gradient shape does not match tensor shape");
        }
        auto it = grads_.find(target.id());
        if (it == grads_.end()) {
            grads_.emplace(target.id(), Tensor(target.shape(), std::move(grad)));
        } else {
            auto& acc = it->second.mutable_data();
            for (size_t i = 0; i < grad.size(); ++i) acc[i] += grad[i];
        }
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    void backward(const Tensor& loss) {
        if (consumed_) throw ValidationError("gradient tape already consumed");
        if (!loss.is_scalar()) throw ValidationError("backward() requires a scalar loss");
        consumed_ = true;
        if (loss.id() != 0) {
            grads_.emplace(loss.id(), Tensor(loss.shape(), std::vector<double>(loss.data().size(), 1.0)));
        }
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            auto g = grads_.find(it->out_id);
            if (g == grads_.end()) continue; // did not influence the loss
            Tensor out_grad = g->second;     // copy: fn may rehash the map
            it->fn(out_grad, *this);
        }
        records_.clear();
    }

    const Tensor* grad(const Tensor& t) const {
        auto it = grads_.find(t.id());
        return it == grads_.end() ? nullptr : &it->second;
    }

    bool consumed() const { return consumed_; }

private:
    struct Record {
        uint64_t out_id;
        BackwardFn fn;
    };
    std::vector<Record> records_;
    std::unordered_map<uint64_t, Tensor> grads_;
    bool consumed_ = false;
};

namespace detail {

inline bool tracked(const Tensor& t) { return t.requires_grad(); }

inline void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2) throw ValidationError(std::string(who) + ": rank-2 tensor required");
}

inline std::string shape_str(const Tensor& t) {
    std::ostringstream os;
    os << "[";
    for (int i = 0; i < t.rank(); ++i) os << (i ? "x" : "") << t.dim(i);
    os << "]";
    return os.str();
}

// C[m x n] = A[m x k] * B[k x n], i-k-j order.
inline std::vector<double> matmul_nn(const double* a, int m, int k, const double* b, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        double* crow = c.data() + static_cast<size_t>(i) * n;
        const double* arow = a + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C[m x k] = A[m x n] * B[k x n]^T.
inline std::vector<double> matmul_nt(const double* a, int m, int n, const double* b, int k) {
    std::vector<double> c(static_cast<size_t>(m) * k, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * n;
        double* crow = c.data() + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* brow = b + static_cast<size_t>(p) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += arow[j] * brow[j];
            crow[p] = acc;
        }
    }
    return c;
}

// C[k x n] = A[m x k]^T * B[m x n].
inline std::vector<double> matmul_tn(const double* a, int m, int k, const double* b, int n) {
    std::vector<double> c(static_cast<size_t>(k) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* crow = c.data() + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    if (!a.same_shape(b)) throw ValidationError("add: shape mismatch");
    std::vector<double> out(a.data());
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] += b[i];
    Tensor r(a.shape(), std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(b))) {
        Tensor ac = a, bc = b;
        tape->record(r, [ac, bc](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) t.accumulate(ac, g.data());
            if (bc.requires_grad()) t.accumulate(bc, g.data());
        });
    }
    return r;
}

inline Tensor sub(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    if (!a.same_shape(b)) throw ValidationError("sub: shape mismatch");
    std::vector<double> out(a.data());
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] -= b[i];
    Tensor r(a.shape(), std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(b))) {
        Tensor ac = a, bc = b;
        tape->record(r, [ac, bc](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) t.accumulate(ac, g.data());
            if (bc.requires_grad()) {
                std::vector<double> gb(g.data());
                for (auto& v : gb) v = -v;
                t.accumulate(bc, std::move(gb));
            }
        });
    }
    return r;
}

inline Tensor mul(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    if (!a.same_shape(b)) throw ValidationError("mul: shape mismatch");
    std::vector<double> out(a.data());
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] *= b[i];
    Tensor r(a.shape(), std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(b))) {
        Tensor ac = a, bc = b;
        tape->record(r, [ac, bc](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) {
                std::vector<double> ga(g.data());
                for (int64_t i = 0; i < bc.size(); ++i) ga[static_cast<size_t>(i)] *= bc[i];
                t.accumulate(ac, std::move(ga));
            }
            if (bc.requires_grad()) {
                std::vector<double> gb(g.data());
                for (int64_t i = 0; i < ac.size(); ++i) gb[static_cast<size_t>(i)] *= ac[i];
                t.accumulate(bc, std::move(gb));
            }
        });
    }
    return r;
}

inline Tensor divide(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    if (!a.same_shape(b)) throw ValidationError("divide: shape mismatch");
    std::vector<double> out(a.data());
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] /= b[i];
    Tensor r(a.shape(), std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(b))) {
        Tensor ac = a, bc = b;
        tape->record(r, [ac, bc](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) {
                std::vector<double> ga(g.data());
                for (int64_t i = 0; i < bc.size(); ++i) ga[static_cast<size_t>(i)] /= bc[i];
                t.accumulate(ac, std::move(ga));
            }
            if (bc.requires_grad()) {
                std::vector<double> gb(g.data());
                for (int64_t i = 0; i < bc.size(); ++i) {
                    double bi = bc[i];
                    gb[static_cast<size_t>(i)] *= -ac[i] / (bi * bi);
                }
                t.accumulate(bc, std::move(gb));
            }
        });
    }
    return r;
}

inline Tensor scale(const Tensor& a, double c, GradientTape* tape = nullptr) {
    std::vector<double> out(a.data());
    for (auto& v : out) v *= c;
    Tensor r(a.shape(), std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac, c](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(g.data());
            for (auto& v : ga) v *= c;
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

inline Tensor relu(const Tensor& a, GradientTape* tape = nullptr) {
    std::vector<double> out(a.data());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    Tensor r(a.shape(), std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(g.data());
            for (int64_t i = 0; i < ac.size(); ++i) {
                // subgradient at exactly 0 is 0
                if (!(ac[i] > 0.0)) ga[static_cast<size_t>(i)] = 0.0;
            }
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

inline Tensor sigmoid(const Tensor& a, GradientTape* tape = nullptr) {
    std::vector<double> out(a.data());
    for (auto& v : out) v = 1.0 / (1.0 + std::exp(-v));
    Tensor r(a.shape(), std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a, rc = r;
        tape->record(r, [ac, rc](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(g.data());
            for (int64_t i = 0; i < rc.size(); ++i) {
                double y = rc[i];
                ga[static_cast<size_t>(i)] *= y * (1.0 - y);
            }
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

inline Tensor exp_op(const Tensor& a, GradientTape* tape = nullptr) {
    std::vector<double> out(a.data());
    for (auto& v : out) v = std::exp(v);
    Tensor r(a.shape(), std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a, rc = r;
        tape->record(r, [ac, rc](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(g.data());
            for (int64_t i = 0; i < rc.size(); ++i) ga[static_cast<size_t>(i)] *= rc[i];
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

inline Tensor reshape(const Tensor& a, std::vector<int> shape, GradientTape* tape = nullptr) {
    Tensor r(std::move(shape), a.data());
    if (r.size() != a.size()) throw ValidationError("reshape: element count mismatch");
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac](const Tensor& g, GradientTape& t) {
            t.accumulate(ac, g.data());
        });
    }
    return r;
}

inline Tensor sum(const Tensor& a, GradientTape* tape = nullptr) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    Tensor r = Tensor::scalar(s);
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac](const Tensor& g, GradientTape& t) {
            t.accumulate(ac, std::vector<double>(static_cast<size_t>(ac.size()), g[0]));
        });
    }
    return r;
}

inline Tensor mean(const Tensor& a, GradientTape* tape = nullptr) {
    if (a.size() == 0) throw ValidationError("mean of empty tensor");
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0) / static_cast<double>(a.size());
    Tensor r = Tensor::scalar(s);
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac](const Tensor& g, GradientTape& t) {
            double gv = g[0] / static_cast<double>(ac.size());
            t.accumulate(ac, std::vector<double>(static_cast<size_t>(ac.size()), gv));
        });
    }
    return r;
}

/// Row sums of a rank-2 tensor: [r x c] -> [r x 1].
inline Tensor row_sum(const Tensor& a, GradientTape* tape = nullptr) {
    detail::require_rank2(a, "row_sum");
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(static_cast<size_t>(r), 0.0);
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += a[static_cast<int64_t>(i) * c + j];
        out[static_cast<size_t>(i)] = acc;
    }
    Tensor res({r, 1}, std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(res, [ac, r, c](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(static_cast<size_t>(r) * c);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] = g[i];
            t.accumulate(ac, std::move(ga));
        });
    }
    return res;
}

/// Broadcast add of a rank-1 bias [c] onto every row of [r x c].
inline Tensor add_row_bias(const Tensor& a, const Tensor& bias, GradientTape* tape = nullptr) {
    detail::require_rank2(a, "add_row_bias");
    if (bias.rank() != 1 || bias.dim(0) != a.cols()) {
        throw ValidationError("add_row_bias: bias width mismatch");
    }
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] += bias[j];
    Tensor res({r, c}, std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(bias))) {
        Tensor ac = a, bc = bias;
        tape->record(res, [ac, bc, r, c](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) t.accumulate(ac, g.data());
            if (bc.requires_grad()) {
                std::vector<double> gb(static_cast<size_t>(c), 0.0);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += g[static_cast<int64_t>(i) * c + j];
                t.accumulate(bc, std::move(gb));
            }
        });
    }
    return res;
}

/// Multiply each row of [r x c] by the matching entry of a column [r x 1].
inline Tensor mul_colvec(const Tensor& a, const Tensor& v, GradientTape* tape = nullptr) {
    detail::require_rank2(a, "mul_colvec");
    if (v.rank() != 2 || v.cols() != 1 || v.rows() != a.rows()) {
        throw ValidationError("mul_colvec: column vector shape mismatch");
    }
    const int r = a.rows(), c = a.cols();
    std::vector<double> out(a.data());
    for (int i = 0; i < r; ++i) {
        double s = v[i];
        for (int j = 0; j < c; ++j) out[static_cast<size_t>(i) * c + j] *= s;
    }
    Tensor res({r, c}, std::move(out));
    if (tape && (detail::tracked(a) || detail::tracked(v))) {
        Tensor ac = a, vc = v;
        tape->record(res, [ac, vc, r, c](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) {
                std::vector<double> ga(g.data());
                for (int i = 0; i < r; ++i) {
                    double s = vc[i];
                    for (int j = 0; j < c; ++j) ga[static_cast<size_t>(i) * c + j] *= s;
                }
                t.accumulate(ac, std::move(ga));
            }
            if (vc.requires_grad()) {
                std::vector<double> gv(static_cast<size_t>(r), 0.0);
                for (int i = 0; i < r; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < c; ++j)
                        acc += g[static_cast<int64_t>(i) * c + j] * ac[static_cast<int64_t>(i) * c + j];
                    gv[static_cast<size_t>(i)] = acc;
                }
                t.accumulate(vc, std::move(gv));
            }
        });
    }
    return res;
}

inline Tensor matmul(const Tensor& a, const Tensor& b, GradientTape* tape = nullptr) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows()) {
        throw ValidationError("matmul: inner dimensions differ " + detail::shape_str(a) + " * " +
                              detail::shape_str(b));
    }
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor r({m, n}, detail::matmul_nn(a.data().data(), m, k, b.data().data(), n));
    if (tape && (detail::tracked(a) || detail::tracked(b))) {
        Tensor ac = a, bc = b;
        tape->record(r, [ac, bc, m, k, n](const Tensor& g, GradientTape& t) {
            if (ac.requires_grad()) {
                t.accumulate(ac, detail::matmul_nt(g.data().data(), m, n, bc.data().data(), k));
            }
            if (bc.requires_grad()) {
                t.accumulate(bc, detail::matmul_tn(ac.data().data(), m, k, g.data().data(), n));
            }
        });
    }
    return r;
}

/// Gather rows of [n x c] by index: result row i = a[idx[i]].
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx, GradientTape* tape = nullptr) {
    detail::require_rank2(a, "gather_rows");
    const int n = a.rows(), c = a.cols();
    const int m = static_cast<int>(idx.size());
    std::vector<double> out(static_cast<size_t>(m) * c);
    for (int i = 0; i < m; ++i) {
        int src = idx[static_cast<size_t>(i)];
        if (src < 0 || src >= n) throw ValidationError("gather_rows: index out of range");
        std::copy_n(a.data().begin() + static_cast<int64_t>(src) * c, c,
                    out.begin() + static_cast<int64_t>(i) * c);
    }
    Tensor r({m, c}, std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac, idx, n, c, m](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(static_cast<size_t>(n) * c, 0.0);
            for (int i = 0; i < m; ++i) {
                int dst = idx[static_cast<size_t>(i)];
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(dst) * c + j] += g[static_cast<int64_t>(i) * c + j];
            }
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

/// Sum rows of [m x c] into `num_segments` buckets given by seg: out[seg[i]] += a[i].
inline Tensor segment_sum(const Tensor& a, const std::vector<int>& seg, int num_segments,
                          GradientTape* tape = nullptr) {
    detail::require_rank2(a, "segment_sum");
    const int m = a.rows(), c = a.cols();
    if (static_cast<int>(seg.size()) != m) throw ValidationError("segment_sum: segment ids length mismatch");
    std::vector<double> out(static_cast<size_t>(num_segments) * c, 0.0);
    for (int i = 0; i < m; ++i) {
        int s = seg[static_cast<size_t>(i)];
        if (s < 0 || s >= num_segments) throw ValidationError("segment_sum: segment id out of range");
        for (int j = 0; j < c; ++j)
            out[static_cast<size_t>(s) * c + j] += a[static_cast<int64_t>(i) * c + j];
    }
    Tensor r({num_segments, c}, std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac, seg, c, m](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(static_cast<size_t>(m) * c);
            for (int i = 0; i < m; ++i) {
                int s = seg[static_cast<size_t>(i)];
                for (int j = 0; j < c; ++j)
                    ga[static_cast<size_t>(i) * c + j] = g[static_cast<int64_t>(s) * c + j];
            }
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

/// Concatenate rank-2 tensors with equal row counts along columns.
inline Tensor concat_cols(const std::vector<Tensor>& parts, GradientTape* tape = nullptr) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    const int r = parts[0].rows();
    int total = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != r) throw ValidationError("concat_cols: row count mismatch");
        total += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(r) * total);
    int off = 0;
    for (const auto& p : parts) {
        const int c = p.cols();
        for (int i = 0; i < r; ++i)
            std::copy_n(p.data().begin() + static_cast<int64_t>(i) * c, c,
                        out.begin() + static_cast<int64_t>(i) * total + off);
        off += c;
    }
    Tensor res({r, total}, std::move(out));
    bool any = false;
    for (const auto& p : parts) any = any || detail::tracked(p);
    if (tape && any) {
        std::vector<Tensor> copies = parts;
        tape->record(res, [copies, r, total](const Tensor& g, GradientTape& t) {
            int off2 = 0;
            for (const auto& p : copies) {
                const int c = p.cols();
                if (p.requires_grad()) {
                    std::vector<double> gp(static_cast<size_t>(r) * c);
                    for (int i = 0; i < r; ++i)
                        std::copy_n(g.data().begin() + static_cast<int64_t>(i) * total + off2, c,
                                    gp.begin() + static_cast<int64_t>(i) * c);
                    t.accumulate(p, std::move(gp));
                }
                off2 += c;
            }
        });
    }
    return res;
}

/// Inverted dropout with a fixed 0/1 mask (mask is not grad-tracked).
inline Tensor dropout_mask(const Tensor& a, const std::vector<double>& mask, double keep_prob,
                           GradientTape* tape = nullptr) {
    if (static_cast<int64_t>(mask.size()) != a.size()) throw ValidationError("dropout_mask: mask size mismatch");
    if (keep_prob <= 0.0 || keep_prob > 1.0) throw ValidationError("dropout_mask: keep_prob out of range");
    std::vector<double> out(a.data());
    const double inv = 1.0 / keep_prob;
    for (int64_t i = 0; i < a.size(); ++i) out[static_cast<size_t>(i)] *= mask[static_cast<size_t>(i)] * inv;
    Tensor r(a.shape(), std::move(out));
    if (tape && detail::tracked(a)) {
        Tensor ac = a;
        tape->record(r, [ac, mask, inv](const Tensor& g, GradientTape& t) {
            std::vector<double> ga(g.data());
            for (size_t i = 0; i < ga.size(); ++i) ga[i] *= mask[i] * inv;
            t.accumulate(ac, std::move(ga));
        });
    }
    return r;
}

// ---------------------------------------------------------------------------
// Attention / normalization kernels
// ---------------------------------------------------------------------------

/// Row-wise softmax over unmasked entries with max-subtraction. Masked entries
/// are exactly 0 in the output. A row with no unmasked entry is an error unless
/// allow_degenerate is set, in which case the row is all-zero and its index is
/// appended to degenerate_rows (if provided).
inline Tensor masked_softmax(const Tensor& scores, const std::vector<uint8_t>& mask,
                             GradientTape* tape = nullptr, bool allow_degenerate = false,
                             std::vector<int>* degenerate_rows = nullptr) {
    detail::require_rank2(scores, "masked_softmax");
    const int r = scores.rows(), c = scores.cols();
    if (static_cast<int64_t>(mask.size()) != scores.size()) {
        throw ValidationError("masked_softmax: mask shape mismatch");
    }
    std::vector<double> out(static_cast<size_t>(r) * c, 0.0);
    for (int i = 0; i < r; ++i) {
        const double* srow = scores.data().data() + static_cast<int64_t>(i) * c;
        const uint8_t* mrow = mask.data() + static_cast<int64_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            if (mrow[j]) mx = std::max(mx, srow[j]);
        if (!std::isfinite(mx)) {
            if (!allow_degenerate)
                throw ValidationError("masked_softmax: fully masked row " + std::to_string(i));
            if (degenerate_rows) degenerate_rows->push_back(i);
            continue; // all-zero row
        }
        double z = 0.0;
        double* orow = out.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            if (mrow[j]) {
                orow[j] = std::exp(srow[j] - mx);
                z += orow[j];
            }
        }
        for (int j = 0; j < c; ++j)
            if (mrow[j]) orow[j] /= z;
    }
    Tensor res({r, c}, std::move(out));
    if (tape && detail::tracked(scores)) {
        Tensor sc = scores, yc = res;
        tape->record(res, [sc, yc, r, c](const Tensor& g, GradientTape& t) {
            std::vector<double> gs(static_cast<size_t>(r) * c, 0.0);
            for (int i = 0; i < r; ++i) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j)
                    dot += g[static_cast<int64_t>(i) * c + j] * yc[static_cast<int64_t>(i) * c + j];
                for (int j = 0; j < c; ++j) {
                    double y = yc[static_cast<int64_t>(i) * c + j];
                    gs[static_cast<size_t>(i) * c + j] = y * (g[static_cast<int64_t>(i) * c + j] - dot);
                }
            }
            t.accumulate(sc, std::move(gs));
        });
    }
    return res;
}

/// Per-row standardization of [r x d] followed by an elementwise affine:
/// y = scale * (x - mean) / sqrt(var + eps) + shift. Variance is biased (/d).
inline Tensor layer_norm(const Tensor& x, const Tensor& scl, const Tensor& shift, double eps,
                         GradientTape* tape = nullptr) {
    detail::require_rank2(x, "layer_norm");
    const int r = x.rows(), d = x.cols();
    if (d < 1) throw ValidationError("layer_norm: zero-width rows");
    if (scl.rank() != 1 || scl.dim(0) != d || shift.rank() != 1 || shift.dim(0) != d) {
        throw ValidationError("layer_norm: affine parameter width mismatch");
    }
    std::vector<double> xhat(static_cast<size_t>(r) * d);
    std::vector<double> inv_std(static_cast<size_t>(r));
    std::vector<double> out(static_cast<size_t>(r) * d);
    for (int i = 0; i < r; ++i) {
        const double* row = x.data().data() + static_cast<int64_t>(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += row[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            double dv = row[j] - mu;
            var += dv * dv;
        }
        var /= d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            double xh = (row[j] - mu) * is;
            xhat[static_cast<size_t>(i) * d + j] = xh;
            out[static_cast<size_t>(i) * d + j] = scl[j] * xh + shift[j];
        }
    }
    Tensor res({r, d}, std::move(out));
    if (tape && (detail::tracked(x) || detail::tracked(scl) || detail::tracked(shift))) {
        Tensor xc = x, sc = scl, bc = shift;
        tape->record(res, [xc, sc, bc, xhat, inv_std, r, d](const Tensor& g, GradientTape& t) {
            if (bc.requires_grad()) {
                std::vector<double> gb(static_cast<size_t>(d), 0.0);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += g[static_cast<int64_t>(i) * d + j];
                t.accumulate(bc, std::move(gb));
            }
            if (sc.requires_grad()) {
                std::vector<double> gs(static_cast<size_t>(d), 0.0);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < d; ++j)
                        gs[static_cast<size_t>(j)] +=
                            g[static_cast<int64_t>(i) * d + j] * xhat[static_cast<size_t>(i) * d + j];
                t.accumulate(sc, std::move(gs));
            }
            if (xc.requires_grad()) {
                std::vector<double> gx(static_cast<size_t>(r) * d);
                for (int i = 0; i < r; ++i) {
                    double mean_gy = 0.0, mean_gy_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double gy = g[static_cast<int64_t>(i) * d + j] * sc[j];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[static_cast<size_t>(i) * d + j];
                    }
                    mean_gy /= d;
                    mean_gy_xhat /= d;
                    for (int j = 0; j < d; ++j) {
                        double gy = g[static_cast<int64_t>(i) * d + j] * sc[j];
                        gx[static_cast<size_t>(i) * d + j] =
                            inv_std[static_cast<size_t>(i)] *
                            (gy - mean_gy - xhat[static_cast<size_t>(i) * d + j] * mean_gy_xhat);
                    }
                }
                t.accumulate(xc, std::move(gx));
            }
        });
    }
    return res;
}

// ---------------------------------------------------------------------------
// Initialization and the finite-difference oracle
// ---------------------------------------------------------------------------

/// Uniform Xavier/Glorot init on [-b, b], b = sqrt(6 / (fan_in + fan_out)).
inline Tensor xavier_init(int fan_in, int fan_out, Rng& rng) {
    if (fan_in < 1 || fan_out < 1) throw ValidationError("xavier_init: fan values must be >= 1");
    double b = std::sqrt(6.0 / (fan_in + fan_out));
    std::vector<double> data(static_cast<size_t>(fan_in) * fan_out);
    for (auto& v : data) v = rng.uniform(-b, b);
    return Tensor({fan_in, fan_out}, std::move(data));
}

/// Central finite differences of a scalar function, one coordinate at a time.
inline Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                         const Tensor& point, double eps) {
    if (eps <= 0.0) throw ValidationError("finite_difference_gradient: eps must be positive");
    std::vector<double> g(static_cast<size_t>(point.size()));
    std::vector<double> work(point.data());
    for (int64_t i = 0; i < point.size(); ++i) {
        double orig = work[static_cast<size_t>(i)];
        work[static_cast<size_t>(i)] = orig + eps;
        double fp = f(Tensor(point.shape(), work));
        work[static_cast<size_t>(i)] = orig - eps;
        double fm = f(Tensor(point.shape(), work));
        work[static_cast<size_t>(i)] = orig;
        g[static_cast<size_t>(i)] = (fp - fm) / (2.0 * eps);
    }
    return Tensor(point.shape(), std::move(g));
}

} // namespace gnnma
