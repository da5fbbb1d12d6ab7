#pragma once

// Forward ops with reverse-mode backward rules. Every op here either runs
// plain (no input on a tape) or records one node whose closure scatters
// gradients back into its inputs' buffers. No implicit broadcasting: the few
// broadcasting ops (add_rowvec, broadcast_chw) are explicit.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "ssvos/tensor.hpp"

namespace ssvos {

namespace detail {

// C[M,N] += opA(A) * opB(B). Flags mean the physical layout is transposed:
// ta -> A stored as [K,M], tb -> B stored as [N,K].
inline void mm_acc(const double* A, const double* B, double* C,
                   int M, int K, int N, bool ta, bool tb) {
    if (!ta && !tb) {
        for (int i = 0; i < M; ++i) {
            double* c = C + static_cast<int64_t>(i) * N;
            const double* a = A + static_cast<int64_t>(i) * K;
            for (int t = 0; t < K; ++t) {
                const double av = a[t];
                const double* b = B + static_cast<int64_t>(t) * N;
                for (int j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    } else if (!ta && tb) {
        for (int i = 0; i < M; ++i) {
            const double* a = A + static_cast<int64_t>(i) * K;
            double* c = C + static_cast<int64_t>(i) * N;
            for (int j = 0; j < N; ++j) {
                const double* b = B + static_cast<int64_t>(j) * K;
                double s = 0.0;
                for (int t = 0; t < K; ++t) s += a[t] * b[t];
                c[j] += s;
            }
        }
    } else if (ta && !tb) {
        for (int t = 0; t < K; ++t) {
            const double* a = A + static_cast<int64_t>(t) * M;
            const double* b = B + static_cast<int64_t>(t) * N;
            for (int i = 0; i < M; ++i) {
                const double av = a[i];
                double* c = C + static_cast<int64_t>(i) * N;
                for (int j = 0; j < N; ++j) c[j] += av * b[j];
            }
        }
    } else {
        for (int i = 0; i < M; ++i) {
            double* c = C + static_cast<int64_t>(i) * N;
            for (int j = 0; j < N; ++j) {
                const double* b = B + static_cast<int64_t>(j) * K;
                double s = 0.0;
                for (int t = 0; t < K; ++t) s += A[static_cast<int64_t>(t) * M + i] * b[t];
                c[j] += s;
            }
        }
    }
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.at(i) + b.at(i);
    if (Tape* tp = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (na >= 0) {
                double* ga = t.grad_buf(na);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (nb >= 0) {
                double* gb = t.grad_buf(nb);
                for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "sub: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.at(i) - b.at(i);
    if (Tape* tp = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (na >= 0) {
                double* ga = t.grad_buf(na);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
            }
            if (nb >= 0) {
                double* gb = t.grad_buf(nb);
                for (int64_t i = 0; i < n; ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.at(i) * b.at(i);
    if (Tape* tp = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        auto pa = a.buffer(), pb = b.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (na >= 0) {
                double* ga = t.grad_buf(na);
                for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * (*pb)[static_cast<size_t>(i)];
            }
            if (nb >= 0) {
                double* gb = t.grad_buf(nb);
                for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * (*pa)[static_cast<size_t>(i)];
            }
        });
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.at(i) * s;
    if (Tape* tp = common_tape({&a})) {
        const int na = a.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* ga = t.grad_buf(na);
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * s;
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.at(i) + s;
    if (Tape* tp = common_tape({&a})) {
        const int na = a.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* ga = t.grad_buf(na);
            for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& x) {
    Tensor out(x.shape());
    const int64_t n = x.numel();
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    for (int64_t i = 0; i < n; ++i) {
        const double v = x.at(i);
        out.ptr()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
    }
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        auto px = x.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            constexpr double inv_sqrt2pi = 0.3989422804014326779;
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) {
                const double v = (*px)[static_cast<size_t>(i)];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                gx[i] += go[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul / bmm
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                    "matmul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    detail::mm_acc(a.ptr(), b.ptr(), out.ptr(), m, k, n, false, false);
    if (Tape* tp = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        auto pa = a.buffer(), pb = b.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (na >= 0) detail::mm_acc(go, pb->data(), t.grad_buf(na), m, n, k, false, true);
            if (nb >= 0) detail::mm_acc(pa->data(), go, t.grad_buf(nb), k, m, n, true, false);
        });
    }
    return out;
}

// Batched matmul over the leading axis; ta/tb transpose each batch's matrix.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
    detail::require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0),
                    "bmm: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int bs = a.dim(0);
    const int m = ta ? a.dim(2) : a.dim(1);
    const int k = ta ? a.dim(1) : a.dim(2);
    const int kb = tb ? b.dim(2) : b.dim(1);
    const int n = tb ? b.dim(1) : b.dim(2);
    detail::require(k == kb, "bmm: inner extents " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
    Tensor out({bs, m, n});
    const int64_t sa = static_cast<int64_t>(a.dim(1)) * a.dim(2);
    const int64_t sb = static_cast<int64_t>(b.dim(1)) * b.dim(2);
    const int64_t so = static_cast<int64_t>(m) * n;
    for (int i = 0; i < bs; ++i)
        detail::mm_acc(a.ptr() + i * sa, b.ptr() + i * sb, out.ptr() + i * so, m, k, n, ta, tb);
    if (Tape* tp = common_tape({&a, &b})) {
        const int na = a.node(), nb = b.node();
        auto pa = a.buffer(), pb = b.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (na >= 0) {
                double* ga = t.grad_buf(na);
                for (int i = 0; i < bs; ++i) {
                    const double* g = go + i * so;
                    const double* B = pb->data() + i * sb;
                    double* gA = ga + i * sa;
                    if (!ta) detail::mm_acc(g, B, gA, m, n, k, false, !tb);
                    else     detail::mm_acc(B, g, gA, k, n, m, tb, true);
                }
            }
            if (nb >= 0) {
                double* gb = t.grad_buf(nb);
                for (int i = 0; i < bs; ++i) {
                    const double* g = go + i * so;
                    const double* A = pa->data() + i * sa;
                    double* gB = gb + i * sb;
                    if (!tb) detail::mm_acc(A, g, gB, k, m, n, !ta, false);
                    else     detail::mm_acc(g, A, gB, n, m, k, true, ta);
                }
            }
        });
    }
    return out;
}

inline Tensor transpose2d(const Tensor& x) {
    detail::require(x.ndim() == 2, "transpose2d: shape " + shape_str(x.shape()));
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out.ptr()[static_cast<int64_t>(j) * m + i] = x.at(static_cast<int64_t>(i) * n + j);
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < m; ++i)
                    gx[static_cast<int64_t>(i) * n + j] += go[static_cast<int64_t>(j) * m + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / layer norm / losses / reductions
// ---------------------------------------------------------------------------

// Max-subtracted softmax over the last axis.
inline Tensor softmax_lastdim(const Tensor& x) {
    detail::require(x.ndim() >= 1, "softmax_lastdim: scalar input");
    const int n = x.dim(x.ndim() - 1);
    const int64_t rows = x.numel() / n;
    Tensor out(x.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + r * n;
        double* yr = out.ptr() + r * n;
        double m = xr[0];
        for (int j = 1; j < n; ++j) m = std::max(m, xr[j]);
        double s = 0.0;
        for (int j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - m);
            s += yr[j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < n; ++j) yr[j] *= inv;
    }
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        auto py = out.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int64_t r = 0; r < rows; ++r) {
                const double* yr = py->data() + r * n;
                const double* gr = go + r * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += yr[j] * gr[j];
                double* gxr = gx + r * n;
                for (int j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Normalizes the last axis to zero mean / unit variance (epsilon 1e-5 inside
// the sqrt), then applies the affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    const int c = x.dim(x.ndim() - 1);
    detail::require(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 && beta.dim(0) == c,
                    "layer_norm: affine " + shape_str(gamma.shape()) + "/" +
                        shape_str(beta.shape()) + " vs last axis of " + shape_str(x.shape()));
    constexpr double eps = 1e-5;
    const int64_t rows = x.numel() / c;
    Tensor out(x.shape());
    std::vector<double> xhat(static_cast<size_t>(x.numel()));
    std::vector<double> inv_std(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = x.ptr() + r * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(r)] = inv;
        double* hr = xhat.data() + r * c;
        double* yr = out.ptr() + r * c;
        for (int j = 0; j < c; ++j) {
            hr[j] = (xr[j] - mean) * inv;
            yr[j] = gamma.at(j) * hr[j] + beta.at(j);
        }
    }
    if (Tape* tp = common_tape({&x, &gamma, &beta})) {
        const int nx = x.node(), ng = gamma.node(), nb = beta.node();
        auto pg = gamma.buffer();
        auto ph = std::make_shared<std::vector<double>>(std::move(xhat));
        auto pi = std::make_shared<std::vector<double>>(std::move(inv_std));
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = nx >= 0 ? t.grad_buf(nx) : nullptr;
            double* gg = ng >= 0 ? t.grad_buf(ng) : nullptr;
            double* gb = nb >= 0 ? t.grad_buf(nb) : nullptr;
            std::vector<double> h(static_cast<size_t>(c));
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = go + r * c;
                const double* hr = ph->data() + r * c;
                if (gg)
                    for (int j = 0; j < c; ++j) gg[j] += gr[j] * hr[j];
                if (gb)
                    for (int j = 0; j < c; ++j) gb[j] += gr[j];
                if (gx) {
                    double mh = 0.0, mhx = 0.0;
                    for (int j = 0; j < c; ++j) {
                        h[static_cast<size_t>(j)] = (*pg)[static_cast<size_t>(j)] * gr[j];
                        mh += h[static_cast<size_t>(j)];
                        mhx += h[static_cast<size_t>(j)] * hr[j];
                    }
                    mh /= c;
                    mhx /= c;
                    const double inv = (*pi)[static_cast<size_t>(r)];
                    double* gxr = gx + r * c;
                    for (int j = 0; j < c; ++j)
                        gxr[j] += inv * (h[static_cast<size_t>(j)] - mh - hr[j] * mhx);
                }
            }
        });
    }
    return out;
}

inline Tensor reduce_sum_all(const Tensor& x) {
    Tensor out({1});
    double s = 0.0;
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) s += x.at(i);
    out.ptr()[0] = s;
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double g = t.grad_buf(self)[0];
            double* gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

// Mean cross-entropy of rows of `logits` against integer labels.
inline Tensor nll_loss(const Tensor& logits, const std::vector<int>& labels) {
    detail::require(logits.ndim() == 2, "nll_loss: logits must be 2-d, got " +
                                            shape_str(logits.shape()));
    const int n = logits.dim(0), k = logits.dim(1);
    detail::require(static_cast<int>(labels.size()) == n, "nll_loss: label count mismatch");
    for (int lab : labels)
        if (lab < 0 || lab >= k) throw ContractError("nll_loss: label out of range");
    Tensor out({1});
    std::vector<double> lse(static_cast<size_t>(n));
    double total = 0.0;
    for (int r = 0; r < n; ++r) {
        const double* xr = logits.ptr() + static_cast<int64_t>(r) * k;
        double m = xr[0];
        for (int j = 1; j < k; ++j) m = std::max(m, xr[j]);
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += std::exp(xr[j] - m);
        lse[static_cast<size_t>(r)] = m + std::log(s);
        total += lse[static_cast<size_t>(r)] - xr[labels[static_cast<size_t>(r)]];
    }
    out.ptr()[0] = total / n;
    if (Tape* tp = common_tape({&logits})) {
        const int nx = logits.node();
        auto px = logits.buffer();
        auto pl = std::make_shared<std::vector<int>>(labels);
        auto ps = std::make_shared<std::vector<double>>(std::move(lse));
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double g = t.grad_buf(self)[0] / n;
            double* gx = t.grad_buf(nx);
            for (int r = 0; r < n; ++r) {
                const double* xr = px->data() + static_cast<int64_t>(r) * k;
                double* gr = gx + static_cast<int64_t>(r) * k;
                const double l = (*ps)[static_cast<size_t>(r)];
                for (int j = 0; j < k; ++j) gr[j] += g * std::exp(xr[j] - l);
                gr[(*pl)[static_cast<size_t>(r)]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// broadcasts
// ---------------------------------------------------------------------------

inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    const int m = x.dim(x.ndim() - 1);
    detail::require(v.ndim() == 1 && v.dim(0) == m,
                    "add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(v.shape()));
    const int64_t rows = x.numel() / m;
    Tensor out(x.shape());
    for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < m; ++j)
            out.ptr()[r * m + j] = x.at(r * m + j) + v.at(j);
    if (Tape* tp = common_tape({&x, &v})) {
        const int nx = x.node(), nv = v.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            if (nx >= 0) {
                double* gx = t.grad_buf(nx);
                for (int64_t i = 0; i < rows * m; ++i) gx[i] += go[i];
            }
            if (nv >= 0) {
                double* gv = t.grad_buf(nv);
                for (int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < m; ++j) gv[j] += go[r * m + j];
            }
        });
    }
    return out;
}

inline Tensor broadcast_chw(const Tensor& v, int h, int w) {
    detail::require(v.ndim() == 1, "broadcast_chw: vector expected, got " + shape_str(v.shape()));
    const int c = v.dim(0);
    const int64_t hw = static_cast<int64_t>(h) * w;
    Tensor out({c, h, w});
    for (int i = 0; i < c; ++i)
        std::fill(out.ptr() + i * hw, out.ptr() + (i + 1) * hw, v.at(i));
    if (Tape* tp = common_tape({&v})) {
        const int nv = v.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gv = t.grad_buf(nv);
            for (int i = 0; i < c; ++i) {
                double s = 0.0;
                for (int64_t j = 0; j < hw; ++j) s += go[i * hw + j];
                gv[i] += s;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// concat / slice / gather
// ---------------------------------------------------------------------------

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    detail::require(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
    int axis_total = 0;
    for (const Tensor& p : parts) {
        detail::require(p.ndim() == static_cast<int>(s0.size()), "concat: rank mismatch");
        for (int d = 0; d < p.ndim(); ++d)
            if (d != axis)
                detail::require(p.dim(d) == s0[static_cast<size_t>(d)],
                                "concat: shape " + shape_str(p.shape()) + " vs " + shape_str(s0));
        axis_total += p.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (int d = axis + 1; d < static_cast<int>(s0.size()); ++d) inner *= s0[static_cast<size_t>(d)];
    const int64_t out_chunk = static_cast<int64_t>(axis_total) * inner;
    std::vector<int64_t> offsets;
    int64_t off = 0;
    for (const Tensor& p : parts) {
        offsets.push_back(off);
        const int64_t chunk = static_cast<int64_t>(p.dim(axis)) * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.ptr() + o * out_chunk + off, p.ptr() + o * chunk,
                        static_cast<size_t>(chunk) * sizeof(double));
        off += chunk;
    }
    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tp = nullptr;
    for (const Tensor& p : parts)
        if (p.requires_grad()) {
            if (tp && p.tape() != tp) throw ContractError("concat: inputs on two tapes");
            tp = p.tape();
        }
    if (tp) {
        std::vector<int> nodes;
        std::vector<int64_t> chunks;
        for (const Tensor& p : parts) {
            nodes.push_back(p.node());
            chunks.push_back(static_cast<int64_t>(p.dim(axis)) * inner);
        }
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            for (size_t pi = 0; pi < nodes.size(); ++pi) {
                if (nodes[pi] < 0) continue;
                double* gp = t.grad_buf(nodes[pi]);
                for (int64_t o = 0; o < outer; ++o) {
                    const double* src = go + o * out_chunk + offsets[pi];
                    double* dst = gp + o * chunks[pi];
                    for (int64_t i = 0; i < chunks[pi]; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
    detail::require(axis >= 0 && axis < x.ndim(), "slice: bad axis");
    detail::require(start >= 0 && len >= 1 && start + len <= x.dim(axis),
                    "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") outside extent " + std::to_string(x.dim(axis)));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= x.dim(d);
    for (int d = axis + 1; d < x.ndim(); ++d) inner *= x.dim(d);
    const int64_t in_chunk = static_cast<int64_t>(x.dim(axis)) * inner;
    const int64_t out_chunk = static_cast<int64_t>(len) * inner;
    const int64_t off = static_cast<int64_t>(start) * inner;
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.ptr() + o * out_chunk, x.ptr() + o * in_chunk + off,
                    static_cast<size_t>(out_chunk) * sizeof(double));
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int64_t o = 0; o < outer; ++o) {
                const double* src = go + o * out_chunk;
                double* dst = gx + o * in_chunk + off;
                for (int64_t i = 0; i < out_chunk; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// out[i] = x[idx[i]]; the index map is any reindexing (permute, flip, crop,
// pad, window extraction). Backward scatter-adds, so duplicated indices are fine.
inline Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<int64_t>> idx,
                     Shape out_shape) {
    const int64_t n = shape_numel(out_shape);
    detail::require(static_cast<int64_t>(idx->size()) == n, "gather: index map size mismatch");
    Tensor out(std::move(out_shape));
    const double* xp = x.ptr();
    for (int64_t i = 0; i < n; ++i) out.ptr()[i] = xp[(*idx)[static_cast<size_t>(i)]];
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int64_t i = 0; i < n; ++i) gx[(*idx)[static_cast<size_t>(i)]] += go[i];
        });
    }
    return out;
}

inline Tensor gather(const Tensor& x, std::vector<int64_t> idx, Shape out_shape) {
    return gather(x, std::make_shared<const std::vector<int64_t>>(std::move(idx)),
                  std::move(out_shape));
}

// Selects rows of a 2-d tensor.
inline Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    detail::require(x.ndim() == 2, "gather_rows: 2-d input expected");
    const int m = x.dim(1);
    std::vector<int64_t> idx;
    idx.reserve(rows.size() * static_cast<size_t>(m));
    for (int r : rows) {
        detail::require(r >= 0 && r < x.dim(0), "gather_rows: row out of range");
        for (int j = 0; j < m; ++j) idx.push_back(static_cast<int64_t>(r) * m + j);
    }
    return gather(x, std::move(idx), {static_cast<int>(rows.size()), m});
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

// Cross-correlation of x[ci,h,w] with kernel[co,ci,kh,kw]; optional bias[co].
// Output extents must divide exactly: (h + 2 pad - kh) % stride == 0.
inline Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, int pad,
                     const Tensor& bias = Tensor()) {
    detail::require(x.ndim() == 3 && kernel.ndim() == 4 && kernel.dim(1) == x.dim(0),
                    "conv2d: input " + shape_str(x.shape()) + " vs kernel " +
                        shape_str(kernel.shape()));
    detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int num_h = h + 2 * pad - kh, num_w = w + 2 * pad - kw;
    if (num_h < 0 || num_w < 0 || num_h % stride != 0 || num_w % stride != 0)
        throw ShapeError("conv2d: non-integral output extent for input " + shape_str(x.shape()) +
                         ", kernel " + shape_str(kernel.shape()) + ", stride " +
                         std::to_string(stride) + ", pad " + std::to_string(pad));
    const int oh = num_h / stride + 1, ow = num_w / stride + 1;
    if (bias.defined())
        detail::require(bias.ndim() == 1 && bias.dim(0) == co,
                        "conv2d: bias " + shape_str(bias.shape()));
    Tensor out({co, oh, ow});
    for (int c = 0; c < co; ++c) {
        const double b = bias.defined() ? bias.at(c) : 0.0;
        std::fill(out.ptr() + static_cast<int64_t>(c) * oh * ow,
                  out.ptr() + static_cast<int64_t>(c + 1) * oh * ow, b);
    }
    auto x_range = [&](int k_off) {
        // valid output positions where the input index k_off - pad + pos*stride is in range
        int lo = 0;
        while (lo * stride + k_off - pad < 0) ++lo;
        return lo;
    };
    for (int c = 0; c < co; ++c) {
        for (int d = 0; d < ci; ++d) {
            const double* kbase =
                kernel.ptr() + ((static_cast<int64_t>(c) * ci + d) * kh) * kw;
            for (int ky = 0; ky < kh; ++ky) {
                for (int kx = 0; kx < kw; ++kx) {
                    const double kv = kbase[static_cast<int64_t>(ky) * kw + kx];
                    if (kv == 0.0) continue;
                    const int y0 = x_range(ky);
                    const int x0 = x_range(kx);
                    for (int y = y0; y < oh; ++y) {
                        const int iy = y * stride + ky - pad;
                        if (iy >= h) break;
                        const double* xrow = x.ptr() + (static_cast<int64_t>(d) * h + iy) * w;
                        double* orow = out.ptr() + (static_cast<int64_t>(c) * oh + y) * ow;
                        int x1 = ow;
                        while (x1 > x0 && (x1 - 1) * stride + kx - pad >= w) --x1;
                        if (stride == 1) {
                            const int shift = kx - pad;
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += kv * xrow[xx + shift];
                        } else {
                            for (int xx = x0; xx < x1; ++xx)
                                orow[xx] += kv * xrow[xx * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    if (Tape* tp = common_tape({&x, &kernel, &bias})) {
        const int nx = x.node(), nk = kernel.node(), nb = bias.defined() ? bias.node() : -1;
        auto px = x.buffer(), pk = kernel.buffer();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = nx >= 0 ? t.grad_buf(nx) : nullptr;
            double* gk = nk >= 0 ? t.grad_buf(nk) : nullptr;
            double* gb = nb >= 0 ? t.grad_buf(nb) : nullptr;
            if (gb) {
                for (int c = 0; c < co; ++c) {
                    double s = 0.0;
                    const double* g = go + static_cast<int64_t>(c) * oh * ow;
                    for (int64_t i = 0; i < static_cast<int64_t>(oh) * ow; ++i) s += g[i];
                    gb[c] += s;
                }
            }
            if (!gx && !gk) return;
            for (int c = 0; c < co; ++c) {
                for (int d = 0; d < ci; ++d) {
                    const int64_t koff = (static_cast<int64_t>(c) * ci + d) * kh * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const double kv = (*pk)[static_cast<size_t>(koff + ky * kw + kx)];
                            double ksum = 0.0;
                            int y0 = 0;
                            while (y0 * stride + ky - pad < 0) ++y0;
                            int x0 = 0;
                            while (x0 * stride + kx - pad < 0) ++x0;
                            for (int y = y0; y < oh; ++y) {
                                const int iy = y * stride + ky - pad;
                                if (iy >= h) break;
                                const int64_t xoff = (static_cast<int64_t>(d) * h + iy) * w;
                                const double* grow =
                                    go + (static_cast<int64_t>(c) * oh + y) * ow;
                                int x1 = ow;
                                while (x1 > x0 && (x1 - 1) * stride + kx - pad >= w) --x1;
                                if (gk) {
                                    const double* xrow = px->data() + xoff;
                                    double s = 0.0;
                                    for (int xx = x0; xx < x1; ++xx)
                                        s += xrow[xx * stride + kx - pad] * grow[xx];
                                    ksum += s;
                                }
                                if (gx) {
                                    double* gxrow = gx + xoff;
                                    for (int xx = x0; xx < x1; ++xx)
                                        gxrow[xx * stride + kx - pad] += kv * grow[xx];
                                }
                            }
                            if (gk) gk[koff + ky * kw + kx] += ksum;
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

// align_corners=false sampling; unchanged sizes return an exact copy.
inline Tensor resize_bilinear(const Tensor& x, int out_h, int out_w) {
    detail::require(x.ndim() == 3, "resize_bilinear: chw input expected, got " +
                                       shape_str(x.shape()));
    detail::require(out_h >= 1 && out_w >= 1, "resize_bilinear: bad output size");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (out_h == h && out_w == w) {
        Tensor out(x.shape(), x.data());
        if (Tape* tp = common_tape({&x})) {
            const int nx = x.node();
            const int64_t n = x.numel();
            const int self = tp->attach_node(out);
            tp->set_backward(self, [=](Tape& t) {
                const double* go = t.grad_buf(self);
                double* gx = t.grad_buf(nx);
                for (int64_t i = 0; i < n; ++i) gx[i] += go[i];
            });
        }
        return out;
    }
    const int64_t plane = static_cast<int64_t>(out_h) * out_w;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(4 * plane));
    auto wt = std::make_shared<std::vector<double>>(static_cast<size_t>(4 * plane));
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        const double ry = fy - y0;
        const int y0c = std::clamp(y0, 0, h - 1);
        const int y1c = std::clamp(y0 + 1, 0, h - 1);
        for (int x2 = 0; x2 < out_w; ++x2) {
            const double fx = (x2 + 0.5) * sx - 0.5;
            int x0 = static_cast<int>(std::floor(fx));
            const double rx = fx - x0;
            const int x0c = std::clamp(x0, 0, w - 1);
            const int x1c = std::clamp(x0 + 1, 0, w - 1);
            const int64_t o = static_cast<int64_t>(y) * out_w + x2;
            (*idx)[static_cast<size_t>(4 * o + 0)] = static_cast<int64_t>(y0c) * w + x0c;
            (*idx)[static_cast<size_t>(4 * o + 1)] = static_cast<int64_t>(y0c) * w + x1c;
            (*idx)[static_cast<size_t>(4 * o + 2)] = static_cast<int64_t>(y1c) * w + x0c;
            (*idx)[static_cast<size_t>(4 * o + 3)] = static_cast<int64_t>(y1c) * w + x1c;
            (*wt)[static_cast<size_t>(4 * o + 0)] = (1.0 - ry) * (1.0 - rx);
            (*wt)[static_cast<size_t>(4 * o + 1)] = (1.0 - ry) * rx;
            (*wt)[static_cast<size_t>(4 * o + 2)] = ry * (1.0 - rx);
            (*wt)[static_cast<size_t>(4 * o + 3)] = ry * rx;
        }
    }
    Tensor out({c, out_h, out_w});
    const int64_t in_plane = static_cast<int64_t>(h) * w;
    for (int d = 0; d < c; ++d) {
        const double* xp = x.ptr() + d * in_plane;
        double* op = out.ptr() + d * plane;
        for (int64_t i = 0; i < plane; ++i) {
            const int64_t* ix = idx->data() + 4 * i;
            const double* wv = wt->data() + 4 * i;
            op[i] = wv[0] * xp[ix[0]] + wv[1] * xp[ix[1]] + wv[2] * xp[ix[2]] + wv[3] * xp[ix[3]];
        }
    }
    if (Tape* tp = common_tape({&x})) {
        const int nx = x.node();
        const int self = tp->attach_node(out);
        tp->set_backward(self, [=](Tape& t) {
            const double* go = t.grad_buf(self);
            double* gx = t.grad_buf(nx);
            for (int d = 0; d < c; ++d) {
                const double* g = go + d * plane;
                double* gp = gx + d * in_plane;
                for (int64_t i = 0; i < plane; ++i) {
                    const int64_t* ix = idx->data() + 4 * i;
                    const double* wv = wt->data() + 4 * i;
                    gp[ix[0]] += wv[0] * g[i];
                    gp[ix[1]] += wv[1] * g[i];
                    gp[ix[2]] += wv[2] * g[i];
                    gp[ix[3]] += wv[3] * g[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// index-map builders (used with gather)
// ---------------------------------------------------------------------------

namespace idx {

// Right/bottom symmetric (edge-inclusive) padding of a chw image.
inline std::vector<int64_t> pad_symmetric(int c, int h, int w, int H, int W) {
    std::vector<int64_t> m(static_cast<size_t>(c) * H * W);
    auto reflect = [](int i, int n) { return i < n ? i : 2 * n - 1 - i; };
    size_t p = 0;
    for (int d = 0; d < c; ++d)
        for (int y = 0; y < H; ++y) {
            const int iy = reflect(y, h);
            for (int x = 0; x < W; ++x)
                m[p++] = (static_cast<int64_t>(d) * h + iy) * w + reflect(x, w);
        }
    return m;
}

inline std::vector<int64_t> crop(int c, int H, int W, int h, int w) {
    std::vector<int64_t> m(static_cast<size_t>(c) * h * w);
    size_t p = 0;
    for (int d = 0; d < c; ++d)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                m[p++] = (static_cast<int64_t>(d) * H + y) * W + x;
    return m;
}

inline std::vector<int64_t> flip_w(int c, int h, int w) {
    std::vector<int64_t> m(static_cast<size_t>(c) * h * w);
    size_t p = 0;
    for (int d = 0; d < c; ++d)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                m[p++] = (static_cast<int64_t>(d) * h + y) * w + (w - 1 - x);
    return m;
}

// [c,h,w] -> flattened patch rows [(h/p)*(w/p), c*p*p], channel-major inside
// each patch, patches in row-major order.
inline std::vector<int64_t> im2patches(int c, int h, int w, int patch) {
    const int gh = h / patch, gw = w / patch;
    std::vector<int64_t> m(static_cast<size_t>(gh) * gw * c * patch * patch);
    size_t p = 0;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            for (int d = 0; d < c; ++d)
                for (int py = 0; py < patch; ++py)
                    for (int px = 0; px < patch; ++px)
                        m[p++] = (static_cast<int64_t>(d) * h + gy * patch + py) * w +
                                 gx * patch + px;
    return m;
}

} // namespace idx

inline Tensor pad_to_multiple(const Tensor& x, int multiple) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int H = (h + multiple - 1) / multiple * multiple;
    const int W = (w + multiple - 1) / multiple * multiple;
    if (H == h && W == w) return x;
    return gather(x, idx::pad_symmetric(c, h, w, H, W), {c, H, W});
}

inline Tensor crop_chw(const Tensor& x, int h, int w) {
    if (x.dim(1) == h && x.dim(2) == w) return x;
    return gather(x, idx::crop(x.dim(0), x.dim(1), x.dim(2), h, w), {x.dim(0), h, w});
}

inline Tensor flip_horizontal(const Tensor& x) {
    return gather(x, idx::flip_w(x.dim(0), x.dim(1), x.dim(2)), x.shape());
}

} // namespace ssvos
