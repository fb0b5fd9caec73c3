#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "echoatt/tensor.hpp"
#include "echoatt/thread_pool.hpp"

namespace echoatt {

// ---------------------------------------------------------------------------
// broadcast helpers
// ---------------------------------------------------------------------------

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (size_t i = 0; i < rank; ++i) {
        int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// Row-major strides of `shape` aligned to `out`, with 0 for broadcast dims.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<int64_t> strides(out.size(), 0);
    int64_t s = 1;
    for (size_t i = shape.size(); i-- > 0;) {
        size_t oi = i + (out.size() - shape.size());
        strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : s;
        s *= shape[i];
    }
    return strides;
}

// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
                               F&& f) {
    size_t rank = out.size();
    std::vector<int> idx(rank, 0);
    int64_t total = shape_numel(out);
    int64_t offa = 0, offb = 0;
    for (int64_t flat = 0; flat < total; ++flat) {
        f(flat, offa, offb);
        for (size_t d = rank; d-- > 0;) {
            ++idx[d];
            offa += sa[d];
            offb += sb[d];
            if (idx[d] < out[d]) break;
            offa -= static_cast<int64_t>(out[d]) * sa[d];
            offb -= static_cast<int64_t>(out[d]) * sb[d];
            idx[d] = 0;
        }
    }
}

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!active_tape()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

inline void record_op(Tensor& out, std::function<void()> backward) {
    out.set_requires_grad(true);
    active_tape()->record(out, std::move(backward));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul kernels (deterministic: each output element is accumulated by one
// thread in a fixed order)
// ---------------------------------------------------------------------------

namespace detail {

// c[i,j] (+)= sum_p a[i,p] * b[p,j]
inline void kernel_nn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate) {
    parallel_for(m, 2 * k * n, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            double* ci = c + i * n;
            if (!accumulate) {
                for (int64_t j = 0; j < n; ++j) ci[j] = 0.0;
            }
            const double* ai = a + i * k;
            for (int64_t p = 0; p < k; ++p) {
                double av = ai[p];
                const double* bp = b + p * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    });
}

// a[m,k], b[n,k]: c[i,j] (+)= dot(a_i, b_j)
inline void kernel_nt(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate) {
    parallel_for(m, 2 * k * n, [=](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
                ci[j] = accumulate ? ci[j] + acc : acc;
            }
        }
    });
}

// a[m,k], b[m,n]: c[p,j] (+)= sum_i a[i,p] * b[i,j]
inline void kernel_tn(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                      bool accumulate) {
    parallel_for(k, 2 * m * n, [=](int64_t p0, int64_t p1) {
        for (int64_t p = p0; p < p1; ++p) {
            double* cp = c + p * n;
            if (!accumulate) {
                for (int64_t j = 0; j < n; ++j) cp[j] = 0.0;
            }
            for (int64_t i = 0; i < m; ++i) {
                double av = a[i * k + p];
                const double* bi = b + i * n;
                for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
            }
        }
    });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { kAdd, kSub, kMul };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    Tensor out;
    bool same = sa == sb;
    if (same) {
        out = Tensor::zeros(sa);
        const double* pa = a.ptr();
        const double* pb = b.ptr();
        double* po = out.ptr();
        int64_t n = out.numel();
        switch (kind) {
            case BinKind::kAdd:
                for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
                break;
            case BinKind::kSub:
                for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
                break;
            case BinKind::kMul:
                for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
                break;
        }
    } else {
        Shape os = broadcast_shapes(sa, sb, name);
        out = Tensor::zeros(os);
        auto stra = broadcast_strides(sa, os);
        auto strb = broadcast_strides(sb, os);
        const double* pa = a.ptr();
        const double* pb = b.ptr();
        double* po = out.ptr();
        switch (kind) {
            case BinKind::kAdd:
                for_each_broadcast(os, stra, strb,
                                   [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] + pb[ib]; });
                break;
            case BinKind::kSub:
                for_each_broadcast(os, stra, strb,
                                   [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] - pb[ib]; });
                break;
            case BinKind::kMul:
                for_each_broadcast(os, stra, strb,
                                   [&](int64_t o, int64_t ia, int64_t ib) { po[o] = pa[ia] * pb[ib]; });
                break;
        }
    }

    if (should_record({&a, &b})) {
        record_op(out, [a, b, out, kind, same] {
            const std::vector<double>& g = out.grad();
            if (same) {
                int64_t n = out.numel();
                if (a.requires_grad()) {
                    double* ga = a.grad_data();
                    if (kind == BinKind::kMul) {
                        const double* pb = b.ptr();
                        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
                    } else {
                        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
                    }
                }
                if (b.requires_grad()) {
                    double* gb = b.grad_data();
                    switch (kind) {
                        case BinKind::kAdd:
                            for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
                            break;
                        case BinKind::kSub:
                            for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
                            break;
                        case BinKind::kMul: {
                            const double* pa = a.ptr();
                            for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
                            break;
                        }
                    }
                }
            } else {
                const Shape& os = out.shape();
                auto stra = broadcast_strides(a.shape(), os);
                auto strb = broadcast_strides(b.shape(), os);
                double* ga = a.requires_grad() ? a.grad_data() : nullptr;
                double* gb = b.requires_grad() ? b.grad_data() : nullptr;
                const double* pa = a.ptr();
                const double* pb = b.ptr();
                for_each_broadcast(os, stra, strb, [&](int64_t o, int64_t ia, int64_t ib) {
                    switch (kind) {
                        case BinKind::kAdd:
                            if (ga) ga[ia] += g[o];
                            if (gb) gb[ib] += g[o];
                            break;
                        case BinKind::kSub:
                            if (ga) ga[ia] += g[o];
                            if (gb) gb[ib] -= g[o];
                            break;
                        case BinKind::kMul:
                            if (ga) ga[ia] += g[o] * pb[ib];
                            if (gb) gb[ib] += g[o] * pa[ia];
                            break;
                    }
                });
            }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::kAdd, "add"); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::kSub, "sub"); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::binary_op(a, b, detail::BinKind::kMul, "mul"); }

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.ptr();
    double* po = out.ptr();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * c;
    if (detail::should_record({&a})) {
        detail::record_op(out, [a, out, c] {
            const std::vector<double>& g = out.grad();
            double* ga = a.grad_data();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
    }
    return out;
}

inline Tensor silu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const double* pa = a.ptr();
    double* po = out.ptr();
    int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        double s = 1.0 / (1.0 + std::exp(-pa[i]));
        po[i] = pa[i] * s;
    }
    if (detail::should_record({&a})) {
        detail::record_op(out, [a, out] {
            const std::vector<double>& g = out.grad();
            const double* pa = a.ptr();
            double* ga = a.grad_data();
            for (size_t i = 0; i < g.size(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-pa[i]));
                ga[i] += g[i] * s * (1.0 + pa[i] * (1.0 - s));
            }
        });
    }
    return out;
}

// RMS normalization over the last axis: y = x / sqrt(mean(x^2) + eps) * weight.
inline Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
    int w = x.dim(x.rank() - 1);
    if (weight.rank() != 1 || weight.dim(0) != w) {
        throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) + " does not match last axis of " +
                             shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    int64_t rows = x.numel() / w;
    const double* px = x.ptr();
    const double* pw = weight.ptr();
    double* po = out.ptr();
    parallel_for(rows, 4 * w, [=](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            const double* xr = px + r * w;
            double* orow = po + r * w;
            double ss = 0.0;
            for (int i = 0; i < w; ++i) ss += xr[i] * xr[i];
            double inv = 1.0 / std::sqrt(ss / w + eps);
            for (int i = 0; i < w; ++i) orow[i] = xr[i] * inv * pw[i];
        }
    });
    if (detail::should_record({&x, &weight})) {
        detail::record_op(out, [x, weight, out, eps, w, rows] {
            const double* g = out.grad_data();
            const double* px = x.ptr();
            const double* pw = weight.ptr();
            double* gx = x.requires_grad() ? x.grad_data() : nullptr;
            double* gw = weight.requires_grad() ? weight.grad_data() : nullptr;
            // weight grad is a cross-row reduction: keep it out of the parallel loop
            if (gx) {
                parallel_for(rows, 8 * w, [=](int64_t r0, int64_t r1) {
                    for (int64_t r = r0; r < r1; ++r) {
                        const double* xr = px + r * w;
                        const double* gr = g + r * w;
                        double ss = 0.0;
                        for (int i = 0; i < w; ++i) ss += xr[i] * xr[i];
                        double inv = 1.0 / std::sqrt(ss / w + eps);
                        double dot = 0.0;
                        for (int i = 0; i < w; ++i) dot += gr[i] * pw[i] * xr[i];
                        double coef = dot * inv * inv * inv / w;
                        double* gxr = gx + r * w;
                        for (int i = 0; i < w; ++i) gxr[i] += gr[i] * pw[i] * inv - coef * xr[i];
                    }
                });
            }
            if (gw) {
                for (int64_t r = 0; r < rows; ++r) {
                    const double* xr = px + r * w;
                    const double* gr = g + r * w;
                    double ss = 0.0;
                    for (int i = 0; i < w; ++i) ss += xr[i] * xr[i];
                    double inv = 1.0 / std::sqrt(ss / w + eps);
                    for (int i = 0; i < w; ++i) gw[i] += gr[i] * xr[i] * inv;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// Batched matrix product [..,m,k] x [..,k,n] -> [..,m,n]. Leading batch
// dimensions broadcast; a 2D right operand is treated as a shared weight.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    int64_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    int64_t kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Shape abatch(a.shape().begin(), a.shape().end() - 2);
    Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    Shape obatch = detail::broadcast_shapes(abatch, bbatch, "matmul");
    Shape oshape = obatch;
    oshape.push_back(static_cast<int>(m));
    oshape.push_back(static_cast<int>(n));
    Tensor out = Tensor::zeros(oshape);

    const double* pa = a.ptr();
    const double* pb = b.ptr();
    double* po = out.ptr();
    int64_t nbatch = shape_numel(obatch);

    bool shared_b = bbatch.empty();
    bool equal_batch = abatch == bbatch;

    if (shared_b) {
        // fold batch into rows: [B*m, k] x [k, n]
        detail::kernel_nn(pa, pb, po, nbatch * m, k, n, false);
    } else if (equal_batch) {
        parallel_for(nbatch, 2 * m * k * n, [=](int64_t b0, int64_t b1) {
            for (int64_t ib = b0; ib < b1; ++ib) {
                detail::kernel_nn(pa + ib * m * k, pb + ib * k * n, po + ib * m * n, m, k, n, false);
            }
        });
    } else {
        auto stra = detail::broadcast_strides(abatch, obatch);
        auto strb = detail::broadcast_strides(bbatch, obatch);
        detail::for_each_broadcast(obatch, stra, strb, [&](int64_t ob, int64_t ia, int64_t ib) {
            detail::kernel_nn(pa + ia * m * k, pb + ib * k * n, po + ob * m * n, m, k, n, false);
        });
    }

    if (detail::should_record({&a, &b})) {
        Shape abatch_c = abatch, bbatch_c = bbatch, obatch_c = obatch;
        detail::record_op(out, [a, b, out, m, k, n, nbatch, shared_b, equal_batch, abatch_c, bbatch_c, obatch_c] {
            const double* g = out.grad_data();
            const double* pa = a.ptr();
            const double* pb = b.ptr();
            double* ga = a.requires_grad() ? a.grad_data() : nullptr;
            double* gb = b.requires_grad() ? b.grad_data() : nullptr;
            if (shared_b) {
                if (ga) detail::kernel_nt(g, pb, ga, nbatch * m, n, k, true);
                if (gb) detail::kernel_tn(pa, g, gb, nbatch * m, k, n, true);
            } else if (equal_batch) {
                if (ga) {
                    parallel_for(nbatch, 2 * m * k * n, [=](int64_t b0, int64_t b1) {
                        for (int64_t ib = b0; ib < b1; ++ib) {
                            detail::kernel_nt(g + ib * m * n, pb + ib * k * n, ga + ib * m * k, m, n, k, true);
                        }
                    });
                }
                if (gb) {
                    parallel_for(nbatch, 2 * m * k * n, [=](int64_t b0, int64_t b1) {
                        for (int64_t ib = b0; ib < b1; ++ib) {
                            detail::kernel_tn(pa + ib * m * k, g + ib * m * n, gb + ib * k * n, m, k, n, true);
                        }
                    });
                }
            } else {
                auto stra = detail::broadcast_strides(abatch_c, obatch_c);
                auto strb = detail::broadcast_strides(bbatch_c, obatch_c);
                detail::for_each_broadcast(obatch_c, stra, strb, [&](int64_t ob, int64_t ia, int64_t ib) {
                    if (ga) detail::kernel_nt(g + ob * m * n, pb + ib * k * n, ga + ia * m * k, m, n, k, true);
                    if (gb) detail::kernel_tn(pa + ia * m * k, g + ob * m * n, gb + ib * k * n, m, k, n, true);
                });
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
    }
    int len = x.dim(axis);
    int64_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    int64_t outer = x.numel() / (static_cast<int64_t>(len) * inner);
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.ptr();
    double* po = out.ptr();
    parallel_for(outer * inner, 8 * len, [=](int64_t s0, int64_t s1) {
        for (int64_t s = s0; s < s1; ++s) {
            int64_t o = s / inner, in = s % inner;
            const double* base = px + o * len * inner + in;
            double* obase = po + o * len * inner + in;
            double mx = base[0];
            for (int i = 1; i < len; ++i) mx = std::max(mx, base[static_cast<int64_t>(i) * inner]);
            double sum = 0.0;
            for (int i = 0; i < len; ++i) {
                double e = std::exp(base[static_cast<int64_t>(i) * inner] - mx);
                obase[static_cast<int64_t>(i) * inner] = e;
                sum += e;
            }
            double invsum = 1.0 / sum;
            for (int i = 0; i < len; ++i) obase[static_cast<int64_t>(i) * inner] *= invsum;
        }
    });
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out, len, inner, outer] {
            const double* g = out.grad_data();
            const double* py = out.ptr();
            double* gx = x.grad_data();
            parallel_for(outer * inner, 8 * len, [=](int64_t s0, int64_t s1) {
                for (int64_t s = s0; s < s1; ++s) {
                    int64_t o = s / inner, in = s % inner;
                    int64_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (int i = 0; i < len; ++i) {
                        int64_t ix = base + static_cast<int64_t>(i) * inner;
                        dot += g[ix] * py[ix];
                    }
                    for (int i = 0; i < len; ++i) {
                        int64_t ix = base + static_cast<int64_t>(i) * inner;
                        gx[ix] += py[ix] * (g[ix] - dot);
                    }
                }
            });
        });
    }
    return out;
}

// Softmax over the last axis of [.., s, s] scores restricted to the causal
// region j <= i. Entries above the diagonal are exactly 0.
inline Tensor causal_softmax(const Tensor& scores) {
    int r = scores.rank();
    if (r < 2 || scores.dim(r - 1) != scores.dim(r - 2)) {
        throw DimensionError("causal_softmax expects [.., s, s] scores, got " + shape_str(scores.shape()));
    }
    int s = scores.dim(r - 1);
    int64_t nmat = scores.numel() / (static_cast<int64_t>(s) * s);
    Tensor out = Tensor::zeros(scores.shape());
    const double* px = scores.ptr();
    double* po = out.ptr();
    parallel_for(nmat, 4LL * s * s, [=](int64_t b0, int64_t b1) {
        for (int64_t ib = b0; ib < b1; ++ib) {
            const double* mat = px + ib * s * s;
            double* omat = po + ib * s * s;
            for (int i = 0; i < s; ++i) {
                const double* row = mat + static_cast<int64_t>(i) * s;
                double* orow = omat + static_cast<int64_t>(i) * s;
                double mx = row[0];
                for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double e = std::exp(row[j] - mx);
                    orow[j] = e;
                    sum += e;
                }
                double invsum = 1.0 / sum;
                for (int j = 0; j <= i; ++j) orow[j] *= invsum;
                for (int j = i + 1; j < s; ++j) orow[j] = 0.0;
            }
        }
    });
    if (detail::should_record({&scores})) {
        detail::record_op(out, [scores, out, s, nmat] {
            const double* g = out.grad_data();
            const double* py = out.ptr();
            double* gx = scores.grad_data();
            parallel_for(nmat, 4LL * s * s, [=](int64_t b0, int64_t b1) {
                for (int64_t ib = b0; ib < b1; ++ib) {
                    for (int i = 0; i < s; ++i) {
                        int64_t base = ib * s * s + static_cast<int64_t>(i) * s;
                        double dot = 0.0;
                        for (int j = 0; j <= i; ++j) dot += g[base + j] * py[base + j];
                        for (int j = 0; j <= i; ++j) gx[base + j] += py[base + j] * (g[base + j] - dot);
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
    Tensor out = Tensor::alias(x, std::move(shape));
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out] {
            const std::vector<double>& g = out.grad();
            double* gx = x.grad_data();
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

// Copying transpose of two axes.
inline Tensor transpose(const Tensor& x, int axis0, int axis1) {
    if (axis0 < 0 || axis1 < 0 || axis0 >= x.rank() || axis1 >= x.rank()) {
        throw DimensionError("transpose: axes out of range for " + shape_str(x.shape()));
    }
    Shape oshape = x.shape();
    std::swap(oshape[static_cast<size_t>(axis0)], oshape[static_cast<size_t>(axis1)]);
    Tensor out = Tensor::zeros(oshape);

    // strides of input, then permuted to output-dim order
    int r = x.rank();
    std::vector<int64_t> xstr(r);
    int64_t s = 1;
    for (int i = r; i-- > 0;) {
        xstr[i] = s;
        s *= x.dim(i);
    }
    std::vector<int64_t> ostr_in(r);  // input offset stride per output dim
    for (int i = 0; i < r; ++i) ostr_in[i] = xstr[i];
    std::swap(ostr_in[static_cast<size_t>(axis0)], ostr_in[static_cast<size_t>(axis1)]);

    const double* px = x.ptr();
    double* po = out.ptr();
    std::vector<int> idx(r, 0);
    int64_t total = x.numel();
    int64_t xoff = 0;
    for (int64_t flat = 0; flat < total; ++flat) {
        po[flat] = px[xoff];
        for (int d = r; d-- > 0;) {
            ++idx[d];
            xoff += ostr_in[d];
            if (idx[d] < oshape[d]) break;
            xoff -= static_cast<int64_t>(oshape[d]) * ostr_in[d];
            idx[d] = 0;
        }
    }
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out, ostr_in, oshape, r] {
            const double* g = out.grad_data();
            double* gx = x.grad_data();
            std::vector<int> idx(static_cast<size_t>(r), 0);
            int64_t total = out.numel();
            int64_t xoff = 0;
            for (int64_t flat = 0; flat < total; ++flat) {
                gx[xoff] += g[flat];
                for (int d = r; d-- > 0;) {
                    ++idx[d];
                    xoff += ostr_in[d];
                    if (idx[d] < oshape[d]) break;
                    xoff -= static_cast<int64_t>(oshape[d]) * ostr_in[d];
                    idx[d] = 0;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// model-specific ops
// ---------------------------------------------------------------------------

// table[vocab, width] gathered by token id: out[b,s,:] = table[ids[b*seq+s],:]
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids, int batch, int seq) {
    if (table.rank() != 2) throw DimensionError("embedding table must be 2D, got " + shape_str(table.shape()));
    if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(batch) * seq) {
        throw DimensionError("embedding: ids length does not match batch*seq");
    }
    int vocab = table.dim(0), width = table.dim(1);
    for (int id : ids) {
        if (id < 0 || id >= vocab) {
            throw InputError("token id " + std::to_string(id) + " out of range for vocab " + std::to_string(vocab));
        }
    }
    Tensor out = Tensor::zeros({batch, seq, width});
    const double* pt = table.ptr();
    double* po = out.ptr();
    for (size_t i = 0; i < ids.size(); ++i) {
        const double* row = pt + static_cast<int64_t>(ids[i]) * width;
        double* orow = po + static_cast<int64_t>(i) * width;
        for (int j = 0; j < width; ++j) orow[j] = row[j];
    }
    if (detail::should_record({&table})) {
        std::vector<int> ids_c = ids;
        detail::record_op(out, [table, out, ids_c, width] {
            const double* g = out.grad_data();
            double* gt = table.grad_data();
            for (size_t i = 0; i < ids_c.size(); ++i) {
                double* trow = gt + static_cast<int64_t>(ids_c[i]) * width;
                const double* grow = g + static_cast<int64_t>(i) * width;
                for (int j = 0; j < width; ++j) trow[j] += grow[j];
            }
        });
    }
    return out;
}

namespace detail {
// cos/sin for rotary position embedding: tables[s][i] for pair index i
inline void rope_tables(int seq, int half, double base, std::vector<double>& cos_t, std::vector<double>& sin_t) {
    cos_t.resize(static_cast<size_t>(seq) * half);
    sin_t.resize(static_cast<size_t>(seq) * half);
    for (int p = 0; p < seq; ++p) {
        for (int i = 0; i < half; ++i) {
            double freq = std::pow(base, -2.0 * i / (2.0 * half));
            double angle = p * freq;
            cos_t[static_cast<size_t>(p) * half + i] = std::cos(angle);
            sin_t[static_cast<size_t>(p) * half + i] = std::sin(angle);
        }
    }
}
}  // namespace detail

// Rotary position embedding on [batch, heads, seq, head_dim]; adjacent pairs
// (2i, 2i+1) are rotated by position-dependent angles.
inline Tensor rope(const Tensor& x, double base = 10000.0) {
    if (x.rank() != 4) throw DimensionError("rope expects [batch, heads, seq, head_dim], got " + shape_str(x.shape()));
    int seq = x.dim(2), hd = x.dim(3);
    if (hd % 2 != 0) throw DimensionError("rope: head_dim must be even, got " + std::to_string(hd));
    int half = hd / 2;
    auto cos_t = std::make_shared<std::vector<double>>();
    auto sin_t = std::make_shared<std::vector<double>>();
    detail::rope_tables(seq, half, base, *cos_t, *sin_t);

    Tensor out = Tensor::zeros(x.shape());
    int64_t nbh = static_cast<int64_t>(x.dim(0)) * x.dim(1);
    const double* px = x.ptr();
    double* po = out.ptr();
    const double* ct = cos_t->data();
    const double* st = sin_t->data();
    parallel_for(nbh, 6LL * seq * half, [=](int64_t b0, int64_t b1) {
        for (int64_t bh = b0; bh < b1; ++bh) {
            for (int p = 0; p < seq; ++p) {
                const double* xr = px + (bh * seq + p) * hd;
                double* orow = po + (bh * seq + p) * hd;
                const double* c = ct + static_cast<int64_t>(p) * half;
                const double* s = st + static_cast<int64_t>(p) * half;
                for (int i = 0; i < half; ++i) {
                    double x0 = xr[2 * i], x1 = xr[2 * i + 1];
                    orow[2 * i] = x0 * c[i] - x1 * s[i];
                    orow[2 * i + 1] = x0 * s[i] + x1 * c[i];
                }
            }
        }
    });
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out, cos_t, sin_t, nbh, seq, hd, half] {
            const double* g = out.grad_data();
            double* gx = x.grad_data();
            const double* ct = cos_t->data();
            const double* st = sin_t->data();
            parallel_for(nbh, 6LL * seq * half, [=](int64_t b0, int64_t b1) {
                for (int64_t bh = b0; bh < b1; ++bh) {
                    for (int p = 0; p < seq; ++p) {
                        const double* grow = g + (bh * seq + p) * hd;
                        double* gxr = gx + (bh * seq + p) * hd;
                        const double* c = ct + static_cast<int64_t>(p) * half;
                        const double* s = st + static_cast<int64_t>(p) * half;
                        for (int i = 0; i < half; ++i) {
                            double g0 = grow[2 * i], g1 = grow[2 * i + 1];
                            gxr[2 * i] += g0 * c[i] + g1 * s[i];
                            gxr[2 * i + 1] += -g0 * s[i] + g1 * c[i];
                        }
                    }
                }
            });
        });
    }
    return out;
}

// Grouped-query expansion: [b, kv_heads, s, hd] -> [b, kv_heads*group, s, hd],
// output head h reads input head h / group.
inline Tensor repeat_heads(const Tensor& x, int group) {
    if (x.rank() != 4) throw DimensionError("repeat_heads expects rank-4 input, got " + shape_str(x.shape()));
    if (group < 1) throw ContractError("repeat_heads: group must be >= 1");
    if (group == 1) return x;  // no-op; keeps the graph small
    int b = x.dim(0), hkv = x.dim(1), s = x.dim(2), hd = x.dim(3);
    Tensor out = Tensor::zeros({b, hkv * group, s, hd});
    int64_t plane = static_cast<int64_t>(s) * hd;
    const double* px = x.ptr();
    double* po = out.ptr();
    for (int ib = 0; ib < b; ++ib) {
        for (int h = 0; h < hkv * group; ++h) {
            const double* src = px + (static_cast<int64_t>(ib) * hkv + h / group) * plane;
            double* dst = po + (static_cast<int64_t>(ib) * hkv * group + h) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = src[i];
        }
    }
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out, b, hkv, group, plane] {
            const double* g = out.grad_data();
            double* gx = x.grad_data();
            for (int ib = 0; ib < b; ++ib) {
                for (int h = 0; h < hkv * group; ++h) {
                    double* dst = gx + (static_cast<int64_t>(ib) * hkv + h / group) * plane;
                    const double* src = g + (static_cast<int64_t>(ib) * hkv * group + h) * plane;
                    for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

// Scaled causal attention scores: out[..,i,j] = inv_scale * dot(q_i, k_j) for
// j <= i, 0 above the diagonal. Skips the masked half entirely.
inline Tensor causal_scores(const Tensor& q, const Tensor& k, double inv_scale) {
    if (q.rank() != 4 || k.rank() != 4 || q.shape() != k.shape()) {
        throw DimensionError("causal_scores expects matching [b,h,s,hd] inputs, got " + shape_str(q.shape()) +
                             " and " + shape_str(k.shape()));
    }
    int s = q.dim(2), hd = q.dim(3);
    int64_t nbh = static_cast<int64_t>(q.dim(0)) * q.dim(1);
    Tensor out = Tensor::zeros({q.dim(0), q.dim(1), s, s});
    const double* pq = q.ptr();
    const double* pk = k.ptr();
    double* po = out.ptr();
    parallel_for(nbh, static_cast<int64_t>(s) * s * hd, [=](int64_t b0, int64_t b1) {
        for (int64_t bh = b0; bh < b1; ++bh) {
            const double* qm = pq + bh * s * hd;
            const double* km = pk + bh * s * hd;
            double* om = po + bh * s * s;
            for (int i = 0; i < s; ++i) {
                const double* qi = qm + static_cast<int64_t>(i) * hd;
                double* orow = om + static_cast<int64_t>(i) * s;
                for (int j = 0; j <= i; ++j) {
                    const double* kj = km + static_cast<int64_t>(j) * hd;
                    double acc = 0.0;
                    for (int d = 0; d < hd; ++d) acc += qi[d] * kj[d];
                    orow[j] = acc * inv_scale;
                }
                for (int j = i + 1; j < s; ++j) orow[j] = 0.0;
            }
        }
    });
    if (detail::should_record({&q, &k})) {
        detail::record_op(out, [q, k, out, nbh, s, hd, inv_scale] {
            const double* g = out.grad_data();
            const double* pq = q.ptr();
            const double* pk = k.ptr();
            double* gq = q.requires_grad() ? q.grad_data() : nullptr;
            double* gk = k.requires_grad() ? k.grad_data() : nullptr;
            parallel_for(nbh, 2LL * s * s * hd, [=](int64_t b0, int64_t b1) {
                for (int64_t bh = b0; bh < b1; ++bh) {
                    const double* gm = g + bh * s * s;
                    const double* qm = pq + bh * s * hd;
                    const double* km = pk + bh * s * hd;
                    if (gq) {
                        double* gqm = gq + bh * s * hd;
                        for (int i = 0; i < s; ++i) {
                            double* gqi = gqm + static_cast<int64_t>(i) * hd;
                            const double* grow = gm + static_cast<int64_t>(i) * s;
                            for (int j = 0; j <= i; ++j) {
                                double gv = grow[j] * inv_scale;
                                const double* kj = km + static_cast<int64_t>(j) * hd;
                                for (int d = 0; d < hd; ++d) gqi[d] += gv * kj[d];
                            }
                        }
                    }
                    if (gk) {
                        double* gkm = gk + bh * s * hd;
                        for (int j = 0; j < s; ++j) {
                            double* gkj = gkm + static_cast<int64_t>(j) * hd;
                            for (int i = j; i < s; ++i) {
                                double gv = gm[static_cast<int64_t>(i) * s + j] * inv_scale;
                                const double* qi = qm + static_cast<int64_t>(i) * hd;
                                for (int d = 0; d < hd; ++d) gkj[d] += gv * qi[d];
                            }
                        }
                    }
                }
            });
        });
    }
    return out;
}

// out[..,i,:] = sum_{j<=i} a[..,i,j] * v[..,j,:] — matmul specialized to
// lower-triangular attention probabilities.
inline Tensor causal_weighted_sum(const Tensor& a, const Tensor& v) {
    if (a.rank() != 4 || v.rank() != 4 || a.dim(0) != v.dim(0) || a.dim(1) != v.dim(1) || a.dim(2) != v.dim(2) ||
        a.dim(2) != a.dim(3)) {
        throw DimensionError("causal_weighted_sum expects [b,h,s,s] x [b,h,s,hd], got " + shape_str(a.shape()) +
                             " and " + shape_str(v.shape()));
    }
    int s = a.dim(2), hd = v.dim(3);
    int64_t nbh = static_cast<int64_t>(a.dim(0)) * a.dim(1);
    Tensor out = Tensor::zeros(v.shape());
    const double* pa = a.ptr();
    const double* pv = v.ptr();
    double* po = out.ptr();
    parallel_for(nbh, static_cast<int64_t>(s) * s * hd, [=](int64_t b0, int64_t b1) {
        for (int64_t bh = b0; bh < b1; ++bh) {
            const double* am = pa + bh * s * s;
            const double* vm = pv + bh * s * hd;
            double* om = po + bh * s * hd;
            for (int i = 0; i < s; ++i) {
                double* orow = om + static_cast<int64_t>(i) * hd;
                for (int d = 0; d < hd; ++d) orow[d] = 0.0;
                const double* arow = am + static_cast<int64_t>(i) * s;
                for (int j = 0; j <= i; ++j) {
                    double av = arow[j];
                    const double* vrow = vm + static_cast<int64_t>(j) * hd;
                    for (int d = 0; d < hd; ++d) orow[d] += av * vrow[d];
                }
            }
        }
    });
    if (detail::should_record({&a, &v})) {
        detail::record_op(out, [a, v, out, nbh, s, hd] {
            const double* g = out.grad_data();
            const double* pa = a.ptr();
            const double* pv = v.ptr();
            double* ga = a.requires_grad() ? a.grad_data() : nullptr;
            double* gv = v.requires_grad() ? v.grad_data() : nullptr;
            parallel_for(nbh, 2LL * s * s * hd, [=](int64_t b0, int64_t b1) {
                for (int64_t bh = b0; bh < b1; ++bh) {
                    const double* gm = g + bh * s * hd;
                    const double* am = pa + bh * s * s;
                    const double* vm = pv + bh * s * hd;
                    if (ga) {
                        double* gam = ga + bh * s * s;
                        for (int i = 0; i < s; ++i) {
                            const double* grow = gm + static_cast<int64_t>(i) * hd;
                            double* garow = gam + static_cast<int64_t>(i) * s;
                            for (int j = 0; j <= i; ++j) {
                                const double* vrow = vm + static_cast<int64_t>(j) * hd;
                                double acc = 0.0;
                                for (int d = 0; d < hd; ++d) acc += grow[d] * vrow[d];
                                garow[j] += acc;
                            }
                        }
                    }
                    if (gv) {
                        double* gvm = gv + bh * s * hd;
                        for (int j = 0; j < s; ++j) {
                            double* gvj = gvm + static_cast<int64_t>(j) * hd;
                            for (int i = j; i < s; ++i) {
                                double av = am[static_cast<int64_t>(i) * s + j];
                                const double* grow = gm + static_cast<int64_t>(i) * hd;
                                for (int d = 0; d < hd; ++d) gvj[d] += av * grow[d];
                            }
                        }
                    }
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    const double* px = x.ptr();
    for (int64_t i = 0; i < x.numel(); ++i) s += px[i];
    Tensor out = Tensor::scalar(s);
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out] {
            double g = out.grad()[0];
            double* gx = x.grad_data();
            for (int64_t i = 0; i < x.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    const double* px = x.ptr();
    int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) s += px[i];
    Tensor out = Tensor::scalar(s / n);
    if (detail::should_record({&x})) {
        detail::record_op(out, [x, out, n] {
            double g = out.grad()[0] / n;
            double* gx = x.grad_data();
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

// Mean squared error over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

// Mean next-token cross-entropy: logits [.., vocab] against integer targets,
// one per row. Fused log-softmax for stability.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    int vocab = logits.dim(logits.rank() - 1);
    int64_t rows = logits.numel() / vocab;
    if (static_cast<int64_t>(targets.size()) != rows) {
        throw DimensionError("cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                             std::to_string(targets.size()));
    }
    for (int t : targets) {
        if (t < 0 || t >= vocab) {
            throw InputError("target id " + std::to_string(t) + " out of range for vocab " + std::to_string(vocab));
        }
    }
    const double* pz = logits.ptr();
    std::vector<double> row_loss(static_cast<size_t>(rows));
    parallel_for(rows, 6 * vocab, [&, pz, vocab](int64_t r0, int64_t r1) {
        for (int64_t r = r0; r < r1; ++r) {
            const double* z = pz + r * vocab;
            double mx = z[0];
            for (int i = 1; i < vocab; ++i) mx = std::max(mx, z[i]);
            double sum = 0.0;
            for (int i = 0; i < vocab; ++i) sum += std::exp(z[i] - mx);
            double lse = mx + std::log(sum);
            row_loss[static_cast<size_t>(r)] = lse - z[targets[static_cast<size_t>(r)]];
        }
    });
    double total = 0.0;
    for (double l : row_loss) total += l;
    Tensor out = Tensor::scalar(total / rows);
    if (detail::should_record({&logits})) {
        std::vector<int> tgt = targets;
        detail::record_op(out, [logits, out, tgt, vocab, rows] {
            double g = out.grad()[0] / rows;
            const double* pz = logits.ptr();
            double* gz = logits.grad_data();
            parallel_for(rows, 8 * vocab, [=](int64_t r0, int64_t r1) {
                for (int64_t r = r0; r < r1; ++r) {
                    const double* z = pz + r * vocab;
                    double* gr = gz + r * vocab;
                    double mx = z[0];
                    for (int i = 1; i < vocab; ++i) mx = std::max(mx, z[i]);
                    double sum = 0.0;
                    for (int i = 0; i < vocab; ++i) sum += std::exp(z[i] - mx);
                    double invsum = 1.0 / sum;
                    for (int i = 0; i < vocab; ++i) gr[i] += g * std::exp(z[i] - mx) * invsum;
                    gr[tgt[static_cast<size_t>(r)]] -= g;
                }
            });
        });
    }
    return out;
}

enum class KlDirection {
    kStudentTeacher,  // KL(softmax(student) || softmax(teacher)) — as the loss is defined
    kTeacherStudent,  // conventional distillation direction
};

// KL divergence between softmax distributions over the last axis, averaged
// over rows. Gradient flows into `student` only; `teacher` is a constant.
inline Tensor kl_divergence(const Tensor& student, const Tensor& teacher,
                            KlDirection dir = KlDirection::kStudentTeacher) {
    if (student.shape() != teacher.shape()) {
        throw DimensionError("kl_divergence: shape mismatch " + shape_str(student.shape()) + " vs " +
                             shape_str(teacher.shape()));
    }
    int vocab = student.dim(student.rank() - 1);
    int64_t rows = student.numel() / vocab;
    const double* ps = student.ptr();
    const double* pt = teacher.ptr();

    auto log_softmax_row = [vocab](const double* z, std::vector<double>& out_logp) {
        double mx = z[0];
        for (int i = 1; i < vocab; ++i) mx = std::max(mx, z[i]);
        double sum = 0.0;
        for (int i = 0; i < vocab; ++i) sum += std::exp(z[i] - mx);
        double lse = mx + std::log(sum);
        for (int i = 0; i < vocab; ++i) out_logp[static_cast<size_t>(i)] = z[i] - lse;
    };

    std::vector<double> row_loss(static_cast<size_t>(rows));
    parallel_for(rows, 12 * vocab, [&, ps, pt, vocab, dir](int64_t r0, int64_t r1) {
        std::vector<double> logp(static_cast<size_t>(vocab)), logq(static_cast<size_t>(vocab));
        for (int64_t r = r0; r < r1; ++r) {
            log_softmax_row(ps + r * vocab, logp);
            log_softmax_row(pt + r * vocab, logq);
            double l = 0.0;
            if (dir == KlDirection::kStudentTeacher) {
                for (int i = 0; i < vocab; ++i) l += std::exp(logp[static_cast<size_t>(i)]) *
                                                     (logp[static_cast<size_t>(i)] - logq[static_cast<size_t>(i)]);
            } else {
                for (int i = 0; i < vocab; ++i) l += std::exp(logq[static_cast<size_t>(i)]) *
                                                     (logq[static_cast<size_t>(i)] - logp[static_cast<size_t>(i)]);
            }
            row_loss[static_cast<size_t>(r)] = l;
        }
    });
    double total = 0.0;
    for (double l : row_loss) total += l;
    Tensor out = Tensor::scalar(total / rows);

    if (detail::should_record({&student})) {
        if (!student.requires_grad()) return out;  // teacher-only graphs never happen; be safe
        detail::record_op(out, [student, teacher, out, vocab, rows, dir, log_softmax_row] {
            double g = out.grad()[0] / rows;
            const double* ps = student.ptr();
            const double* pt = teacher.ptr();
            double* gs = student.grad_data();
            parallel_for(rows, 16 * vocab, [=](int64_t r0, int64_t r1) {
                std::vector<double> logp(static_cast<size_t>(vocab)), logq(static_cast<size_t>(vocab));
                for (int64_t r = r0; r < r1; ++r) {
                    log_softmax_row(ps + r * vocab, logp);
                    log_softmax_row(pt + r * vocab, logq);
                    double* gr = gs + r * vocab;
                    if (dir == KlDirection::kStudentTeacher) {
                        // dL/ds_k = p_k ((logp_k - logq_k) - L_row)
                        double lrow = 0.0;
                        for (int i = 0; i < vocab; ++i) {
                            lrow += std::exp(logp[static_cast<size_t>(i)]) *
                                    (logp[static_cast<size_t>(i)] - logq[static_cast<size_t>(i)]);
                        }
                        for (int i = 0; i < vocab; ++i) {
                            double p = std::exp(logp[static_cast<size_t>(i)]);
                            gr[i] += g * p * ((logp[static_cast<size_t>(i)] - logq[static_cast<size_t>(i)]) - lrow);
                        }
                    } else {
                        // dL/ds_k = p_k - q_k
                        for (int i = 0; i < vocab; ++i) {
                            gr[i] += g * (std::exp(logp[static_cast<size_t>(i)]) -
                                          std::exp(logq[static_cast<size_t>(i)]));
                        }
                    }
                }
            });
        });
    }
    return out;
}

// Row-wise argmax over the last axis; ties broken by the lowest index.
inline std::vector<int> argmax_last(const Tensor& x) {
    int vocab = x.dim(x.rank() - 1);
    int64_t rows = x.numel() / vocab;
    std::vector<int> out(static_cast<size_t>(rows));
    const double* px = x.ptr();
    for (int64_t r = 0; r < rows; ++r) {
        const double* z = px + r * vocab;
        int best = 0;
        for (int i = 1; i < vocab; ++i) {
            if (z[i] > z[best]) best = i;
        }
        out[static_cast<size_t>(r)] = best;
    }
    return out;
}

}  // namespace echoatt
