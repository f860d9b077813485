#pragma once
// Reverse-mode autodiff over a flat tape. Ops execute eagerly; node ids are
// already a topological order, so backward() is a reverse sweep. One graph is
// built per training step and discarded.
//
// Every forward op verifies its output is finite; NaN/Inf anywhere is treated
// as a hard error, not a value.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "factlab/kernels.hpp"
#include "factlab/tensor.hpp"

namespace factlab {

template <typename T>
class Graph {
public:
    using Id = int32_t;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Id leaf(Tensor<T> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, nullptr, "leaf");
    }
    Id constant(Tensor<T> v) { return leaf(std::move(v), false); }

    const Tensor<T>& val(Id id) const { return nodes_.at(checked(id)).value; }

    // gradient of the last backward() target w.r.t. node id (zeros if unreached)
    Tensor<T> grad(Id id) const {
        const auto& g = grads_.at(checked(id));
        if (g.numel() == 0) return Tensor<T>(nodes_[checked(id)].value.shape);
        return g;
    }

    size_t size() const { return nodes_.size(); }

    // ---- elementwise / linear ----

    // same shape, or b a rank-1 vector matching a's trailing dim (bias)
    Id add(Id a, Id b) {
        const auto& va = val(a);
        const auto& vb = val(b);
        bool bias = vb.rank() == 1 && va.rank() > 1 && vb.numel() == va.last_dim();
        if (!bias && !va.same_shape(vb))
            throw std::invalid_argument("add: shape mismatch " + shape_str(va.shape) + " vs " +
                                        shape_str(vb.shape));
        Tensor<T> out(va.shape);
        if (bias) {
            const int64_t rows = va.rows(), cols = va.last_dim();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < cols; ++c)
                    out[r * cols + c] = va[r * cols + c] + vb[c];
        } else {
            for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] + vb[i];
        }
        return push(std::move(out), needs(a) || needs(b), [this, a, b, bias](Id self) {
            const auto& gy = grads_[self];
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
            if (auto* gb = grad_dst(b)) {
                if (bias) {
                    const int64_t cols = gb->numel(), rows = gy.numel() / cols;
                    for (int64_t r = 0; r < rows; ++r)
                        for (int64_t c = 0; c < cols; ++c) (*gb)[c] += gy[r * cols + c];
                } else {
                    for (int64_t i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i];
                }
            }
        }, "add");
    }

    Id sub(Id a, Id b) {
        const auto& va = val(a);
        const auto& vb = val(b);
        if (!va.same_shape(vb))
            throw std::invalid_argument("sub: shape mismatch " + shape_str(va.shape) + " vs " +
                                        shape_str(vb.shape));
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] - vb[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Id self) {
            const auto& gy = grads_[self];
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
            if (auto* gb = grad_dst(b))
                for (int64_t i = 0; i < gy.numel(); ++i) (*gb)[i] -= gy[i];
        }, "sub");
    }

    Id mul(Id a, Id b) {
        const auto& va = val(a);
        const auto& vb = val(b);
        if (!va.same_shape(vb))
            throw std::invalid_argument("mul: shape mismatch " + shape_str(va.shape) + " vs " +
                                        shape_str(vb.shape));
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] * vb[i];
        return push(std::move(out), needs(a) || needs(b), [this, a, b](Id self) {
            const auto& gy = grads_[self];
            const auto& va = nodes_[a].value;
            const auto& vb = nodes_[b].value;
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] * vb[i];
            if (auto* gb = grad_dst(b))
                for (int64_t i = 0; i < gy.numel(); ++i) (*gb)[i] += gy[i] * va[i];
        }, "mul");
    }

    Id scale(Id a, T c) {
        const auto& va = val(a);
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] * c;
        return push(std::move(out), needs(a), [this, a, c](Id self) {
            const auto& gy = grads_[self];
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i] * c;
        }, "scale");
    }

    Id add_const(Id a, T c) {
        const auto& va = val(a);
        Tensor<T> out(va.shape);
        for (int64_t i = 0; i < va.numel(); ++i) out[i] = va[i] + c;
        return push(std::move(out), needs(a), [this, a](Id self) {
            const auto& gy = grads_[self];
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
        }, "add_const");
    }

    Id reshape(Id a, Shape s) {
        const auto& va = val(a);
        if (numel_of(s) != va.numel())
            throw std::invalid_argument("reshape: numel mismatch " + shape_str(va.shape) +
                                        " -> " + shape_str(s));
        Tensor<T> out(std::move(s), va.data);
        return push(std::move(out), needs(a), [this, a](Id self) {
            const auto& gy = grads_[self];
            if (auto* ga = grad_dst(a))
                for (int64_t i = 0; i < gy.numel(); ++i) (*ga)[i] += gy[i];
        }, "reshape");
    }

    // ---- matrix products ----

    Id matmul(Id a, Id b) {
        const auto& va = val(a);
        const auto& vb = val(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
            throw std::invalid_argument("matmul: bad shapes " + shape_str(va.shape) + " x " +
                                        shape_str(vb.shape));
        const int64_t M = va.dim(0), K = va.dim(1), N = vb.dim(1);
        Tensor<T> out({M, N});
        kernels::gemm(M, K, N, va.ptr(), vb.ptr(), out.ptr());
        return push(std::move(out), needs(a) || needs(b), [this, a, b, M, K, N](Id self) {
            const auto& gy = grads_[self];
            const auto& va = nodes_[a].value;
            const auto& vb = nodes_[b].value;
            if (auto* ga = grad_dst(a)) kernels::gemm_nt(M, N, K, gy.ptr(), vb.ptr(), ga->ptr(), true);
            if (auto* gb = grad_dst(b)) kernels::gemm_tn(M, K, N, va.ptr(), gy.ptr(), gb->ptr(), true);
        }, "matmul");
    }

    // batched [S,M,K] x [S,K,N] -> [S,M,N]; transpose_b treats b as [S,N,K]
    Id bmm(Id a, Id b, bool transpose_b = false) {
        const auto& va = val(a);
        const auto& vb = val(b);
        if (va.rank() != 3 || vb.rank() != 3 || va.dim(0) != vb.dim(0))
            throw std::invalid_argument("bmm: bad shapes " + shape_str(va.shape) + " x " +
                                        shape_str(vb.shape));
        const int64_t S = va.dim(0), M = va.dim(1), K = va.dim(2);
        const int64_t N = transpose_b ? vb.dim(1) : vb.dim(2);
        if ((transpose_b ? vb.dim(2) : vb.dim(1)) != K)
            throw std::invalid_argument("bmm: inner dim mismatch " + shape_str(va.shape) + " x " +
                                        shape_str(vb.shape));
        Tensor<T> out({S, M, N});
        for (int64_t s = 0; s < S; ++s) {
            const T* as = va.ptr() + s * M * K;
            const T* bs = vb.ptr() + s * (transpose_b ? N * K : K * N);
            T* cs = out.ptr() + s * M * N;
            if (transpose_b)
                kernels::gemm_nt(M, K, N, as, bs, cs);
            else
                kernels::gemm(M, K, N, as, bs, cs);
        }
        return push(std::move(out), needs(a) || needs(b),
                    [this, a, b, S, M, K, N, transpose_b](Id self) {
            const auto& gy = grads_[self];
            const auto& va = nodes_[a].value;
            const auto& vb = nodes_[b].value;
            auto* ga = grad_dst(a);
            auto* gb = grad_dst(b);
            for (int64_t s = 0; s < S; ++s) {
                const T* gys = gy.ptr() + s * M * N;
                const T* as = va.ptr() + s * M * K;
                const T* bs = vb.ptr() + s * (transpose_b ? N * K : K * N);
                if (transpose_b) {
                    // y = a b^T: da = gy b, db = gy^T a
                    if (ga) kernels::gemm(M, N, K, gys, bs, ga->ptr() + s * M * K, true);
                    if (gb) kernels::gemm_tn(M, N, K, gys, as, gb->ptr() + s * N * K, true);
                } else {
                    if (ga) kernels::gemm_nt(M, N, K, gys, bs, ga->ptr() + s * M * K, true);
                    if (gb) kernels::gemm_tn(M, K, N, as, gys, gb->ptr() + s * K * N, true);
                }
            }
        }, "bmm");
    }

    // [B*T, D] -> [B*H, T, D/H]
    Id split_heads(Id x, int64_t B, int64_t Tlen, int64_t H) {
        const auto& vx = val(x);
        if (vx.rank() != 2 || vx.dim(0) != B * Tlen || vx.dim(1) % H != 0)
            throw std::invalid_argument("split_heads: bad shape " + shape_str(vx.shape));
        const int64_t D = vx.dim(1), Dh = D / H;
        Tensor<T> out({B * H, Tlen, Dh});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < Tlen; ++t)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t c = 0; c < Dh; ++c)
                        out[((b * H + h) * Tlen + t) * Dh + c] = vx[(b * Tlen + t) * D + h * Dh + c];
        return push(std::move(out), needs(x), [this, x, B, Tlen, H, Dh, D](Id self) {
            const auto& gy = grads_[self];
            if (auto* gx = grad_dst(x))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t t = 0; t < Tlen; ++t)
                        for (int64_t h = 0; h < H; ++h)
                            for (int64_t c = 0; c < Dh; ++c)
                                (*gx)[(b * Tlen + t) * D + h * Dh + c] +=
                                    gy[((b * H + h) * Tlen + t) * Dh + c];
        }, "split_heads");
    }

    // [B*H, T, Dh] -> [B*T, H*Dh]
    Id merge_heads(Id x, int64_t B, int64_t Tlen, int64_t H) {
        const auto& vx = val(x);
        if (vx.rank() != 3 || vx.dim(0) != B * H || vx.dim(1) != Tlen)
            throw std::invalid_argument("merge_heads: bad shape " + shape_str(vx.shape));
        const int64_t Dh = vx.dim(2), D = H * Dh;
        Tensor<T> out({B * Tlen, D});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < Tlen; ++t)
                for (int64_t h = 0; h < H; ++h)
                    for (int64_t c = 0; c < Dh; ++c)
                        out[(b * Tlen + t) * D + h * Dh + c] = vx[((b * H + h) * Tlen + t) * Dh + c];
        return push(std::move(out), needs(x), [this, x, B, Tlen, H, Dh, D](Id self) {
            const auto& gy = grads_[self];
            if (auto* gx = grad_dst(x))
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t t = 0; t < Tlen; ++t)
                        for (int64_t h = 0; h < H; ++h)
                            for (int64_t c = 0; c < Dh; ++c)
                                (*gx)[((b * H + h) * Tlen + t) * Dh + c] +=
                                    gy[(b * Tlen + t) * D + h * Dh + c];
        }, "merge_heads");
    }

    // ---- normalization / nonlinearities ----

    Id layer_norm(Id x, Id gamma, Id beta, T eps = T(1e-5)) {
        const auto& vx = val(x);
        const auto& vg = val(gamma);
        const auto& vb = val(beta);
        const int64_t cols = vx.last_dim(), rows = vx.rows();
        if (vg.numel() != cols || vb.numel() != cols)
            throw std::invalid_argument("layer_norm: scale/bias must match trailing dim");
        Tensor<T> out(vx.shape);
        auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
        auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(rows * cols));
        kernels::layer_norm_rows(rows, cols, vx.ptr(), vg.ptr(), vb.ptr(), eps, out.ptr(),
                                 inv_std->data(), xhat->data());
        return push(std::move(out), needs(x) || needs(gamma) || needs(beta),
                    [this, x, gamma, beta, rows, cols, inv_std, xhat](Id self) {
            const auto& gy = grads_[self];
            const auto& vg = nodes_[gamma].value;
            auto* gx = grad_dst(x);
            auto* gg = grad_dst(gamma);
            auto* gb = grad_dst(beta);
            for (int64_t r = 0; r < rows; ++r) {
                const T* dy = gy.ptr() + r * cols;
                const T* xh = xhat->data() + r * cols;
                if (gx) {
                    T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                    for (int64_t c = 0; c < cols; ++c) {
                        const T dxh = dy[c] * vg[c];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[c];
                    }
                    mean_dxhat /= T(cols);
                    mean_dxhat_xhat /= T(cols);
                    const T is = (*inv_std)[r];
                    for (int64_t c = 0; c < cols; ++c)
                        (*gx)[r * cols + c] +=
                            is * (dy[c] * vg[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
                }
                if (gg)
                    for (int64_t c = 0; c < cols; ++c) (*gg)[c] += dy[c] * xh[c];
                if (gb)
                    for (int64_t c = 0; c < cols; ++c) (*gb)[c] += dy[c];
            }
        }, "layer_norm");
    }

    Id softmax(Id x, T temperature = T(1)) {
        if (!(temperature > T(0))) throw std::invalid_argument("softmax: temperature must be > 0");
        const auto& vx = val(x);
        const int64_t cols = vx.last_dim(), rows = vx.rows();
        Tensor<T> out(vx.shape);
        kernels::softmax_rows(rows, cols, vx.ptr(), out.ptr(), temperature);
        return push(std::move(out), needs(x), [this, x, rows, cols, temperature](Id self) {
            const auto& gy = grads_[self];
            const auto& y = nodes_[self].value;
            if (auto* gx = grad_dst(x))
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dyr = gy.ptr() + r * cols;
                    const T* yr = y.ptr() + r * cols;
                    T dot = T(0);
                    for (int64_t c = 0; c < cols; ++c) dot += dyr[c] * yr[c];
                    for (int64_t c = 0; c < cols; ++c)
                        (*gx)[r * cols + c] += yr[c] * (dyr[c] - dot) / temperature;
                }
        }, "softmax");
    }

    Id log_softmax(Id x) {
        const auto& vx = val(x);
        const int64_t cols = vx.last_dim(), rows = vx.rows();
        Tensor<T> out(vx.shape);
        kernels::log_softmax_rows(rows, cols, vx.ptr(), out.ptr());
        return push(std::move(out), needs(x), [this, x, rows, cols](Id self) {
            const auto& gy = grads_[self];
            const auto& y = nodes_[self].value;
            if (auto* gx = grad_dst(x))
                for (int64_t r = 0; r < rows; ++r) {
                    const T* dyr = gy.ptr() + r * cols;
                    const T* yr = y.ptr() + r * cols;
                    T sum = T(0);
                    for (int64_t c = 0; c < cols; ++c) sum += dyr[c];
                    for (int64_t c = 0; c < cols; ++c)
                        (*gx)[r * cols + c] += dyr[c] - std::exp(yr[c]) * sum;
                }
        }, "log_softmax");
    }

    // [S,T,T] attention scores -> causal row softmax: row i spans columns 0..i,
    // strictly-future columns are exact zeros (no -inf masking round-trip)
    Id causal_softmax(Id x) {
        const auto& vx = val(x);
        if (vx.rank() != 3 || vx.dim(1) != vx.dim(2))
            throw std::invalid_argument("causal_softmax: expected [S,T,T], got " +
                                        shape_str(vx.shape));
        const int64_t S = vx.dim(0), Tlen = vx.dim(1);
        Tensor<T> out(vx.shape);
        for (int64_t s = 0; s < S; ++s)
            for (int64_t i = 0; i < Tlen; ++i) {
                const T* row = vx.ptr() + (s * Tlen + i) * Tlen;
                T* orow = out.ptr() + (s * Tlen + i) * Tlen;
                T mx = row[0];
                for (int64_t j = 1; j <= i; ++j) mx = row[j] > mx ? row[j] : mx;
                T sum = T(0);
                for (int64_t j = 0; j <= i; ++j) {
                    orow[j] = std::exp(row[j] - mx);
                    sum += orow[j];
                }
                const T inv = T(1) / sum;
                for (int64_t j = 0; j <= i; ++j) orow[j] *= inv;
                for (int64_t j = i + 1; j < Tlen; ++j) orow[j] = T(0);
            }
        return push(std::move(out), needs(x), [this, x, S, Tlen](Id self) {
            const auto& gy = grads_[self];
            const auto& y = nodes_[self].value;
            if (auto* gx = grad_dst(x))
                for (int64_t s = 0; s < S; ++s)
                    for (int64_t i = 0; i < Tlen; ++i) {
                        const T* dyr = gy.ptr() + (s * Tlen + i) * Tlen;
                        const T* yr = y.ptr() + (s * Tlen + i) * Tlen;
                        T dot = T(0);
                        for (int64_t j = 0; j <= i; ++j) dot += dyr[j] * yr[j];
                        for (int64_t j = 0; j <= i; ++j)
                            (*gx)[(s * Tlen + i) * Tlen + j] += yr[j] * (dyr[j] - dot);
                    }
        }, "causal_softmax");
    }

    Id silu(Id x) {
        const auto& vx = val(x);
        Tensor<T> out(vx.shape);
        for (int64_t i = 0; i < vx.numel(); ++i) out[i] = vx[i] * kernels::sigmoid(vx[i]);
        return push(std::move(out), needs(x), [this, x](Id self) {
            const auto& gy = grads_[self];
            const auto& vx = nodes_[x].value;
            if (auto* gx = grad_dst(x))
                for (int64_t i = 0; i < gy.numel(); ++i) {
                    const T s = kernels::sigmoid(vx[i]);
                    (*gx)[i] += gy[i] * (s + vx[i] * s * (T(1) - s));
                }
        }, "silu");
    }

    Id log_op(Id x) {
        const auto& vx = val(x);
        Tensor<T> out(vx.shape);
        for (int64_t i = 0; i < vx.numel(); ++i) out[i] = std::log(vx[i]);
        return push(std::move(out), needs(x), [this, x](Id self) {
            const auto& gy = grads_[self];
            const auto& vx = nodes_[x].value;
            if (auto* gx = grad_dst(x))
                for (int64_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] / vx[i];
        }, "log");
    }

    Id exp_op(Id x) {
        const auto& vx = val(x);
        Tensor<T> out(vx.shape);
        for (int64_t i = 0; i < vx.numel(); ++i) out[i] = std::exp(vx[i]);
        return push(std::move(out), needs(x), [this, x](Id self) {
            const auto& gy = grads_[self];
            const auto& y = nodes_[self].value;
            if (auto* gx = grad_dst(x))
                for (int64_t i = 0; i < gy.numel(); ++i) (*gx)[i] += gy[i] * y[i];
        }, "exp");
    }

    // ---- gathers ----

    // [V,D] table, N ids -> [N,D]
    Id gather_rows(Id table, std::vector<int32_t> ids) {
        const auto& vt = val(table);
        if (vt.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
        const int64_t V = vt.dim(0), D = vt.dim(1), N = static_cast<int64_t>(ids.size());
        for (int32_t id : ids)
            if (id < 0 || id >= V)
                throw std::out_of_range("gather_rows: id " + std::to_string(id) +
                                        " outside table of " + std::to_string(V));
        Tensor<T> out({N, D});
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < D; ++c) out[n * D + c] = vt[int64_t(ids[size_t(n)]) * D + c];
        auto ids_p = std::make_shared<std::vector<int32_t>>(std::move(ids));
        return push(std::move(out), needs(table), [this, table, ids_p, D](Id self) {
            const auto& gy = grads_[self];
            if (auto* gt = grad_dst(table)) {
                const int64_t N = static_cast<int64_t>(ids_p->size());
                for (int64_t n = 0; n < N; ++n)
                    for (int64_t c = 0; c < D; ++c)
                        (*gt)[int64_t((*ids_p)[size_t(n)]) * D + c] += gy[n * D + c];
            }
        }, "gather_rows");
    }

    // [R,V] x indices [R,k] -> [R,k]; out[r,i] = x[r, idx[r,i]]
    Id gather_last(Id x, std::vector<int32_t> idx, int64_t k) {
        const auto& vx = val(x);
        const int64_t V = vx.last_dim(), R = vx.rows();
        if (static_cast<int64_t>(idx.size()) != R * k)
            throw std::invalid_argument("gather_last: index count != rows*k");
        for (int32_t id : idx)
            if (id < 0 || id >= V) throw std::out_of_range("gather_last: column out of range");
        Tensor<T> out({R, k});
        for (int64_t r = 0; r < R; ++r)
            for (int64_t i = 0; i < k; ++i)
                out[r * k + i] = vx[r * V + idx[size_t(r * k + i)]];
        auto idx_p = std::make_shared<std::vector<int32_t>>(std::move(idx));
        return push(std::move(out), needs(x), [this, x, idx_p, k, V, R](Id self) {
            const auto& gy = grads_[self];
            if (auto* gx = grad_dst(x))
                for (int64_t r = 0; r < R; ++r)
                    for (int64_t i = 0; i < k; ++i)
                        (*gx)[r * V + (*idx_p)[size_t(r * k + i)]] += gy[r * k + i];
        }, "gather_last");
    }

    Id reduce_sum(Id x) {
        const auto& vx = val(x);
        double sum = 0.0;  // double accumulation: sums may span >1e5 terms
        for (int64_t i = 0; i < vx.numel(); ++i) sum += double(vx[i]);
        return push(Tensor<T>::scalar(T(sum)), needs(x), [this, x](Id self) {
            const auto& gy = grads_[self];
            if (auto* gx = grad_dst(x))
                for (int64_t i = 0; i < gx->numel(); ++i) (*gx)[i] += gy[0];
        }, "reduce_sum");
    }

    // ---- backward ----

    void backward(Id target) {
        if (ran_backward_) throw std::logic_error("graph: backward() already ran on this tape");
        if (val(target).numel() != 1)
            throw std::invalid_argument("backward: target must be scalar, got " +
                                        shape_str(val(target).shape));
        ran_backward_ = true;
        grads_.assign(nodes_.size(), Tensor<T>{});
        grads_[checked(target)] = Tensor<T>::scalar(T(1));
        for (Id id = target; id >= 0; --id) {
            auto& node = nodes_[size_t(id)];
            if (!node.requires_grad || grads_[size_t(id)].numel() == 0 || !node.bw) continue;
            node.bw(id);
        }
    }

private:
    struct Node {
        Tensor<T> value;
        bool requires_grad = false;
        std::function<void(Id)> bw;  // adds into parents' grads
        const char* op = "";
    };

    size_t checked(Id id) const {
        if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
            throw std::out_of_range("graph: bad node id");
        return static_cast<size_t>(id);
    }

    bool needs(Id id) const { return nodes_[checked(id)].requires_grad; }

    // grad buffer of a parent, or nullptr if it does not require grad
    Tensor<T>* grad_dst(Id id) {
        auto& node = nodes_[checked(id)];
        if (!node.requires_grad) return nullptr;
        auto& g = grads_[size_t(id)];
        if (g.numel() == 0) g = Tensor<T>(node.value.shape);
        return &g;
    }

    Id push(Tensor<T> value, bool requires_grad, std::function<void(Id)> bw, const char* op) {
        if (!value.all_finite())
            throw std::runtime_error(std::string("graph: non-finite value out of op '") + op + "'");
        nodes_.push_back(Node{std::move(value), requires_grad, std::move(bw), op});
        return static_cast<Id>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<Tensor<T>> grads_;
    bool ran_backward_ = false;
};

// Runs backward from a scalar node and collects gradients for the given leaves.
template <typename T>
std::pair<T, std::vector<Tensor<T>>> eval_with_gradients(Graph<T>& g, typename Graph<T>::Id out,
                                                         const std::vector<typename Graph<T>::Id>& leaves) {
    g.backward(out);
    std::vector<Tensor<T>> grads;
    grads.reserve(leaves.size());
    for (auto id : leaves) grads.push_back(g.grad(id));
    return {g.val(out)[0], std::move(grads)};
}

} // namespace factlab
