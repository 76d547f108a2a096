#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "spikeprompt/tensor.hpp"

namespace spikeprompt {

namespace detail {

// Work threshold below which the matmul kernels stay single-threaded.
inline constexpr std::int64_t kParallelFlops = 1 << 16;

// C += A * B, A:[M,K], B:[K,N]. Each output row is an independent
// accumulation, so the result is bitwise identical for any thread count.
inline void mm(const double* A, const double* B, double* C,
               std::int64_t M, std::int64_t K, std::int64_t N) {
#pragma omp parallel for schedule(static) if (M * K * N > kParallelFlops)
    for (std::int64_t i = 0; i < M; ++i) {
        double* c = C + i * N;
        const double* a = A + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + k * N;
            for (std::int64_t j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C += A * B^T, A:[M,K], B:[N,K]
inline void mm_abt(const double* A, const double* B, double* C,
                   std::int64_t M, std::int64_t K, std::int64_t N) {
#pragma omp parallel for schedule(static) if (M * K * N > kParallelFlops)
    for (std::int64_t i = 0; i < M; ++i) {
        const double* a = A + i * K;
        double* c = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) {
            const double* b = B + j * K;
            double s = 0.0;
            for (std::int64_t k = 0; k < K; ++k) s += a[k] * b[k];
            c[j] += s;
        }
    }
}

// C += A^T * B, A:[P,Q], B:[P,R], C:[Q,R]
inline void mm_atb(const double* A, const double* B, double* C,
                   std::int64_t P, std::int64_t Q, std::int64_t R) {
#pragma omp parallel for schedule(static) if (P * Q * R > kParallelFlops)
    for (std::int64_t q = 0; q < Q; ++q) {
        double* c = C + q * R;
        for (std::int64_t p = 0; p < P; ++p) {
            const double av = A[p * Q + q];
            const double* b = B + p * R;
            for (std::int64_t r = 0; r < R; ++r) c[r] += av * b[r];
        }
    }
}

inline void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

enum class Broadcast { same, row };

// Second operand may be [N] or [1,N] against a's [M,N] (row broadcast).
inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::same;
    if (a.rank() == 2) {
        const auto n = a.shape()[1];
        if ((b.rank() == 1 && b.shape()[0] == n) ||
            (b.rank() == 2 && b.shape()[0] == 1 && b.shape()[1] == n)) {
            return Broadcast::row;
        }
    }
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

inline void record_if_needed(const std::vector<Tensor>& inputs, Tensor& out,
                             const std::function<void()>& backward_fn) {
    Tape* tape = Tape::active();
    if (tape == nullptr) return;
    bool any = false;
    for (const auto& in : inputs) any = any || needs_grad(in, tape);
    if (!any) return;
    std::vector<std::shared_ptr<TensorData>> ins;
    ins.reserve(inputs.size());
    for (const auto& in : inputs) ins.push_back(in.impl());
    tape->record(std::move(ins), out.impl(), backward_fn);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// binary elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    if (kind == detail::Broadcast::same) {
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    } else {
        const std::int64_t cols = a.shape()[1];
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i % cols];
    }
    Tape* tape = Tape::active();
    const bool na = needs_grad(a, tape), nb = needs_grad(b, tape);
    detail::record_if_needed({a, b}, out, [ad = a.impl(), bd = b.impl(), od = out.impl(), kind, na, nb]() {
        od->ensure_grad();
        const std::int64_t n = static_cast<std::int64_t>(od->data.size());
        if (na) {
            ad->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
        }
        if (nb) {
            bd->ensure_grad();
            if (kind == detail::Broadcast::same) {
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i];
            } else {
                const std::int64_t cols = static_cast<std::int64_t>(bd->data.size());
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i % cols] += od->grad[i];
            }
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "sub");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    if (kind == detail::Broadcast::same) {
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    } else {
        const std::int64_t cols = a.shape()[1];
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i % cols];
    }
    Tape* tape = Tape::active();
    const bool na = needs_grad(a, tape), nb = needs_grad(b, tape);
    detail::record_if_needed({a, b}, out, [ad = a.impl(), bd = b.impl(), od = out.impl(), kind, na, nb]() {
        od->ensure_grad();
        const std::int64_t n = static_cast<std::int64_t>(od->data.size());
        if (na) {
            ad->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i];
        }
        if (nb) {
            bd->ensure_grad();
            if (kind == detail::Broadcast::same) {
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i] -= od->grad[i];
            } else {
                const std::int64_t cols = static_cast<std::int64_t>(bd->data.size());
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i % cols] -= od->grad[i];
            }
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    const auto kind = detail::broadcast_kind(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    if (kind == detail::Broadcast::same) {
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    } else {
        const std::int64_t cols = a.shape()[1];
        for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i % cols];
    }
    Tape* tape = Tape::active();
    const bool na = needs_grad(a, tape), nb = needs_grad(b, tape);
    detail::record_if_needed({a, b}, out, [ad = a.impl(), bd = b.impl(), od = out.impl(), kind, na, nb]() {
        od->ensure_grad();
        const std::int64_t n = static_cast<std::int64_t>(od->data.size());
        if (kind == detail::Broadcast::same) {
            if (na) {
                ad->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * bd->data[i];
            }
            if (nb) {
                bd->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i] += od->grad[i] * ad->data[i];
            }
        } else {
            const std::int64_t cols = static_cast<std::int64_t>(bd->data.size());
            if (na) {
                ad->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) ad->grad[i] += od->grad[i] * bd->data[i % cols];
            }
            if (nb) {
                bd->ensure_grad();
                for (std::int64_t i = 0; i < n; ++i) bd->grad[i % cols] += od->grad[i] * ad->data[i];
            }
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), s]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i] * s;
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_matrix(a, "matmul");
    detail::require_matrix(b, "matmul");
    const std::int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
    if (b.shape()[0] != K) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({M, N});
    detail::mm(a.data(), b.data(), out.data(), M, K, N);
    Tape* tape = Tape::active();
    const bool na = needs_grad(a, tape), nb = needs_grad(b, tape);
    detail::record_if_needed({a, b}, out, [ad = a.impl(), bd = b.impl(), od = out.impl(), M, K, N, na, nb]() {
        od->ensure_grad();
        if (na) {  // dA += dC * B^T
            ad->ensure_grad();
            detail::mm_abt(od->grad.data(), bd->data.data(), ad->grad.data(), M, N, K);
        }
        if (nb) {  // dB += A^T * dC
            bd->ensure_grad();
            detail::mm_atb(ad->data.data(), od->grad.data(), bd->grad.data(), M, K, N);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    check_shape_valid(shape);
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
    }
    Tensor out = Tensor::from_data(shape, a.vec());
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl()]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require_matrix(a, "transpose");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    Tensor out = Tensor::zeros({N, M});
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) out.data()[j * M + i] = a.data()[i * N + j];
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), M, N]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t j = 0; j < N; ++j) ad->grad[i * N + j] += od->grad[j * M + i];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::int64_t cols = parts[0].rank() == 2 ? parts[0].shape()[1] : -1;
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_rows");
        if (p.shape()[1] != cols) throw ShapeError("concat_rows: column mismatch");
        rows += p.shape()[0];
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::int64_t r = 0;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.numel(), out.data() + r * cols);
        r += p.shape()[0];
    }
    Tape* tape = Tape::active();
    std::vector<bool> need(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) need[i] = needs_grad(parts[i], tape);
    std::vector<std::shared_ptr<TensorData>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record_if_needed(parts, out, [impls, od = out.impl(), need, cols]() {
        od->ensure_grad();
        std::int64_t r = 0;
        for (std::size_t i = 0; i < impls.size(); ++i) {
            const std::int64_t nr = impls[i]->shape[0];
            if (need[i]) {
                impls[i]->ensure_grad();
                const double* g = od->grad.data() + r * cols;
                for (std::int64_t k = 0; k < nr * cols; ++k) impls[i]->grad[k] += g[k];
            }
            r += nr;
        }
    });
    return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) { return concat_rows(std::vector<Tensor>{a, b}); }

inline Tensor slice_rows(const Tensor& a, std::int64_t r0, std::int64_t r1) {
    detail::require_matrix(a, "slice_rows");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    if (r0 < 0 || r1 > M || r0 >= r1) throw ShapeError("slice_rows: bad range");
    Tensor out = Tensor::zeros({r1 - r0, N});
    std::copy(a.data() + r0 * N, a.data() + r1 * N, out.data());
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), r0, N]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[static_cast<std::size_t>(r0 * N) + i] += od->grad[i];
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::int64_t rows = parts[0].rank() == 2 ? parts[0].shape()[0] : -1;
    std::int64_t cols = 0;
    for (const auto& p : parts) {
        detail::require_matrix(p, "concat_cols");
        if (p.shape()[0] != rows) throw ShapeError("concat_cols: row mismatch");
        cols += p.shape()[1];
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::int64_t c = 0;
    for (const auto& p : parts) {
        const std::int64_t pc = p.shape()[1];
        for (std::int64_t i = 0; i < rows; ++i)
            std::copy(p.data() + i * pc, p.data() + (i + 1) * pc, out.data() + i * cols + c);
        c += pc;
    }
    Tape* tape = Tape::active();
    std::vector<bool> need(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) need[i] = needs_grad(parts[i], tape);
    std::vector<std::shared_ptr<TensorData>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record_if_needed(parts, out, [impls, od = out.impl(), need, rows, cols]() {
        od->ensure_grad();
        std::int64_t c = 0;
        for (std::size_t i = 0; i < impls.size(); ++i) {
            const std::int64_t pc = impls[i]->shape[1];
            if (need[i]) {
                impls[i]->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t k = 0; k < pc; ++k)
                        impls[i]->grad[r * pc + k] += od->grad[r * cols + c + k];
            }
            c += pc;
        }
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, std::int64_t c0, std::int64_t c1) {
    detail::require_matrix(a, "slice_cols");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    if (c0 < 0 || c1 > N || c0 >= c1) throw ShapeError("slice_cols: bad range");
    const std::int64_t W = c1 - c0;
    Tensor out = Tensor::zeros({M, W});
    for (std::int64_t i = 0; i < M; ++i)
        std::copy(a.data() + i * N + c0, a.data() + i * N + c1, out.data() + i * W);
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), M, N, c0, W]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t k = 0; k < W; ++k) ad->grad[i * N + c0 + k] += od->grad[i * W + k];
    });
    return out;
}

/// [m,N] -> [times*m, N] vertical repetition; backward sums over repeats.
inline Tensor tile_rows(const Tensor& a, std::int64_t times) {
    detail::require_matrix(a, "tile_rows");
    if (times < 1) throw ShapeError("tile_rows: times must be >= 1");
    const std::int64_t m = a.shape()[0], N = a.shape()[1];
    Tensor out = Tensor::zeros({times * m, N});
    for (std::int64_t t = 0; t < times; ++t)
        std::copy(a.data(), a.data() + m * N, out.data() + t * m * N);
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), times, m, N]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t t = 0; t < times; ++t) {
            const double* g = od->grad.data() + t * m * N;
            for (std::int64_t k = 0; k < m * N; ++k) ad->grad[k] += g[k];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions and row-wise ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    Tensor out = Tensor::zeros({1});
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a.data()[i];
    out.data()[0] = s;
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl()]() {
        od->ensure_grad();
        ad->ensure_grad();
        const double g = od->grad[0];
        for (auto& v : ad->grad) v += g;
    });
    return out;
}

inline Tensor mean_rows(const Tensor& a) {
    detail::require_matrix(a, "mean_rows");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    Tensor out = Tensor::zeros({1, N});
    for (std::int64_t i = 0; i < M; ++i)
        for (std::int64_t j = 0; j < N; ++j) out.data()[j] += a.data()[i * N + j];
    for (std::int64_t j = 0; j < N; ++j) out.data()[j] /= static_cast<double>(M);
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), M, N]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t j = 0; j < N; ++j) ad->grad[i * N + j] += od->grad[j] / static_cast<double>(M);
    });
    return out;
}

inline Tensor softmax_rows(const Tensor& a) {
    detail::require_matrix(a, "softmax_rows");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    Tensor out = Tensor::zeros({M, N});
    for (std::int64_t i = 0; i < M; ++i) {
        const double* x = a.data() + i * N;
        double* y = out.data() + i * N;
        double mx = x[0];
        for (std::int64_t j = 1; j < N; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::int64_t j = 0; j < N; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::int64_t j = 0; j < N; ++j) y[j] /= z;
    }
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), M, N]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i) {
            const double* y = od->data.data() + i * N;
            const double* gy = od->grad.data() + i * N;
            double dot = 0.0;
            for (std::int64_t j = 0; j < N; ++j) dot += gy[j] * y[j];
            double* gx = ad->grad.data() + i * N;
            for (std::int64_t j = 0; j < N; ++j) gx[j] += (gy[j] - dot) * y[j];
        }
    });
    return out;
}

/// Per-row standardization: (x - mean) / sqrt(var + eps). No affine term here;
/// callers apply gain/bias with mul/add.
inline Tensor layernorm_rows(const Tensor& a, double eps) {
    detail::require_matrix(a, "layernorm_rows");
    if (eps <= 0.0) throw ParamError("layernorm_rows: eps must be > 0");
    const std::int64_t M = a.shape()[0], N = a.shape()[1];
    Tensor out = Tensor::zeros({M, N});
    std::vector<double> inv_std(static_cast<std::size_t>(M));
    for (std::int64_t i = 0; i < M; ++i) {
        const double* x = a.data() + i * N;
        double mean = 0.0;
        for (std::int64_t j = 0; j < N; ++j) mean += x[j];
        mean /= static_cast<double>(N);
        double var = 0.0;
        for (std::int64_t j = 0; j < N; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<double>(N);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        double* y = out.data() + i * N;
        for (std::int64_t j = 0; j < N; ++j) y[j] = (x[j] - mean) * is;
    }
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl(), M, N, inv_std]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::int64_t i = 0; i < M; ++i) {
            const double* xhat = od->data.data() + i * N;
            const double* gy = od->grad.data() + i * N;
            const double is = inv_std[static_cast<std::size_t>(i)];
            double g_mean = 0.0, gx_dot = 0.0;
            for (std::int64_t j = 0; j < N; ++j) {
                g_mean += gy[j];
                gx_dot += gy[j] * xhat[j];
            }
            g_mean /= static_cast<double>(N);
            gx_dot /= static_cast<double>(N);
            double* gx = ad->grad.data() + i * N;
            for (std::int64_t j = 0; j < N; ++j) gx[j] += is * (gy[j] - g_mean - xhat[j] * gx_dot);
        }
    });
    return out;
}

// tanh-approximation constants: sqrt(2/pi) and the cubic coefficient
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

inline double gelu_value(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
    const double u = kGeluC * (x + kGeluA * x * x * x);
    const double t = std::tanh(u);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

inline Tensor gelu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = gelu_value(a.data()[i]);
    detail::record_if_needed({a}, out, [ad = a.impl(), od = out.impl()]() {
        od->ensure_grad();
        ad->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i)
            ad->grad[i] += od->grad[i] * gelu_derivative(ad->data[i]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label]. Backward emits
/// (softmax - onehot) / B scaled by the upstream gradient.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    detail::require_matrix(logits, "cross_entropy");
    const std::int64_t B = logits.shape()[0], C = logits.shape()[1];
    if (static_cast<std::int64_t>(labels.size()) != B) {
        throw ShapeError("cross_entropy: label count does not match batch size");
    }
    for (int l : labels) {
        if (l < 0 || l >= C) throw IndexError("cross_entropy: label out of range [0," + std::to_string(C) + ")");
    }
    std::vector<double> probs(static_cast<std::size_t>(B * C));
    double loss = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const double* x = logits.data() + b * C;
        double mx = x[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, x[c]);
        double z = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            probs[static_cast<std::size_t>(b * C + c)] = std::exp(x[c] - mx);
            z += probs[static_cast<std::size_t>(b * C + c)];
        }
        for (std::int64_t c = 0; c < C; ++c) probs[static_cast<std::size_t>(b * C + c)] /= z;
        loss += -(x[labels[static_cast<std::size_t>(b)]] - mx - std::log(z));
    }
    Tensor out = Tensor::scalar(loss / static_cast<double>(B));
    detail::record_if_needed({logits}, out,
                             [ld = logits.impl(), od = out.impl(), probs = std::move(probs), labels, B, C]() {
        od->ensure_grad();
        ld->ensure_grad();
        const double g = od->grad[0] / static_cast<double>(B);
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                const double onehot = (labels[static_cast<std::size_t>(b)] == c) ? 1.0 : 0.0;
                ld->grad[b * C + c] += g * (probs[static_cast<std::size_t>(b * C + c)] - onehot);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// custom-gradient hook
// ---------------------------------------------------------------------------

/// Elementwise op with a decoupled backward: the forward map may be a hard
/// step, while the backward map supplies the surrogate local derivative
/// evaluated at the forward input.
struct CustomGradFn {
    std::function<double(double)> forward_map;
    std::function<double(double)> backward_map;
};

inline Tensor apply_custom(const Tensor& x, const CustomGradFn& f) {
    if (!f.forward_map || !f.backward_map) throw ContractError("apply_custom: maps must be set");
    Tensor out = Tensor::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = f.forward_map(x.data()[i]);
    detail::record_if_needed({x}, out, [xd = x.impl(), od = out.impl(), bw = f.backward_map]() {
        od->ensure_grad();
        xd->ensure_grad();
        for (std::size_t i = 0; i < od->grad.size(); ++i)
            xd->grad[i] += od->grad[i] * bw(xd->data[i]);
    });
    return out;
}

}  // namespace spikeprompt
