// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/ops.h"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "forgetlm/errors.h"

namespace forgetlm {

namespace {

// All products are written as row-axpy loops so the inner loop vectorizes
// without reassociating any sum; accumulation order is fixed.

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const float* __restrict a, const float* __restrict b, float* __restrict c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        float* __restrict crow = c + static_cast<std::size_t>(i) * n;
        const float* arow = a + static_cast<std::size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            const float* __restrict brow = b + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const float* __restrict a, const float* __restrict b, float* __restrict c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<std::size_t>(i) * k;
        const float* __restrict brow = b + static_cast<std::size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            if (av == 0.0f) continue;
            float* __restrict crow = c + static_cast<std::size_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::vector<float> transpose(std::span<const float> x, int rows, int cols) {
    std::vector<float> t(x.size());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) t[static_cast<std::size_t>(j) * rows + i] = x[static_cast<std::size_t>(i) * cols + j];
    return t;
}

void require_rank2(const Tensor& x, const char* op) {
    if (x.rank() != 2) {
        throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + shape_str(x.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_finite(std::span<const float> x, const char* op) {
    for (float v : x) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

// Gradient buffer of an input, or an empty span when the input is not tracked on the tape.
std::span<float> grad_of(const Tensor& t, bool tracked) { return tracked ? t.grad() : std::span<float>{}; }

int last_dim(const Tensor& x) { return x.shape().back(); }

} // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (tape.needs_record({&a, &b})) {
        const bool ga = a.tracked_on(tape), gb = b.tracked_on(tape);
        tape.record(out, {a, b}, [a, b, ga, gb, m, k, n](std::span<const float> gout) mutable {
            if (ga) {
                const auto bt = transpose(b.data(), k, n);
                gemm_nn(gout.data(), bt.data(), grad_of(a, ga).data(), m, n, k);
            }
            if (gb) gemm_tn(a.data().data(), gout.data(), grad_of(b, gb).data(), m, k, n);
        });
    }
    return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul_nt");
    require_rank2(b, "matmul_nt");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()) + "^T");
    }
    Tensor out = Tensor::zeros({m, n});
    const auto bt = transpose(b.data(), n, k);
    gemm_nn(a.data().data(), bt.data(), out.data().data(), m, k, n);
    if (tape.needs_record({&a, &b})) {
        const bool ga = a.tracked_on(tape), gb = b.tracked_on(tape);
        tape.record(out, {a, b}, [a, b, ga, gb, m, k, n](std::span<const float> gout) mutable {
            if (ga) gemm_nn(gout.data(), b.data().data(), grad_of(a, ga).data(), m, n, k);
            if (gb) gemm_tn(gout.data(), a.data().data(), grad_of(b, gb).data(), m, n, k);
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.data();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
    if (tape.needs_record({&a, &b})) {
        const bool ga = a.tracked_on(tape), gb = b.tracked_on(tape);
        tape.record(out, {a, b}, [a, b, ga, gb](std::span<const float> gout) mutable {
            if (ga) {
                auto g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
            }
            if (gb) {
                auto g = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out = Tensor::zeros(a.shape());
    auto o = out.data();
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
    if (tape.needs_record({&a, &b})) {
        const bool ga = a.tracked_on(tape), gb = b.tracked_on(tape);
        tape.record(out, {a, b}, [a, b, ga, gb](std::span<const float> gout) mutable {
            auto x = a.data(), y = b.data();
            if (ga) {
                auto g = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * y[i];
            }
            if (gb) {
                auto g = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * x[i];
            }
        });
    }
    return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    const int d = last_dim(x);
    if (bias.rank() != 1 || bias.dim(0) != d) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match last axis of " +
                             shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data(), bv = bias.data();
    const std::size_t rows = o.size() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) o[r * d + j] = xv[r * d + j] + bv[j];
    if (tape.needs_record({&x, &bias})) {
        const bool gx = x.tracked_on(tape), gb = bias.tracked_on(tape);
        tape.record(out, {x, bias}, [x, bias, gx, gb, d, rows](std::span<const float> gout) mutable {
            if (gx) {
                auto g = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
            }
            if (gb) {
                auto g = bias.grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) g[j] += gout[r * d + j];
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& x, float factor) {
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, factor](std::span<const float> gout) mutable {
            auto g = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * factor;
        });
    }
    return out;
}

Tensor gelu(Tape& tape, const Tensor& x) {
    constexpr float kInvSqrt2 = 0.70710678118654752f;
    constexpr float kInvSqrt2Pi = 0.39894228040143268f;
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = 0.5f * xv[i] * (1.0f + std::erf(xv[i] * kInvSqrt2));
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x](std::span<const float> gout) mutable {
            auto g = x.grad();
            auto xv = x.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const float v = xv[i];
                const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
                const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
                g[i] += gout[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor tanh(Tape& tape, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(xv[i]);
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, out](std::span<const float> gout) mutable {
            auto g = x.grad();
            auto y = out.data();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * (1.0f - y[i] * y[i]);
        });
    }
    return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
    require_rank2(x, "softmax_rows");
    require_finite(x.data(), "softmax_rows");
    const int r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data();
    for (int i = 0; i < r; ++i) {
        const float* row = xv.data() + static_cast<std::size_t>(i) * c;
        float* orow = o.data() + static_cast<std::size_t>(i) * c;
        const float mx = *std::max_element(row, row + c);
        double total = 0.0;
        for (int j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            total += orow[j];
        }
        const float inv = static_cast<float>(1.0 / total);
        for (int j = 0; j < c; ++j) orow[j] *= inv;
    }
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, out, r, c](std::span<const float> gout) mutable {
            auto g = x.grad();
            auto y = out.data();
            for (int i = 0; i < r; ++i) {
                const std::size_t base = static_cast<std::size_t>(i) * c;
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += gout[base + j] * y[base + j];
                const float fdot = static_cast<float>(dot);
                for (int j = 0; j < c; ++j) g[base + j] += y[base + j] * (gout[base + j] - fdot);
            }
        });
    }
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
    if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
    const int d = last_dim(x);
    if (d < 2) throw DimensionError("layer_norm: feature axis of " + shape_str(x.shape()) + " must be >= 2");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                             " must be [" + std::to_string(d) + "]");
    }
    if (!(eps > 0.0f)) throw PreconditionError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
    Tensor out = Tensor::zeros(x.shape());
    std::vector<float> xhat(x.numel());
    std::vector<float> rstd(rows);
    auto xv = x.data(), gv = gain.data(), bv = bias.data();
    auto o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const float* row = xv.data() + r * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double dv = row[j] - mean;
            var += dv * dv;
        }
        var /= d;
        const float rs = static_cast<float>(1.0 / std::sqrt(var + eps));
        rstd[r] = rs;
        for (int j = 0; j < d; ++j) {
            const float h = static_cast<float>(row[j] - mean) * rs;
            xhat[r * d + j] = h;
            o[r * d + j] = h * gv[j] + bv[j];
        }
    }
    if (tape.needs_record({&x, &gain, &bias})) {
        const bool gx = x.tracked_on(tape), gg = gain.tracked_on(tape), gb = bias.tracked_on(tape);
        tape.record(out, {x, gain, bias},
                    [x, gain, bias, gx, gg, gb, d, rows, xhat = std::move(xhat),
                     rstd = std::move(rstd)](std::span<const float> gout) mutable {
                        auto gv = gain.data();
                        if (gg) {
                            auto g = gain.grad();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (int j = 0; j < d; ++j) g[j] += gout[r * d + j] * xhat[r * d + j];
                        }
                        if (gb) {
                            auto g = bias.grad();
                            for (std::size_t r = 0; r < rows; ++r)
                                for (int j = 0; j < d; ++j) g[j] += gout[r * d + j];
                        }
                        if (gx) {
                            auto g = x.grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                                double sum_dh = 0.0, sum_dh_h = 0.0;
                                for (int j = 0; j < d; ++j) {
                                    const double dh = static_cast<double>(gout[r * d + j]) * gv[j];
                                    sum_dh += dh;
                                    sum_dh_h += dh * xhat[r * d + j];
                                }
                                const float a = static_cast<float>(sum_dh / d);
                                const float b = static_cast<float>(sum_dh_h / d);
                                for (int j = 0; j < d; ++j) {
                                    const float dh = gout[r * d + j] * gv[j];
                                    g[r * d + j] += rstd[r] * (dh - a - xhat[r * d + j] * b);
                                }
                            }
                        }
                    });
    }
    return out;
}

Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids) {
    require_rank2(table, "embedding");
    const int v = table.dim(0), d = table.dim(1);
    if (ids.empty()) throw DimensionError("embedding: empty id list");
    for (int id : ids) {
        if (id < 0 || id >= v) {
            throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                  std::to_string(v));
        }
    }
    const int t = static_cast<int>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    auto o = out.data();
    auto tv = table.data();
    for (int i = 0; i < t; ++i) std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
    if (tape.needs_record({&table})) {
        tape.record(out, {table}, [table, idv = std::vector<int>(ids.begin(), ids.end()), d](
                                      std::span<const float> gout) mutable {
            auto g = table.grad();
            for (std::size_t i = 0; i < idv.size(); ++i) {
                float* dst = g.data() + static_cast<std::size_t>(idv[i]) * d;
                const float* src = gout.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> rows) {
    require_rank2(x, "gather_rows");
    const int n = x.dim(0), d = x.dim(1);
    if (rows.empty()) throw DimensionError("gather_rows: empty row list");
    for (int r : rows) {
        if (r < 0 || r >= n) {
            throw DimensionError("gather_rows: row " + std::to_string(r) + " outside " + shape_str(x.shape()));
        }
    }
    const int m = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros({m, d});
    auto o = out.data();
    auto xv = x.data();
    for (int i = 0; i < m; ++i) std::copy_n(xv.data() + static_cast<std::size_t>(rows[i]) * d, d, o.data() + i * d);
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, rv = std::vector<int>(rows.begin(), rows.end()), d](
                                  std::span<const float> gout) mutable {
            auto g = x.grad();
            for (std::size_t i = 0; i < rv.size(); ++i) {
                float* dst = g.data() + static_cast<std::size_t>(rv[i]) * d;
                const float* src = gout.data() + i * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor block(Tape& tape, const Tensor& x, int r0, int r1, int c0, int c1) {
    require_rank2(x, "block");
    const int cols = x.dim(1);
    if (r0 < 0 || r1 > x.dim(0) || r0 >= r1 || c0 < 0 || c1 > cols || c0 >= c1) {
        throw DimensionError("block: [" + std::to_string(r0) + "," + std::to_string(r1) + ")x[" +
                             std::to_string(c0) + "," + std::to_string(c1) + ") outside " + shape_str(x.shape()));
    }
    const int h = r1 - r0, w = c1 - c0;
    Tensor out = Tensor::zeros({h, w});
    auto o = out.data();
    auto xv = x.data();
    for (int i = 0; i < h; ++i)
        std::copy_n(xv.data() + static_cast<std::size_t>(r0 + i) * cols + c0, w, o.data() + i * w);
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, r0, c0, h, w, cols](std::span<const float> gout) mutable {
            auto g = x.grad();
            for (int i = 0; i < h; ++i) {
                float* dst = g.data() + static_cast<std::size_t>(r0 + i) * cols + c0;
                const float* src = gout.data() + i * w;
                for (int j = 0; j < w; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor concat_cols(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const int rows = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.dim(0) != rows) throw DimensionError("concat_cols: row counts differ");
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({rows, total});
    auto o = out.data();
    int offset = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        auto pv = p.data();
        for (int i = 0; i < rows; ++i)
            std::copy_n(pv.data() + static_cast<std::size_t>(i) * w, w, o.data() + static_cast<std::size_t>(i) * total + offset);
        offset += w;
    }
    if (tape.needs_record(parts)) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        std::vector<bool> tracked;
        for (const auto& p : inputs) tracked.push_back(p.tracked_on(tape));
        tape.record(out, inputs, [inputs, tracked, rows, total](std::span<const float> gout) mutable {
            int offset = 0;
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                const int w = inputs[k].dim(1);
                if (tracked[k]) {
                    auto g = inputs[k].grad();
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < w; ++j)
                            g[static_cast<std::size_t>(i) * w + j] += gout[static_cast<std::size_t>(i) * total + offset + j];
                }
                offset += w;
            }
        });
    }
    return out;
}

Tensor concat_rows(Tape& tape, std::span<const Tensor> parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const int cols = parts[0].dim(1);
    int total = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.dim(1) != cols) throw DimensionError("concat_rows: column counts differ");
        total += p.dim(0);
    }
    Tensor out = Tensor::zeros({total, cols});
    auto o = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), o.begin() + static_cast<std::ptrdiff_t>(offset));
        offset += p.numel();
    }
    if (tape.needs_record(parts)) {
        std::vector<Tensor> inputs(parts.begin(), parts.end());
        std::vector<bool> tracked;
        for (const auto& p : inputs) tracked.push_back(p.tracked_on(tape));
        tape.record(out, inputs, [inputs, tracked](std::span<const float> gout) mutable {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                const std::size_t n = inputs[k].numel();
                if (tracked[k]) {
                    auto g = inputs[k].grad();
                    for (std::size_t i = 0; i < n; ++i) g[i] += gout[offset + i];
                }
                offset += n;
            }
        });
    }
    return out;
}

Tensor dropout(Tape& tape, const Tensor& x, float p, std::mt19937_64& rng) {
    if (p < 0.0f || p >= 1.0f) throw PreconditionError("dropout: p must be in [0,1)");
    if (p == 0.0f) return x;
    const float keep = 1.0f - p;
    const float inv_keep = 1.0f / keep;
    std::vector<float> mask(x.numel());
    for (auto& m : mask) {
        const float u = static_cast<float>(rng() >> 40) * 0x1.0p-24f;
        m = u < keep ? inv_keep : 0.0f;
    }
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.data();
    auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * mask[i];
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x, mask = std::move(mask)](std::span<const float> gout) mutable {
            auto g = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i] * mask[i];
        });
    }
    return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double total = 0.0;
    for (float v : x.data()) total += v;
    Tensor out = Tensor::from({1}, {static_cast<float>(total)});
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x](std::span<const float> gout) mutable {
            auto g = x.grad();
            for (auto& v : g) v += gout[0];
        });
    }
    return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
    }
    Tensor out = Tensor::from(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
    if (tape.needs_record({&x})) {
        tape.record(out, {x}, [x](std::span<const float> gout) mutable {
            auto g = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += gout[i];
        });
    }
    return out;
}

Tensor cross_entropy_masked(Tape& tape, const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask) {
    require_rank2(logits, "cross_entropy_masked");
    const int t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != t || static_cast<int>(mask.size()) != t) {
        throw DimensionError("cross_entropy_masked: " + std::to_string(t) + " logit rows but " +
                             std::to_string(targets.size()) + " targets and " + std::to_string(mask.size()) +
                             " mask entries");
    }
    const int count = static_cast<int>(std::count(mask.begin(), mask.end(), true));
    if (count == 0) throw PreconditionError("cross_entropy_masked: no masked positions");
    auto lv = logits.data();
    std::vector<float> probs;
    const bool rec = tape.needs_record({&logits});
    if (rec) probs.assign(lv.size(), 0.0f);
    double total = 0.0;
    for (int i = 0; i < t; ++i) {
        if (!mask[i]) continue;
        const int target = targets[i];
        if (target < 0 || target >= v) {
            throw VocabularyError("cross_entropy_masked: target " + std::to_string(target) + " outside " +
                                  std::to_string(v) + " classes");
        }
        const float* row = lv.data() + static_cast<std::size_t>(i) * v;
        const float mx = *std::max_element(row, row + v);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(z);
        total += lse - row[target];
        if (rec) {
            float* prow = probs.data() + static_cast<std::size_t>(i) * v;
            for (int j = 0; j < v; ++j) prow[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
        }
    }
    const double loss = total / count;
    if (!std::isfinite(loss)) throw NumericError("cross_entropy_masked: non-finite loss");
    Tensor out = Tensor::from({1}, {static_cast<float>(loss)});
    if (rec) {
        tape.record(out, {logits},
                    [logits, probs = std::move(probs), tv = std::vector<int>(targets.begin(), targets.end()), mask,
                     t, v, count](std::span<const float> gout) mutable {
                        auto g = logits.grad();
                        const float s = gout[0] / static_cast<float>(count);
                        for (int i = 0; i < t; ++i) {
                            if (!mask[i]) continue;
                            const std::size_t base = static_cast<std::size_t>(i) * v;
                            for (int j = 0; j < v; ++j) g[base + j] += s * probs[base + j];
                            g[base + tv[i]] -= s;
                        }
                    });
    }
    return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets) {
    require_rank2(logits, "cross_entropy");
    return cross_entropy_masked(tape, logits, targets, std::vector<bool>(static_cast<std::size_t>(logits.dim(0)), true));
}

} // namespace forgetlm
