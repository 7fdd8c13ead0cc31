// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Independent double-precision references used as gradient oracles. Nothing
// here touches the tape; every function recomputes its value from plain
// vectors so that central differences are meaningful at 1e-4 tolerances.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "forgetlm/model.h"

namespace oracle {

using Vec = std::vector<double>;

// Row-major dense matrix in double.
struct Mat {
    int rows = 0;
    int cols = 0;
    Vec v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
    double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

inline Mat matmul(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.cols);
    for (int i = 0; i < a.rows; ++i)
        for (int k = 0; k < a.cols; ++k)
            for (int j = 0; j < b.cols; ++j) out.at(i, j) += a.at(i, k) * b.at(k, j);
    return out;
}

inline Mat matmul_nt(const Mat& a, const Mat& b) {
    Mat out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += a.at(i, k) * b.at(j, k);
            out.at(i, j) = s;
        }
    return out;
}

inline Mat add_bias(Mat x, const Vec& b) {
    for (int i = 0; i < x.rows; ++i)
        for (int j = 0; j < x.cols; ++j) x.at(i, j) += b[static_cast<std::size_t>(j)];
    return x;
}

inline Mat add(Mat a, const Mat& b) {
    for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
    return a;
}

inline Mat softmax_rows(Mat x) {
    for (int i = 0; i < x.rows; ++i) {
        double mx = x.at(i, 0);
        for (int j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
        double s = 0.0;
        for (int j = 0; j < x.cols; ++j) s += (x.at(i, j) = std::exp(x.at(i, j) - mx));
        for (int j = 0; j < x.cols; ++j) x.at(i, j) /= s;
    }
    return x;
}

inline Mat layer_norm(Mat x, const Vec& g, const Vec& b, double eps) {
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += x.at(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
        var /= x.cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < x.cols; ++j)
            x.at(i, j) = (x.at(i, j) - mean) * inv * g[static_cast<std::size_t>(j)] + b[static_cast<std::size_t>(j)];
    }
    return x;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat map(Mat x, double (*f)(double)) {
    for (auto& e : x.v) e = f(e);
    return x;
}

// Mean of -log softmax(logits[i])[targets[i]].
inline double cross_entropy(const Mat& logits, std::span<const int> targets) {
    double total = 0.0;
    for (int i = 0; i < logits.rows; ++i) {
        double mx = logits.at(i, 0);
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
        double s = 0.0;
        for (int j = 0; j < logits.cols; ++j) s += std::exp(logits.at(i, j) - mx);
        total += mx + std::log(s) - logits.at(i, targets[static_cast<std::size_t>(i)]);
    }
    return total / logits.rows;
}

// Central differences of f at x with step h.
inline Vec central_difference(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-3) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + h;
        const double up = f(x);
        x[i] = keep - h;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

// ||a - b|| / max(||b||, 1e-8)
inline double relative_error(std::span<const double> analytic, std::span<const double> reference) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        num += (analytic[i] - reference[i]) * (analytic[i] - reference[i]);
        den += reference[i] * reference[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-8);
}

// Double copy of every model parameter, addressable by name, in model order.
struct ParamVector {
    std::vector<std::string> names;
    std::vector<forgetlm::Shape> shapes;
    std::vector<std::size_t> offsets;
    Vec values;

    static ParamVector from(const forgetlm::TransformerModel& model) {
        ParamVector p;
        for (const auto& np : model.params()) {
            p.names.push_back(np.name);
            p.shapes.push_back(np.tensor.shape());
            p.offsets.push_back(p.values.size());
            for (float x : np.tensor.data()) p.values.push_back(x);
        }
        return p;
    }

    std::size_t index(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw std::runtime_error("oracle: no parameter " + name);
    }

    Mat mat(const Vec& x, const std::string& name) const {
        const std::size_t i = index(name);
        Mat m(shapes[i][0], shapes[i][1]);
        std::copy(x.begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                  x.begin() + static_cast<std::ptrdiff_t>(offsets[i] + m.v.size()), m.v.begin());
        return m;
    }

    Vec vec(const Vec& x, const std::string& name) const {
        const std::size_t i = index(name);
        const auto n = static_cast<std::size_t>(shapes[i][0]);
        return Vec(x.begin() + static_cast<std::ptrdiff_t>(offsets[i]),
                   x.begin() + static_cast<std::ptrdiff_t>(offsets[i] + n));
    }

    // Gradients of the float model, flattened in the same order.
    static Vec grads(const forgetlm::TransformerModel& model) {
        Vec g;
        for (const auto& np : model.params())
            for (float x : np.tensor.grad()) g.push_back(x);
        return g;
    }
};

// Reference encoder (dropout off) over one sequence; returns final hidden states.
inline Mat encode(const forgetlm::ModelConfig& cfg, const ParamVector& pv, const Vec& x, std::span<const int> ids) {
    const int t = static_cast<int>(ids.size());
    const int d = cfg.d_model;
    const Mat tok = pv.mat(x, "tok_emb");
    const Mat pos = pv.mat(x, "pos_emb");
    Mat h(t, d);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) h.at(i, j) = tok.at(ids[static_cast<std::size_t>(i)], j) + pos.at(i, j);

    const int dh = d / cfg.n_heads;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        Mat a = layer_norm(h, pv.vec(x, p + "ln1.g"), pv.vec(x, p + "ln1.b"), cfg.ln_eps);
        const Mat q = add_bias(matmul(a, pv.mat(x, p + "attn.wq")), pv.vec(x, p + "attn.bq"));
        const Mat k = add_bias(matmul(a, pv.mat(x, p + "attn.wk")), pv.vec(x, p + "attn.bk"));
        const Mat v = add_bias(matmul(a, pv.mat(x, p + "attn.wv")), pv.vec(x, p + "attn.bv"));
        Mat ctx(t, d);
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            Mat qh(t, dh), kh(t, dh), vh(t, dh);
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < dh; ++j) {
                    qh.at(i, j) = q.at(i, hd * dh + j);
                    kh.at(i, j) = k.at(i, hd * dh + j);
                    vh.at(i, j) = v.at(i, hd * dh + j);
                }
            Mat s = matmul_nt(qh, kh);
            for (auto& e : s.v) e /= std::sqrt(static_cast<double>(dh));
            const Mat o = matmul(softmax_rows(s), vh);
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < dh; ++j) ctx.at(i, hd * dh + j) = o.at(i, j);
        }
        h = add(h, add_bias(matmul(ctx, pv.mat(x, p + "attn.wo")), pv.vec(x, p + "attn.bo")));
        Mat b = layer_norm(h, pv.vec(x, p + "ln2.g"), pv.vec(x, p + "ln2.b"), cfg.ln_eps);
        Mat f = map(add_bias(matmul(b, pv.mat(x, p + "ffn.w1")), pv.vec(x, p + "ffn.b1")), gelu);
        h = add(h, add_bias(matmul(f, pv.mat(x, p + "ffn.w2")), pv.vec(x, p + "ffn.b2")));
    }
    return layer_norm(h, pv.vec(x, "ln_f.g"), pv.vec(x, "ln_f.b"), cfg.ln_eps);
}

// Masked-LM loss of one sequence: mean cross entropy at `positions`.
inline double mlm_loss(const forgetlm::ModelConfig& cfg, const ParamVector& pv, const Vec& x,
                       const forgetlm::MaskedSequence& s) {
    const Mat h = encode(cfg, pv, x, s.input);
    Mat rows(static_cast<int>(s.positions.size()), cfg.d_model);
    std::vector<int> targets;
    for (std::size_t r = 0; r < s.positions.size(); ++r) {
        for (int j = 0; j < cfg.d_model; ++j) rows.at(static_cast<int>(r), j) = h.at(s.positions[r], j);
        targets.push_back(s.target[static_cast<std::size_t>(s.positions[r])]);
    }
    Mat logits = cfg.tie_lm_head ? matmul_nt(rows, pv.mat(x, "tok_emb")) : matmul(rows, pv.mat(x, "lm_out"));
    logits = add_bias(logits, pv.vec(x, "lm_bias"));
    return cross_entropy(logits, targets);
}

// Classification loss of one pair encoded as [CLS] a [SEP] b, pooled at position 0.
inline double cls_loss(const forgetlm::ModelConfig& cfg, const ParamVector& pv, const Vec& x,
                       const forgetlm::PairExample& ex) {
    std::vector<int> ids{forgetlm::kClsId};
    ids.insert(ids.end(), ex.a.begin(), ex.a.end());
    ids.push_back(forgetlm::kSepId);
    ids.insert(ids.end(), ex.b.begin(), ex.b.end());
    const Mat h = encode(cfg, pv, x, ids);
    Mat pooled(1, cfg.d_model);
    for (int j = 0; j < cfg.d_model; ++j) pooled.at(0, j) = h.at(0, j);
    Mat z = map(add_bias(matmul(pooled, pv.mat(x, "cls.w1")), pv.vec(x, "cls.b1")),
                [](double e) { return std::tanh(e); });
    const Mat logits = add_bias(matmul(z, pv.mat(x, "cls.w2")), pv.vec(x, "cls.b2"));
    const int label = ex.label;
    return cross_entropy(logits, std::span(&label, 1));
}

} // namespace oracle
