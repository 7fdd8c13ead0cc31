// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Every op computes its forward value eagerly and,
// when any input is tracked on `tape`, records a backward rule. Shapes are
// explicit; the only broadcast is a bias over the last dimension.

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "forgetlm/tensor.h"

namespace forgetlm {

// [m,k] x [k,n] -> [m,n]
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
// [m,k] x [n,k]^T -> [m,n]
Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
// x[..., d] + bias[d]
Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias);
Tensor scale(Tape& tape, const Tensor& x, float factor);

// Exact (erf) GELU.
Tensor gelu(Tape& tape, const Tensor& x);
Tensor tanh(Tape& tape, const Tensor& x);

// Row-wise softmax over the last axis of a rank-2 tensor, max-subtracted.
Tensor softmax_rows(Tape& tape, const Tensor& x);

// Normalizes every vector along the last axis, then applies gain and bias.
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps);

// Row lookup: table[V,d], ids[t] -> [t,d]. Throws VocabularyError for ids >= V.
Tensor embedding(Tape& tape, const Tensor& table, std::span<const int> ids);
// Selects rows of a rank-2 tensor (duplicates allowed).
Tensor gather_rows(Tape& tape, const Tensor& x, std::span<const int> rows);
// Rectangular sub-block [r0,r1) x [c0,c1) of a rank-2 tensor.
Tensor block(Tape& tape, const Tensor& x, int r0, int r1, int c0, int c1);
Tensor concat_cols(Tape& tape, std::span<const Tensor> parts);
Tensor concat_rows(Tape& tape, std::span<const Tensor> parts);

// Inverted dropout. Identity (no copy, no record) when p == 0.
Tensor dropout(Tape& tape, const Tensor& x, float p, std::mt19937_64& rng);

Tensor sum(Tape& tape, const Tensor& x);

// Same values under a new shape with equal element count.
Tensor reshape(Tape& tape, const Tensor& x, Shape shape);

// Mean of -log softmax(logits[i])[targets[i]] over rows with mask[i] set.
// Throws PreconditionError when no row is masked.
Tensor cross_entropy_masked(Tape& tape, const Tensor& logits, std::span<const int> targets,
                            const std::vector<bool>& mask);

// Mean over all rows.
Tensor cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets);

} // namespace forgetlm
