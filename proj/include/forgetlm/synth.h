// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic languages: a seeded order-2 Markov grammar over 64 abstract
// content tokens, rendered into a per-language band of token ids. Every
// generator here is a pure function of its arguments.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "forgetlm/model.h"

namespace forgetlm {

inline constexpr int kContentTokens = 64;

struct TokenRange {
    TokenId begin = 0;
    TokenId end = 0; // exclusive

    bool contains(TokenId id) const noexcept { return id >= begin && id < end; }
    int size() const noexcept { return end - begin; }
};

struct LanguageSpec {
    std::string name = "base";
    std::uint64_t grammar_seed = 1;
    int script_offset = 0;
    bool reverse_word_order = false;
    double swap_fraction = 0.0;

    TokenRange content_range() const { return {kNumReserved + script_offset, kNumReserved + script_offset + kContentTokens}; }
    bool operator==(const LanguageSpec&) const = default;
};

enum class Distance { Close, Medium, Distant };

const char* distance_name(Distance d);
Distance parse_distance(const std::string& text);

LanguageSpec base_language(std::uint64_t grammar_seed = 1);

// CLOSE: new script only. MEDIUM: new script, half the transition rows permuted.
// DISTANT: new script with every row permuted and word order reversed.
LanguageSpec make_language(const LanguageSpec& base, Distance distance);

struct Corpus {
    LanguageSpec language;
    std::uint64_t seed = 0;
    std::vector<std::vector<TokenId>> sequences;
    std::int64_t total_tokens = 0;

    std::uint64_t hash() const;
};

// Sequences with lengths uniform in [16, max_seq_len] until at least n_tokens
// tokens exist. Throws SizeError when n_tokens < max_seq_len.
Corpus generate_corpus(const LanguageSpec& spec, std::int64_t n_tokens, std::uint64_t seed, int max_seq_len = 64);

// Abstract-token transition row for context (prev2, prev1): the next-token
// distribution as (token, probability) pairs. Exposed for statistics tests.
std::vector<std::pair<int, double>> transition_row(const LanguageSpec& spec, int prev2, int prev1);

enum class MaskKind { Mask, Random, Keep };

struct MaskResult {
    MaskedSequence masked;
    std::vector<MaskKind> kinds; // parallel to masked.positions
};

// Selects max(1, round(0.15 L)) positions; each becomes MASK (80%), a random
// content token from `content` (10%) or stays unchanged (10%).
MaskResult mlm_mask(std::span<const TokenId> sequence, TokenRange content, std::uint64_t seed);

using ClsExample = PairExample;

// 0: b copies a with at most 10% positions differing; 1: b is a reordering of
// a's multiset; 2: anything else. Invariant under bijective token renaming.
int cls_rule(std::span<const TokenId> a, std::span<const TokenId> b);

struct ClsDatasetOptions {
    int min_len = 10;
    int max_len = 20;
};

// Balanced (within one) labels in shuffled order. Throws SizeError for n < 3.
std::vector<ClsExample> make_cls_dataset(const LanguageSpec& spec, int n_examples, std::uint64_t seed,
                                         ClsDatasetOptions options = {});

// Prefix of a seeded shuffle of the sequences, stopping at the first total >= budget.
Corpus subsample_budget(const Corpus& corpus, std::int64_t budget_tokens, std::uint64_t seed);

// One sequence per line; header `#lang=<name> seed=<s> tokens=<n>`.
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);
// The language is recovered by name only; callers supply the full spec.
Corpus read_corpus(const std::filesystem::path& path, const LanguageSpec& spec);
std::uint64_t file_hash(const std::filesystem::path& path);

} // namespace forgetlm
