// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tiny pre-norm transformer encoder with a masked-LM head and a sequence-pair
// classification head. Parameters are split into an EMBEDDING group (token
// table, LM output projection when untied, LM bias) and a BODY group
// (everything else, including positions and the classification head).

#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "forgetlm/tensor.h"

namespace forgetlm {

using TokenId = int;

// Reserved ids shared by every language.
inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kClsId = 1;
inline constexpr TokenId kSepId = 2;
inline constexpr TokenId kMaskId = 3;
inline constexpr int kNumReserved = 4;

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int max_seq_len = 64;
    float dropout = 0.1f;
    bool tie_lm_head = true;
    int n_classes = 3;
    float init_std = 0.02f;
    float ln_eps = 1e-5f;

    // Throws ConfigError naming the offending field.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Embedding, Body };

const char* group_name(ParamGroup g);

struct NamedParam {
    std::string name;
    ParamGroup group;
    Tensor tensor;
};

struct ParamPartition {
    std::vector<NamedParam> embedding;
    std::vector<NamedParam> body;

    std::size_t embedding_count() const;
    std::size_t body_count() const;
};

// Dropout switch for a forward pass. `rng` is required when train is true.
struct ForwardMode {
    bool train = false;
    std::mt19937_64* rng = nullptr;

    static ForwardMode eval() { return {}; }
    static ForwardMode training(std::mt19937_64& rng) { return {true, &rng}; }
};

// One MLM training example after masking.
struct MaskedSequence {
    std::vector<TokenId> input;
    std::vector<TokenId> target;
    std::vector<int> positions; // masked positions
};

struct PairExample {
    std::vector<TokenId> a;
    std::vector<TokenId> b;
    int label = 0;
};

class TransformerModel {
  public:
    static TransformerModel init(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const noexcept { return config_; }
    std::uint64_t seed() const noexcept { return seed_; }

    // Every parameter in the fixed serialization order.
    const std::vector<NamedParam>& params() const noexcept { return params_; }
    std::vector<Tensor> group_tensors(ParamGroup group) const;
    ParamPartition partition() const;
    std::size_t param_count() const;

    // Enables or disables gradient tracking for one group.
    void set_trainable(ParamGroup group, bool trainable);
    bool trainable(ParamGroup group) const;

    // Logits [t, V] for one sequence.
    Tensor forward_mlm(Tape& tape, std::span<const TokenId> ids, ForwardMode mode = {}) const;
    // Logits [n_classes] for the pair encoded as [CLS] a [SEP] b.
    Tensor forward_cls(Tape& tape, std::span<const TokenId> a, std::span<const TokenId> b, ForwardMode mode = {}) const;

    // Batched forms used for training. Sequences are packed row-wise; attention
    // never crosses a sequence boundary.
    // Mean masked-token cross entropy over the batch, projecting only masked rows.
    Tensor mlm_loss(Tape& tape, std::span<const MaskedSequence> batch, ForwardMode mode = {}) const;
    // Class logits [B, n_classes].
    Tensor cls_logits(Tape& tape, std::span<const PairExample> batch, ForwardMode mode = {}) const;
    Tensor cls_loss(Tape& tape, std::span<const PairExample> batch, ForwardMode mode = {}) const;

    // Redraws every EMBEDDING-group matrix from N(0, std^2); the LM bias goes to zero.
    void reinit_embeddings(std::mt19937_64& rng, float std);
    // Fresh classification head (used when a task stage begins).
    void reinit_cls_head(std::uint64_t seed);

    // Deep copy; trainability flags are preserved.
    TransformerModel clone() const;

    // Copies values of every parameter from `other` (same config).
    void load_values(const TransformerModel& other);
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;

    std::vector<TokenId> encode_pair(std::span<const TokenId> a, std::span<const TokenId> b) const;

  private:
    struct Layer {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    struct Packed {
        std::vector<TokenId> ids;
        std::vector<int> pos;
        std::vector<std::pair<int, int>> segments; // [offset, length]
    };

    TransformerModel() = default;
    void build_param_list();
    Packed pack(std::span<const std::vector<TokenId>> seqs) const;
    // Final (post ln_f) hidden states [T, d].
    Tensor encode(Tape& tape, const Packed& packed, ForwardMode mode) const;
    Tensor lm_project(Tape& tape, const Tensor& hidden) const;
    Tensor cls_head(Tape& tape, const Tensor& pooled) const;

    ModelConfig config_;
    std::uint64_t seed_ = 0;
    Tensor tok_emb_, pos_emb_, lm_out_, lm_bias_;
    std::vector<Layer> layers_;
    Tensor lnf_g_, lnf_b_;
    Tensor cls_w1_, cls_b1_, cls_w2_, cls_b2_;
    std::vector<NamedParam> params_;
};

} // namespace forgetlm
