// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "forgetlm/errors.h"
#include "forgetlm/optim.h"
#include "support/gradcheck.h"

using namespace forgetlm;

namespace {

ModelConfig small_config(bool tied) {
    ModelConfig c;
    c.vocab_size = 64;
    c.d_model = 16;
    c.n_layers = 1;
    c.n_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 16;
    c.tie_lm_head = tied;
    return c;
}

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

} // namespace

TEST_CASE("config validation names the field", "[model]") {
    ModelConfig c;
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.max_seq_len = 1;
    CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("max_seq_len"));
    c = {};
    c.dropout = 1.0f;
    CHECK_THROWS_AS(TransformerModel::init(c, 0), ConfigError);
}

TEST_CASE("init shapes and determinism", "[model]") {
    auto m = TransformerModel::init(small_config(true), 7);
    CHECK(m.param("tok_emb").shape() == Shape{64, 16});
    auto again = TransformerModel::init(small_config(true), 7);
    for (std::size_t i = 0; i < m.params().size(); ++i) {
        CHECK(values(m.params()[i].tensor) == values(again.params()[i].tensor));
    }
}

TEST_CASE("embedding init std follows sigma 0.02", "[model]") {
    ModelConfig c;
    c.vocab_size = 1024;
    c.d_model = 16; // V*d = 16384
    c.n_heads = 4;
    auto m = TransformerModel::init(c, 11);
    const std::vector<Tensor> emb{m.param("tok_emb")};
    const auto stats = post_reset_statistics(emb);
    CHECK(stats.std >= 0.018);
    CHECK(stats.std <= 0.022);
}

TEST_CASE("partition counts", "[model]") {
    auto untied = TransformerModel::init(small_config(false), 1);
    auto tied = TransformerModel::init(small_config(true), 1);
    CHECK(untied.partition().embedding_count() == 64u * 16u + (64u * 16u + 64u));
    CHECK(tied.partition().embedding_count() == 64u * 16u + 64u);
    for (const auto* m : {&untied, &tied}) {
        const auto p = m->partition();
        CHECK(p.embedding_count() + p.body_count() == m->param_count());
        for (const auto& e : p.embedding) CHECK(e.name.find("attn") == std::string::npos);
        std::size_t listed = p.embedding.size() + p.body.size();
        CHECK(listed == m->params().size());
    }
    CHECK(tied.params()[0].name == "tok_emb");
}

TEST_CASE("forward shapes and errors", "[model]") {
    auto m = TransformerModel::init(small_config(true), 2);
    Tape tape(false);
    const std::vector<TokenId> ids{4, 5, 6, 7, 8};
    CHECK(m.forward_mlm(tape, ids).shape() == Shape{5, 64});
    const std::vector<TokenId> bad{4, 64};
    CHECK_THROWS_AS(m.forward_mlm(tape, bad), VocabularyError);

    const std::vector<TokenId> a{4, 5, 6}, b{9, 10};
    Tensor ab = m.forward_cls(tape, a, b);
    Tensor ba = m.forward_cls(tape, b, a);
    CHECK(ab.shape() == Shape{3});
    CHECK(ba.shape() == Shape{3});
    const std::vector<TokenId> long_a(10, 5), long_b(6, 5); // 18 > 16
    CHECK_THROWS_AS(m.forward_cls(tape, long_a, long_b), LengthError);
}

TEST_CASE("dropout-free forward is bit-deterministic and per-sequence", "[model]") {
    auto m = TransformerModel::init(small_config(true), 3);
    Tape tape(false);
    const std::vector<TokenId> ids{4, 9, 12, 30, 8, 8};
    CHECK(values(m.forward_mlm(tape, ids)) == values(m.forward_mlm(tape, ids)));

    std::vector<PairExample> batch{{{4, 5}, {6, 7, 8}, 0}, {{9, 9, 9}, {10}, 1}, {{11}, {12, 13}, 2}};
    std::vector<PairExample> swapped{batch[2], batch[0], batch[1]};
    const auto x = values(m.cls_logits(tape, batch));
    const auto y = values(m.cls_logits(tape, swapped));
    for (int c = 0; c < 3; ++c) {
        CHECK(x[static_cast<std::size_t>(0 * 3 + c)] == y[static_cast<std::size_t>(1 * 3 + c)]);
        CHECK(x[static_cast<std::size_t>(1 * 3 + c)] == y[static_cast<std::size_t>(2 * 3 + c)]);
        CHECK(x[static_cast<std::size_t>(2 * 3 + c)] == y[static_cast<std::size_t>(0 * 3 + c)]);
    }
}

TEST_CASE("logits depend on both groups", "[model]") {
    auto m = TransformerModel::init(small_config(true), 4);
    Tape tape(false);
    const std::vector<TokenId> ids{4, 5, 6, 7};
    const auto base = values(m.forward_mlm(tape, ids));

    m.set_trainable(ParamGroup::Body, false);
    m.param("tok_emb").data()[5 * 16 + 3] += 0.5f;
    CHECK(values(m.forward_mlm(tape, ids)) != base);
    m.param("tok_emb").data()[5 * 16 + 3] -= 0.5f;

    m.set_trainable(ParamGroup::Body, true);
    m.set_trainable(ParamGroup::Embedding, false);
    m.param("layers.0.ffn.w2").data()[0] += 0.5f;
    CHECK(values(m.forward_mlm(tape, ids)) != base);
}

TEST_CASE("composed losses match the double-precision reference", "[model][gradcheck]") {
    const auto mlm = gradcheck::run_mlm_suite(20, 99);
    INFO("mlm worst " << mlm.worst);
    CHECK(mlm.worst <= 1e-3);
    const auto cls = gradcheck::run_cls_suite(20, 101);
    INFO("cls worst " << cls.worst);
    CHECK(cls.worst <= 1e-3);
}

TEST_CASE("embedding reinit redraws matrices and zeroes the bias", "[model]") {
    auto m = TransformerModel::init(small_config(false), 5);
    m.param("lm_bias").data()[3] = 1.0f;
    const auto body = values(m.param("layers.0.attn.wq"));
    const auto before = values(m.param("tok_emb"));
    std::mt19937_64 rng(1);
    m.reinit_embeddings(rng, 0.02f);
    CHECK(values(m.param("tok_emb")) != before);
    CHECK(m.param("lm_bias").data()[3] == 0.0f);
    CHECK(values(m.param("layers.0.attn.wq")) == body);
}
